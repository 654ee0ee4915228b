import numpy as np
from scipy.spatial import Delaunay

from mesh_core import TriMesh, signed_areas
from render import RasterImage


def central_difference(fn, x: np.ndarray, h: float = 1e-6, indices=None) -> np.ndarray:
    """d fn / d x by central differences; x is perturbed in place and restored."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        saved = flat[i]
        flat[i] = saved + h
        up = fn()
        flat[i] = saved - h
        down = fn()
        flat[i] = saved
        out[i] = (up - down) / (2 * h)
    return grad


def relative_error(actual, expected, floor: float = 1e-12) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.linalg.norm(actual - expected) / max(np.linalg.norm(expected), floor))


def random_mesh(rng: np.random.Generator, n_points: int, keypoints: int = 3) -> TriMesh:
    """Delaunay triangulation of jittered grid points, faces made counter-clockwise."""
    side = int(np.ceil(np.sqrt(n_points)))
    xs, ys = np.meshgrid(np.linspace(0.1, 0.9, side), np.linspace(0.1, 0.9, side))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)[:n_points]
    pts = pts + rng.uniform(-0.2, 0.2, size=pts.shape) * (0.8 / side)
    faces = Delaunay(pts).simplices.copy()
    flip = signed_areas(pts, faces) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    faces = faces[np.abs(signed_areas(pts, faces)) > 1e-6]
    used = np.unique(faces)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    kp = rng.choice(len(used), size=keypoints, replace=False)
    return TriMesh(pts[used], remap[faces], tuple(int(k) for k in kp))


def interior_vertices(mesh: TriMesh) -> np.ndarray:
    """Vertices not on a boundary edge (an edge used by a single face)."""
    edges = np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = set(uniq[counts == 1].ravel().tolist())
    return np.array([v for v in range(mesh.vertex_count) if v not in boundary])


def ramp_image(width: int, height: int) -> RasterImage:
    """Channels linear in x and y, so bilinear sampling has no kinks."""
    xs, ys = np.meshgrid((np.arange(width) + 0.5) / width, (np.arange(height) + 0.5) / height)
    return RasterImage(np.stack([xs, ys, 0.5 * (xs + ys), np.ones_like(xs)], axis=-1))


def blob_image(width: int, height: int) -> RasterImage:
    xs, ys = np.meshgrid((np.arange(width) + 0.5) / width, (np.arange(height) + 0.5) / height)
    blobs = [((0.3, 0.3), 0.12), ((0.7, 0.35), 0.1), ((0.45, 0.7), 0.14)]
    channels = [np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r)) for (cx, cy), r in blobs]
    return RasterImage(np.stack(channels + [np.ones_like(xs)], axis=-1))
