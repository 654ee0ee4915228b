# src/render.py
"""Piecewise-affine bitmap warping driven by a deformed mesh, plus PNG/GIF emission.

Coordinates are normalized to the unit square: x runs along image columns, y along rows,
and pixel (col i, row j) has its center at ((i + 0.5) / W, (j + 0.5) / H).
Fold-overs resolve last-triangle-wins in face order.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from errors import InputError
from mesh_core import DEGENERATE_AREA, TriMesh, signed_areas

logger = logging.getLogger(__name__)

INSIDE_TOLERANCE = 1e-9


class RenderError(InputError):
    label = "Render Error"


# ============================================================
#  RASTER IMAGES
# ============================================================

@dataclass(frozen=True, eq=False)
class RasterImage:
    """RGBA float workspace in [0, 1], shape (H, W, 4)."""
    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 4 or px.shape[0] < 1 or px.shape[1] < 1:
            raise RenderError(f"image must have shape (H, W, 4) with H, W >= 1, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise RenderError("non-finite channel value")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_uint8(cls, data: np.ndarray) -> "RasterImage":
        return cls(np.asarray(data, dtype=np.float64) / 255.0)


def to_uint8(pixels) -> np.ndarray:
    if isinstance(pixels, RasterImage):
        pixels = pixels.pixels
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> RasterImage:
    path = Path(path)
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGBA"))
    except FileNotFoundError as e:
        raise RenderError("image file not found", where=str(path)) from e
    except OSError as e:
        raise RenderError(f"cannot read image: {e}", where=str(path)) from e
    return RasterImage.from_uint8(data)


# ============================================================
#  RASTERIZATION
# ============================================================

@dataclass(frozen=True, eq=False)
class Coverage:
    owner: np.ndarray          # (H, W) face index, -1 outside every triangle
    barycentric: np.ndarray    # (H, W, 3), zero outside coverage

    @property
    def mask(self) -> np.ndarray:
        return self.owner >= 0


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) normalized pixel centers."""
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def _barycentric(tri: np.ndarray, points: np.ndarray) -> np.ndarray:
    """tri (P, 3, 2), points (P, 2) -> (P, 3)."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    q = points - tri[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    b1 = (q[:, 0] * e2[:, 1] - q[:, 1] * e2[:, 0]) / det
    b2 = (e1[:, 0] * q[:, 1] - e1[:, 1] * q[:, 0]) / det
    return np.stack([1.0 - b1 - b2, b1, b2], axis=1)


def rasterize(vertices: np.ndarray, faces: np.ndarray, width: int, height: int) -> Coverage:
    """Owner face and barycentrics per pixel center, tested over padded face bounding boxes."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    if width < 1 or height < 1:
        raise RenderError(f"raster size must be >= 1, got {width}x{height}")
    owner = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))

    areas = signed_areas(vertices, faces)
    live = np.flatnonzero(np.abs(areas) > DEGENERATE_AREA)
    if len(live) == 0:
        return Coverage(owner, bary)
    tri = vertices[faces[live]]                                    # (F', 3, 2)
    lo = np.floor(tri.min(axis=1) * (width, height) - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) * (width, height) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, (width - 1, height - 1))
    span = np.maximum(hi - lo + 1, 0)
    counts = span[:, 0] * span[:, 1]

    # enumerate every (face, pixel) candidate without a Python loop over faces
    total = int(counts.sum())
    if total:
        cand = np.repeat(np.arange(len(live)), counts)
        local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        col = lo[cand, 0] + local % span[cand, 0]
        row = lo[cand, 1] + local // span[cand, 0]
        centers = np.stack([(col + 0.5) / width, (row + 0.5) / height], axis=1)
        b = _barycentric(tri[cand], centers)
        inside = np.all(b >= -INSIDE_TOLERANCE, axis=1)
        np.maximum.at(owner, (row[inside], col[inside]), live[cand[inside]])

    covered = owner >= 0
    if np.any(covered):
        centers = pixel_centers(width, height)[covered]
        bary[covered] = _barycentric(vertices[faces[owner[covered]]], centers)
    return Coverage(owner, bary)


# ============================================================
#  SAMPLING
# ============================================================

def _bilinear(pixels: np.ndarray, points: np.ndarray, with_gradient: bool = False):
    """Edge-clamped bilinear sampling at normalized points (P, 2).

    Returns values (P, 4) and, if requested, d values / d points of shape (P, 4, 2).
    """
    h, w = pixels.shape[:2]
    px = points[:, 0] * w - 0.5
    py = points[:, 1] * h - 0.5
    cx = np.clip(px, 0.0, w - 1)
    cy = np.clip(py, 0.0, h - 1)
    x0 = np.minimum(np.floor(cx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cx - x0)[:, None]
    fy = (cy - y0)[:, None]
    i00, i01 = pixels[y0, x0], pixels[y0, x1]
    i10, i11 = pixels[y1, x0], pixels[y1, x1]
    top = (1 - fx) * i00 + fx * i01
    bottom = (1 - fx) * i10 + fx * i11
    values = (1 - fy) * top + fy * bottom
    if not with_gradient:
        return values, None
    # zero slope where the clamp is active
    in_x = ((px >= 0) & (px <= w - 1) & (w > 1))[:, None]
    in_y = ((py >= 0) & (py <= h - 1) & (h > 1))[:, None]
    d_fx = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    d_fy = bottom - top
    grad = np.stack([d_fx * in_x * w, d_fy * in_y * h], axis=-1)
    return values, grad


def _check_vertices(rest: TriMesh, deformed: np.ndarray) -> np.ndarray:
    deformed = np.asarray(deformed, dtype=np.float64)
    if deformed.shape != rest.vertices.shape:
        raise RenderError(
            f"deformed vertices have shape {deformed.shape}, mesh has {rest.vertices.shape}"
        )
    if not np.all(np.isfinite(deformed)):
        raise RenderError("non-finite deformed vertex")
    return deformed


def _source_points(rest: TriMesh, cov: Coverage) -> np.ndarray:
    mask = cov.mask
    corners = rest.vertices[rest.faces[cov.owner[mask]]]             # (P, 3, 2)
    return np.einsum("pk,pkd->pd", cov.barycentric[mask], corners)


def count_inverted(rest: TriMesh, deformed: np.ndarray) -> int:
    rest_sign = np.sign(signed_areas(rest.vertices, rest.faces))
    return int(np.sum(signed_areas(deformed, rest.faces) * rest_sign < 0))


def _warp_pixels(image: RasterImage, rest: TriMesh, deformed: np.ndarray,
                 width: int, height: int) -> np.ndarray:
    cov = rasterize(deformed, rest.faces, width, height)
    out = np.zeros((height, width, 4))
    mask = cov.mask
    if np.any(mask):
        out[mask] = _bilinear(image.pixels, _source_points(rest, cov))[0]
    return out


def warp(image: RasterImage, rest: TriMesh, deformed_vertices: np.ndarray,
         width: Optional[int] = None, height: Optional[int] = None) -> RasterImage:
    """Sample the input at the rest-space location of every covered output pixel.

    Output defaults to the input size; uncovered pixels are transparent (all channels 0).
    """
    deformed = _check_vertices(rest, deformed_vertices)
    inverted = count_inverted(rest, deformed)
    if inverted:
        logger.warning("%d inverted triangle(s); fold-overs resolved by face order", inverted)
    return RasterImage(_warp_pixels(image, rest, deformed,
                                    width or image.width, height or image.height))


def warp_gradient(image: RasterImage, rest: TriMesh, deformed_vertices: np.ndarray,
                  grad_frame: np.ndarray, width: Optional[int] = None,
                  height: Optional[int] = None) -> np.ndarray:
    """d(loss)/d(deformed vertices), shape (V, 2), from d(loss)/d(output pixels).

    Within face f the source point is s = r_0 + M (q - d_0) with M = R T^-1, so
    ds/dd_k = -b_k M. Coverage changes along the mesh boundary are not differentiated.
    """
    deformed = _check_vertices(rest, deformed_vertices)
    width = width or image.width
    height = height or image.height
    grad_frame = np.asarray(grad_frame, dtype=np.float64)
    if grad_frame.shape != (height, width, 4):
        raise RenderError(f"frame gradient has shape {grad_frame.shape}, expected ({height}, {width}, 4)")

    grad = np.zeros_like(deformed)
    cov = rasterize(deformed, rest.faces, width, height)
    mask = cov.mask
    if not np.any(mask):
        return grad
    _, d_sample = _bilinear(image.pixels, _source_points(rest, cov), with_gradient=True)
    g_s = np.einsum("pc,pcd->pd", grad_frame[mask], d_sample)          # dL/ds, (P, 2)

    faces = rest.faces
    d = deformed[faces]
    r = rest.vertices[faces]
    T = np.stack([d[:, 1] - d[:, 0], d[:, 2] - d[:, 0]], axis=2)      # columns are edges
    R = np.stack([r[:, 1] - r[:, 0], r[:, 2] - r[:, 0]], axis=2)
    live = np.abs(np.linalg.det(T)) > DEGENERATE_AREA
    M = np.zeros_like(T)
    M[live] = R[live] @ np.linalg.inv(T[live])

    owner = cov.owner[mask]
    g_q = np.einsum("pji,pj->pi", M[owner], g_s)                       # M^T dL/ds
    b = cov.barycentric[mask]
    for k in range(3):
        np.add.at(grad, faces[owner, k], -b[:, k:k + 1] * g_q)
    return grad


# ============================================================
#  FRAME STACKS
# ============================================================

def _fan_out(fn, count: int, workers: Optional[int]):
    if workers and workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(count)))
    return [fn(t) for t in range(count)]


def warp_many(image: RasterImage, rest: TriMesh, vertex_stack: np.ndarray, width: int, height: int,
              workers: Optional[int] = None) -> np.ndarray:
    """(N, V, 2) deformed vertices -> (N, H, W, 4) frames."""
    stack = np.asarray(vertex_stack, dtype=np.float64)
    for t in range(len(stack)):
        _check_vertices(rest, stack[t])
    inverted = sum(count_inverted(rest, stack[t]) for t in range(len(stack)))
    if inverted:
        logger.debug("%d inverted triangle(s) across %d frames", inverted, len(stack))
    frames = _fan_out(lambda t: _warp_pixels(image, rest, stack[t], width, height), len(stack), workers)
    return np.stack(frames)


def warp_gradient_many(image: RasterImage, rest: TriMesh, vertex_stack: np.ndarray,
                       grad_frames: np.ndarray, workers: Optional[int] = None) -> np.ndarray:
    """(N, H, W, 4) frame gradients -> (N, V, 2) vertex gradients."""
    _, height, width, _ = grad_frames.shape
    grads = _fan_out(
        lambda t: warp_gradient(image, rest, vertex_stack[t], grad_frames[t], width, height),
        len(vertex_stack), workers,
    )
    return np.stack(grads)


# ============================================================
#  OUTPUT
# ============================================================

def _as_uint8_frames(frames) -> list:
    if isinstance(frames, np.ndarray):
        frames = list(frames)
    if not frames:
        raise RenderError("no frames to write")
    out = [to_uint8(f) for f in frames]
    shape = out[0].shape
    for t, f in enumerate(out):
        if f.shape != shape or f.ndim != 3 or f.shape[2] != 4:
            raise RenderError(f"frame has shape {f.shape}, expected {shape}", where=f"frame {t}")
    return out


def emit_frames(frames: Sequence, out_dir) -> list:
    """Write frame_0000.png, frame_0001.png, ... and return the paths."""
    out_dir = Path(out_dir)
    images = _as_uint8_frames(frames)
    paths = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for t, data in enumerate(images):
            path = out_dir / f"frame_{t:04d}.png"
            Image.fromarray(data).save(path, format="PNG")
            paths.append(path)
    except OSError as e:
        raise RenderError(f"cannot write frames: {e}", where=str(out_dir)) from e
    return paths


def gif_durations(count: int, fps: float) -> List[int]:
    """Per-frame GIF delays in ms. GIF stores centiseconds, so each delay is a multiple of
    10 ms and the running total tracks 1000 (i + 1) / fps to the nearest centisecond."""
    marks = [math.floor(100.0 * i / fps + 0.5) for i in range(count + 1)]
    return [10 * (b - a) for a, b in zip(marks, marks[1:])]


def emit_gif(frames: Sequence, path, fps: float = 8.0) -> Path:
    if fps <= 0:
        raise RenderError(f"fps must be positive, got {fps}")
    path = Path(path)
    images = [Image.fromarray(data) for data in _as_uint8_frames(frames)]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        images[0].save(path, format="GIF", save_all=True, append_images=images[1:],
                       duration=gif_durations(len(images), fps), loop=0, disposal=2)
    except OSError as e:
        raise RenderError(f"cannot write GIF: {e}", where=str(path)) from e
    return path
