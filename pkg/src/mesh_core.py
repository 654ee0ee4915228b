# src/mesh_core.py
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from errors import InputError

logger = logging.getLogger(__name__)

# Minimum signed face area in normalized (unit square) units.
DEGENERATE_AREA = 1e-12


class MeshError(InputError):
    label = "Mesh Error"


# ============================================================
#  DOMAIN TYPES
# ============================================================

@dataclass(frozen=True, eq=False)
class TriMesh:
    """Rest mesh: 2D vertices in the unit square, CCW triangles, keypoint vertex ids."""
    vertices: np.ndarray
    faces: np.ndarray
    keypoint_ids: tuple

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64)
        faces = np.array(self.faces, dtype=np.int64)
        keypoints = tuple(int(k) for k in self.keypoint_ids)

        if vertices.ndim != 2 or vertices.shape[1] != 2 or len(vertices) == 0:
            raise MeshError(f"vertices must be a non-empty (V, 2) array, got shape {vertices.shape}")
        if not np.all(np.isfinite(vertices)):
            bad = int(np.argwhere(~np.isfinite(vertices))[0][0])
            raise MeshError("non-finite vertex coordinate", where=f"vertex {bad}")
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
            raise MeshError(f"faces must be a non-empty (F, 3) array, got shape {faces.shape}")

        nv = len(vertices)
        out_of_range = np.argwhere((faces < 0) | (faces >= nv))
        if len(out_of_range):
            f, c = out_of_range[0]
            raise MeshError(
                f"face index {faces[f, c]} out of range for {nv} vertices", where=f"face {f}"
            )
        for k in keypoints:
            if not 0 <= k < nv:
                raise MeshError(f"keypoint index {k} out of range for {nv} vertices")
        if len(set(keypoints)) != len(keypoints):
            dup = next(k for k in keypoints if keypoints.count(k) > 1)
            raise MeshError(f"duplicate keypoint index {dup}")

        check_face_areas(signed_areas(vertices, faces))

        vertices.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "keypoint_ids", keypoints)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def keypoint_count(self) -> int:
        return len(self.keypoint_ids)

    @property
    def keypoint_positions(self) -> np.ndarray:
        return self.vertices[list(self.keypoint_ids)]

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
            and self.keypoint_ids == other.keypoint_ids
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DifferentialOperators:
    """Face gradient G (2F x V), face areas, cotangent Laplacian L (V x V).

    Row 2f + c of G holds d/dx_c over face f, so J_f[r, c] = (G @ V[:, r])[2f + c].
    L equals G^T diag(areas) G.
    """
    gradient: sp.csr_matrix
    areas: np.ndarray
    laplacian: sp.csr_matrix
    rest_vertices: np.ndarray

    @property
    def vertex_count(self) -> int:
        return self.gradient.shape[1]

    @property
    def face_count(self) -> int:
        return self.gradient.shape[0] // 2

    @property
    def mass(self) -> sp.dia_matrix:
        return sp.diags(np.repeat(self.areas, 2))


@dataclass(frozen=True, eq=False)
class JacobianField:
    """One 2x2 matrix per face."""
    per_face: np.ndarray

    def __post_init__(self):
        per_face = np.asarray(self.per_face, dtype=np.float64)
        if per_face.ndim != 3 or per_face.shape[1:] != (2, 2):
            raise MeshError(f"Jacobian field must have shape (F, 2, 2), got {per_face.shape}")
        if not np.all(np.isfinite(per_face)):
            bad = int(np.argwhere(~np.isfinite(per_face))[0][0])
            raise MeshError("non-finite Jacobian entry", where=f"face {bad}")
        object.__setattr__(self, "per_face", per_face)

    @classmethod
    def identity(cls, face_count: int) -> "JacobianField":
        return cls(np.broadcast_to(np.eye(2), (face_count, 2, 2)).copy())

    @classmethod
    def zeros(cls, face_count: int) -> "JacobianField":
        return cls(np.zeros((face_count, 2, 2)))

    def __len__(self):
        return len(self.per_face)

    def __add__(self, other: "JacobianField") -> "JacobianField":
        return JacobianField(self.per_face + other.per_face)

    def __sub__(self, other: "JacobianField") -> "JacobianField":
        return JacobianField(self.per_face - other.per_face)

    def __mul__(self, scale: float) -> "JacobianField":
        return JacobianField(self.per_face * scale)

    __rmul__ = __mul__


# ============================================================
#  GEOMETRY HELPERS
# ============================================================

def signed_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    u, v = b - a, c - a
    return 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])


def check_face_areas(areas: np.ndarray):
    small = np.flatnonzero(np.abs(areas) <= DEGENERATE_AREA)
    if len(small):
        raise MeshError(
            f"degenerate face (|area| = {abs(areas[small[0]]):.3e} <= {DEGENERATE_AREA:g})",
            where=f"face {small[0]}",
        )
    flipped = np.flatnonzero(areas < 0)
    if len(flipped):
        raise MeshError(
            "inconsistent orientation, faces must be counter-clockwise",
            where=f"face {flipped[0]}",
        )


def cotan_weights(mesh: TriMesh) -> np.ndarray:
    """Cotangent of the interior angle at each corner, shape (F, 3)."""
    V, T = mesh.vertices, mesh.faces
    cots = np.empty(T.shape, dtype=np.float64)
    for corner in range(3):
        p = V[T[:, corner]]
        u = V[T[:, (corner + 1) % 3]] - p
        v = V[T[:, (corner + 2) % 3]] - p
        dot = np.einsum("ij,ij->i", u, v)
        cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
        cots[:, corner] = dot / cross
    return cots


def grid_mesh(nx: int, ny: int, keypoints: Sequence[int] = (), margin: float = 0.1) -> TriMesh:
    """Regular triangulation of [margin, 1 - margin]^2 with nx x ny vertices."""
    xs = np.linspace(margin, 1.0 - margin, nx)
    ys = np.linspace(margin, 1.0 - margin, ny)
    vertices = np.array([[x, y] for y in ys for x in xs])
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            v00 = j * nx + i
            v10, v01, v11 = v00 + 1, v00 + nx, v00 + nx + 1
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))
    return TriMesh(vertices, np.array(faces), tuple(keypoints))


# ============================================================
#  OPERATORS
# ============================================================

def build_operators(mesh: TriMesh) -> DifferentialOperators:
    V, T = mesh.vertices, mesh.faces
    nf, nv = len(T), len(V)

    areas = signed_areas(V, T)
    check_face_areas(areas)

    # ---- Face gradients of the hat functions, rest frame ----
    a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    edges = np.stack([b - a, c - a], axis=2)          # columns are edge vectors
    inv = np.linalg.inv(edges)                        # rows: grad phi_b, grad phi_c
    grad_b, grad_c = inv[:, 0, :], inv[:, 1, :]
    grad_a = -(grad_b + grad_c)

    rows = np.concatenate([2 * np.arange(nf) + col for col in (0, 1)])
    I, J, S = [], [], []
    for corner, g in zip(range(3), (grad_a, grad_b, grad_c)):
        I.append(rows)
        J.append(np.tile(T[:, corner], 2))
        S.append(np.concatenate([g[:, 0], g[:, 1]]))
    gradient = sp.csr_matrix(
        (np.concatenate(S), (np.concatenate(I), np.concatenate(J))), shape=(2 * nf, nv)
    )

    # ---- Cotangent Laplacian, positive semi-definite sign convention ----
    cots = cotan_weights(mesh)
    I, J, S = [], [], []
    for corner in range(3):
        j = T[:, (corner + 1) % 3]
        k = T[:, (corner + 2) % 3]
        w = 0.5 * cots[:, corner]
        I += [j, k, j, k]
        J += [k, j, j, k]
        S += [-w, -w, w, w]
    laplacian = sp.csr_matrix(
        (np.concatenate(S), (np.concatenate(I), np.concatenate(J))), shape=(nv, nv)
    )
    laplacian.sum_duplicates()

    if np.any(cots < 0):
        logger.debug("mesh has obtuse angles; %d negative cotangent weights", int(np.sum(cots < 0)))

    return DifferentialOperators(gradient, areas, laplacian, V.copy())


def compute_jacobians(ops: DifferentialOperators, vertices: np.ndarray) -> JacobianField:
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape != (ops.vertex_count, 2):
        raise MeshError(
            f"expected vertices of shape ({ops.vertex_count}, 2), got {vertices.shape}"
        )
    grads = ops.gradient @ vertices                    # (2F, 2): [2f + col, row]
    return JacobianField(grads.reshape(ops.face_count, 2, 2).transpose(0, 2, 1))


def jacobians_adjoint(ops: DifferentialOperators, grad_jac: np.ndarray) -> np.ndarray:
    """Transpose of compute_jacobians: dLoss/dJ (F, 2, 2) -> dLoss/dV (V, 2)."""
    flat = np.asarray(grad_jac).transpose(0, 2, 1).reshape(2 * ops.face_count, 2)
    return ops.gradient.T @ flat


# ============================================================
#  MESH JSON I/O
# ============================================================

def _reject_constant(name):
    raise ValueError(f"{name} is not permitted")


def load_mesh(path) -> TriMesh:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise MeshError(f"cannot read mesh file: {e.strerror}", where=str(path)) from e
    try:
        data = json.loads(text, parse_constant=_reject_constant)
    except ValueError as e:
        raise MeshError(f"malformed JSON: {e}", where=str(path)) from e

    if not isinstance(data, dict):
        raise MeshError("mesh JSON must be an object", where=str(path))
    missing = [key for key in ("vertices", "faces", "keypoints") if key not in data]
    if missing:
        raise MeshError(f"missing key(s): {', '.join(missing)}", where=str(path))

    try:
        vertices = np.array(data["vertices"], dtype=np.float64)
        faces = np.array(data["faces"], dtype=np.int64)
        keypoints = [int(k) for k in data["keypoints"]]
    except (TypeError, ValueError) as e:
        raise MeshError(f"malformed mesh arrays: {e}", where=str(path)) from e

    try:
        mesh = TriMesh(vertices, faces, tuple(keypoints))
    except MeshError as e:
        raise MeshError(e.message, where=f"{path}: {e.where}" if e.where else str(path)) from e
    logger.info("loaded mesh %s: %d vertices, %d faces, %d keypoints",
                path, mesh.vertex_count, mesh.face_count, mesh.keypoint_count)
    return mesh


def save_mesh(mesh: TriMesh, path):
    path = Path(path)
    data = {
        "vertices": mesh.vertices.tolist(),
        "faces": mesh.faces.tolist(),
        "keypoints": list(mesh.keypoint_ids),
    }
    try:
        path.write_text(json.dumps(data, allow_nan=False), encoding="utf-8")
    except OSError as e:
        raise MeshError(f"cannot write mesh file: {e.strerror}", where=str(path)) from e


if __name__ == "__main__":
    mesh = grid_mesh(4, 4, keypoints=(0, 15))
    ops = build_operators(mesh)
    print("row sums:", np.abs(ops.laplacian.sum(axis=1)).max())
    print("rest Jacobians:\n", compute_jacobians(ops, mesh.vertices).per_face[:2])
