# src/deform_solver.py
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from errors import InputError, NumericError
from mesh_core import (
    DifferentialOperators,
    JacobianField,
    TriMesh,
    compute_jacobians,
)

try:  # CHOLMOD when scikit-sparse is installed, SuperLU otherwise
    from sksparse import cholmod
    _HAS_CHOLMOD = True
except ImportError:
    _HAS_CHOLMOD = False

logger = logging.getLogger(__name__)

DEFAULT_CONSTRAINT_WEIGHT = 1000.0


class SolverError(InputError):
    label = "Solver Error"


class DivergenceError(NumericError):
    label = "Divergence"


# ============================================================
#  DOMAIN TYPES
# ============================================================

@dataclass(frozen=True)
class KeypointConstraint:
    """Soft keypoint targets T_c, one row per keypoint id, with weight lambda_c."""
    targets: np.ndarray
    weight: float = DEFAULT_CONSTRAINT_WEIGHT

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.float64)
        if targets.ndim != 2 or targets.shape[1] != 2:
            raise SolverError(f"targets must have shape (K, 2), got {targets.shape}")
        if not np.all(np.isfinite(targets)):
            raise SolverError("non-finite keypoint target")
        if not self.weight > 0:
            raise SolverError(f"constraint weight must be positive, got {self.weight}")
        object.__setattr__(self, "targets", targets)

    def displacements(self, mesh: TriMesh) -> np.ndarray:
        """D_c = T_c - K_c V_0."""
        return self.targets - mesh.keypoint_positions


class _Factor:
    """Cholesky (CHOLMOD) or LU (SuperLU) factorization of a symmetric positive definite matrix."""

    def __init__(self, matrix: sp.spmatrix):
        matrix = sp.csc_matrix(matrix)
        self.backend = "cholmod" if _HAS_CHOLMOD else "superlu"
        try:
            if _HAS_CHOLMOD:
                self._inv = cholmod.cholesky(matrix)
            else:
                self._inv = splu(matrix, permc_spec="MMD_AT_PLUS_A")
        except Exception as e:  # backend-specific singular-matrix errors
            raise SolverError(f"factorization failed: {e}") from e

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if _HAS_CHOLMOD:
            return np.asarray(self._inv(rhs))
        return self._inv.solve(rhs)


@dataclass(frozen=True, eq=False)
class FactorizedSystem:
    """Factorization of L^T L + lambda_c K^T K, reused across frames and optimizer steps."""
    ops: DifferentialOperators
    keypoint_ids: tuple
    weight: float
    matrix: sp.csc_matrix
    selector: sp.csr_matrix          # K_c, (K x V)
    rhs_operator: sp.csr_matrix      # L^T G^T A, (V x 2F)
    factor: _Factor = field(repr=False)

    @property
    def vertex_count(self) -> int:
        return self.ops.vertex_count

    @property
    def face_count(self) -> int:
        return self.ops.face_count

    @property
    def keypoint_count(self) -> int:
        return len(self.keypoint_ids)


# ============================================================
#  ASSEMBLY AND SOLVES
# ============================================================

def assemble(ops: DifferentialOperators, mesh: TriMesh,
             weight: float = DEFAULT_CONSTRAINT_WEIGHT) -> FactorizedSystem:
    if mesh.keypoint_count == 0:
        raise SolverError(
            "mesh has no keypoints; the Poisson system is singular under global translation",
            hint="add at least one keypoint to the mesh file",
        )
    if not weight > 0:
        raise SolverError(f"constraint weight must be positive, got {weight}")
    if ops.vertex_count != mesh.vertex_count:
        raise SolverError("operators were built for a different mesh")

    L = ops.laplacian
    n_comp, labels = connected_components(L, directed=False)
    if n_comp > 1:
        pinned = set(labels[list(mesh.keypoint_ids)])
        free = sorted(set(range(n_comp)) - pinned)
        if free:
            raise SolverError(
                f"{len(free)} connected component(s) carry no keypoint; system is singular",
                where=f"component {free[0]}",
            )

    nv, nk = mesh.vertex_count, mesh.keypoint_count
    K = sp.csr_matrix(
        (np.ones(nk), (np.arange(nk), np.array(mesh.keypoint_ids))), shape=(nk, nv)
    )
    matrix = (L.T @ L + weight * (K.T @ K)).tocsc()
    rhs_operator = (L.T @ ops.gradient.T @ ops.mass).tocsr()

    factor = _Factor(matrix)
    logger.debug("assembled %dx%d Poisson system (%s, lambda_c=%g)", nv, nv, factor.backend, weight)
    return FactorizedSystem(ops, mesh.keypoint_ids, float(weight), matrix, K, rhs_operator, factor)


def _flatten_jacobians(sys: FactorizedSystem, jac) -> np.ndarray:
    per_face = jac.per_face if isinstance(jac, JacobianField) else np.asarray(jac, dtype=np.float64)
    if per_face.shape != (sys.face_count, 2, 2):
        raise SolverError(
            f"Jacobian field has shape {per_face.shape}, expected ({sys.face_count}, 2, 2)"
        )
    if not np.all(np.isfinite(per_face)):
        raise SolverError("non-finite Jacobian entry")
    return per_face.transpose(0, 2, 1).reshape(2 * sys.face_count, 2)


def _check_targets(sys: FactorizedSystem, constraint: KeypointConstraint):
    if constraint.targets.shape != (sys.keypoint_count, 2):
        raise SolverError(
            f"constraint has {len(constraint.targets)} targets, mesh has {sys.keypoint_count} keypoints"
        )


def normal_rhs(sys: FactorizedSystem, jac, constraint: KeypointConstraint) -> np.ndarray:
    """L^T G^T A J + lambda_c K^T T_c."""
    _check_targets(sys, constraint)
    return sys.rhs_operator @ _flatten_jacobians(sys, jac) + sys.weight * (sys.selector.T @ constraint.targets)


def solve(sys: FactorizedSystem, jac, constraint: KeypointConstraint) -> np.ndarray:
    """V* = argmin ||L V - G^T A J||^2 + lambda_c ||K V - T_c||^2."""
    return sys.factor.solve(normal_rhs(sys, jac, constraint))


def solve_many(sys: FactorizedSystem, jacs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Batched solve: jacs (N, F, 2, 2), targets (N, K, 2) -> vertices (N, V, 2)."""
    n = len(jacs)
    if targets.shape != (n, sys.keypoint_count, 2):
        raise SolverError(f"targets have shape {targets.shape}, expected ({n}, {sys.keypoint_count}, 2)")
    if not np.all(np.isfinite(targets)):
        raise SolverError("non-finite keypoint target")
    rhs = np.concatenate(
        [sys.rhs_operator @ _flatten_jacobians(sys, jacs[t])
         + sys.weight * (sys.selector.T @ targets[t]) for t in range(n)],
        axis=1,
    )
    out = sys.factor.solve(rhs)                       # (V, 2N)
    return out.reshape(sys.vertex_count, n, 2).transpose(1, 0, 2)


def solve_adjoint(sys: FactorizedSystem, jac, constraint: KeypointConstraint,
                  grad_out: np.ndarray):
    """Gradients of a scalar loss through solve: (dLoss/dJ (F,2,2), dLoss/dT_c (K,2)).

    The system matrix is symmetric, so the adjoint solve reuses the forward factorization.
    """
    _flatten_jacobians(sys, jac)
    _check_targets(sys, constraint)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (sys.vertex_count, 2):
        raise SolverError(f"grad_out has shape {grad_out.shape}, expected ({sys.vertex_count}, 2)")
    if not np.all(np.isfinite(grad_out)):
        raise SolverError("non-finite upstream gradient")
    return _adjoint_from_rhs_grad(sys, sys.factor.solve(grad_out))


def solve_adjoint_many(sys: FactorizedSystem, grad_out: np.ndarray):
    """Batched adjoint: grad_out (N, V, 2) -> (dJ (N, F, 2, 2), dT (N, K, 2))."""
    n = len(grad_out)
    stacked = grad_out.transpose(1, 0, 2).reshape(sys.vertex_count, 2 * n)
    w = sys.factor.solve(stacked).reshape(sys.vertex_count, n, 2).transpose(1, 0, 2)
    dJ = np.empty((n, sys.face_count, 2, 2))
    dT = np.empty((n, sys.keypoint_count, 2))
    for t in range(n):
        dJ[t], dT[t] = _adjoint_from_rhs_grad(sys, w[t])
    return dJ, dT


def _adjoint_from_rhs_grad(sys: FactorizedSystem, w: np.ndarray):
    flat = sys.rhs_operator.T @ w                                   # (2F, 2): [2f + col, row]
    grad_jac = flat.reshape(sys.face_count, 2, 2).transpose(0, 2, 1)
    grad_targets = sys.weight * (sys.selector @ w)
    return grad_jac, grad_targets


def objective(sys: FactorizedSystem, vertices: np.ndarray, jac, constraint: KeypointConstraint) -> float:
    ops = sys.ops
    poisson = ops.laplacian @ vertices - ops.gradient.T @ ops.mass @ _flatten_jacobians(sys, jac)
    pin = sys.selector @ vertices - constraint.targets
    return float(np.sum(poisson ** 2) + sys.weight * np.sum(pin ** 2))


# ============================================================
#  REST-SHAPE FIT
# ============================================================

def rest_objective(jac, squared: bool = False) -> float:
    """Sum over faces of ||J_f - I||_F (or its square)."""
    per_face = jac.per_face if isinstance(jac, JacobianField) else np.asarray(jac)
    norms = np.linalg.norm(per_face - np.eye(2), axis=(1, 2))
    return float(np.sum(norms ** 2) if squared else np.sum(norms))


def _prox_identity(per_face: np.ndarray, step: float) -> np.ndarray:
    """Proximal map of step * ||J - I||_F per face: shrink the deviation toward I by step."""
    dev = per_face - np.eye(2)
    norms = np.linalg.norm(dev, axis=(1, 2))
    scale = np.where(norms > step, 1.0 - step / np.maximum(norms, 1e-300), 0.0)
    return np.eye(2) + dev * scale[:, None, None]


def _subgradient(per_face: np.ndarray, squared: bool) -> np.ndarray:
    dev = per_face - np.eye(2)
    if squared:
        return 2.0 * dev
    norms = np.linalg.norm(dev, axis=(1, 2))
    return np.where(norms[:, None, None] > 0, dev / np.maximum(norms, 1e-300)[:, None, None], 0.0)


@dataclass
class RestFit:
    jacobians: JacobianField
    history: List[float]
    iterations: int
    mean_deviation: float


def fit_rest_jacobians(mesh: TriMesh, ops: DifferentialOperators, iterations: int,
                       step_size: float, *,
                       weight: float = DEFAULT_CONSTRAINT_WEIGHT,
                       init: Optional[JacobianField] = None,
                       squared: bool = False,
                       optimizer: str = "gd",
                       patience: int = 50,
                       tol: float = 1e-9,
                       rtol: float = 1e-9,
                       atol: float = 1e-10,
                       progress=None) -> RestFit:
    """Fit J_0 with zero keypoint displacement (targets = rest keypoints).

    Each iteration takes a descent step on sum_f ||J_f - I|| for the free field, then
    projects it onto the solvable fields by solving and re-extracting the face gradients.
    `history` holds the objective after every accepted (improving) iteration.

    Only a rise above `best * (1 + rtol) + atol` counts toward divergence. `patience`
    steps in a row without leaving that band stop the fit as converged.
    """
    if iterations < 1:
        raise SolverError(f"iterations must be >= 1, got {iterations}")
    if not step_size > 0:
        raise SolverError(f"step size must be positive, got {step_size}")
    if optimizer not in ("gd", "adam"):
        raise SolverError(f"unknown optimizer {optimizer!r}, expected 'gd' or 'adam'")

    sys = assemble(ops, mesh, weight)
    constraint = KeypointConstraint(mesh.keypoint_positions, weight)
    J = (init.per_face if init is not None else JacobianField.identity(mesh.face_count).per_face).copy()
    if J.shape != (mesh.face_count, 2, 2):
        raise SolverError(f"initial field has shape {J.shape}, expected ({mesh.face_count}, 2, 2)")

    store = None
    if optimizer == "adam":
        import nnkit
        store = nnkit.ParamStore()
        store.add("J0", J)

    best = J.copy()
    best_obj = rest_objective(J, squared)
    history = [best_obj]
    increases = stalls = 0
    it = 0
    for it in range(1, iterations + 1):
        if store is not None:
            store.params["J0"][...] = J
            nnkit.adam_step(store, {"J0": _subgradient(J, squared)}, step_size)
            J = store.params["J0"].copy()
        elif squared:
            J = J - step_size * _subgradient(J, squared=True)
        else:
            J = _prox_identity(J, step_size)

        J = compute_jacobians(ops, solve(sys, J, constraint)).per_face
        obj = rest_objective(J, squared)
        if not np.isfinite(obj):
            raise DivergenceError("rest objective became non-finite", where=f"iteration {it}")

        # steps inside the roundoff band are neither progress nor an increase
        band = best_obj * rtol + atol
        if obj < best_obj:
            stalls = stalls + 1 if obj > best_obj - band else 0
            best, best_obj = J.copy(), obj
            history.append(obj)
            increases = 0
        elif obj <= best_obj + band:
            stalls += 1
            increases = 0
        else:
            stalls = 0
            increases += 1
            if increases >= patience:
                raise DivergenceError(
                    f"rest objective increased for {patience} consecutive steps "
                    f"(best {best_obj:.3e}, current {obj:.3e})",
                    where=f"iteration {it}",
                    hint="lower the rest step size",
                )
        if progress is not None:
            progress(it, best_obj)
        if stalls >= patience or np.mean(np.linalg.norm(best - np.eye(2), axis=(1, 2))) < tol:
            break

    mean_dev = float(np.mean(np.linalg.norm(best - np.eye(2), axis=(1, 2))))
    logger.info("rest fit: %d iterations, objective %.3e, mean deviation %.3e", it, best_obj, mean_dev)
    return RestFit(JacobianField(best), history, it, mean_dev)


if __name__ == "__main__":
    from mesh_core import build_operators, grid_mesh

    mesh = grid_mesh(5, 5, keypoints=(0, 4, 24))
    ops = build_operators(mesh)
    sys = assemble(ops, mesh)
    shifted = KeypointConstraint(mesh.keypoint_positions + [0.1, 0.2])
    V = solve(sys, JacobianField.identity(mesh.face_count), shifted)
    print("max translation error:", np.abs(V - mesh.vertices - [0.1, 0.2]).max())
