# src/trajectory.py
import json
import logging
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from errors import InputError
from nnkit import MLPSpec, ParamStore, init_mlp, mlp_backward, mlp_forward

logger = logging.getLogger(__name__)

EMBED_DIM = 8
DEFAULT_MOTION_SCALE = 0.5


class TrajectoryError(InputError):
    label = "Trajectory Error"


# ============================================================
#  TRAJECTORY SET
# ============================================================

@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Cubic Bezier control points per keypoint, shape (M, 4, 2); c_0 is the rest keypoint."""
    control_points: np.ndarray
    frame_count: int

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=np.float64)
        if cp.ndim != 3 or cp.shape[1:] != (4, 2):
            raise TrajectoryError(f"control points must have shape (M, 4, 2), got {cp.shape}")
        if not np.all(np.isfinite(cp)):
            raise TrajectoryError("non-finite control point")
        if int(self.frame_count) < 2:
            raise TrajectoryError(f"frame count must be >= 2, got {self.frame_count}")
        cp.flags.writeable = False
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "frame_count", int(self.frame_count))

    @classmethod
    def stationary(cls, rest_keypoints: np.ndarray, frame_count: int) -> "TrajectorySet":
        rest = np.asarray(rest_keypoints, dtype=np.float64)
        return cls(np.repeat(rest[:, None, :], 4, axis=1), frame_count)

    @classmethod
    def from_offsets(cls, rest_keypoints: np.ndarray, offsets: np.ndarray,
                     frame_count: int) -> "TrajectorySet":
        """offsets (M, 3, 2) are c_1..c_3 relative to the rest keypoint."""
        rest = np.asarray(rest_keypoints, dtype=np.float64)
        cp = np.concatenate([rest[:, None, :], rest[:, None, :] + offsets], axis=1)
        return cls(cp, frame_count)

    @property
    def keypoint_count(self) -> int:
        return len(self.control_points)

    @property
    def rest_keypoints(self) -> np.ndarray:
        return self.control_points[:, 0, :]


def bernstein(u: float) -> np.ndarray:
    """Cubic Bernstein weights B_0..B_3 at u in [0, 1]."""
    u = float(u)
    if not 0.0 <= u <= 1.0:
        raise TrajectoryError(f"Bezier parameter must lie in [0, 1], got {u}")
    return np.array([comb(3, j) * (1.0 - u) ** (3 - j) * u ** j for j in range(4)])


def frame_parameter(t: int, frame_count: int) -> float:
    if not 0 <= t < frame_count:
        raise TrajectoryError(f"frame index {t} out of range [0, {frame_count})")
    return t / (frame_count - 1)


def bernstein_matrix(frame_count: int) -> np.ndarray:
    """(N, 4) weights for every frame."""
    return np.stack([bernstein(frame_parameter(t, frame_count)) for t in range(frame_count)])


def sample(traj: TrajectorySet, t: int) -> np.ndarray:
    weights = bernstein(frame_parameter(t, traj.frame_count))
    if t == 0:
        return traj.control_points[:, 0, :].copy()
    return np.einsum("j,mjd->md", weights, traj.control_points)


def sample_all(traj: TrajectorySet) -> np.ndarray:
    """Keypoint positions for every frame, shape (N, M, 2)."""
    positions = np.einsum("tj,mjd->tmd", bernstein_matrix(traj.frame_count), traj.control_points)
    positions[0] = traj.control_points[:, 0, :]
    return positions


def sample_gradient(traj: TrajectorySet, t: int, grad_positions: np.ndarray) -> np.ndarray:
    """d(loss)/d(control points) from d(loss)/d(p_t), shape (M, 4, 2)."""
    grad_positions = np.asarray(grad_positions, dtype=np.float64)
    if grad_positions.shape != (traj.keypoint_count, 2):
        raise TrajectoryError(
            f"gradient has shape {grad_positions.shape}, expected ({traj.keypoint_count}, 2)"
        )
    weights = bernstein(frame_parameter(t, traj.frame_count))
    return weights[None, :, None] * grad_positions[:, None, :]


def sample_all_gradient(traj: TrajectorySet, grad_positions: np.ndarray) -> np.ndarray:
    if grad_positions.shape != (traj.frame_count, traj.keypoint_count, 2):
        raise TrajectoryError(f"gradient has shape {grad_positions.shape}, expected "
                              f"({traj.frame_count}, {traj.keypoint_count}, 2)")
    return np.einsum("tj,tmd->mjd", bernstein_matrix(traj.frame_count), grad_positions)


# ============================================================
#  MLP PARAMETERIZATION
# ============================================================

def trajectory_mlp_spec(hidden: int = 64) -> MLPSpec:
    # 4 linear layers: (rest xy + embedding) -> 3 free control-point offsets
    return MLPSpec("traj", (2 + EMBED_DIM, hidden, hidden, hidden, 6))


def init_trajectory_params(store: ParamStore, keypoint_count: int, rng: np.random.Generator,
                           hidden: int = 64) -> MLPSpec:
    spec = trajectory_mlp_spec(hidden)
    store.add("traj.embedding", rng.uniform(-1.0, 1.0, size=(keypoint_count, EMBED_DIM)))
    init_mlp(store, spec, rng, zero_last=True)
    return spec


def parameterize_mlp(rest_keypoints: np.ndarray, store: ParamStore, spec: MLPSpec,
                     frame_count: int, motion_scale: float = DEFAULT_MOTION_SCALE):
    """Returns (TrajectorySet, tape). c_0 is pinned to the rest keypoint."""
    rest = np.asarray(rest_keypoints, dtype=np.float64)
    embedding = store["traj.embedding"]
    if embedding.shape != (len(rest), EMBED_DIM):
        raise TrajectoryError(
            f"embedding has shape {embedding.shape}, expected ({len(rest)}, {EMBED_DIM})"
        )
    if spec.sizes[0] != 2 + EMBED_DIM or spec.sizes[-1] != 6:
        raise TrajectoryError(f"trajectory MLP must map {2 + EMBED_DIM} -> 6, got {spec.sizes}")
    features = np.concatenate([rest, embedding], axis=1)
    out, mlp_tape = mlp_forward(store, spec, features)
    offsets = motion_scale * out.reshape(len(rest), 3, 2)
    traj = TrajectorySet.from_offsets(rest, offsets, frame_count)
    return traj, (spec, mlp_tape, motion_scale)


def parameterize_mlp_backward(store: ParamStore, tape, grad_control_points: np.ndarray):
    spec, mlp_tape, motion_scale = tape
    m = len(grad_control_points)
    g_out = motion_scale * grad_control_points[:, 1:, :].reshape(m, 6)
    grads, g_in = mlp_backward(store, spec, mlp_tape, g_out)
    grads["traj.embedding"] = g_in[:, 2:]
    return grads


# ============================================================
#  JSON DUMP
# ============================================================

def save_trajectory(traj: TrajectorySet, path):
    data = {"frame_count": traj.frame_count, "control_points": traj.control_points.tolist()}
    path = Path(path)
    try:
        path.write_text(json.dumps(data, allow_nan=False, indent=1), encoding="utf-8")
    except OSError as e:
        raise TrajectoryError(f"cannot write trajectory: {e.strerror}", where=str(path)) from e


def load_trajectory(path) -> TrajectorySet:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"),
                          parse_constant=lambda name: float("nan"))
    except OSError as e:
        raise TrajectoryError(f"cannot read trajectory: {e.strerror}", where=str(path)) from e
    except ValueError as e:
        raise TrajectoryError(f"malformed JSON: {e}", where=str(path)) from e
    try:
        return TrajectorySet(np.array(data["control_points"], dtype=np.float64),
                             int(data["frame_count"]))
    except TrajectoryError as e:
        raise TrajectoryError(e.message, where=str(path), hint=e.hint) from e
    except (KeyError, TypeError, ValueError) as e:
        raise TrajectoryError(f"malformed trajectory: {e}", where=str(path)) from e


if __name__ == "__main__":
    d = np.array([0.3, -0.1])
    line = TrajectorySet(np.array([[j * d / 3 for j in range(4)]]), 5)
    for t in range(5):
        print(t, sample(line, t))
