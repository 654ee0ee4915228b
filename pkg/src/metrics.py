# src/metrics.py
"""Deformation smoothness (DS) and animation energy (AE) over keypoint motion."""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from errors import InputError
from trajectory import TrajectorySet, sample_all

logger = logging.getLogger(__name__)


class MetricsError(InputError):
    label = "Metrics Error"


@dataclass(frozen=True, eq=False)
class MotionRecord:
    """Per-frame keypoint positions, shape (N, M, 2)."""
    positions: np.ndarray

    def __post_init__(self):
        try:
            pos = np.array(self.positions, dtype=np.float64)
        except ValueError as e:
            raise MetricsError(f"ragged motion record: {e}") from e
        if pos.ndim != 3 or pos.shape[2] != 2 or pos.shape[1] == 0:
            raise MetricsError(f"motion record must have shape (N, M, 2), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            t = int(np.argwhere(~np.isfinite(pos))[0][0])
            raise MetricsError("non-finite position", where=f"frame {t}")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    @property
    def frame_count(self) -> int:
        return self.positions.shape[0]

    @property
    def keypoint_count(self) -> int:
        return self.positions.shape[1]


def record_from_trajectory(traj: TrajectorySet, source: str = "keypoints") -> MotionRecord:
    """"keypoints" uses the N sampled frames; "control_points" walks the control polygon c_0..c_3."""
    if source == "keypoints":
        return MotionRecord(sample_all(traj))
    if source == "control_points":
        return MotionRecord(traj.control_points.transpose(1, 0, 2))
    raise MetricsError(f"unknown metrics source {source!r}", hint="use keypoints or control_points")


def _displacements(record: MotionRecord) -> np.ndarray:
    """d_t = p_t - p_{t-1} with d_0 = 0, shape (N, M, 2)."""
    d = np.zeros_like(record.positions)
    d[1:] = np.diff(record.positions, axis=0)
    return d


def smoothness_per_keypoint(record: MotionRecord) -> np.ndarray:
    n = record.frame_count
    if n < 3:
        raise MetricsError(f"deformation smoothness needs at least 3 frames, got {n}")
    d = _displacements(record)
    jumps = np.linalg.norm(d[1:] - d[:-1], axis=2)                         # t = 1..N-1
    return jumps.sum(axis=0) / (n - 1)


def deformation_smoothness(record: MotionRecord) -> float:
    """DS = 1/((N-1) M) sum_{t=1}^{N-1} sum_i ||d_t - d_{t-1}||; lower is smoother."""
    return float(np.mean(smoothness_per_keypoint(record)))


def energy_per_keypoint(record: MotionRecord) -> np.ndarray:
    n = record.frame_count
    if n < 2:
        raise MetricsError(f"animation energy needs at least 2 frames, got {n}")
    offsets = record.positions[1:] - record.positions[0]
    return np.sum(offsets ** 2, axis=(0, 2)) / n


def animation_energy(record: MotionRecord) -> float:
    """AE = 1/(N M) sum_{t=1}^{N-1} sum_i ||p_t - p_0||^2; higher is more dynamic."""
    return float(np.mean(energy_per_keypoint(record)))


# ============================================================
#  I/O
# ============================================================

def load_record(path) -> MotionRecord:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise MetricsError("motion record not found", where=str(path)) from e
    except OSError as e:
        raise MetricsError(f"cannot read motion record: {e.strerror}", where=str(path)) from e
    except ValueError as e:
        raise MetricsError(f"malformed JSON: {e}", where=str(path)) from e
    if not isinstance(data, dict) or "positions" not in data:
        raise MetricsError('motion record needs a "positions" array', where=str(path))
    rows = data["positions"]
    if not isinstance(rows, list) or not rows:
        raise MetricsError("positions must be a non-empty list of frames", where=str(path))
    widths = {len(frame) if isinstance(frame, list) else -1 for frame in rows}
    if len(widths) != 1:
        raise MetricsError("ragged motion record: frames have different keypoint counts",
                           where=str(path))
    try:
        return MotionRecord(rows)
    except MetricsError as e:
        raise MetricsError(e.message, where=str(path)) from e


def save_record(record: MotionRecord, path):
    path = Path(path)
    try:
        path.write_text(json.dumps({"positions": record.positions.tolist()}, allow_nan=False),
                        encoding="utf-8")
    except OSError as e:
        raise MetricsError(f"cannot write motion record: {e.strerror}", where=str(path)) from e


def write_metrics_csv(record: MotionRecord, path):
    """Rows: metric, keypoint ("all" for the aggregate), value."""
    path = Path(path)
    ds_k = smoothness_per_keypoint(record)
    ae_k = energy_per_keypoint(record)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "keypoint", "value"])
            writer.writerow(["DS", "all", repr(float(np.mean(ds_k)))])
            writer.writerow(["AE", "all", repr(float(np.mean(ae_k)))])
            for i, value in enumerate(ds_k):
                writer.writerow(["DS", i, repr(float(value))])
            for i, value in enumerate(ae_k):
                writer.writerow(["AE", i, repr(float(value))])
    except OSError as e:
        raise MetricsError(f"cannot write metrics: {e.strerror}", where=str(path)) from e
    logger.info("DS %.6g, AE %.6g over %d frames", np.mean(ds_k), np.mean(ae_k), record.frame_count)
    return float(np.mean(ds_k)), float(np.mean(ae_k))
