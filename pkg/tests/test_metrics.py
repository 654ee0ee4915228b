import json

import numpy as np
import pytest

from metrics import (
    MetricsError,
    MotionRecord,
    animation_energy,
    deformation_smoothness,
    load_record,
    record_from_trajectory,
    save_record,
    smoothness_per_keypoint,
    write_metrics_csv,
)
from trajectory import TrajectorySet

N = 10


def _static(n=N, m=3):
    return MotionRecord(np.tile(np.array([[0.2, 0.3], [0.5, 0.5], [0.7, 0.1]])[:m], (n, 1, 1)))


def test_static_motion_scores_zero():
    record = _static()
    assert deformation_smoothness(record) == 0.0
    assert animation_energy(record) == 0.0


def test_constant_velocity_has_single_jump():
    v = np.array([0.03, -0.04])
    record = MotionRecord(np.array([[[0.1, 0.9] + t * v] for t in range(N)]))
    assert deformation_smoothness(record) == pytest.approx(0.05 / (N - 1))


def test_alternating_steps():
    delta = np.array([0.0, 0.02])
    record = MotionRecord(np.array([[[0.5, 0.5] + (t % 2) * delta] for t in range(N)]))
    expected = (2 * 0.02 * (N - 2) + 0.02) / (N - 1)
    assert deformation_smoothness(record) == pytest.approx(expected)


def test_animation_energy_single_jump():
    r = np.array([0.3, 0.4])
    positions = np.array([[[0.1, 0.1]]] + [[[0.1, 0.1] + r]] * (N - 1))
    assert animation_energy(MotionRecord(positions)) == pytest.approx(0.25 * (N - 1) / N)


def test_scaling_and_translation(rng):
    positions = rng.uniform(size=(N, 4, 2))
    base = MotionRecord(positions)
    scaled = MotionRecord(3.0 * positions)
    shifted = MotionRecord(positions + np.array([0.5, -1.0]))
    assert deformation_smoothness(scaled) == pytest.approx(3.0 * deformation_smoothness(base))
    assert animation_energy(scaled) == pytest.approx(9.0 * animation_energy(base))
    assert deformation_smoothness(shifted) == pytest.approx(deformation_smoothness(base))
    assert animation_energy(shifted) == pytest.approx(animation_energy(base))


def test_smoothness_needs_three_frames():
    with pytest.raises(MetricsError, match="at least 3 frames"):
        deformation_smoothness(_static(n=2))
    assert animation_energy(_static(n=2)) == 0.0


def test_non_finite_rejected_with_frame():
    positions = np.zeros((4, 1, 2))
    positions[2, 0, 1] = np.nan
    with pytest.raises(MetricsError) as info:
        MotionRecord(positions)
    assert info.value.where == "frame 2"


def test_ragged_record_file(tmp_path):
    path = tmp_path / "motion.json"
    path.write_text(json.dumps({"positions": [[[0, 0], [1, 1]], [[0, 0]]]}))
    with pytest.raises(MetricsError, match="ragged"):
        load_record(path)


def test_missing_record_file(tmp_path):
    with pytest.raises(MetricsError) as info:
        load_record(tmp_path / "absent.json")
    assert info.value.exit_code == 2


def test_record_save_and_load(tmp_path, rng):
    record = MotionRecord(rng.uniform(size=(5, 2, 2)))
    save_record(record, tmp_path / "m.json")
    assert np.array_equal(load_record(tmp_path / "m.json").positions, record.positions)


def test_metrics_csv(tmp_path, rng):
    record = MotionRecord(rng.uniform(size=(6, 2, 2)))
    ds, ae = write_metrics_csv(record, tmp_path / "metrics.csv")
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "metric,keypoint,value"
    assert lines[1] == f"DS,all,{ds!r}"
    assert lines[2] == f"AE,all,{ae!r}"
    assert len(lines) == 3 + 2 * 2
    assert float(lines[3].split(",")[2]) == pytest.approx(smoothness_per_keypoint(record)[0])


def test_trajectory_sources(rng):
    traj = TrajectorySet(rng.uniform(size=(3, 4, 2)), 24)
    assert record_from_trajectory(traj).positions.shape == (24, 3, 2)
    polygon = record_from_trajectory(traj, "control_points")
    assert polygon.positions.shape == (4, 3, 2)
    assert np.array_equal(polygon.positions[1], traj.control_points[:, 1])
    with pytest.raises(MetricsError, match="unknown metrics source"):
        record_from_trajectory(traj, "pixels")
