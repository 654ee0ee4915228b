import time

import numpy as np
import pytest
from scipy import stats

from pfode import (
    FlowError,
    NoiseSchedule,
    ScheduleError,
    gaussian_score,
    generalized_variance,
    neighbor_overlap,
    pfode_integrate,
    verify_fokker_planck,
)


def test_zero_schedule_leaves_particles_unchanged(rng):
    schedule = NoiseSchedule(rates=[0.0, 0.0])
    x = rng.standard_normal((100, 2))
    assert np.array_equal(pfode_integrate(x, schedule, gaussian_score(schedule)), x)


def test_isotropic_schedule_passes_within_five_percent():
    start = time.perf_counter()
    report = verify_fokker_planck(NoiseSchedule(rates=[1.0, 1.0]), trials=50_000, seed=0)
    assert time.perf_counter() - start < 30.0
    assert report.passed
    assert report.max_relative_error < 0.05
    assert np.allclose(report.analytic_covariance, 2.0 * np.eye(2))


def test_anisotropic_schedule():
    report = verify_fokker_planck(NoiseSchedule(rates=[1.0, 2.0]), trials=50_000, seed=1)
    assert report.passed
    assert np.allclose(np.diag(report.analytic_covariance), [2.0, 3.0])
    assert np.allclose(np.diag(report.ode_covariance), [2.0, 3.0], rtol=0.05)
    assert np.allclose(np.diag(report.sde_covariance), [2.0, 3.0], rtol=0.05)


def test_trivial_schedule_passes():
    assert verify_fokker_planck(NoiseSchedule(rates=[0.0, 0.0]), trials=20_000, seed=2).passed


def test_mismatched_rate_fails():
    report = verify_fokker_planck(NoiseSchedule(rates=[1.0, 1.0]), trials=50_000, seed=0, c_dot_scale=0.5)
    assert not report.passed
    assert report.max_relative_error > 0.05


def test_quadratic_schedule():
    report = verify_fokker_planck(NoiseSchedule(rates=[1.0], power=2.0, steps=400), trials=50_000, seed=3)
    assert report.passed


def test_pfode_preserves_neighborhoods_sde_does_not():
    report = verify_fokker_planck(NoiseSchedule(rates=[1.0, 1.0]), trials=50_000, seed=4)
    assert report.ode_neighbor_overlap > 0.9
    assert report.sde_neighbor_overlap < 0.5


def test_volume_rescaling_keeps_generalized_variance(rng):
    schedule = NoiseSchedule(rates=[1.0, 2.0], base_variance=[1.0, 1.0], rescale="volume")
    x0 = rng.standard_normal((50_000, 2))
    before = generalized_variance(schedule.A(0.0) * x0)
    after = generalized_variance(pfode_integrate(x0, schedule, gaussian_score(schedule)))
    assert after == pytest.approx(before, rel=0.05)


def test_rescale_derivative_matches_finite_difference():
    schedule = NoiseSchedule(rates=[1.0, 3.0], power=1.5, base_variance=[0.5, 2.0], rescale="volume")
    h = 1e-6
    for t in (0.2, 0.7):
        fd = (schedule.A(t + h) - schedule.A(t - h)) / (2 * h)
        assert schedule.A_dot(t) == pytest.approx(fd, rel=1e-6)


def test_marginals_stay_gaussian_during_integration(rng):
    schedule = NoiseSchedule(rates=[1.0, 1.0])
    moments = []

    def record(step, t, x):
        if step % 50 == 0:
            moments.append((stats.skew(x, axis=0), stats.kurtosis(x, axis=0)))

    pfode_integrate(rng.standard_normal((50_000, 2)), schedule, gaussian_score(schedule), callback=record)
    assert len(moments) == 4
    for skew, kurt in moments:
        assert np.all(np.abs(skew) < 0.1)
        assert np.all(np.abs(kurt) < 0.1)


def test_neighbor_overlap_identity(rng):
    x = rng.standard_normal((300, 2))
    assert neighbor_overlap(x, x, k=10) == 1.0
    assert neighbor_overlap(x, 3.0 * x, k=10) == 1.0


def test_nonfinite_particles_abort_with_step():
    schedule = NoiseSchedule(rates=[1.0])
    with pytest.raises(FlowError) as info:
        pfode_integrate(np.ones((4, 1)), schedule, lambda x, t: np.full_like(x, np.inf))
    assert info.value.where == "step 1"


@pytest.mark.parametrize("kwargs", [
    {"rates": [-1.0]},
    {"rates": [1.0], "power": 0.5},
    {"rates": [1.0], "horizon": 0.0},
    {"rates": [1.0], "rescale": "volume"},
    {"rates": [1.0], "rescale": "sideways"},
])
def test_invalid_schedules(kwargs):
    with pytest.raises(ScheduleError):
        NoiseSchedule(**kwargs)
