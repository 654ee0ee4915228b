import numpy as np
import pytest

from helpers import central_difference, relative_error
from nnkit import ParamStore
from temporal import (
    TemporalError,
    TemporalState,
    encode_spatial_window,
    encode_temporal_window,
    frame_tokens,
    init_temporal_params,
    integrate,
    integrate_backward,
    integrate_traced,
    spatial_window,
    temporal_window,
    total_jacobian,
    total_jacobians,
)


def _spatial(rng, frames=5, faces=8):
    return np.eye(2) + 0.1 * rng.standard_normal((frames, faces, 2, 2))


def _params(rng, live=True):
    store = ParamStore()
    params = init_temporal_params(store, rng, encoding_dim=6, hidden=10, heads=2, dim_kv=4)
    if live:
        last = f"{params.rate_mlp.prefix}.w{params.rate_mlp.layers - 1}"
        store.params[last][...] = 0.5 * rng.standard_normal(store[last].shape)
    return params


def test_windows():
    assert spatial_window(0, 6) == [0]
    assert spatial_window(8, 6) == [3, 4, 5, 6, 7, 8]
    assert temporal_window(0, 6) == [0]
    assert temporal_window(3, 6) == [0, 1, 2]
    assert temporal_window(9, 6) == [3, 4, 5, 6, 7, 8]


def test_first_frame_correction_is_zero(rng):
    state = integrate(TemporalState.start(_spatial(rng)), _params(rng))
    assert np.array_equal(state.temporal[0], np.zeros((8, 2, 2)))
    assert np.any(state.temporal[1:] != 0.0)


def test_zero_rate_network_reduces_to_spatial_posing(rng):
    spatial = _spatial(rng)
    state = integrate(TemporalState.start(spatial), _params(rng, live=False))
    assert np.array_equal(total_jacobians(state), spatial)
    assert np.array_equal(total_jacobian(state, 3).per_face, spatial[3])


def test_nonzero_initial_correction_rejected(rng):
    spatial = _spatial(rng)
    temporal = np.zeros_like(spatial)
    temporal[0, 0, 0, 0] = 1.0
    with pytest.raises(TemporalError, match="frame 0"):
        TemporalState(spatial, temporal)


def test_euler_error_is_first_order(rng):
    """dJ/dt = cos(t) for every entry, so J(1) = sin(1)."""
    params = _params(rng)
    rhs = lambda J0, cP, cR, u: np.full(J0.shape, np.cos(u))
    errors, steps = [], []
    for n in (11, 21, 41, 81):
        state = integrate(TemporalState.start(_spatial(rng, frames=n, faces=2)), params, rhs_fn=rhs)
        errors.append(abs(state.temporal[-1, 0, 0, 0] - np.sin(1.0)))
        steps.append(1.0 / (n - 1))
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert abs(slope - 1.0) < 0.2


def test_tokens_are_face_means(rng):
    fields = _spatial(rng)
    assert np.allclose(frame_tokens(fields)[2], fields[2].reshape(-1, 4).mean(axis=0))


def test_backward_through_time_matches_finite_differences(rng):
    spatial = _spatial(rng, frames=5, faces=6)
    params = _params(rng)
    store = params.store
    W = rng.standard_normal(spatial.shape)

    def loss():
        return float(np.sum(W * integrate(TemporalState(spatial, np.zeros_like(spatial), 3), params).temporal))

    state, tape = integrate_traced(TemporalState(spatial, np.zeros_like(spatial), 3), params)
    grads, g_spatial = integrate_backward(state, params, tape, W)

    for name in ("f_r.w0", "f_r.w2", "f_r.b1", "enc_p.wq", "enc_p.wo", "enc_r.wv", "enc_r.bq"):
        fd = central_difference(loss, store.params[name])
        assert relative_error(grads[name], fd, floor=1e-6) < 1e-4, name
    assert relative_error(g_spatial, central_difference(loss, spatial)) < 1e-4


def test_custom_zero_rhs_leaves_corrections_zero(rng):
    params = _params(rng)
    spatial = _spatial(rng, frames=3)
    state = TemporalState.start(spatial)
    rhs = lambda J0, cP, cR, u: np.zeros_like(J0)
    out = integrate(state, params, rhs_fn=rhs)
    assert np.array_equal(out.temporal, np.zeros_like(spatial))


def test_corrections_are_causal(rng):
    spatial = _spatial(rng, frames=7)
    params = _params(rng)
    base = integrate(TemporalState.start(spatial, window=3), params).temporal
    k = 4
    bumped = spatial.copy()
    bumped[k] += 0.3 * rng.standard_normal(bumped[k].shape)
    moved = integrate(TemporalState.start(bumped, window=3), params).temporal
    # J^R_t only sees J^P up to frame t - 1
    assert np.array_equal(moved[:k + 1], base[:k + 1])
    assert not np.allclose(moved[k + 1:], base[k + 1:])


def test_encoders_collapse_duplicate_frames(rng):
    params = _params(rng)
    frame = _spatial(rng, frames=1)[0]
    state = TemporalState.start(np.repeat(frame[None], 6, axis=0), window=4)
    single, _ = encode_spatial_window(state, 0, params)
    window, _ = encode_spatial_window(state, 3, params)
    assert np.allclose(window, single, atol=1e-12)

    first, _ = encode_temporal_window(state, 1, params)
    later, _ = encode_temporal_window(state, 4, params)
    assert np.allclose(later, first, atol=1e-12)
