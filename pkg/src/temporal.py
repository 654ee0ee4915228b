# src/temporal.py
"""Temporal Jacobian corrections J^R_t, integrated with explicit Euler steps.

dJ^R/dt = f_R(J^P_0, C^P_W, C^R_{W-1}, t), J^R_0 = 0. The two conditioning vectors are
mean-pooled attention encodings of the recent spatial Jacobians and of the already
integrated temporal Jacobians.
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np

from errors import NumericError
from mesh_core import JacobianField
from nnkit import (
    AttentionSpec,
    MLPSpec,
    ParamStore,
    accumulate,
    attention_backward,
    attention_forward,
    init_attention,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 6
TOKEN_DIM = 4


class TemporalError(NumericError):
    label = "Temporal Error"


# ============================================================
#  STATE AND PARAMETERS
# ============================================================

@dataclass(frozen=True, eq=False)
class TemporalState:
    spatial: np.ndarray      # J^P_t, (N, F, 2, 2)
    temporal: np.ndarray     # J^R_t, (N, F, 2, 2)
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.spatial.ndim != 4 or self.spatial.shape[2:] != (2, 2):
            raise TemporalError(f"spatial Jacobians must have shape (N, F, 2, 2), got {self.spatial.shape}")
        if self.temporal.shape != self.spatial.shape:
            raise TemporalError(
                f"temporal Jacobians {self.temporal.shape} do not match spatial {self.spatial.shape}"
            )
        if self.window < 1:
            raise TemporalError(f"window must be positive, got {self.window}")
        if np.any(self.temporal[0] != 0.0):
            raise TemporalError("first-frame temporal Jacobian must be exactly zero", where="frame 0")

    @classmethod
    def start(cls, spatial: np.ndarray, window: int = DEFAULT_WINDOW) -> "TemporalState":
        spatial = np.asarray(spatial, dtype=np.float64)
        return cls(spatial, np.zeros_like(spatial), window)

    @property
    def frame_count(self) -> int:
        return len(self.spatial)

    @property
    def face_count(self) -> int:
        return self.spatial.shape[1]


@dataclass(frozen=True, eq=False)
class TemporalParams:
    store: ParamStore
    spatial_encoder: AttentionSpec
    temporal_encoder: AttentionSpec
    rate_mlp: MLPSpec
    time_frequencies: int = 4
    step: Optional[float] = None      # None: h = 1 / (N - 1)

    def step_for(self, frame_count: int) -> float:
        h = 1.0 / (frame_count - 1) if self.step is None else self.step
        if not h > 0:
            raise TemporalError(f"integration step must be positive, got {h}")
        return h


def init_temporal_params(store: ParamStore, rng: np.random.Generator, encoding_dim: int = 16,
                         hidden: int = 64, heads: int = 2, dim_kv: int = 32,
                         time_frequencies: int = 4) -> TemporalParams:
    spatial_encoder = AttentionSpec("enc_p", TOKEN_DIM, encoding_dim, heads, dim_kv)
    temporal_encoder = AttentionSpec("enc_r", TOKEN_DIM, encoding_dim, heads, dim_kv)
    width = 4 + 2 * encoding_dim + 2 * time_frequencies
    rate_mlp = MLPSpec("f_r", (width, hidden, hidden, 4))     # 3 layers
    init_attention(store, spatial_encoder, rng)
    init_attention(store, temporal_encoder, rng)
    init_mlp(store, rate_mlp, rng, zero_last=True)
    return TemporalParams(store, spatial_encoder, temporal_encoder, rate_mlp, time_frequencies)


# ============================================================
#  ENCODERS
# ============================================================

def frame_tokens(fields: np.ndarray) -> np.ndarray:
    """One token per frame: face-mean of the row-major flattened 2x2 Jacobians."""
    return fields.reshape(len(fields), -1, 4).mean(axis=1)


def spatial_window(t: int, window: int) -> List[int]:
    return list(range(max(0, t - window + 1), t + 1))


def temporal_window(t: int, window: int) -> List[int]:
    return list(range(max(0, t - window), t)) if t > 0 else [0]


def encode_spatial_window(state: TemporalState, t: int, params: TemporalParams):
    frames = spatial_window(t, state.window)
    enc, tape = attention_forward(params.store, params.spatial_encoder, frame_tokens(state.spatial[frames]))
    return enc, (frames, tape)


def encode_temporal_window(state: TemporalState, t: int, params: TemporalParams):
    frames = temporal_window(t, state.window)
    enc, tape = attention_forward(params.store, params.temporal_encoder, frame_tokens(state.temporal[frames]))
    return enc, (frames, tape)


# ============================================================
#  ODE RIGHT-HAND SIDE
# ============================================================

def time_features(u: float, frequencies: int) -> np.ndarray:
    angles = np.pi * (2.0 ** np.arange(frequencies)) * u
    return np.concatenate([np.sin(angles), np.cos(angles)])


def ode_rhs(J0_P: np.ndarray, cP: np.ndarray, cR: np.ndarray, t: float, params: TemporalParams):
    """Per-face rates dJ^R/dt, shape (F, 2, 2), from a shared MLP applied face by face."""
    J0_P = J0_P.per_face if isinstance(J0_P, JacobianField) else np.asarray(J0_P)
    nf = len(J0_P)
    shared = np.concatenate([cP, cR, time_features(t, params.time_frequencies)])
    features = np.concatenate([J0_P.reshape(nf, 4), np.broadcast_to(shared, (nf, len(shared)))], axis=1)
    out, tape = mlp_forward(params.store, params.rate_mlp, features)
    return out.reshape(nf, 2, 2), tape


def ode_rhs_backward(params: TemporalParams, tape, grad_rates: np.ndarray, encoding_dim: int):
    """Returns (param grads, dJ0_P (F,2,2), dcP, dcR)."""
    nf = len(grad_rates)
    grads, g_in = mlp_backward(params.store, params.rate_mlp, tape, grad_rates.reshape(nf, 4))
    g_J0 = g_in[:, :4].reshape(nf, 2, 2)
    g_cP = g_in[:, 4:4 + encoding_dim].sum(axis=0)
    g_cR = g_in[:, 4 + encoding_dim:4 + 2 * encoding_dim].sum(axis=0)
    return grads, g_J0, g_cP, g_cR


# ============================================================
#  EULER INTEGRATION
# ============================================================

RhsFn = Callable[[np.ndarray, np.ndarray, np.ndarray, float], np.ndarray]


def _integrate(state: TemporalState, params: TemporalParams, rhs_fn: Optional[RhsFn], trace: bool):
    if np.any(state.temporal[0] != 0.0):
        raise TemporalError("J^R_0 must be zero before integration", where="frame 0")
    n = state.frame_count
    h = params.step_for(n)
    temporal = np.zeros_like(state.spatial)
    working = replace(state, temporal=temporal)
    J0_P = state.spatial[0]
    steps = []

    for t in range(n - 1):
        u = t * h
        cP, tape_p = encode_spatial_window(working, t, params)
        cR, tape_r = encode_temporal_window(working, t, params)
        if rhs_fn is None:
            rates, tape_f = ode_rhs(J0_P, cP, cR, u, params)
        else:
            rates, tape_f = np.asarray(rhs_fn(J0_P, cP, cR, u), dtype=np.float64), None
        temporal[t + 1] = temporal[t] + h * rates
        if not np.all(np.isfinite(temporal[t + 1])):
            raise TemporalError("temporal Jacobian became non-finite", where=f"frame {t + 1}")
        if trace:
            steps.append((tape_p, tape_r, tape_f))

    return TemporalState(state.spatial, temporal, state.window), (h, steps)


def integrate(state: TemporalState, params: TemporalParams,
              rhs_fn: Optional[RhsFn] = None) -> TemporalState:
    """Fill J^R_1..J^R_{N-1}; rhs_fn overrides the learned f_R (used for analytic checks)."""
    return _integrate(state, params, rhs_fn, trace=False)[0]


def integrate_traced(state: TemporalState, params: TemporalParams):
    return _integrate(state, params, None, trace=True)


def integrate_backward(state: TemporalState, params: TemporalParams, tape,
                       grad_temporal: np.ndarray):
    """Backpropagate dLoss/dJ^R_t through every Euler step and both encoders.

    Returns (param grads, dLoss/dJ^P_t of shape (N, F, 2, 2)).
    """
    h, steps = tape
    n, nf = state.frame_count, state.face_count
    enc_dim = params.spatial_encoder.dim_out
    gR = np.array(grad_temporal, dtype=np.float64)
    gP = np.zeros_like(state.spatial)
    grads = {}

    for t in reversed(range(n - 1)):
        (frames_p, tape_p), (frames_r, tape_r), tape_f = steps[t]
        if tape_f is None:
            raise TemporalError("cannot backpropagate through a custom right-hand side")
        g_next = gR[t + 1]
        gR[t] += g_next

        g_params, g_J0, g_cP, g_cR = ode_rhs_backward(params, tape_f, h * g_next, enc_dim)
        accumulate(grads, g_params)
        gP[0] += g_J0

        g_params, g_tok = attention_backward(params.store, params.spatial_encoder, tape_p, g_cP)
        accumulate(grads, g_params)
        gP[frames_p] += (g_tok / nf).reshape(len(frames_p), 1, 2, 2)

        g_params, g_tok = attention_backward(params.store, params.temporal_encoder, tape_r, g_cR)
        accumulate(grads, g_params)
        gR[frames_r] += (g_tok / nf).reshape(len(frames_r), 1, 2, 2)

    return grads, gP


def total_jacobian(state: TemporalState, t: int) -> JacobianField:
    """J_t = J^P_t + J^R_t."""
    if not 0 <= t < state.frame_count:
        raise TemporalError(f"frame index {t} out of range [0, {state.frame_count})")
    return JacobianField(state.spatial[t] + state.temporal[t])


def total_jacobians(state: TemporalState) -> np.ndarray:
    return state.spatial + state.temporal
