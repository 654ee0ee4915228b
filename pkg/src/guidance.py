# src/guidance.py
"""Score oracles and the guidance losses built on them.

Noise convention (variance preserving, linear alpha-bar):
    z = sqrt(abar(t')) X + sigma(t') eps,   sigma(t') = sqrt(1 - abar(t')).
"""
import base64
import logging
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import requests

from errors import InputError, NumericError

logger = logging.getLogger(__name__)

PROTOCOL_HEADER = "x-flexmesh-proto"
PROTOCOL_VERSION = "1"


class OracleError(NumericError):
    label = "Oracle Error"


class GuidanceError(InputError):
    label = "Guidance Error"


# ============================================================
#  NOISE LEVELS AND CONFIG
# ============================================================

@dataclass(frozen=True)
class GuidanceConfig:
    guidance_scale: float = 50.0         # s
    loss_weight: float = 15.0            # lambda
    horizon: float = 1.0                 # T
    alpha_bar_min: float = 1e-3          # abar(T)
    t_min: float = 0.02                  # t' ~ U(t_min, t_max) * T
    t_max: float = 0.98
    flow_t_min: float = 0.5              # floor on t' for the flow score term
    samples: int = 1
    timestep_weight: Optional[Callable[[float], float]] = None    # w(t'), default 1

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise GuidanceError(f"guidance scale must be >= 0, got {self.guidance_scale}")
        if self.loss_weight < 0:
            raise GuidanceError(f"loss weight must be >= 0, got {self.loss_weight}")
        if not self.horizon > 0:
            raise GuidanceError(f"diffusion horizon must be positive, got {self.horizon}")
        if not 0 < self.t_min < self.t_max <= 1:
            raise GuidanceError(f"need 0 < t_min < t_max <= 1, got {self.t_min}, {self.t_max}")
        if not 0 < self.alpha_bar_min < 1:
            raise GuidanceError(f"alpha_bar_min must lie in (0, 1), got {self.alpha_bar_min}")
        if self.samples < 1:
            raise GuidanceError(f"samples must be >= 1, got {self.samples}")
        if not 0 <= self.flow_t_min <= 1:
            raise GuidanceError(f"flow_t_min must lie in [0, 1], got {self.flow_t_min}")

    def weight(self, t_prime: float) -> float:
        w = 1.0 if self.timestep_weight is None else float(self.timestep_weight(t_prime))
        if w < 0:
            raise GuidanceError(f"timestep weight must be >= 0, got {w} at t'={t_prime}")
        return w

    def alpha_bar(self, t_prime: float) -> float:
        return 1.0 - (1.0 - self.alpha_bar_min) * (t_prime / self.horizon)

    def sigma(self, t_prime: float) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar(t_prime)))

    def draw_level(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.t_min, self.t_max) * self.horizon)

    def draw_flow_level(self, rng: np.random.Generator) -> float:
        """t' for the flow score term: U(max(t_min, flow_t_min), t_max) * T."""
        low = min(max(self.t_min, self.flow_t_min), self.t_max)
        return float(rng.uniform(low, self.t_max) * self.horizon)


# ============================================================
#  ORACLES
# ============================================================

class ScoreOracle(ABC):
    """epsilon-predictor at a requested noise level; frames and output share one shape."""
    serialized = False

    def __init__(self, config: GuidanceConfig):
        self.config = config

    @abstractmethod
    def predict_eps(self, frames: np.ndarray, t_prime: float, condition: Optional[str]) -> np.ndarray:
        ...

    def score_jvp(self, frames: np.ndarray, v: np.ndarray, t_prime: float) -> np.ndarray:
        """(d score / dX) v, with the denoiser Jacobian dropped: -v / sigma^2."""
        return -np.asarray(v, dtype=np.float64) / self.config.sigma(t_prime) ** 2

    def __call__(self, frames, t_prime, condition=None):
        eps = np.asarray(self.predict_eps(frames, t_prime, condition), dtype=np.float64)
        if eps.shape != np.shape(frames):
            raise OracleError(f"oracle returned shape {eps.shape} for input {np.shape(frames)}",
                              where=f"t'={t_prime:.4f}")
        if not np.all(np.isfinite(eps)):
            raise OracleError("oracle returned non-finite values", where=f"t'={t_prime:.4f}")
        return eps


_ORACLES: Dict[str, type] = {}


def register_oracle(cls=None, *, name=None):
    """Decorator registering an oracle class under a selection name."""

    def _register(cls):
        local_name = cls.__name__ if name is None else name
        if local_name in _ORACLES:
            raise ValueError(f"Already registered oracle with name: {local_name}")
        _ORACLES[local_name] = cls
        return cls

    return _register if cls is None else _register(cls)


def get_oracle(name: str) -> type:
    try:
        return _ORACLES[name]
    except KeyError:
        raise GuidanceError(f"unknown oracle '{name}'",
                            hint=f"choose one of: {', '.join(sorted(_ORACLES))}") from None


@register_oracle(name="gaussian")
class GaussianAnalytic(ScoreOracle):
    """Closed-form oracle for N(mean, cov) over flattened frames, used as the marginal at every level.

    score(x) = -cov^{-1}(x - mean) and eps_hat = -sigma(t') score(x).
    """

    def __init__(self, config: GuidanceConfig, mean: np.ndarray, cov=None):
        super().__init__(config)
        self.mean = np.asarray(mean, dtype=np.float64)
        d = self.mean.size
        if cov is None:
            self.precision = None
        else:
            cov = np.asarray(cov, dtype=np.float64)
            if cov.ndim == 1:
                cov = np.diag(cov)
            if cov.shape != (d, d):
                raise GuidanceError(f"covariance must be ({d}, {d}), got {cov.shape}")
            self.precision = np.linalg.inv(cov)

    def score(self, frames: np.ndarray) -> np.ndarray:
        diff = (np.asarray(frames, dtype=np.float64) - self.mean).reshape(-1)
        s = -diff if self.precision is None else -(self.precision @ diff)
        return s.reshape(np.shape(frames))

    def score_jvp(self, frames, v, t_prime):
        v = np.asarray(v, dtype=np.float64)
        if self.precision is None:
            return -v
        return -(self.precision @ v.reshape(-1)).reshape(v.shape)

    def predict_eps(self, frames, t_prime, condition):
        return -self.config.sigma(t_prime) * self.score(frames)


@register_oracle(name="teacher")
class TeacherOracle(ScoreOracle):
    """eps_hat = (z - sqrt(abar) X_ref) / sigma: the exact noise that denoises toward a fixed clip."""

    def __init__(self, config: GuidanceConfig, reference: np.ndarray):
        super().__init__(config)
        self.reference = np.asarray(reference, dtype=np.float64)

    def predict_eps(self, frames, t_prime, condition):
        if np.shape(frames) != self.reference.shape:
            raise OracleError(f"teacher clip has shape {self.reference.shape}, got {np.shape(frames)}")
        abar = self.config.alpha_bar(t_prime)
        return (frames - np.sqrt(abar) * self.reference) / self.config.sigma(t_prime)


@register_oracle(name="remote")
class RemoteDenoiser(ScoreOracle):
    """HTTP client for an external denoiser (POST /v1/denoise). Calls are serialized."""
    serialized = True

    def __init__(self, config: GuidanceConfig, url: str, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5, session: Optional[requests.Session] = None):
        super().__init__(config)
        self.url = url.rstrip("/") + "/v1/denoise"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self._lock = threading.Lock()

    @staticmethod
    def encode(frames: np.ndarray) -> str:
        return base64.b64encode(np.ascontiguousarray(frames, dtype="<f4").tobytes()).decode("ascii")

    @staticmethod
    def decode(payload: str, shape) -> np.ndarray:
        raw = base64.b64decode(payload)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)

    def predict_eps(self, frames, t_prime, condition):
        frames = np.asarray(frames)
        if frames.ndim != 4:
            raise OracleError(f"remote denoiser expects (N, H, W, C) frames, got {frames.shape}")
        body = {
            "frames": self.encode(frames),
            "shape": list(frames.shape),
            "noise_level": float(t_prime),
            "prompt": condition,
        }
        headers = {PROTOCOL_HEADER: PROTOCOL_VERSION}
        last_error = None
        with self._lock:
            for attempt in range(1, self.retries + 1):
                try:
                    resp = self.session.post(self.url, json=body, headers=headers, timeout=self.timeout)
                    resp.raise_for_status()
                    data = resp.json()
                    shape = tuple(data["shape"])
                    if shape != frames.shape:
                        raise OracleError(f"remote returned shape {shape}, sent {frames.shape}")
                    return self.decode(data["eps_hat"], shape)
                except (requests.RequestException, KeyError, ValueError) as e:
                    last_error = e
                    logger.warning("remote denoiser attempt %d/%d failed: %s", attempt, self.retries, e)
                    if attempt < self.retries:
                        time.sleep(self.backoff * attempt)
        raise OracleError(f"remote denoiser unreachable after {self.retries} attempts: {last_error}",
                          where=self.url)


def make_oracle(selection: str, config: GuidanceConfig, **resources) -> ScoreOracle:
    """Resolve "gaussian", "teacher" or "remote:<url>" into an oracle.

    resources: `mean` for gaussian, `reference` for teacher, `timeout` / `retries` for remote.
    """
    name, _, arg = selection.partition(":")
    cls = get_oracle(name)
    if cls is GaussianAnalytic:
        return cls(config, resources["mean"], resources.get("cov"))
    if cls is TeacherOracle:
        return cls(config, resources["reference"])
    if not arg:
        raise GuidanceError("remote oracle needs a URL", hint="use remote:<url>")
    return cls(config, arg, timeout=resources.get("timeout", 30.0), retries=resources.get("retries", 3))


# ============================================================
#  GUIDANCE
# ============================================================

def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """(1 + s) eps_cond - s eps_uncond."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise GuidanceError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    return (1.0 + s) * eps_cond - s * eps_uncond


def guided_eps(oracle: ScoreOracle, z: np.ndarray, t_prime: float, condition: Optional[str],
               s: float) -> np.ndarray:
    eps_cond = oracle(z, t_prime, condition)
    if s == 0.0:
        return eps_cond
    return cfg_combine(eps_cond, oracle(z, t_prime, None), s)


@dataclass
class SDSResult:
    gradient: np.ndarray
    value: float                 # mean of w(t') ||eps_hat - eps||^2 per element
    levels: Tuple[float, ...]


def sds_gradient(frames: np.ndarray, oracle: ScoreOracle, config: GuidanceConfig,
                 rng: np.random.Generator, condition: Optional[str] = None,
                 samples: Optional[int] = None) -> SDSResult:
    """Monte-Carlo SDS gradient w.r.t. frames; the denoiser Jacobian is omitted.

    Per sample: w(t') sqrt(abar) (eps_hat - eps), averaged over samples.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise GuidanceError("non-finite frames passed to SDS")
    n = config.samples if samples is None else samples
    grad = np.zeros_like(frames)
    value = 0.0
    levels = []
    for _ in range(n):
        t_prime = config.draw_level(rng)
        eps = rng.standard_normal(frames.shape)
        abar = config.alpha_bar(t_prime)
        z = np.sqrt(abar) * frames + config.sigma(t_prime) * eps
        try:
            eps_hat = guided_eps(oracle, z, t_prime, condition, config.guidance_scale)
        except OracleError as e:
            raise OracleError(e.message, where=f"t'={t_prime:.4f}") from e
        w = config.weight(t_prime)
        residual = eps_hat - eps
        grad += w * np.sqrt(abar) * residual
        value += w * float(np.mean(residual ** 2))
        levels.append(t_prime)
    return SDSResult(grad / n, value / n, tuple(levels))


def score_from_oracle(frames: np.ndarray, t_prime: float, oracle: ScoreOracle,
                      condition: Optional[str] = None) -> np.ndarray:
    """grad_X log p_t'(X) = -eps_hat / sigma(t')."""
    if not 0 < t_prime <= oracle.config.horizon:
        raise GuidanceError(f"noise level must lie in (0, {oracle.config.horizon}], got {t_prime}")
    sigma = oracle.config.sigma(t_prime)
    return -oracle(frames, t_prime, condition) / sigma


@dataclass
class FlowResult:
    value: float
    score_term: float
    penalty_term: float
    grad_total_frames: np.ndarray
    grad_spatial_frames: np.ndarray
    grad_total_jac: np.ndarray
    grad_spatial_jac: np.ndarray


def flow_matching_loss(frames_total: np.ndarray, frames_spatial: np.ndarray,
                       J: np.ndarray, J_P: np.ndarray, oracle: ScoreOracle,
                       config: GuidanceConfig, rng: np.random.Generator,
                       condition: Optional[str] = None,
                       samples: Optional[int] = None) -> FlowResult:
    """E_t' ||score(X_J) - score(X_JP)||^2 + E_t ||J_t - J^P_t||^2.

    Scores are taken on the clean rendered clips; the score term scores the whole clip jointly.
    t' is drawn above `flow_t_min`. Frame gradients go through `oracle.score_jvp`; the score
    Jacobian is the same at both clips for every built-in oracle.
    """
    frames_total = np.asarray(frames_total, dtype=np.float64)
    frames_spatial = np.asarray(frames_spatial, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    J_P = np.asarray(J_P, dtype=np.float64)
    if frames_total.shape != frames_spatial.shape:
        raise GuidanceError(f"frame stacks differ: {frames_total.shape} vs {frames_spatial.shape}")
    if J.shape != J_P.shape:
        raise GuidanceError(f"Jacobian stacks differ: {J.shape} vs {J_P.shape}")
    if len(J) != len(frames_total):
        raise GuidanceError(f"{len(frames_total)} frames but {len(J)} Jacobian fields")

    n = config.samples if samples is None else samples
    score_term = 0.0
    g_total = np.zeros_like(frames_total)
    if not np.array_equal(frames_total, frames_spatial):
        for _ in range(n):
            t_prime = config.draw_flow_level(rng)
            diff = (score_from_oracle(frames_total, t_prime, oracle, condition)
                    - score_from_oracle(frames_spatial, t_prime, oracle, condition))
            score_term += float(np.sum(diff ** 2))
            g_total += 2.0 * oracle.score_jvp(frames_total, diff, t_prime)
        score_term /= n
        g_total /= n

    dJ = J - J_P
    frames = len(J)
    penalty = float(np.sum(dJ ** 2)) / frames
    g_jac = 2.0 * dJ / frames
    return FlowResult(score_term + penalty, score_term, penalty,
                      g_total, -g_total, g_jac, -g_jac)


def total_loss(sds_term: float, flow_term: float, weight: float) -> float:
    """L_SDS + lambda L_flow."""
    if weight < 0:
        raise GuidanceError(f"loss weight must be >= 0, got {weight}")
    return sds_term + weight * flow_term
