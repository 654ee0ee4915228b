# src/config.py
"""Run configuration: defaults, flat key = value files, CLI overrides and validation."""
import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Mapping, Optional

from errors import InputError

logger = logging.getLogger(__name__)

SEED_ENV = "FLEXMESH_SEED"


class ConfigError(InputError):
    label = "Config Error"


@dataclass(frozen=True)
class RunConfig:
    mesh: Optional[str] = None
    image: Optional[str] = None
    prompt: Optional[str] = None
    frames: int = 24
    steps: int = 700
    lr: float = 0.5
    guidance_scale: float = 50.0
    loss_weight: float = 15.0
    constraint_weight: float = 1000.0
    window: int = 6
    oracle: str = "gaussian"
    seed: int = 0
    out_dir: str = "out"

    render_size: int = 64
    lr_reference_size: float = 256.0
    lr_final_fraction: float = 0.1
    motion_scale: float = 0.5
    use_temporal: bool = True
    rest_iterations: int = 10000
    rest_step: float = 0.01
    rest_init_noise: float = 0.05
    rest_checkpoint: Optional[str] = None
    fps: float = 8.0
    sds_samples: int = 1
    t_min: float = 0.02
    t_max: float = 0.98
    flow_t_min: float = 0.5         # lowest t' seen by the flow score term
    timeout: float = 30.0
    retries: int = 3
    workers: int = 0

    particles: int = 50000
    pfode_steps: int = 200
    pfode_rates: str = "1"          # comma-separated diagonal of C(t) = rates * t
    fault_injection: float = 1.0    # dC/dt scale used by the dynamics, 1 = consistent

    @property
    def effective_lr(self) -> float:
        """Initial Adam step in normalized coordinates."""
        return self.lr / self.lr_reference_size

    @property
    def rest_checkpoint_path(self) -> Path:
        return Path(self.rest_checkpoint) if self.rest_checkpoint else Path(self.out_dir) / "rest.ckpt"


_FIELDS = {f.name: f for f in fields(RunConfig)}

# (key, predicate, description)
_CHECKS = [
    ("frames", lambda v: v >= 3, ">= 3"),
    ("steps", lambda v: v >= 0, ">= 0"),
    ("lr", lambda v: v > 0, "> 0"),
    ("guidance_scale", lambda v: v >= 0, ">= 0"),
    ("loss_weight", lambda v: v >= 0, ">= 0"),
    ("constraint_weight", lambda v: v > 0, "> 0"),
    ("window", lambda v: v >= 1, ">= 1"),
    ("render_size", lambda v: v >= 8, ">= 8"),
    ("lr_reference_size", lambda v: v > 0, "> 0"),
    ("lr_final_fraction", lambda v: 0 < v <= 1, "in (0, 1]"),
    ("motion_scale", lambda v: v > 0, "> 0"),
    ("rest_iterations", lambda v: v >= 1, ">= 1"),
    ("rest_step", lambda v: v > 0, "> 0"),
    ("rest_init_noise", lambda v: v >= 0, ">= 0"),
    ("fps", lambda v: v > 0, "> 0"),
    ("sds_samples", lambda v: v >= 1, ">= 1"),
    ("t_min", lambda v: 0 < v < 1, "in (0, 1)"),
    ("t_max", lambda v: 0 < v <= 1, "in (0, 1]"),
    ("flow_t_min", lambda v: 0 <= v <= 1, "in [0, 1]"),
    ("timeout", lambda v: v > 0, "> 0"),
    ("retries", lambda v: v >= 1, ">= 1"),
    ("workers", lambda v: v >= 0, ">= 0"),
    ("particles", lambda v: v > 10, "> 10"),
    ("pfode_steps", lambda v: v >= 1, ">= 1"),
    ("fault_injection", lambda v: v >= 0, ">= 0"),
]


def _normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def _coerce(key: str, raw, where: str):
    field = _FIELDS[key]
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", str(field.type))
    if raw is None:
        return None
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for '{key}' (expected {kind})", where=where) from None
    return text or None


def load_config_file(path) -> Dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment; keys may be kebab- or snake-case."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError("config file not found", where=str(path)) from e
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e.strerror}", where=str(path)) from e

    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", where=f"{path}:{lineno}")
        key, value = line.split("=", 1)
        key = _normalize_key(key)
        if key not in _FIELDS:
            raise ConfigError(f"unknown key '{key}'", where=f"{path}:{lineno}")
        values[key] = _coerce(key, value, f"{path}:{lineno}")
    logger.debug("read %d setting(s) from %s", len(values), path)
    return values


def validate(config: RunConfig) -> RunConfig:
    for key, check, desc in _CHECKS:
        value = getattr(config, key)
        if not check(value):
            raise ConfigError(f"'{key}' must be {desc}, got {value}")
    if config.t_min >= config.t_max:
        raise ConfigError(f"'t_min' must be below 't_max', got {config.t_min} >= {config.t_max}")
    name = config.oracle.partition(":")[0]
    if name not in ("gaussian", "teacher", "remote"):
        raise ConfigError(f"unknown oracle '{config.oracle}'",
                          hint="use gaussian, teacher:<trajectory.json> or remote:<url>")
    if name != "gaussian" and not config.oracle.partition(":")[2]:
        raise ConfigError(f"oracle '{name}' needs an argument", hint=f"use {name}:<...>")
    return config


def build_config(file_values: Optional[Mapping] = None, overrides: Optional[Mapping] = None,
                 env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults < config file < CLI flags; FLEXMESH_SEED applies when no seed was given."""
    env = os.environ if env is None else env
    merged = {}
    for source, where in ((file_values or {}, "config file"), (overrides or {}, "command line")):
        for key, value in source.items():
            key = _normalize_key(key)
            if key not in _FIELDS:
                raise ConfigError(f"unknown key '{key}'", where=where)
            if value is not None:
                merged[key] = _coerce(key, value, where)
    if "seed" not in merged and env.get(SEED_ENV):
        merged["seed"] = _coerce("seed", env[SEED_ENV], SEED_ENV)
    return validate(replace(RunConfig(), **merged))


def require_paths(config: RunConfig, *keys: str):
    """Fail fast when an input file named by the config is missing."""
    for key in keys:
        value = getattr(config, key)
        if value is None:
            raise ConfigError(f"'{key}' is required for this command", hint=f"pass --{key.replace('_', '-')}")
        if not Path(value).exists():
            raise ConfigError(f"{key} file not found", where=str(value))


def pfode_rates(config: RunConfig):
    try:
        return [float(r) for r in config.pfode_rates.split(",")]
    except ValueError:
        raise ConfigError(f"invalid pfode_rates {config.pfode_rates!r}",
                          hint="comma-separated numbers, e.g. 1,2") from None
