# src/nnkit.py
"""Small neural toolkit: MLPs, multi-head attention, Adam and hand-written backward passes.

Every forward returns a tape that its matching backward consumes; there is no general
graph autodiff.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from errors import InputError, NumericError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


class NNError(NumericError):
    label = "NN Error"


class CheckpointError(InputError):
    label = "Checkpoint Error"


# ============================================================
#  PARAMETER STORE
# ============================================================

class ParamStore:
    """Named float64 arrays with fixed shapes plus Adam moment buffers."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise NNError(f"parameter '{name}' already exists")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.params[name]
        except KeyError:
            raise NNError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def shapes(self) -> Dict[str, tuple]:
        return {n: p.shape for n, p in self.params.items()}

    def zeros_like(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {n: np.zeros_like(self.params[n]) for n in self.names(prefix)}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for name, value in arrays.items():
            if name not in self.params:
                continue
            if value.shape != self.params[name].shape:
                raise CheckpointError(
                    f"shape mismatch for '{name}': checkpoint {value.shape}, model {self.params[name].shape}"
                )
            self.params[name][...] = value


def accumulate(total: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
    for name, g in grads.items():
        if name in total:
            total[name] += g
        else:
            total[name] = g.copy()


# ============================================================
#  MLP
# ============================================================

class MLPSpec(NamedTuple):
    prefix: str
    sizes: Tuple[int, ...]          # (in, hidden..., out); len(sizes) - 1 linear layers

    @property
    def layers(self) -> int:
        return len(self.sizes) - 1


def init_mlp(store: ParamStore, spec: MLPSpec, rng: np.random.Generator, zero_last: bool = False):
    for i in range(spec.layers):
        fan_in, fan_out = spec.sizes[i], spec.sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        if zero_last and i == spec.layers - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        store.add(f"{spec.prefix}.w{i}", w)
        store.add(f"{spec.prefix}.b{i}", np.zeros(fan_out))


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def mlp_forward(store: ParamStore, spec: MLPSpec, x: np.ndarray):
    """LeakyReLU on hidden layers, linear output. x: (B, in) or (in,)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != spec.sizes[0]:
        raise NNError(f"{spec.prefix}: input width {h.shape[-1]}, expected {spec.sizes[0]}")

    tape = []
    for i in range(spec.layers):
        w = store[f"{spec.prefix}.w{i}"]
        b = store[f"{spec.prefix}.b{i}"]
        if w.shape != (spec.sizes[i], spec.sizes[i + 1]):
            raise NNError(f"{spec.prefix}.w{i} has shape {w.shape}, spec wants "
                          f"{(spec.sizes[i], spec.sizes[i + 1])}")
        pre = h @ w + b
        tape.append((h, pre))
        h = leaky_relu(pre) if i < spec.layers - 1 else pre
    return (h[0] if squeeze else h), (squeeze, tape)


def mlp_backward(store: ParamStore, spec: MLPSpec, tape, grad_out: np.ndarray):
    """Returns (parameter grads, input grad)."""
    squeeze, layers = tape
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None, :] if squeeze else g
    grads = {}
    for i in reversed(range(spec.layers)):
        h, pre = layers[i]
        if i < spec.layers - 1:
            g = g * np.where(pre > 0, 1.0, LEAKY_SLOPE)
        grads[f"{spec.prefix}.w{i}"] = h.T @ g
        grads[f"{spec.prefix}.b{i}"] = g.sum(axis=0)
        g = g @ store[f"{spec.prefix}.w{i}"].T
    return grads, (g[0] if squeeze else g)


# ============================================================
#  MULTI-HEAD ATTENTION (MEAN-POOLED)
# ============================================================

class AttentionSpec(NamedTuple):
    prefix: str
    dim_in: int
    dim_out: int
    heads: int = 2
    dim_kv: int = 32


def init_attention(store: ParamStore, spec: AttentionSpec, rng: np.random.Generator):
    width = spec.heads * spec.dim_kv
    for proj in ("q", "k", "v"):
        bound = 1.0 / np.sqrt(spec.dim_in)
        store.add(f"{spec.prefix}.w{proj}", rng.uniform(-bound, bound, size=(spec.dim_in, width)))
        store.add(f"{spec.prefix}.b{proj}", np.zeros(width))
    bound = 1.0 / np.sqrt(width)
    store.add(f"{spec.prefix}.wo", rng.uniform(-bound, bound, size=(width, spec.dim_out)))
    store.add(f"{spec.prefix}.bo", np.zeros(spec.dim_out))


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, width = x.shape
    return x.reshape(n, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dk)


def attention_forward(store: ParamStore, spec: AttentionSpec, tokens: np.ndarray):
    """Scaled dot-product self-attention over tokens (n, dim_in), mean-pooled to (dim_out,)."""
    X = np.asarray(tokens, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise NNError(f"{spec.prefix}: attention needs at least one token, got shape {X.shape}")
    if X.shape[1] != spec.dim_in:
        raise NNError(f"{spec.prefix}: token width {X.shape[1]}, expected {spec.dim_in}")

    p = spec.prefix
    Q = _split_heads(X @ store[f"{p}.wq"] + store[f"{p}.bq"], spec.heads)
    K = _split_heads(X @ store[f"{p}.wk"] + store[f"{p}.bk"], spec.heads)
    V = _split_heads(X @ store[f"{p}.wv"] + store[f"{p}.bv"], spec.heads)
    scale = 1.0 / np.sqrt(spec.dim_kv)
    A = softmax(Q @ K.transpose(0, 2, 1) * scale)        # (H, n, n)
    O = _merge_heads(A @ V)                               # (n, H*dk)
    Y = O @ store[f"{p}.wo"] + store[f"{p}.bo"]
    tape = (X, Q, K, V, A, O)
    return Y.mean(axis=0), tape


def attention_backward(store: ParamStore, spec: AttentionSpec, tape, grad_out: np.ndarray):
    X, Q, K, V, A, O = tape
    p = spec.prefix
    n = len(X)
    scale = 1.0 / np.sqrt(spec.dim_kv)

    gY = np.broadcast_to(np.asarray(grad_out, dtype=np.float64) / n, (n, spec.dim_out))
    grads = {f"{p}.wo": O.T @ gY, f"{p}.bo": gY.sum(axis=0)}
    gO = _split_heads(gY @ store[f"{p}.wo"].T, spec.heads)           # (H, n, dk)

    gA = gO @ V.transpose(0, 2, 1)
    gV = A.transpose(0, 2, 1) @ gO
    gS = A * (gA - np.sum(gA * A, axis=-1, keepdims=True))
    gQ = gS @ K * scale
    gK = gS.transpose(0, 2, 1) @ Q * scale

    gX = np.zeros_like(X)
    for proj, g in (("q", gQ), ("k", gK), ("v", gV)):
        flat = _merge_heads(g)
        grads[f"{p}.w{proj}"] = X.T @ flat
        grads[f"{p}.b{proj}"] = flat.sum(axis=0)
        gX += flat @ store[f"{p}.w{proj}"].T
    return grads, gX


# ============================================================
#  ADAM
# ============================================================

def adam_step(store: ParamStore, grads: Dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    for name, g in grads.items():
        if name not in store:
            raise NNError(f"gradient for unknown parameter '{name}'")
        if g.shape != store.params[name].shape:
            raise NNError(f"gradient shape {g.shape} does not match parameter {store.params[name].shape}",
                          where=name)
        if not np.all(np.isfinite(g)):
            raise NNError("non-finite gradient", where=name)

    store.step += 1
    t = store.step
    for name in sorted(grads):
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        store.params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(store.params[name])):
            raise NNError("parameter became non-finite after Adam step", where=name)


# ============================================================
#  CHECKPOINTS
# ============================================================

_MAGIC = b"FLXMESH\0"
_VERSION = 1


def save_checkpoint(path, arrays: Dict[str, np.ndarray]):
    """Named float64 arrays, little-endian, names sorted so equal inputs give equal bytes."""
    chunks = [_MAGIC, struct.pack("<HI", _VERSION, len(arrays))]
    for name in sorted(arrays):
        value = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    path = Path(path)
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint: {e.strerror}", where=str(path)) from e


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e.strerror}", where=str(path)) from e
    if not data.startswith(_MAGIC):
        raise CheckpointError("not a flexmesh checkpoint (bad magic)", where=str(path))

    try:
        pos = len(_MAGIC)
        version, count = struct.unpack_from("<HI", data, pos)
        pos += struct.calcsize("<HI")
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}", where=str(path))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            value = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            arrays[name] = value.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint: {e}", where=str(path)) from e
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes", where=str(path))
    return arrays
