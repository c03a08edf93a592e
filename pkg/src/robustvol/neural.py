"""One-hidden-layer networks with layer normalization, trained by Adam.

The forward map is

    u = (x - input_shift) / input_scale
    h = u @ W1 + b1
    n = (h - mean(h)) / sqrt(var(h) + eps)      (over the hidden units)
    y = ELU(ln_gain * n + ln_bias) @ W2 + b2

Gradients are written out by hand; everything is float64.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-12
TRAINABLE = ("W1", "b1", "ln_gain", "ln_bias", "W2", "b2")

CHECKPOINT_MAGIC = b"RVCK"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    input_shift: np.ndarray
    input_scale: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.input_scale) <= 0):
            raise ValueError("input_scale must be strictly positive")
        if self.W1.shape[1] < 1:
            raise ValueError("hidden layer needs at least one unit")

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, k))) for k in TRAINABLE)


def init_mlp(in_dim: int, out_dim: int, hidden_dim: int = 32, rng=None,
             input_shift=None, input_scale=None) -> MlpParams:
    """Glorot-uniform weights, unit layer-norm gain.

    The first-layer bias is drawn from the same symmetric range rather than
    zeroed: with a constant input (all states equal at t=0) a zero bias
    would leave the layer norm with nothing to normalize.
    """
    rng = np.random.default_rng(rng)
    b_in = np.sqrt(6.0 / (in_dim + hidden_dim))
    b_out = np.sqrt(6.0 / (hidden_dim + out_dim))
    return MlpParams(
        W1=rng.uniform(-b_in, b_in, (in_dim, hidden_dim)),
        b1=rng.uniform(-b_in, b_in, hidden_dim),
        ln_gain=np.ones(hidden_dim),
        ln_bias=np.zeros(hidden_dim),
        W2=rng.uniform(-b_out, b_out, (hidden_dim, out_dim)),
        b2=np.zeros(out_dim),
        input_shift=np.zeros(in_dim) if input_shift is None else np.asarray(input_shift, dtype=float).copy(),
        input_scale=np.ones(in_dim) if input_scale is None else np.asarray(input_scale, dtype=float).copy(),
    )


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def layer_norm(h):
    mu = h.mean(axis=-1, keepdims=True)
    c = h - mu
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + LN_EPS)
    return c * inv, inv


@dataclass
class ForwardCache:
    u: np.ndarray
    n: np.ndarray
    inv_std: np.ndarray
    pre: np.ndarray
    act: np.ndarray


def _as_batch(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"expected inputs of width {params.in_dim}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    return x


def forward(params: MlpParams, x, return_cache: bool = False):
    x = _as_batch(params, x)
    u = (x - params.input_shift) / params.input_scale
    h = u @ params.W1 + params.b1
    n, inv = layer_norm(h)
    pre = params.ln_gain * n + params.ln_bias
    act = elu(pre)
    y = act @ params.W2 + params.b2
    if return_cache:
        return y, ForwardCache(u, n, inv, pre, act)
    return y


def backward(params: MlpParams, x, upstream, cache: ForwardCache | None = None) -> dict:
    """Gradients of ``sum(upstream * forward(params, x))`` w.r.t. trainable arrays."""
    if cache is None:
        _, cache = forward(params, x, return_cache=True)
    g = np.asarray(upstream, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache.u.shape[0], params.out_dim):
        raise ValueError(f"upstream gradient shape {g.shape} does not match outputs")
    grads = {"W2": cache.act.T @ g, "b2": g.sum(axis=0)}
    g_act = g @ params.W2.T
    g_pre = g_act * np.where(cache.pre > 0, 1.0, cache.act + 1.0)
    grads["ln_gain"] = (g_pre * cache.n).sum(axis=0)
    grads["ln_bias"] = g_pre.sum(axis=0)
    g_n = g_pre * params.ln_gain
    g_h = cache.inv_std * (g_n - g_n.mean(axis=-1, keepdims=True)
                           - cache.n * (g_n * cache.n).mean(axis=-1, keepdims=True))
    grads["W1"] = cache.u.T @ g_h
    grads["b1"] = g_h.sum(axis=0)
    return grads


@dataclass
class AdamState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, **kw) -> "AdamState":
        return cls({k: np.zeros_like(getattr(params, k)) for k in TRAINABLE},
                   {k: np.zeros_like(getattr(params, k)) for k in TRAINABLE}, **kw)


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(params: MlpParams, grads: dict, state: AdamState, lr: float) -> tuple[MlpParams, AdamState]:
    """In-place bias-corrected Adam descent step; returns ``(params, state)``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k in TRAINABLE:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k in TRAINABLE:
        m = state.first_moment[k]
        v = state.second_moment[k]
        g = grads[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p = getattr(params, k)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
    return params, state


def transfer_init(source: MlpParams) -> MlpParams:
    return source.copy()


def renormalize(params: MlpParams, shift, scale) -> MlpParams:
    """Switch the input normalization without changing the function.

    The first layer absorbs the change: with ``u_old = (s_new u_new + m_new - m_old) / s_old``
    the weights become ``W1 * s_new / s_old`` and the bias picks up the shift.
    """
    shift = np.asarray(shift, dtype=float)
    scale = np.asarray(scale, dtype=float)
    ratio = scale / params.input_scale
    offset = (shift - params.input_shift) / params.input_scale
    out = params.copy()
    out.b1 = params.b1 + offset @ params.W1
    out.W1 = params.W1 * ratio[:, None]
    out.input_shift = shift.copy()
    out.input_scale = scale.copy()
    return out


# -- checkpoints -------------------------------------------------------------
# Layout: magic(4) | version u16 LE | header length u32 LE | JSON header | float64 LE payload.
# The payload is the concatenation of the arrays listed in header["arrays"], each C-ordered.

_ARRAY_ORDER = TRAINABLE + ("input_shift", "input_scale")


def params_to_bytes(params: MlpParams, meta: dict | None = None) -> bytes:
    header = {
        "in_dim": params.in_dim,
        "hidden_dim": params.hidden_dim,
        "out_dim": params.out_dim,
        "ordering": "robustvol-mlp-v1",
        "byteorder": "little",
        "arrays": [[k, list(getattr(params, k).shape)] for k in _ARRAY_ORDER],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(getattr(params, k), dtype="<f8").tobytes() for k in _ARRAY_ORDER)
    return CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(raw)) + raw + payload


def params_from_bytes(blob: bytes) -> tuple[MlpParams, dict]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[10:10 + hlen])
    offset = 10 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset += 8 * count
    if offset != len(blob):
        raise ValueError("checkpoint payload length mismatch")
    return MlpParams(**arrays), header.get("meta", {})


def save_params(path, params: MlpParams, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params, meta))


def load_params(path) -> tuple[MlpParams, dict]:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


@dataclass
class Trainable:
    """A network bundled with its optimizer state."""

    params: MlpParams
    adam: AdamState = field(default=None)

    def __post_init__(self):
        if self.adam is None:
            self.adam = AdamState.zeros_like(self.params)

    def __call__(self, x):
        return forward(self.params, x)

    def step(self, grads: dict, lr: float) -> None:
        adam_step(self.params, grads, self.adam, lr)
