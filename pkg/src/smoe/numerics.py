"""Dense kernels used by every other module.

Tensors are plain ``numpy.ndarray`` objects (row-major, float32 by default,
float64 for gradient verification). Each kernel checks its output for
non-finite values and raises instead of letting NaN/Inf propagate.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DegenerateDistributionError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
RMS_EPS = 1e-5
ROPE_BASE = 10000.0

_DTYPES = {"f32": np.float32, "f64": np.float64}


def dtype_for(precision: str) -> type:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r}; expected one of {sorted(_DTYPES)}") from None


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes, with shape checking."""
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul output")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; ``-inf`` entries receive weight exactly 0."""
    top = np.max(logits, axis=axis, keepdims=True)
    # NaN and +inf both surface in the row max
    if np.any(np.isnan(top)) or np.any(top == np.inf):
        raise NumericError("softmax input contains NaN or +inf")
    if np.any(top == -np.inf):
        raise DegenerateDistributionError("every entry along the softmax axis is -inf")
    e = np.exp(logits - top)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    top = np.max(logits, axis=axis, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: never overflows and is several times faster than exp-based variants
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    check_finite(x, "silu input")
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of ``silu`` evaluated at ``x``."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    if x.shape[-1] != gain.shape[-1]:
        raise DimensionError(f"rmsnorm gain has length {gain.shape[-1]}, input has {x.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) if eps > 0 else _safe_inv_rms(x)
    return check_finite(x * inv * gain, "rmsnorm output")


def _safe_inv_rms(x: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        inv = np.where(ms > 0, 1.0 / np.sqrt(np.where(ms > 0, ms, 1.0)), 0.0)
    return inv.astype(x.dtype, copy=False)


def rope_tables(positions: np.ndarray, head_dim: int, base: float = ROPE_BASE,
                dtype=DEFAULT_DTYPE) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [len(positions), head_dim // 2]."""
    if head_dim % 2:
        raise ConfigError(f"rotary embedding needs an even head_dim, got {head_dim}")
    freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` of ``x[..., seq, heads, head_dim]``.

    ``inverse=True`` applies the transpose rotation, which is also the
    backward pass of the forward rotation.
    """
    c = cos[:, None, :]
    s = -sin[:, None, :] if inverse else sin[:, None, :]
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


def rope_rotate(x: np.ndarray, positions, base: float = ROPE_BASE) -> np.ndarray:
    """Rotary position embedding for ``x`` of shape [seq, heads, head_dim]."""
    if x.ndim != 3:
        raise DimensionError(f"rope_rotate expects [seq, heads, head_dim], got {x.shape}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0],):
        raise DimensionError("one position per sequence row is required")
    cos, sin = rope_tables(positions, x.shape[-1], base, dtype=x.dtype)
    return check_finite(apply_rotary(x, cos, sin), "rope output")
