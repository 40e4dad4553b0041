"""Dense-tensor primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` values (row-major, finite reals).
Every forward that needs saved state for its backward returns it
explicitly; the matching ``*_bwd`` function consumes that state.  All
functions are pure except for RNG consumption, so they are safe to call
concurrently on disjoint data.

Randomness comes from numpy's Philox generator, a counter-based 64-bit
seedable PRNG whose output stream is identical across platforms for a
given seed.  Independent streams are derived from a master seed with a
splitmix64-style hash over (seed, label); see :func:`derive_seed`.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, NormalizationError, StateError

Array = np.ndarray

_MASK64 = (1 << 64) - 1

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded counter-based generator (Philox); identical stream everywhere."""
    return np.random.Generator(np.random.Philox(seed & _MASK64))


def derive_seed(seed: int, label: str) -> int:
    """Derive an independent child seed from (seed, label).

    FNV-1a over the label bytes is mixed into the seed, then passed
    through the splitmix64 finalizer.  Distinct labels give statistically
    independent streams; the mapping is fixed so runs are reproducible.
    """
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    z = ((seed & _MASK64) ^ h) & _MASK64
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def linear_fwd(x: Array, W: Array, b: Array) -> Array:
    """Affine map: out[i, j] = sum_k W[j, k] * x[i, k] + b[j]."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"linear: expected x[n,d_in], W[d_out,d_in], b[d_out]; got "
            f"x{x.shape}, W{W.shape}, b{b.shape}"
        )
    if x.shape[1] != W.shape[1]:
        raise DimensionError(
            f"linear: x has width {x.shape[1]} but W{W.shape} expects {W.shape[1]}"
        )
    if b.shape[0] != W.shape[0]:
        raise DimensionError(
            f"linear: b has width {b.shape[0]} but W{W.shape} produces {W.shape[0]}"
        )
    return x @ W.T + b


def linear_bwd(dout: Array, x: Array, W: Array) -> tuple[Array, Array, Array]:
    """Gradients of ``linear_fwd``: returns (dx, dW, db)."""
    dx = dout @ W
    dW = dout.T @ x
    db = dout.sum(axis=0)
    return dx, dW, db


# ---------------------------------------------------------------------------
# layer normalization
# ---------------------------------------------------------------------------

def layernorm_fwd(
    x: Array, gamma: Array, beta: Array, eps: float = 1e-5
) -> tuple[Array, tuple]:
    """Per-row normalization (population variance) with affine scale/shift.

    Returns (out, ctx); pass ctx to :func:`layernorm_bwd`.  A constant row
    is kept finite by eps alone, no special-casing.
    """
    if eps <= 0:
        raise ConfigError(f"layernorm: eps must be positive, got {eps}")
    if x.shape[-1] != gamma.shape[0] or x.shape[-1] != beta.shape[0]:
        raise DimensionError(
            f"layernorm: x{x.shape} vs gamma{gamma.shape}, beta{beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma)


def layernorm_bwd(dout: Array, ctx: tuple) -> tuple[Array, Array, Array]:
    """Full Jacobian-vector product of layer norm: (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma = ctx
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu_fwd(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_bwd(dout: Array, x: Array) -> Array:
    return dout * (x > 0)


def gelu_fwd(x: Array, tanh_approx: bool = False) -> Array:
    """Exact GELU x * Phi(x) via erf; tanh approximation behind a flag."""
    if tanh_approx:
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
        return 0.5 * x * (1.0 + np.tanh(inner))
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(dout: Array, x: Array, tanh_approx: bool = False) -> Array:
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x), phi the standard normal pdf."""
    if tanh_approx:
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x**2)
        return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dout * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout_fwd(
    x: Array, p: float, training: bool, rng: np.random.Generator | None = None
) -> tuple[Array, Array | None]:
    """Inverted dropout: train-time survivors scaled by 1/(1-p), eval is identity.

    Returns (out, mask) where mask already carries the 1/(1-p) scale so the
    backward pass is a plain elementwise product.  mask is None in eval mode
    and all-ones for p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: probability must be in [0, 1), got {p}")
    if not training:
        return x, None
    if p == 0.0:
        mask = np.ones_like(x)
        return x.copy(), mask
    if rng is None:
        raise StateError("dropout: training mode with p > 0 requires an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    mask = keep / np.asarray(1.0 - p, dtype=x.dtype)
    return x * mask, mask


def dropout_bwd(dout: Array, mask: Array | None) -> Array:
    if mask is None:
        raise StateError("dropout backward: no mask saved (forward ran in eval mode)")
    return dout * mask


# ---------------------------------------------------------------------------
# elementwise product and row normalization
# ---------------------------------------------------------------------------

def mul_fwd(a: Array, b: Array) -> Array:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ, a{a.shape} vs b{b.shape}")
    return a * b


def mul_bwd(dout: Array, a: Array, b: Array) -> tuple[Array, Array]:
    return dout * b, dout * a


def l2norm_fwd(x: Array) -> tuple[Array, tuple]:
    """Scale every row to unit Euclidean norm; returns (out, ctx)."""
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise NormalizationError(f"l2norm: row {int(zero[0])} has zero norm")
    norms = norms.astype(x.dtype)
    out = x / norms
    return out, (out, norms)


def l2norm_bwd(dout: Array, ctx: tuple) -> Array:
    """Row-wise (I - y y^T) / ||x|| applied to the upstream gradient."""
    y, norms = ctx
    inner = (dout * y).sum(axis=-1, keepdims=True)
    return (dout - y * inner) / norms
