"""
Dense double-precision kernel used by the resampler.

A ``Matrix`` is a two-dimensional, C-ordered (row-major) ``float64`` numpy
array. Every public operation validates shapes and raises ``ShapeError``
naming both operands when they do not line up.
"""
from __future__ import annotations

import math

import numpy as np
import numpy.typing as npt
from scipy.special import erf

from gazeqa.errors import ParameterError, ShapeError, shape_of


Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

LN_EPS = 1e-5
_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_matrix(data, name: str = "matrix") -> Matrix:
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be two-dimensional, got shape {shape_of(m) or 'scalar'}")
    return m


def as_vector(data, length: int, name: str = "vector") -> Vector:
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != length:
        raise ShapeError(f"{name} of shape {shape_of(v)} does not match length {length}")
    return v


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a, "left operand"), as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {shape_of(a)} by {shape_of(b)}")
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(probs: Matrix, dprobs: Matrix) -> Matrix:
    """Gradient w.r.t. the logits given the softmax output and its upstream gradient."""
    return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))


def layer_norm(m: Matrix, gain: Vector, bias: Vector, eps: float = LN_EPS) -> Matrix:
    return layer_norm_forward(m, gain, bias, eps)[0]


def layer_norm_forward(
        m: Matrix, gain: Vector, bias: Vector, eps: float = LN_EPS
) -> tuple[Matrix, tuple[Matrix, Matrix]]:
    """Returns the normalized rows and the ``(xhat, inv_std)`` cache for the backward pass."""
    m = as_matrix(m)
    gain = as_vector(gain, m.shape[1], "layer norm gain")
    bias = as_vector(bias, m.shape[1], "layer norm bias")
    if eps <= 0:
        raise ParameterError(f"layer norm epsilon must be positive, got {eps}")
    mu = m.mean(axis=1, keepdims=True)
    centered = m - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def layer_norm_backward(
        dout: Matrix, cache: tuple[Matrix, Matrix], gain: Vector
) -> tuple[Matrix, Vector, Vector]:
    """Returns ``(d_input, d_gain, d_bias)``."""
    xhat, inv_std = cache
    n = xhat.shape[1]
    dgain = (dout * xhat).sum(axis=0)
    dbias = dout.sum(axis=0)
    dxhat = dout * gain
    dx = (inv_std / n) * (
        n * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(m: Matrix) -> Matrix:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * m * (1.0 + erf(m / _SQRT_2))


def gelu_grad(m: Matrix) -> Matrix:
    m = np.asarray(m, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(m / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * m * m)
    return cdf + m * pdf


def concat_rows(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a, "upper block"), as_matrix(b, "lower block")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot stack {shape_of(a)} on top of {shape_of(b)}: column counts differ")
    return np.concatenate([a, b], axis=0)
