"""Minimal differentiable kernel: the handful of layers the writer-id networks use.

Tensors are plain ``float64`` numpy arrays. Every forward op returns
``(output, cache)``; the matching ``*_backward`` consumes the cache and the
upstream gradient and returns a :class:`LayerGradients`.

Spatial ops accept either a single image ``(C, H, W)`` or a batch
``(N, C, H, W)``; the batch axis is carried through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError

Tensor = np.ndarray


@dataclass
class LayerGradients:
    d_input: Tensor
    d_params: list[Tensor] = field(default_factory=list)


def as_tensor(values, shape=None) -> Tensor:
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C, H, W) or (N, C, H, W) input, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution
#
# The public functions take channels-first arrays. The work is done on
# channels-last (N, H, W, C) arrays, where im2col rows come out contiguous and
# the GEMM result needs no transpose; Network calls the *_nhwc cores directly.
# --------------------------------------------------------------------------


@dataclass
class ConvCache:
    cols: Tensor
    input_shape: tuple  # NHWC
    weight: Tensor
    stride: int
    pad: int
    out_hw: tuple[int, int]
    squeeze: bool = False
    need_input_grad: bool = True


def _check_conv(c_in, h, w, weight, bias, stride, pad):
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, w_cin, k, _ = weight.shape
    if w_cin != c_in:
        raise ShapeError(f"input has {c_in} channels but weight expects {w_cin}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"invalid stride={stride} / pad={pad}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")


def conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0,
                need_input_grad: bool = True):
    n, h, w, c_in = x.shape
    _check_conv(c_in, h, w, weight, bias, stride, pad)
    c_out, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    # (n, oh, ow, c, ky, kx) -> rows (n, oy, ox), columns (ky, kx, c)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, k * k * c_in)
    w_mat = weight.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = cols @ w_mat.T
    out += bias
    cache = ConvCache(cols, x.shape, weight, stride, pad, (oh, ow), need_input_grad=need_input_grad)
    return out.reshape(n, oh, ow, c_out), cache


def conv2d_nhwc_backward(cache: ConvCache, d_out: Tensor) -> LayerGradients:
    n, h, w, c_in = cache.input_shape
    c_out, _, k, _ = cache.weight.shape
    oh, ow = cache.out_hw
    if d_out.shape != (n, oh, ow, c_out):
        raise ShapeError(f"d_output shape {d_out.shape} does not match forward output {(n, oh, ow, c_out)}")
    d_col = d_out.reshape(-1, c_out)
    d_w = (d_col.T @ cache.cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
    d_weight = np.ascontiguousarray(d_w)
    d_bias = d_col.sum(axis=0)
    if not cache.need_input_grad:
        return LayerGradients(None, [d_weight, d_bias])
    w_mat = cache.weight.transpose(0, 2, 3, 1).reshape(c_out, -1)
    d_cols = (d_col @ w_mat).reshape(n, oh, ow, k, k, c_in)
    s, pad = cache.stride, cache.pad
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c_in))
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + s * oh:s, kx:kx + s * ow:s] += d_cols[:, :, :, ky, kx]
    dx = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
    return LayerGradients(np.ascontiguousarray(dx), [d_weight, d_bias])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0):
    """Zero-padded 2-D cross-correlation (no kernel flip).

    ``weight`` is ``(C_out, C_in, k, k)``. Output extent per axis is
    ``(H + 2*pad - k) // stride + 1``.
    """
    xb, squeeze = _batched(x)
    out, cache = conv2d_nhwc(np.ascontiguousarray(xb.transpose(0, 2, 3, 1)), weight, bias, stride, pad)
    cache.squeeze = squeeze
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return (out[0] if squeeze else out), cache


def conv2d_backward(cache: ConvCache, d_out: Tensor) -> LayerGradients:
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    db = d_out[None] if cache.squeeze else d_out
    if db.ndim != 4:
        raise ShapeError(f"d_output shape {d_out.shape} does not match forward output")
    grads = conv2d_nhwc_backward(cache, np.ascontiguousarray(db.transpose(0, 2, 3, 1)))
    if grads.d_input is not None:
        dx = np.ascontiguousarray(grads.d_input.transpose(0, 3, 1, 2))
        grads.d_input = dx[0] if cache.squeeze else dx
    return grads


# --------------------------------------------------------------------------
# max pooling
# --------------------------------------------------------------------------


@dataclass
class PoolCache:
    """Argmax routing: absolute (row, col) in the unpadded input per output cell.

    ``rows``/``cols`` are laid out like the pooled output (channels last).
    """

    rows: Tensor
    cols: Tensor
    input_shape: tuple  # NHWC
    overlapping: bool = False
    squeeze: bool = False


def maxpool2d_nhwc(x: Tensor, k: int = 2, stride: int = 2):
    if k < 1 or stride < 1:
        raise ParameterError(f"pool kernel and stride must be positive, got k={k}, stride={stride}")
    n, h, w, c = x.shape
    ph = max(-(-h // stride) * stride, k)
    pw = max(-(-w // stride) * stride, k)
    xp = np.pad(x, ((0, 0), (0, ph - h), (0, pw - w), (0, 0))) if (ph, pw) != (h, w) else x
    oh = (ph - k) // stride + 1
    ow = (pw - k) // stride + 1
    if k == stride:
        flat = xp[:, :oh * k, :ow * k].reshape(n, oh, k, ow, k, c).transpose(0, 1, 3, 5, 2, 4)
    else:
        flat = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    flat = flat.reshape(n, oh, ow, c, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None, None] * stride + arg // k
    cols = np.arange(ow)[:, None] * stride + arg % k
    return out, PoolCache(rows, cols, x.shape, overlapping=k > stride)


def maxpool2d_nhwc_backward(cache: PoolCache, d_out: Tensor) -> LayerGradients:
    n, h, w, c = cache.input_shape
    if d_out.shape != cache.rows.shape:
        raise ShapeError(f"d_output shape {d_out.shape} does not match pooled output {cache.rows.shape}")
    # padded positions may win the max; their gradient is dropped
    keep = (cache.rows < h) & (cache.cols < w)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)
    flat_idx = ((ni * h + cache.rows) * w + cache.cols) * c + ci
    dx = np.zeros(n * h * w * c)
    if cache.overlapping:
        np.add.at(dx, flat_idx[keep], d_out[keep])
    else:
        # disjoint windows never share a winner
        dx[flat_idx[keep]] = d_out[keep]
    return LayerGradients(dx.reshape(cache.input_shape))


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2):
    """Max pooling; extents not divisible by ``stride`` are zero-padded bottom/right.

    Ties inside a window go to the first position in row-major order.
    """
    xb, squeeze = _batched(x)
    out, cache = maxpool2d_nhwc(np.ascontiguousarray(xb.transpose(0, 2, 3, 1)), k, stride)
    cache.squeeze = squeeze
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return (out[0] if squeeze else out), cache


def maxpool2d_backward(cache: PoolCache, d_out: Tensor) -> LayerGradients:
    db = d_out[None] if cache.squeeze else d_out
    if db.ndim != 4:
        raise ShapeError(f"d_output shape {d_out.shape} does not match pooled output")
    grads = maxpool2d_nhwc_backward(cache, np.ascontiguousarray(db.transpose(0, 2, 3, 1)))
    dx = np.ascontiguousarray(grads.d_input.transpose(0, 3, 1, 2))
    grads.d_input = dx[0] if cache.squeeze else dx
    return grads


def pool_routing(cache: PoolCache) -> tuple[Tensor, Tensor]:
    """Winning input (row, col) per output cell, channels-first like :func:`maxpool2d` output."""
    rows = cache.rows.transpose(0, 3, 1, 2)
    cols = cache.cols.transpose(0, 3, 1, 2)
    return (rows[0], cols[0]) if cache.squeeze else (rows, cols)


# --------------------------------------------------------------------------
# elementwise / dense
# --------------------------------------------------------------------------


def relu(x: Tensor):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(mask: Tensor, d_out: Tensor) -> LayerGradients:
    if d_out.shape != mask.shape:
        raise ShapeError(f"d_output shape {d_out.shape} != input shape {mask.shape}")
    return LayerGradients(np.where(mask, d_out, 0.0))


def linear(x: Tensor, weight: Tensor, bias: Tensor):
    """``weight @ x + bias`` for a vector ``x`` (or row-wise for a 2-D batch)."""
    if weight.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got {weight.shape}")
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in or x.ndim not in (1, 2):
        raise ShapeError(f"input shape {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (d_out,):
        raise ShapeError(f"bias must have shape ({d_out},), got {bias.shape}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(cache, d_out: Tensor) -> LayerGradients:
    x, weight = cache
    expected = x.shape[:-1] + (weight.shape[0],)
    if d_out.shape != expected:
        raise ShapeError(f"d_output shape {d_out.shape} != {expected}")
    if x.ndim == 1:
        return LayerGradients(weight.T @ d_out, [np.outer(d_out, x), d_out.copy()])
    return LayerGradients(d_out @ weight, [d_out.T @ x, d_out.sum(axis=0)])


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label: int) -> tuple[float, Tensor]:
    """Return ``(-log softmax(logits)[label], softmax - one_hot(label))``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError(f"logits must be a vector, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ParameterError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    loss = float(log_norm - z[label])
    grad = np.exp(z - log_norm)
    grad[label] -= 1.0
    return loss, grad


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: list[Tensor]
    learning_rate: float = 0.01
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], learning_rate=0.01, momentum=0.9):
        return cls([np.zeros_like(p) for p in params], learning_rate, momentum)


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: OptimizerState):
    """Momentum SGD, in place: ``v = momentum*v - lr*g``; ``w = w + v``."""
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ShapeError("params, grads and velocity lists differ in length")
    for w, g, v in zip(params, grads, state.velocity):
        if not (w.shape == g.shape == v.shape):
            raise ShapeError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        v *= state.momentum
        v -= state.learning_rate * g
        w += v
    return params, state


def clip_by_global_norm(grads: Sequence[Tensor], max_norm: float) -> tuple[list[Tensor], float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    if not max_norm > 0:
        raise ParameterError(f"max_norm must be positive, got {max_norm}")
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


def numeric_gradient(f: Callable[[Tensor], float], point: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``point``."""
    if not h > 0:
        raise ParameterError("step h must be positive")
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f(x)
        flat_x[i] = orig - h
        f_minus = f(x)
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """``||a - n|| / max(||a||, ||n||)``, zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
