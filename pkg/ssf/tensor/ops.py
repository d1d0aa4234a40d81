"""Differentiable ops. The right operand may broadcast only as a trailing suffix of the left shape."""
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from core.errors import ShapeError
from .tensor import Tensor, record

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _shape(t: Tensor) -> list:
    return list(t.shape)


def _check_suffix(op: str, a: Tensor, b: Tensor) -> None:
    if b.ndim > a.ndim or tuple(a.shape[a.ndim - b.ndim:]) != tuple(b.shape):
        raise ShapeError(f"{op}: shapes {_shape(a)} and {_shape(b)} are incompatible")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes a suffix operand was broadcast across"""
    if grad.shape == tuple(shape):
        return grad
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("add", a, b)
    out = Tensor.wrap(a.data + b.data)

    def grad_fn(g):
        return (g if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return record("add", (a, b), out, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("mul", a, b)
    out = Tensor.wrap(a.data * b.data)

    def grad_fn(g):
        return (g * b.data if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None)

    return record("mul", (a, b), out, grad_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor.wrap(a.data * a.dtype.type(factor))

    def grad_fn(g):
        return (g * a.dtype.type(factor),)

    return record("scale", (a,), out, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product over the last two axes; leading (batch) extents must be equal"""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {_shape(a)} and {_shape(b)} are incompatible")
    out = Tensor.wrap(np.matmul(a.data, b.data))

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), out, grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x Wᵀ + b with W stored as [out, in]"""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {_shape(x)} does not match weight {_shape(weight)}")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"linear: bias {_shape(bias)} does not match weight {_shape(weight)}")
    y = np.matmul(x.data, weight.data.T)
    if bias is not None:
        y = y + bias.data
    out = Tensor.wrap(y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = np.matmul(g, weight.data) if x.requires_grad else None
        gw = np.matmul(g2.T, x.data.reshape(-1, weight.shape[1])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return record("linear", inputs, out, grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x·Φ(x) with the erf form of the normal CDF"""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = Tensor.wrap((x.data * cdf).astype(x.dtype, copy=False))

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return record("gelu", (x,), out, grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor.wrap(y)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax_rows", (x,), out, grad_fn)


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float) -> Tensor:
    d = x.shape[-1]
    if tuple(weight.shape) != (d,) or tuple(bias.shape) != (d,):
        raise ShapeError(f"layernorm: input {_shape(x)} with affine {_shape(weight)}/{_shape(bias)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    out = Tensor.wrap(xhat * weight.data + bias.data)

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gxhat = g * weight.data
            gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gw = _reduce_to(g * xhat, (d,)) if weight.requires_grad else None
        gb = _reduce_to(g, (d,)) if bias.requires_grad else None
        return gx, gw, gb

    return record("layernorm", (x, weight, bias), out, grad_fn)


def scale_shift_channels(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """y[..., c] = gamma[c] * x[..., c] + beta[c]; a length-1 gamma scales every channel"""
    d = x.shape[-1]
    if gamma.ndim != 1 or gamma.shape[0] not in (1, d):
        raise ShapeError(f"scale_shift_channels: gamma {_shape(gamma)} does not fit input {_shape(x)}")
    if tuple(beta.shape) != (d,):
        raise ShapeError(f"scale_shift_channels: beta {_shape(beta)} does not fit input {_shape(x)}")
    out = Tensor.wrap(x.data * gamma.data + beta.data)

    def grad_fn(g):
        gx = g * gamma.data if x.requires_grad else None
        ggamma = None
        if gamma.requires_grad:
            per_channel = _reduce_to(g * x.data, (d,))
            ggamma = per_channel if gamma.shape[0] == d else per_channel.sum(keepdims=True)
        gbeta = _reduce_to(g, (d,)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return record("scale_shift_channels", (x, gamma, beta), out, grad_fn)


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the token axis (second to last)"""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_tokens: shapes {_shape(a)} and {_shape(b)} are incompatible")
    split = a.shape[-2]
    out = Tensor.wrap(np.concatenate([a.data, b.data], axis=-2))

    def grad_fn(g):
        return (g[..., :split, :] if a.requires_grad else None,
                g[..., split:, :] if b.requires_grad else None)

    return record("concat_tokens", (a, b), out, grad_fn)


def slice_tokens(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim < 2 or not (0 <= start < stop <= x.shape[-2]):
        raise ShapeError(f"slice_tokens: [{start}:{stop}] out of range for {_shape(x)}")
    out = Tensor.wrap(x.data[..., start:stop, :].copy())

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return record("slice_tokens", (x,), out, grad_fn)


def repeat_batch(x: Tensor, batch: int) -> Tensor:
    """Stack ``batch`` copies of x along a new leading axis"""
    out = Tensor.wrap(np.broadcast_to(x.data, (batch,) + tuple(x.shape)).copy())

    def grad_fn(g):
        return (g.sum(axis=0),)

    return record("repeat_batch", (x,), out, grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {_shape(x)} as {list(shape)}")
    out = Tensor.wrap(y.copy())

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {list(axes)} invalid for {_shape(x)}")
    inverse = tuple(np.argsort(axes))
    out = Tensor.wrap(np.transpose(x.data, axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return record("transpose", (x,), out, grad_fn)


def select(x: Tensor, index: int) -> Tensor:
    """Take one slice along the leading axis"""
    if x.ndim < 1 or not (0 <= index < x.shape[0]):
        raise ShapeError(f"select: index {index} out of range for {_shape(x)}")
    out = Tensor.wrap(x.data[index].copy())

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record("select", (x,), out, grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor.wrap(np.asarray(x.data.sum(), dtype=x.dtype))

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), out, grad_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [B, C] logits against integer labels"""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {_shape(logits)} with labels {list(labels.shape)}")
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(batch)
    out = Tensor.wrap(np.asarray(-log_probs[rows, labels].mean(), dtype=logits.dtype))

    def grad_fn(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (g / batch),)

    return record("cross_entropy", (logits,), out, grad_fn)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """Unfold [B, C, H, W] images into [B, N², C·p·p] patch rows, row-major over the grid"""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: image {[h, w]} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch * patch))
