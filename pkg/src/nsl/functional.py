"""Differentiable building blocks: im2col, convolution, pooling, batch norm, losses."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .autodiff import Tensor, as_tensor, pad2d, reshape, take
from .errors import ContractError, ShapeError

SPHERE_EPS = 1e-6


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


@lru_cache(maxsize=256)
def _patch_index(C: int, Hp: int, Wp: int, kh: int, kw: int, stride: int):
    """Flat indices into a padded (C, Hp, Wp) plane, shape (C*kh*kw, Ho*Wo).

    Row ``c*kh*kw + i*kw + j`` holds kernel offset (c, i, j); column ``p``
    is output position ``p`` in row-major order.
    """
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    c, i, j = np.meshgrid(np.arange(C), np.arange(kh), np.arange(kw), indexing="ij")
    base = (c * Hp * Wp + i * Wp + j).reshape(-1, 1)
    oy, ox = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    offset = (oy * stride * Wp + ox * stride).reshape(1, -1)
    index = base + offset
    index.setflags(write=False)
    return index, Ho, Wo


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Sliding-window patches as columns.

    ``x`` of shape (C, H, W) gives (C*kh*kw, Ho*Wo); a batch (B, C, H, W)
    gives (B, C*kh*kw, Ho*Wo).  Padding is zero padding.
    """
    x = as_tensor(x)
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ContractError(f"invalid window kh={kh} kw={kw} stride={stride} pad={pad}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"im2col expects (C,H,W) or (B,C,H,W), got {x.shape}")
    C, H, W = x.shape[-3:]
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(
            f"non-positive output size {Ho}x{Wo} for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    index, _, _ = _patch_index(C, H + 2 * pad, W + 2 * pad, kh, kw, stride)
    xp = pad2d(x, pad)
    if x.ndim == 4:
        plane = C * (H + 2 * pad) * (W + 2 * pad)
        index = index[None] + (np.arange(x.shape[0]) * plane)[:, None, None]
    return take(xp, index)


def conv2d(x, weight, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Plain inner-product convolution, x (B,C,H,W), weight (K,C,kh,kw)."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    K, C, kh, kw = weight.shape
    if x.shape[-3] != C:
        raise ShapeError(f"input has {x.shape[-3]} channels, kernel expects {C}")
    cols = im2col(x, kh, kw, stride, pad)
    out = reshape(weight, (K, C * kh * kw)) @ cols
    return _finish_conv(out, x, kh, kw, stride, pad, bias)


def _finish_conv(out: Tensor, x: Tensor, kh, kw, stride, pad, bias) -> Tensor:
    H, W = x.shape[-2:]
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    K = out.shape[-2]
    if bias is not None:
        out = out + reshape(as_tensor(bias), (K, 1))
    return reshape(out, out.shape[:-1] + (Ho, Wo))


@lru_cache(maxsize=64)
def _pool_windows(C: int, H: int, W: int, size: int, stride: int):
    Ho = (H - size) // stride + 1
    Wo = (W - size) // stride + 1
    c, oy, ox, i, j = np.meshgrid(
        np.arange(C), np.arange(Ho), np.arange(Wo), np.arange(size), np.arange(size), indexing="ij"
    )
    index = c * H * W + (oy * stride + i) * W + (ox * stride + j)
    index = index.reshape(C, Ho, Wo, size * size)
    index.setflags(write=False)
    return index


def max_pool2d(x, size: int = 2, stride: int = 2) -> Tensor:
    """Max pooling over (B, C, H, W); odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H < size or W < size:
        raise ShapeError(f"cannot pool {H}x{W} with window {size}")
    windows = _pool_windows(C, H, W, size, stride)
    index = windows[None] + (np.arange(B) * C * H * W)[:, None, None, None, None]
    vals = np.take(x.data, index)
    pick = np.take_along_axis(index, vals.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return take(x, pick)


def global_avg_pool(x) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return as_tensor(x).mean(axis=(2, 3))


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (B, C, H, W) or (B, C).

    In training mode batch statistics are used and the running buffers are
    updated in place: ``running = momentum * running + (1 - momentum) * batch``
    (unbiased variance for the buffer).
    """
    x = as_tensor(x)
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    C = x.shape[1]
    g = reshape(as_tensor(gamma), tuple(C if s == -1 else s for s in bshape))
    b = reshape(as_tensor(beta), tuple(C if s == -1 else s for s in bshape))
    if train:
        n = x.size // C
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        xhat = centered / (var + eps).sqrt()
        batch_var = var.data.reshape(C) * (n / max(n - 1, 1))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.data.reshape(C)
        running_var *= momentum
        running_var += (1.0 - momentum) * batch_var
    else:
        shape = tuple(C if s == -1 else s for s in bshape)
        mean = Tensor._wrap(running_mean.reshape(shape))
        inv = Tensor._wrap(1.0 / np.sqrt(running_var.reshape(shape) + eps))
        xhat = (x - mean) * inv
    return xhat * g + b


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shift = Tensor._wrap(logits.data.max(axis=axis, keepdims=True))
    z = logits - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    shift = Tensor._wrap(logits.data.max(axis=axis, keepdims=True))
    e = (logits - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    B, n = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits, axis=1)
    picked = take(logp, np.arange(B) * n + labels)
    return -picked.mean()


def sphere_conv(w, x, mode: str = "both", eps: float = SPHERE_EPS) -> Tensor:
    """Normalized inner product of two vectors.

    ``both``: w.x / ((|w|+eps)(|x|+eps)); ``x_only``: w.x / (|x|+eps).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    w = reshape(as_tensor(w), (1, -1))
    x = reshape(as_tensor(x), (-1, 1))
    dot = reshape(w @ x, ())
    xnorm = safe_norm(x) + eps
    if mode == "x_only":
        return dot / xnorm
    if mode == "both":
        return dot / ((safe_norm(w) + eps) * xnorm)
    raise ContractError(f"unknown normalization mode {mode!r}")


def safe_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm with gradient 0 (instead of inf) at the zero vector."""
    sq = (x * x).sum(axis=axis, keepdims=keepdims)
    # shift the root only where the sum is exactly 0: sqrt(0 + 1) - 1 = 0
    zero = Tensor._wrap((sq.data == 0).astype(np.float64))
    return (sq + zero).sqrt() - zero


def column_norms(cols: Tensor, eps: float = SPHERE_EPS) -> Tensor:
    """Euclidean norms over axis -2 (one per column), plus eps, keepdims."""
    return safe_norm(cols, axis=-2, keepdims=True) + eps


def row_norms(w: Tensor, eps: float = SPHERE_EPS) -> Tensor:
    return safe_norm(w, axis=-1, keepdims=True) + eps
