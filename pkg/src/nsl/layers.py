"""Neural-similarity convolution, the hyperspherical similarity predictor and adapters."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor, as_tensor, reshape
from .errors import ConfigurationError, ShapeError
from .functional import (
    SPHERE_EPS,
    _finish_conv,
    column_norms,
    im2col,
    row_norms,
)
from .similarity import BlockDiagonalSimilarity, DiagonalSimilarity, SimilarityMatrix

NORM_MODES = ("both", "x_only", "none")


def ns_conv_forward(weight, x, similarity: SimilarityMatrix, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Convolution whose inner product is replaced by ``w^T M x``.

    ``x`` is (C, H, W) or (B, C, H, W); ``weight`` is (K, C, kh, kw).  One
    similarity serves every kernel and every sliding window of the layer.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    K, C, kh, kw = weight.shape
    if x.shape[-3] != C:
        raise ShapeError(f"input has {x.shape[-3]} channels, kernel expects {C}")
    if similarity.size != C * kh * kw:
        raise ShapeError(f"similarity of size {similarity.size} does not fit kernels {weight.shape}")
    cols = similarity.apply(im2col(x, kh, kw, stride, pad))
    out = reshape(weight, (K, C * kh * kw)) @ cols
    return _finish_conv(out, x, kh, kw, stride, pad, bias)


def sphere_linear(z: Tensor, w: Tensor, mode: str, bias: Tensor | None = None, eps: float = SPHERE_EPS) -> Tensor:
    """Rows of ``z`` (B, n) against rows of ``w`` (m, n) under a normalization mode."""
    out = z @ w.T
    if mode == "none":
        return out if bias is None else out + bias
    out = out / row_norms(z, eps)
    if mode == "both":
        out = out / reshape(row_norms(w, eps), (1, w.shape[0]))
    return out


def sphere_conv2d(x: Tensor, w: Tensor, mode: str, pad: int = 1, eps: float = SPHERE_EPS) -> Tensor:
    """SphereConv: each output is a normalized inner product of a kernel and a patch."""
    K, C, kh, kw = w.shape
    cols = im2col(x, kh, kw, 1, pad)
    out = reshape(w, (K, C * kh * kw)) @ cols
    if mode != "none":
        out = out / column_norms(cols, eps)
        if mode == "both":
            out = out / row_norms(reshape(w, (K, C * kh * kw)), eps)
    return _finish_conv(out, x, kh, kw, 1, pad, None)


class SpherePredictor:
    """Predicts a per-sample similarity block from a feature map.

    Structure: 3x3 SphereConv with ``hidden`` units (input-only normalization)
    and ReLU, global average pooling, then a normalized linear layer with
    ``output_dim`` units and no ReLU.  The prediction is the identity plus the
    network output: added to the diagonal for DNS (``output_dim = HV``),
    reshaped to HV x HV for UNS (``output_dim = HV**2``).

    ``norm_mode`` governs the output layer: ``both`` normalizes weights and
    inputs so every raw output lies in [-1, 1]; ``x_only`` normalizes inputs
    only; ``none`` gives an ordinary (unnormalized) conv/linear predictor.

    With ``per_patch`` the predictor instead maps every flattened patch
    through a normalized linear hidden layer and predicts one block per
    sliding window.
    """

    def __init__(
        self,
        in_channels: int,
        patch_size: int,
        kind: str = "dns",
        hidden: int | None = None,
        norm_mode: str = "both",
        hidden_norm: str = "x_only",
        identity_residual: bool = True,
        per_patch: bool = False,
        prefix: str = "predictor",
        rng: np.random.Generator | None = None,
        output_dim: int | None = None,
    ):
        if kind not in ("dns", "uns"):
            raise ConfigurationError(f"predictor kind must be 'dns' or 'uns', got {kind!r}")
        if norm_mode not in NORM_MODES or hidden_norm not in NORM_MODES:
            raise ConfigurationError(f"normalization must be one of {NORM_MODES}")
        expected = patch_size if kind == "dns" else patch_size * patch_size
        if output_dim is not None and output_dim != expected:
            raise ConfigurationError(
                f"output_dim {output_dim} does not match {kind} for patch size {patch_size} "
                f"(expected {expected})"
            )
        self.in_channels = in_channels
        self.patch_size = patch_size
        self.kind = kind
        self.hidden = hidden if hidden is not None else (64 if kind == "dns" else 128)
        self.norm_mode = norm_mode
        self.hidden_norm = "none" if norm_mode == "none" else hidden_norm
        self.identity_residual = identity_residual
        self.per_patch = per_patch
        self.prefix = prefix
        self.output_dim = expected
        rng = rng if rng is not None else np.random.default_rng(0)
        if per_patch:
            fan_in = in_channels * patch_size
            hidden_w = rng.normal(0, np.sqrt(2.0 / fan_in), size=(self.hidden, fan_in))
        else:
            fan_in = in_channels * 9
            hidden_w = rng.normal(0, np.sqrt(2.0 / fan_in), size=(self.hidden, in_channels, 3, 3))
        out_w = rng.normal(0, np.sqrt(2.0 / self.hidden), size=(self.output_dim, self.hidden))
        self.params = {
            f"{prefix}.hidden": Tensor(hidden_w, requires_grad=True),
            f"{prefix}.out": Tensor(out_w, requires_grad=True),
        }
        if norm_mode == "none":
            self.params[f"{prefix}.out_bias"] = Tensor(np.zeros(self.output_dim), requires_grad=True)

    def _p(self, P, key):
        name = f"{self.prefix}.{key}"
        return P[name] if P is not None and name in P else self.params.get(name)

    def raw(self, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Network output before the identity residual, shape (B, output_dim)."""
        x = as_tensor(x)
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"predictor expects {self.in_channels} channels, got {x.shape[1]}")
        h = sphere_conv2d(x, self._p(params, "hidden"), self.hidden_norm, pad=1).relu()
        z = h.mean(axis=(2, 3))
        return sphere_linear(z, self._p(params, "out"), self.norm_mode, self._p(params, "out_bias"))

    def raw_patches(self, cols: Tensor, params=None) -> Tensor:
        """Per-patch outputs for columns (B, C*HV, P) -> (B, P, output_dim)."""
        B, n, P = cols.shape
        z = reshape(cols.transpose(0, 2, 1), (B * P, n))
        h = sphere_linear(z, self._p(params, "hidden"), self.hidden_norm).relu()
        out = sphere_linear(h, self._p(params, "out"), self.norm_mode, self._p(params, "out_bias"))
        return reshape(out, (B, P, self.output_dim))

    def to_block(self, raw: Tensor) -> Tensor:
        """Add the identity residual; DNS -> diagonals (..., HV), UNS -> blocks (..., HV, HV)."""
        HV = self.patch_size
        if self.kind == "dns":
            return raw + 1.0 if self.identity_residual else raw
        block = reshape(raw, raw.shape[:-1] + (HV, HV))
        return block + Tensor._wrap(np.eye(HV)) if self.identity_residual else block

    def __call__(self, x, channels: int, params=None) -> SimilarityMatrix:
        x = as_tensor(x)
        single = x.ndim == 3
        block = self.to_block(self.raw(x, params))
        if single:
            block = reshape(block, block.shape[1:])
        if self.kind == "dns":
            return DiagonalSimilarity(block, channels)
        return BlockDiagonalSimilarity(block, channels)


def predict_similarity(predictor: SpherePredictor, x, channels: int, params=None) -> SimilarityMatrix:
    """``M_s = predictor(x) + I``; batched input gives one block per sample."""
    return predictor(x, channels, params)


def patchwise_similarity_conv(weight, x, predictor: SpherePredictor, stride, pad, params=None, bias=None):
    """Dynamic similarity predicted separately for every sliding window."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    K, C, kh, kw = weight.shape
    HV = kh * kw
    cols = im2col(x, kh, kw, stride, pad)
    B, n, P = cols.shape
    block = predictor.to_block(predictor.raw_patches(cols, params))
    xs = reshape(cols, (B, C, HV, P)).transpose(0, 3, 1, 2)  # (B, P, C, HV)
    if predictor.kind == "dns":
        mixed = xs * reshape(block, (B, P, 1, HV))
    else:
        mixed = reshape(reshape(block, (B, P, 1, HV, HV)) @ reshape(xs, (B, P, C, HV, 1)), (B, P, C, HV))
    mixed = reshape(mixed.transpose(0, 2, 3, 1), (B, n, P))
    out = reshape(weight, (K, n)) @ mixed
    return _finish_conv(out, x, kh, kw, stride, pad, bias)


class Adapter:
    """Maps a feature map of one shape to the shared predictor's input shape.

    A 1x1 convolution to ``out_channels`` followed by average pooling down to
    ``out_size`` x ``out_size``.  When the input already has that shape the
    adapter is the identity and has no parameters.
    """

    def __init__(self, in_shape, out_channels: int, out_size: int, prefix: str, rng=None):
        C, H, W = in_shape
        if H != W or H % out_size:
            raise ConfigurationError(
                f"cannot adapt a {H}x{W} map to {out_size}x{out_size} by average pooling"
            )
        self.in_shape = tuple(in_shape)
        self.out_channels = out_channels
        self.out_size = out_size
        self.prefix = prefix
        self.identity = C == out_channels and H == out_size
        self.params = {}
        if not self.identity:
            rng = rng if rng is not None else np.random.default_rng(0)
            w = rng.normal(0, np.sqrt(2.0 / C), size=(out_channels, C))
            self.params[f"{prefix}.weight"] = Tensor(w, requires_grad=True)

    def __call__(self, x, params=None) -> Tensor:
        x = as_tensor(x)
        if x.shape[1:] != self.in_shape:
            raise ShapeError(f"adapter for {self.in_shape} received {x.shape[1:]}")
        if self.identity:
            return x
        name = f"{self.prefix}.weight"
        w = params[name] if params is not None and name in params else self.params[name]
        B, C, H, W = x.shape
        y = w @ reshape(x, (B, C, H * W))
        f = H // self.out_size
        s = self.out_size
        y = reshape(y, (B, self.out_channels, s, f, s, f))
        return y.mean(axis=(3, 5))


def adapt_input(adapters: Mapping[tuple, Adapter], x, params=None) -> Tensor:
    """Route ``x`` through the adapter registered for its (C, H, W) shape."""
    x = as_tensor(x)
    shape = tuple(x.shape[-3:])
    if shape not in adapters:
        raise ConfigurationError(f"no adapter registered for input shape {shape}")
    return adapters[shape](x if x.ndim == 4 else reshape(x, (1,) + shape), params)


def quadratic_toy_forward(Wp, W, X) -> Tensor:
    """One-neuron dynamic similarity with ``M(X) = W' X^T``: returns ``W^T W' X^T X``."""
    Wp, W, X = as_tensor(Wp), as_tensor(W), as_tensor(X)
    return (W * Wp).sum() * (X * X).sum()
