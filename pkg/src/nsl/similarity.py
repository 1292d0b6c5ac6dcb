"""Bilinear similarity matrices and the kernel-shape mask machinery.

A neural similarity replaces the convolution inner product ``w.x`` with the
bilinear form ``w^T M x`` over flattened patches of length ``C*HV`` (channel
blocks concatenated in channel order, each block a row-major H x V window).

Six realizations of ``M`` are provided:

``IdentitySimilarity``
    ``M = I``; the plain inner product.
``DiagonalSimilarity``
    ``M = diag(M_s, ..., M_s)`` with ``M_s = diag(d)`` (DNS).
``UnconstrainedSimilarity``
    An arbitrary dense ``C*HV x C*HV`` matrix, no sharing across channels.
``BlockDiagonalSimilarity``
    ``M = diag(M_s, ..., M_s)`` with an arbitrary shared ``HV x HV`` block (UNS).
``CholeskySimilarity``
    Shared block ``M_s = L L^T`` with ``L`` lower triangular, hence symmetric PSD.
``ShapeMaskedSimilarity``
    Shared block ``M_s = D R`` where ``D`` is a 0/1 diagonal selecting kernel
    positions and ``R`` is a free similarity block.

Diagonal and block parameters may carry a leading batch axis, in which case
every sample gets its own block (dynamic similarity).  Structured kinds are
applied without materializing the ``C*HV x C*HV`` matrix; :meth:`dense`
exists for verification only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, absolute, as_tensor, reshape
from .errors import ContractError, ShapeError, StateError

KINDS = ("identity", "diagonal", "unconstrained", "block", "cholesky", "shape")


class SimilarityMatrix:
    kind: str = ""

    def __init__(self, channels: int, patch_size: int):
        if channels < 1 or patch_size < 1:
            raise ContractError("channels and patch_size must be positive")
        self.channels = int(channels)
        self.patch_size = int(patch_size)

    @property
    def size(self) -> int:
        return self.channels * self.patch_size

    @property
    def batched(self) -> bool:
        return False

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def block(self) -> Tensor:
        """The shared HV x HV block ``M_s``."""
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        """Full ``C*HV x C*HV`` matrix; for oracles and tests only."""
        if self.batched:
            raise StateError("dense() is defined for unbatched similarities only")
        return np.kron(np.eye(self.channels), self.block().data)

    def _split(self, cols: Tensor) -> Tensor:
        """(..., C*HV, P) -> (..., C, HV, P)."""
        if cols.ndim < 2 or cols.shape[-2] != self.size:
            raise ShapeError(
                f"patch columns of shape {cols.shape} do not match similarity size {self.size}"
            )
        return reshape(cols, cols.shape[:-2] + (self.channels, self.patch_size, cols.shape[-1]))

    def apply(self, cols) -> Tensor:
        """Replace every patch column ``x`` by ``M x``."""
        raise NotImplementedError

    def fold(self, weight) -> Tensor:
        """Equivalent inner-product kernels ``M^T w`` for rows of ``weight`` (..., C*HV)."""
        raise NotImplementedError

    def stored(self) -> Tensor:
        """The stored block that sparsity operations act on."""
        raise NotImplementedError

    def _check_weight(self, weight) -> Tensor:
        weight = as_tensor(weight)
        if weight.shape[-1] != self.size:
            raise ShapeError(f"kernel length {weight.shape[-1]} does not match similarity size {self.size}")
        if self.batched:
            raise StateError("a per-sample (dynamic) similarity cannot be folded into kernels")
        return weight

    def __repr__(self):
        return f"{type(self).__name__}(C={self.channels}, HV={self.patch_size})"


class IdentitySimilarity(SimilarityMatrix):
    kind = "identity"

    def block(self):
        return Tensor._wrap(np.eye(self.patch_size))

    def apply(self, cols):
        cols = as_tensor(cols)
        self._split(cols)
        return cols

    def fold(self, weight):
        return self._check_weight(weight)

    def stored(self):
        return Tensor._wrap(np.ones(self.patch_size))


class DiagonalSimilarity(SimilarityMatrix):
    kind = "diagonal"

    def __init__(self, d, channels: int = 1):
        d = as_tensor(d)
        super().__init__(channels, d.shape[-1])
        if d.ndim not in (1, 2):
            raise ShapeError(f"diagonal must be (HV,) or (B, HV), got {d.shape}")
        self.d = d

    @property
    def batched(self):
        return self.d.ndim == 2

    def parameters(self):
        return {"d": self.d}

    def block(self):
        if self.batched:
            raise StateError("block() of a batched similarity is ambiguous")
        return Tensor._wrap(np.diag(self.d.data))

    def apply(self, cols):
        cols = as_tensor(cols)
        x = self._split(cols)
        if self.batched:
            if cols.ndim != 3 or cols.shape[0] != self.d.shape[0]:
                raise ShapeError(f"batched diagonal {self.d.shape} vs columns {cols.shape}")
            d = reshape(self.d, (self.d.shape[0], 1, self.patch_size, 1))
        else:
            d = reshape(self.d, (self.patch_size, 1))
        return reshape(x * d, cols.shape)

    def fold(self, weight):
        weight = self._check_weight(weight)
        w = reshape(weight, weight.shape[:-1] + (self.channels, self.patch_size))
        return reshape(w * self.d, weight.shape)

    def stored(self):
        return self.d


class _SharedBlock(SimilarityMatrix):
    """Common application rules for kinds with one shared HV x HV block."""

    def apply(self, cols):
        cols = as_tensor(cols)
        x = self._split(cols)
        block = self.block()
        if block.ndim == 3:
            if cols.ndim != 3 or cols.shape[0] != block.shape[0]:
                raise ShapeError(f"batched block {block.shape} vs columns {cols.shape}")
            block = reshape(block, (block.shape[0], 1) + block.shape[1:])
        return reshape(block @ x, cols.shape)

    def fold(self, weight):
        weight = self._check_weight(weight)
        w = reshape(weight, weight.shape[:-1] + (self.channels, self.patch_size))
        # row form of M_s^T w_c is w_c^T M_s
        return reshape(w @ self.block(), weight.shape)


class BlockDiagonalSimilarity(_SharedBlock):
    kind = "block"

    def __init__(self, block, channels: int = 1):
        block = as_tensor(block)
        if block.ndim not in (2, 3) or block.shape[-1] != block.shape[-2]:
            raise ShapeError(f"block must be square (HV,HV) or (B,HV,HV), got {block.shape}")
        super().__init__(channels, block.shape[-1])
        self.m = block

    @property
    def batched(self):
        return self.m.ndim == 3

    def parameters(self):
        return {"M": self.m}

    def block(self):
        return self.m

    def stored(self):
        return self.m


class UnconstrainedSimilarity(SimilarityMatrix):
    kind = "unconstrained"

    def __init__(self, matrix, channels: int = 1):
        matrix = as_tensor(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ShapeError(f"matrix must be square, got {matrix.shape}")
        if matrix.shape[0] % channels:
            raise ShapeError(f"size {matrix.shape[0]} is not divisible by {channels} channels")
        super().__init__(channels, matrix.shape[0] // channels)
        self.m = matrix

    def parameters(self):
        return {"M": self.m}

    def block(self):
        raise StateError("an unconstrained similarity has no shared block")

    def dense(self):
        return self.m.data.copy()

    def apply(self, cols):
        cols = as_tensor(cols)
        self._split(cols)
        return self.m @ cols

    def fold(self, weight):
        weight = self._check_weight(weight)
        if weight.ndim == 1:
            return reshape(reshape(weight, (1, -1)) @ self.m, weight.shape)
        return weight @ self.m

    def stored(self):
        return self.m


class CholeskySimilarity(_SharedBlock):
    kind = "cholesky"

    def __init__(self, factor, channels: int = 1, validate: bool = True):
        factor = as_tensor(factor)
        if factor.ndim != 2 or factor.shape[0] != factor.shape[1]:
            raise ShapeError(f"Cholesky factor must be square, got {factor.shape}")
        # the upper part is masked out of every computation; ``validate``
        # rejects it up front for callers who hand in a factor explicitly
        if validate and np.any(np.triu(factor.data, 1) != 0):
            raise ContractError("Cholesky factor has nonzero entries above the diagonal")
        super().__init__(channels, factor.shape[0])
        self.L = factor
        self._tril = Tensor._wrap(np.tril(np.ones(factor.shape)))

    def parameters(self):
        return {"L": self.L}

    def factor(self) -> Tensor:
        return self.L * self._tril

    def block(self):
        L = self.factor()
        return L @ L.T

    def stored(self):
        return self.L

    def project(self) -> None:
        """Keep the factor canonical: zero upper part, non-negative diagonal."""
        data = self.L.data
        data[np.triu_indices_from(data, 1)] = 0.0
        np.fill_diagonal(data, np.maximum(np.diag(data), 0.0))


@dataclass
class ShapeShadow:
    """Real-valued shadow ``D_r`` of the Boolean shape mask, thresholded at ``alpha``."""

    D_r: np.ndarray | None
    alpha: float = 0.5

    @classmethod
    def full(cls, patch_size: int, alpha: float = 0.5, init: float = 1.0) -> "ShapeShadow":
        return cls(np.full(patch_size, float(init)), alpha)


def shape_mask(shadow: ShapeShadow) -> np.ndarray:
    """0/1 mask with ``d_i = 1`` iff ``D_r[i] > alpha`` (strictly)."""
    if shadow.D_r is None:
        raise StateError("shape shadow has no values")
    return (np.asarray(shadow.D_r) > shadow.alpha).astype(np.float64)


def update_shape_shadow(shadow: ShapeShadow, grad_D, eta: float) -> ShapeShadow:
    """One step ``D_r <- D_r - eta * dL/dD``; the Boolean-mask gradient drives the shadow."""
    if eta <= 0:
        raise ContractError("eta must be positive")
    if shadow.D_r is None:
        raise StateError("shape shadow has no values")
    g = np.asarray(grad_D.data if isinstance(grad_D, Tensor) else grad_D, dtype=np.float64)
    return ShapeShadow(np.asarray(shadow.D_r, dtype=np.float64) - eta * g, shadow.alpha)


class ShapeMaskedSimilarity(_SharedBlock):
    """``M_s = D R``: kernel shape ``D`` times similarity measure ``R``.

    Only the Boolean mask takes part in computation.  ``self.mask`` is a
    Tensor so that ``dL/dD`` is available to drive the shadow; it is not a
    parameter of any optimizer.
    """

    kind = "shape"

    def __init__(self, R, channels: int = 1, shadow: ShapeShadow | None = None, mask=None):
        R = as_tensor(R)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ShapeError(f"R must be square, got {R.shape}")
        super().__init__(channels, R.shape[0])
        self.R = R
        self.shadow = shadow
        if mask is None and shadow is not None and shadow.D_r is not None:
            mask = shape_mask(shadow)
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != (self.patch_size,):
                raise ShapeError(f"mask of shape {mask.shape} does not match R {R.shape}")
        self.mask = Tensor(mask, requires_grad=True) if mask is not None else None

    def parameters(self):
        return {"R": self.R}

    def _D(self) -> Tensor:
        if self.mask is None:
            raise StateError("shape mask is unset; the shadow D_r has no values")
        return self.mask

    def refresh(self) -> None:
        """Recompute the Boolean mask from the shadow."""
        values = shape_mask(self.shadow)
        if self.mask is None:
            self.mask = Tensor(values, requires_grad=True)
        else:
            self.mask.data[...] = values

    def step_shadow(self, grad_D, eta: float) -> None:
        self.shadow = update_shape_shadow(self.shadow, grad_D, eta)
        self.refresh()

    def block(self):
        return reshape(self._D(), (self.patch_size, 1)) * self.R

    def stored(self):
        return self.R


def compose_shape_similarity(D, R, channels: int = 1) -> ShapeMaskedSimilarity:
    """Similarity with block ``diag(D) R`` for a given 0/1 mask ``D``."""
    R = as_tensor(R)
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (R.shape[0],):
        raise ShapeError(f"mask of shape {D.shape} does not match R {R.shape}")
    return ShapeMaskedSimilarity(R, channels, mask=D)


def psd_block(L, channels: int = 1) -> CholeskySimilarity:
    return CholeskySimilarity(L, channels)


def bilinear_score(W, M: SimilarityMatrix, X) -> Tensor:
    """``W^T M X`` for flattened kernel and patch vectors of length C*HV."""
    W = as_tensor(W)
    X = as_tensor(X)
    if W.shape != (M.size,) or X.shape != (M.size,):
        raise ShapeError(f"vectors of shape {W.shape}, {X.shape} do not match similarity size {M.size}")
    mx = M.apply(reshape(X, (M.size, 1)))
    return (W * reshape(mx, (M.size,))).sum()


def apply_similarity(M: SimilarityMatrix, cols) -> Tensor:
    return M.apply(cols)


def fold_kernel(M: SimilarityMatrix, W) -> Tensor:
    return M.fold(W)


def l1_penalty(M: SimilarityMatrix, lam: float) -> Tensor:
    """``lam * sum |M_s|``; only structurally nonzero entries are visited."""
    if lam < 0:
        raise ContractError("l1 weight must be non-negative")
    if isinstance(M, (IdentitySimilarity, DiagonalSimilarity, UnconstrainedSimilarity, BlockDiagonalSimilarity)):
        entries = M.stored()
    else:
        entries = M.block()
    return absolute(entries).sum() * float(lam)


def hard_sparsify(M: SimilarityMatrix, k: int) -> SimilarityMatrix:
    """Keep the ``k`` largest-magnitude stored entries, zero the rest.

    Ties are resolved in favour of the lower flat index.
    """
    values = M.stored().data
    if not 0 <= k <= values.size:
        raise ValueError(f"k must lie in [0, {values.size}], got {k}")
    order = np.argsort(-np.abs(values.ravel()), kind="stable")
    keep = np.zeros(values.size, dtype=bool)
    keep[order[:k]] = True
    sparse = np.where(keep.reshape(values.shape), values, 0.0)
    C = M.channels
    if isinstance(M, (IdentitySimilarity, DiagonalSimilarity)):
        return DiagonalSimilarity(Tensor(sparse), C)
    if isinstance(M, BlockDiagonalSimilarity):
        return BlockDiagonalSimilarity(Tensor(sparse), C)
    if isinstance(M, UnconstrainedSimilarity):
        return UnconstrainedSimilarity(Tensor(sparse), C)
    if isinstance(M, CholeskySimilarity):
        return CholeskySimilarity(Tensor(sparse), C)
    if isinstance(M, ShapeMaskedSimilarity):
        return ShapeMaskedSimilarity(
            Tensor(sparse), C, shadow=M.shadow, mask=None if M.mask is None else M.mask.data
        )
    raise TypeError(f"unsupported similarity {M!r}")


def identity_like(kind: str, channels: int, patch_size: int, requires_grad: bool = True) -> SimilarityMatrix:
    """A learnable similarity of the given kind whose value is the identity."""
    HV = patch_size
    if kind == "identity":
        return IdentitySimilarity(channels, HV)
    if kind == "diagonal":
        return DiagonalSimilarity(Tensor(np.ones(HV), requires_grad=requires_grad), channels)
    if kind == "block":
        return BlockDiagonalSimilarity(Tensor(np.eye(HV), requires_grad=requires_grad), channels)
    if kind == "unconstrained":
        return UnconstrainedSimilarity(Tensor(np.eye(channels * HV), requires_grad=requires_grad), channels)
    if kind == "cholesky":
        return CholeskySimilarity(Tensor(np.eye(HV), requires_grad=requires_grad), channels)
    if kind == "shape":
        return ShapeMaskedSimilarity(
            Tensor(np.eye(HV), requires_grad=requires_grad), channels, shadow=ShapeShadow.full(HV)
        )
    raise ValueError(f"unknown similarity kind {kind!r}; expected one of {KINDS}")
