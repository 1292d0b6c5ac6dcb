"""Global neural similarity: convolution as a structured matrix and self-attention.

A feature map ``X`` is stored as (m, m, c).  Its flattening ``X_F`` is
channel-major: entry ``ch * m*m + y*m + x``.  A kernel ``W`` is (k, k, c).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, as_tensor, concat_flat, reshape, take
from .errors import ContractError, ShapeError
from .functional import softmax
from .similarity import DiagonalSimilarity, bilinear_score


@lru_cache(maxsize=64)
def _operator_index(k: int, c: int, m: int, circular: bool) -> np.ndarray:
    """Index into ``[W.ravel(), 0]`` for every entry of the (mmc, mm) operator."""
    r = k // 2
    zero = k * k * c
    index = np.full((c * m * m, m * m), zero, dtype=np.intp)
    for py in range(m):
        for px in range(m):
            p = py * m + px
            for i in range(k):
                for j in range(k):
                    y, x = py + i - r, px + j - r
                    if circular:
                        y, x = y % m, x % m
                    elif not (0 <= y < m and 0 <= x < m):
                        continue
                    for ch in range(c):
                        # circular wrap on tiny maps can hit a position twice;
                        # such kernels are rejected by conv_as_matrix
                        index[ch * m * m + y * m + x, p] = (i * k + j) * c + ch
    index.setflags(write=False)
    return index


@dataclass
class ConvAsMatrix:
    """Operator ``W_G`` of shape (mmc, mm) with ``W_G^T X_F`` = stride-1 same-size convolution."""

    matrix: Tensor
    m: int
    c: int
    k: int

    def apply(self, xf) -> Tensor:
        xf = as_tensor(xf)
        if xf.shape != (self.m * self.m * self.c,):
            raise ShapeError(f"flattened input of shape {xf.shape} does not fit operator {self.matrix.shape}")
        return reshape(reshape(xf, (1, -1)) @ self.matrix, (self.m * self.m,))


def conv_as_matrix(W, m: int, circular: bool = False) -> ConvAsMatrix:
    """Dimension-preserving convolution with kernel ``W`` (k, k, c) as a matrix.

    Zero padding by default (a Toeplitz-structured operator); ``circular``
    wraps around the border instead, giving the block-circulant operator.
    """
    W = as_tensor(W)
    if W.ndim != 3 or W.shape[0] != W.shape[1]:
        raise ShapeError(f"kernel must be (k, k, c), got {W.shape}")
    k, _, c = W.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd for same-size padding, got {k}")
    if k > 2 * m - 1:
        raise ValueError(f"kernel size {k} exceeds 2m-1 = {2 * m - 1}")
    if circular and k > m:
        raise ValueError(f"circular padding needs k <= m, got k={k}, m={m}")
    ext = concat_flat([W, Tensor._wrap(np.zeros(1))])
    return ConvAsMatrix(take(ext, _operator_index(k, c, m, circular)), m, c, k)


def flatten_map(X) -> Tensor:
    """(m, m, c) -> channel-major vector of length mmc."""
    X = as_tensor(X)
    if X.ndim != 3 or X.shape[0] != X.shape[1]:
        raise ShapeError(f"feature map must be (m, m, c), got {X.shape}")
    return reshape(X.transpose(2, 0, 1), (-1,))


def _as_columns(xf: Tensor, mm: int, c: int) -> Tensor:
    """Resize(X_F, mm, c): column ``ch`` holds channel ``ch``."""
    return reshape(xf, (c, mm)).T


class GlobalSimilarity:
    """Global similarity acting on a flattened feature map."""

    kind = ""

    def __init__(self, m: int, c: int):
        self.m, self.c = m, c

    def apply(self, xf: Tensor) -> Tensor:
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        """Full (mmc, mmc) matrix, for oracles."""
        n = self.m * self.m * self.c
        return np.stack([self.apply(Tensor._wrap(e)).data for e in np.eye(n)], axis=1)


class GlobalIdentity(GlobalSimilarity):
    kind = "identity"

    def apply(self, xf):
        return as_tensor(xf)


class DiagonalMask(GlobalSimilarity):
    """One spatial mask (length mm) shared by every channel: a Hadamard product."""

    kind = "diagonal"

    def __init__(self, mask, m: int, c: int):
        super().__init__(m, c)
        self.mask = as_tensor(mask)
        if self.mask.shape != (m * m,):
            raise ShapeError(f"mask must have length {m * m}, got {self.mask.shape}")

    def apply(self, xf):
        xf = as_tensor(xf)
        return reshape(reshape(xf, (self.c, -1)) * self.mask, (-1,))


class GlobalBlockShared(GlobalSimilarity):
    """``diag(M_s, ..., M_s)`` with one (mm, mm) block per channel."""

    kind = "block"

    def __init__(self, block, m: int, c: int):
        super().__init__(m, c)
        self.block = as_tensor(block)
        if self.block.shape != (m * m, m * m):
            raise ShapeError(f"block must be {(m * m, m * m)}, got {self.block.shape}")

    def apply(self, xf):
        mm = self.m * self.m
        cols = self.block @ _as_columns(as_tensor(xf), mm, self.c)
        return reshape(cols.T, (-1,))


class AttentionSimilarity(GlobalBlockShared):
    """Input-dependent block ``G1(X) G2(X)^T`` (optionally row-softmaxed)."""

    kind = "attention"


def _check_maps(G1, G2, c: int) -> None:
    for name, G in (("G1", G1), ("G2", G2)):
        if as_tensor(G).shape != (c, c):
            raise ContractError(f"{name} must map {c} -> {c} channels")


def pointwise(G, X) -> Tensor:
    """1x1 convolution c -> c' of a map (m, m, c) as an (mm, c') matrix."""
    X = as_tensor(X)
    m, _, c = X.shape
    return reshape(X, (m * m, c)) @ as_tensor(G).T


def self_attention_similarity(G1, G2, X, softmax_flag: bool = False) -> AttentionSimilarity:
    """Attention map ``G1(X) G2(X)^T`` (mm x mm) as a dynamic global similarity."""
    X = as_tensor(X)
    if X.ndim != 3 or X.shape[0] != X.shape[1]:
        raise ShapeError(f"feature map must be (m, m, c), got {X.shape}")
    m, _, c = X.shape
    _check_maps(G1, G2, c)
    A = pointwise(G1, X) @ pointwise(G2, X).T
    if softmax_flag:
        A = softmax(A, axis=1)
    return AttentionSimilarity(A, m, c)


def gns_forward(Wg: ConvAsMatrix, M: GlobalSimilarity, X) -> Tensor:
    """``W_G^T M_G X_F`` for one kernel: a length-mm response."""
    X = as_tensor(X)
    if X.shape != (Wg.m, Wg.m, Wg.c) or (M.m, M.c) != (Wg.m, Wg.c):
        raise ShapeError(f"map {X.shape}, similarity ({M.m}, {M.c}) and operator ({Wg.m}, {Wg.c}) disagree")
    return Wg.apply(M.apply(flatten_map(X)))


def self_attention_forward(W, G1, G2, X, softmax_flag: bool = False, circular: bool = False) -> Tensor:
    """Convolution of the attention-mixed map.

    ``W`` is one kernel (k, k, c), giving an (m, m, 1) output, or a stack
    (K, k, k, c), giving (m, m, K).
    """
    W = as_tensor(W)
    X = as_tensor(X)
    kernels = [W]
    if W.ndim == 4:
        K = W.shape[0]
        per = int(np.prod(W.shape[1:]))
        kernels = [reshape(take(W, np.arange(i * per, (i + 1) * per)), W.shape[1:]) for i in range(K)]
    elif W.ndim != 3:
        raise ShapeError(f"kernel must be (k, k, c) or (K, k, k, c), got {W.shape}")
    m = X.shape[0]
    M = self_attention_similarity(G1, G2, X, softmax_flag)
    outs = [gns_forward(conv_as_matrix(w, m, circular), M, X) for w in kernels]
    stacked = concat_flat(outs)
    return reshape(stacked, (len(kernels), m, m)).transpose(1, 2, 0)


def best_lns_residual(W, mask, X) -> float:
    """Distance from a diagonal-mask GNS response to the closest diagonal LNS response.

    LNS applies one diagonal ``d`` (length k*k, shared over channels and over
    the kernels of a layer) inside every sliding window.  Its response is
    linear in ``d``, so the closest one is a least-squares fit.  ``W`` is one
    kernel (k, k, c) or a layer's stack (K, k, k, c).  Zero means some local
    similarity reproduces the global one exactly.
    """
    W, mask, X = (np.asarray(a, dtype=np.float64) for a in (W, mask, X))
    stack = W[None] if W.ndim == 3 else W
    _, k, _, c = stack.shape
    m = X.shape[0]
    r = k // 2
    Xp = np.zeros((m + 2 * r, m + 2 * r, c))
    Xp[r : r + m, r : r + m] = X
    rows, targets = [], []
    for w in stack:
        targets.append(gns_forward(conv_as_matrix(w, m), DiagonalMask(mask, m, c), X).data)
        # column q: response when only kernel position q is kept
        for py in range(m):
            for px in range(m):
                rows.append(np.sum(w * Xp[py : py + k, px : px + k], axis=2).ravel())
    A, target = np.array(rows), np.concatenate(targets)
    d, *_ = np.linalg.lstsq(A, target, rcond=None)
    return float(np.linalg.norm(A @ d - target))


def lns_score(W, d, X) -> Tensor:
    """Local similarity on a 1x1xc map: ``W^T diag(d) X`` with a shared 1x1 block."""
    W, X = as_tensor(W), as_tensor(X)
    c = W.shape[-1]
    return bilinear_score(reshape(W, (c,)), DiagonalSimilarity(as_tensor(d), c), reshape(X, (c,)))
