import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsl.autodiff import Tensor
from oracles import dense_oracle, random_similarity
from nsl.errors import ContractError, ShapeError, StateError
from nsl.similarity import (
    BlockDiagonalSimilarity,
    DiagonalSimilarity,
    IdentitySimilarity,
    ShapeMaskedSimilarity,
    ShapeShadow,
    UnconstrainedSimilarity,
    apply_similarity,
    bilinear_score,
    compose_shape_similarity,
    fold_kernel,
    hard_sparsify,
    l1_penalty,
    psd_block,
    shape_mask,
    update_shape_shadow,
)


KINDS = ["identity", "diagonal", "unconstrained", "block", "cholesky", "shape"]


class TestBilinearScore:
    def test_identity_is_inner_product(self):
        assert bilinear_score([1.0, 2.0], IdentitySimilarity(1, 2), [3.0, 4.0]).item() == 11.0

    def test_unconstrained_example(self):
        M = UnconstrainedSimilarity([[1.0, 2.0], [3.0, 4.0]])
        # oracle: W^T (M X) = [1,2].[17,39] = 95
        assert bilinear_score([1.0, 2.0], M, [5.0, 6.0]).item() == 95.0

    def test_block_diagonal_example(self):
        M = BlockDiagonalSimilarity(np.diag([1.0, 2.0]), channels=2)
        assert bilinear_score(np.ones(4), M, np.ones(4)).item() == 6.0
        np.testing.assert_array_equal(M.dense(), np.diag([1.0, 2.0, 1.0, 2.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bilinear_score(np.ones(3), IdentitySimilarity(1, 2), np.ones(2))

    @pytest.mark.parametrize("kind", KINDS)
    def test_dense_oracle(self, kind):
        rng = np.random.default_rng(7)
        for _ in range(30):
            C, HV = int(rng.integers(1, 4)), int(rng.integers(1, 10))
            M = random_similarity(kind, C, HV, rng)
            W, X = rng.normal(size=C * HV), rng.normal(size=C * HV)
            dense = dense_oracle(kind, M)
            np.testing.assert_allclose(M.dense(), dense, atol=1e-12, rtol=0)
            assert abs(bilinear_score(W, M, X).item() - W @ dense @ X) < 1e-12 * max(1, abs(W @ dense @ X))


class TestApply:
    def test_identity_unchanged(self):
        X = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(apply_similarity(IdentitySimilarity(2, 2), X).data, X)

    def test_diagonal_is_hadamard(self):
        d = np.array([2.0, -1.0, 0.5])
        X = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(apply_similarity(DiagonalSimilarity(d), X).data, d[:, None] * X)

    @pytest.mark.parametrize("kind", KINDS)
    def test_against_dense(self, kind):
        rng = np.random.default_rng(2)
        M = random_similarity(kind, 3, 4, rng)
        X = rng.normal(size=(12, 5))
        np.testing.assert_allclose(M.apply(X).data, dense_oracle(kind, M) @ X, atol=1e-12, rtol=0)

    def test_batched_diagonal(self):
        rng = np.random.default_rng(4)
        d = rng.normal(size=(2, 4))
        X = rng.normal(size=(2, 8, 3))
        out = DiagonalSimilarity(d, 2).apply(X).data
        for b in range(2):
            np.testing.assert_allclose(out[b], np.kron(np.eye(2), np.diag(d[b])) @ X[b], atol=1e-12)

    def test_batched_block(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(2, 4, 4))
        X = rng.normal(size=(2, 8, 3))
        out = BlockDiagonalSimilarity(m, 2).apply(X).data
        for b in range(2):
            np.testing.assert_allclose(out[b], np.kron(np.eye(2), m[b]) @ X[b], atol=1e-12)

    def test_row_mismatch(self):
        with pytest.raises(ShapeError):
            DiagonalSimilarity(np.ones(4)).apply(np.ones((5, 2)))


class TestFold:
    def test_identity(self):
        W = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(fold_kernel(IdentitySimilarity(2, 2), W).data, W)

    def test_diagonal(self):
        np.testing.assert_array_equal(fold_kernel(DiagonalSimilarity([2.0, 3.0]), [1.0, 1.0]).data, [2, 3])

    def test_dense_example(self):
        M = UnconstrainedSimilarity([[1.0, 2.0], [3.0, 4.0]])
        folded = fold_kernel(M, [1.0, 2.0]).data
        np.testing.assert_array_equal(folded, [7.0, 10.0])
        assert folded @ np.array([5.0, 6.0]) == bilinear_score([1.0, 2.0], M, [5.0, 6.0]).item() == 95.0

    @pytest.mark.parametrize("kind", KINDS)
    def test_equivalence(self, kind):
        rng = np.random.default_rng(9)
        for _ in range(20):
            M = random_similarity(kind, 2, 9, rng)
            W, X = rng.normal(size=18), rng.normal(size=18)
            lhs = fold_kernel(M, W).data @ X
            assert abs(lhs - bilinear_score(W, M, X).item()) < 1e-12 * max(1, abs(lhs))

    def test_rows_fold_independently(self):
        rng = np.random.default_rng(1)
        M = random_similarity("block", 2, 4, rng)
        W = rng.normal(size=(3, 8))
        np.testing.assert_allclose(M.fold(W).data, W @ M.dense(), atol=1e-12)

    def test_unset_shadow(self):
        M = ShapeMaskedSimilarity(np.eye(2), shadow=ShapeShadow(None))
        with pytest.raises(StateError):
            fold_kernel(M, np.ones(2))

    def test_batched_cannot_fold(self):
        with pytest.raises(StateError):
            DiagonalSimilarity(np.ones((2, 3))).fold(np.ones(3))


def test_hyperspherical_special_case():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        W, X = rng.normal(size=n), rng.normal(size=n)
        scale = 1.0 / (np.linalg.norm(W) * np.linalg.norm(X))
        score = bilinear_score(W, DiagonalSimilarity(np.full(n, scale)), X).item()
        cosine = W @ X / (np.linalg.norm(W) * np.linalg.norm(X))
        assert abs(score - cosine) < 1e-12


class TestShapeMask:
    def test_strict_threshold(self):
        np.testing.assert_array_equal(shape_mask(ShapeShadow(np.array([0.6, 0.2, 0.5]), 0.5)), [1, 0, 0])

    def test_all_above_and_below(self):
        assert shape_mask(ShapeShadow(np.array([0.51, 2.0]))).tolist() == [1, 1]
        assert shape_mask(ShapeShadow(np.array([0.5, -3.0]))).tolist() == [0, 0]

    def test_update_arithmetic(self):
        s = update_shape_shadow(ShapeShadow(np.array([1.0])), np.array([2.0]), 0.1)
        assert s.D_r.tolist() == [pytest.approx(0.8, abs=1e-15)]

    def test_zero_grad_idempotent(self):
        s = ShapeShadow(np.array([0.7, 0.3, 0.5]))
        s2 = update_shape_shadow(s, np.zeros(3), 0.3)
        np.testing.assert_array_equal(s2.D_r, s.D_r)
        np.testing.assert_array_equal(shape_mask(s2), shape_mask(s))

    def test_crossing_flips_bit(self):
        s = ShapeShadow(np.array([0.55, 0.9]))
        assert shape_mask(s).tolist() == [1, 1]
        s = update_shape_shadow(s, np.array([1.0, 0.0]), 0.1)
        assert shape_mask(s).tolist() == [0, 1]

    def test_bad_eta(self):
        with pytest.raises(ContractError):
            update_shape_shadow(ShapeShadow(np.ones(2)), np.zeros(2), 0.0)

    def test_compose(self):
        R = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(compose_shape_similarity([1, 1], R).block().data, R)
        np.testing.assert_array_equal(compose_shape_similarity([1, 0], R).block().data, [[1, 2], [0, 0]])
        zero = compose_shape_similarity([0, 0], R)
        assert bilinear_score([3.0, -1.0], zero, [2.0, 5.0]).item() == 0.0

    def test_masked_rows_do_not_matter(self):
        rng = np.random.default_rng(5)
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        R = rng.normal(size=(4, 4))
        W, X = rng.normal(size=8), rng.normal(size=8)
        base = bilinear_score(W, compose_shape_similarity(mask, R, 2), X).item()
        R2 = R.copy()
        R2[[1, 3]] = rng.normal(size=(2, 4)) * 100
        assert bilinear_score(W, compose_shape_similarity(mask, R2, 2), X).item() == base

    def test_refresh_from_shadow(self):
        M = ShapeMaskedSimilarity(np.eye(3), shadow=ShapeShadow.full(3))
        assert M.mask.data.tolist() == [1, 1, 1]
        M.step_shadow(np.array([0.0, 6.0, 0.0]), eta=0.1)
        assert M.mask.data.tolist() == [1, 0, 1]


def power_iteration_max(A, iters=2000):
    v = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
    for _ in range(iters):
        w = A @ v
        v = w / np.linalg.norm(w)
    return v @ A @ v


class TestPSD:
    def test_identity(self):
        np.testing.assert_array_equal(psd_block(np.eye(3)).block().data, np.eye(3))

    def test_diagonal_square(self):
        np.testing.assert_array_equal(psd_block(np.diag([2.0, 3.0])).block().data, np.diag([4.0, 9.0]))

    def test_min_eigenvalue(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            L = np.tril(rng.normal(size=(5, 5)))
            Ms = psd_block(L).block().data
            np.testing.assert_allclose(Ms, Ms.T, atol=1e-12)
            c = np.abs(Ms).sum()  # Gershgorin bound on the spectral radius
            lam_min = c - power_iteration_max(c * np.eye(5) - Ms)
            assert lam_min >= -1e-10

    def test_upper_rejected(self):
        with pytest.raises(ContractError):
            psd_block(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_project(self):
        M = psd_block(np.array([[-2.0, 0.0], [1.0, 3.0]]))
        M.project()
        np.testing.assert_array_equal(M.L.data, [[0.0, 0.0], [1.0, 3.0]])


class TestSparsity:
    def test_l1_zero(self):
        assert l1_penalty(BlockDiagonalSimilarity(np.zeros((2, 2))), 1.0).item() == 0.0

    def test_l1_diagonal(self):
        assert l1_penalty(DiagonalSimilarity([1.0, -2.0]), 0.5).item() == 1.5

    def test_l1_dense_oracle(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(6, 6))
        expected = 0.3 * sum(abs(v) for v in A.ravel())
        assert abs(l1_penalty(UnconstrainedSimilarity(A), 0.3).item() - expected) < 1e-12

    def test_l1_subgradient_zero_at_zero(self):
        from nsl.autodiff import grad

        d = Tensor([0.0, 2.0, -1.0], requires_grad=True)
        (g,) = grad(l1_penalty(DiagonalSimilarity(d), 1.0), [d])
        assert g.data.tolist() == [0.0, 1.0, -1.0]

    def test_hard_k_full_and_zero(self):
        A = np.array([[3.0, -5.0], [1.0, 4.0]])
        M = BlockDiagonalSimilarity(A)
        np.testing.assert_array_equal(hard_sparsify(M, 4).block().data, A)
        np.testing.assert_array_equal(hard_sparsify(M, 0).block().data, np.zeros((2, 2)))

    def test_hard_example(self):
        M = BlockDiagonalSimilarity(np.array([[3.0, -5.0], [1.0, 4.0]]))
        np.testing.assert_array_equal(hard_sparsify(M, 2).block().data, [[0, -5], [0, 4]])

    def test_hard_ties_lowest_index(self):
        M = DiagonalSimilarity([1.0, -2.0, 2.0, 2.0])
        assert hard_sparsify(M, 2).d.data.tolist() == [0.0, -2.0, 2.0, 0.0]

    def test_hard_out_of_range(self):
        with pytest.raises(ValueError):
            hard_sparsify(DiagonalSimilarity([1.0]), 2)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.data())
    def test_hard_keeps_largest(self, values, data):
        k = data.draw(st.integers(0, len(values)))
        out = hard_sparsify(DiagonalSimilarity(values), k).d.data
        kept = np.flatnonzero(out != 0)
        assert len(kept) <= k
        dropped = [abs(v) for i, v in enumerate(values) if i not in set(kept)]
        if kept.size and dropped:
            assert min(abs(out[kept])) >= max(dropped) - 0.0
