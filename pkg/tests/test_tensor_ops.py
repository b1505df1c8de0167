"""Multilinear primitives, checked against brute-force enumeration oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brtf.tensor_ops import (
    as_tensor,
    cp_reconstruct,
    generalized_inner_product,
    hadamard_all,
    khatri_rao,
    khatri_rao_except,
    masked_frobenius_sq,
    matricize,
)


def naive_cp(factors):
    """Entrywise CP reconstruction by explicit index loops."""
    shape = tuple(f.shape[0] for f in factors)
    rank = factors[0].shape[1]
    out = np.zeros(shape)
    for index in itertools.product(*[range(s) for s in shape]):
        out[index] = sum(
            np.prod([f[i, r] for f, i in zip(factors, index)]) for r in range(rank))
    return out


def naive_matricize(t, mode):
    """Unfolding via explicit column-index arithmetic, lowest mode fastest."""
    shape = t.shape
    rest = [k for k in range(t.ndim) if k != mode]
    out = np.zeros((shape[mode], int(np.prod([shape[k] for k in rest]))))
    for index in itertools.product(*[range(s) for s in shape]):
        col = 0
        stride = 1
        for k in rest:
            col += index[k] * stride
            stride *= shape[k]
        out[index[mode], col] = t[index]
    return out


def small_factors(seed, shape=(3, 4, 2), rank=3):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((s, rank)) for s in shape]


class TestMatricize:
    def test_matrix_is_its_own_mode0_unfolding(self):
        t = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matricize(t, 0), t)

    def test_rank_one_example(self):
        a, b, c = np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])
        t = np.einsum("i,j,k->ijk", a, b, c)
        expected = np.array([[15.0, 20.0, 18.0, 24.0], [30.0, 40.0, 36.0, 48.0]])
        np.testing.assert_allclose(matricize(t, 0), expected)
        # matches a (c kron b)^T
        np.testing.assert_allclose(matricize(t, 0), np.outer(a, np.kron(c, b)))

    def test_zero_tensor(self):
        t = np.zeros((3, 3, 3))
        for mode in range(3):
            np.testing.assert_array_equal(matricize(t, mode), np.zeros((3, 9)))

    def test_against_naive_enumeration(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((3, 4, 2, 2))
        for mode in range(4):
            np.testing.assert_allclose(matricize(t, mode), naive_matricize(t, mode))

    def test_mode_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            matricize(np.zeros((2, 2)), 2)


class TestKhatriRao:
    def test_reverse_order_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = np.array([[5.0, 12.0], [15.0, 24.0], [7.0, 16.0], [21.0, 32.0]])
        np.testing.assert_allclose(khatri_rao([a, b]), expected)

    def test_columns_are_reverse_kroneckers(self):
        mats = small_factors(1, shape=(2, 3, 2), rank=2)
        out = khatri_rao(mats)
        for r in range(2):
            col = mats[-1][:, r]
            for m in reversed(mats[:-1]):
                col = np.kron(col, m[:, r])
            np.testing.assert_allclose(out[:, r], col)

    def test_single_matrix_identity(self):
        m = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(khatri_rao([m]), m)

    def test_zero_annihilates(self):
        mats = [np.ones((2, 2)), np.zeros((3, 2)), np.ones((2, 2))]
        assert not khatri_rao(mats).any()

    def test_column_mismatch(self):
        with pytest.raises(ValueError, match="column count"):
            khatri_rao([np.ones((2, 2)), np.ones((2, 3))])

    def test_unvectorizing_recovers_outer_product(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        out = khatri_rao([a, b])
        for r in range(2):
            np.testing.assert_allclose(out[:, r].reshape(4, 3), np.outer(b[:, r], a[:, r]))


class TestHadamard:
    def test_hand_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(hadamard_all([a, b]),
                                      np.array([[5.0, 12.0], [21.0, 32.0]]))

    def test_identity_and_absorbing(self):
        x = np.arange(4.0).reshape(2, 2)
        np.testing.assert_array_equal(hadamard_all([x, np.ones((2, 2))]), x)
        assert not hadamard_all([x, np.zeros((2, 2))]).any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            hadamard_all([np.ones((2, 2)), np.ones((3, 2))])


class TestGeneralizedInnerProduct:
    def test_hand_example(self):
        vecs = [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])]
        assert generalized_inner_product(vecs) == 63.0

    def test_zero_vector_absorbs(self):
        vecs = [np.ones(3), np.zeros(3), np.ones(3)]
        assert generalized_inner_product(vecs) == 0.0

    def test_two_vectors_is_dot(self):
        rng = np.random.default_rng(5)
        u, v = rng.standard_normal(4), rng.standard_normal(4)
        assert generalized_inner_product([u, v]) == pytest.approx(float(u @ v))

    @given(st.floats(-3, 3), st.integers(0, 2))
    @settings(max_examples=25, deadline=None)
    def test_multilinearity(self, alpha, which):
        rng = np.random.default_rng(11)
        vecs = [rng.standard_normal(3) for _ in range(3)]
        base = generalized_inner_product(vecs)
        scaled = [v.copy() for v in vecs]
        scaled[which] = alpha * scaled[which]
        assert generalized_inner_product(scaled) == pytest.approx(alpha * base, abs=1e-9)


class TestCpReconstruct:
    def test_rank_one_entries(self):
        a, b, c = np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]]), np.array([[5.0], [6.0]])
        t = cp_reconstruct([a, b, c])
        assert t[0, 0, 0] == 15.0
        assert t[1, 1, 1] == 48.0

    def test_zero_factor_gives_zero_tensor(self):
        factors = small_factors(2)
        factors[1] = np.zeros_like(factors[1])
        assert not cp_reconstruct(factors).any()

    def test_two_modes_is_matrix_product(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(cp_reconstruct([a, b]), a @ b.T)

    def test_against_naive_enumeration(self):
        factors = small_factors(7)
        np.testing.assert_allclose(cp_reconstruct(factors), naive_cp(factors), atol=1e-12)

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_unfolding_identity(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 5, size=3))
        rank = int(rng.integers(1, 4))
        factors = [rng.standard_normal((s, rank)) for s in shape]
        t = cp_reconstruct(factors)
        for mode in range(3):
            lhs = matricize(t, mode)
            rhs = factors[mode] @ khatri_rao_except(factors, mode).T
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestMaskedFrobenius:
    def test_fully_observed(self):
        assert masked_frobenius_sq(np.array([[3.0, 4.0]]), np.ones((1, 2), bool)) == 25.0

    def test_all_false_mask(self):
        assert masked_frobenius_sq(np.ones((2, 2)), np.zeros((2, 2), bool)) == 0.0

    def test_diagonal_mask(self):
        t = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert masked_frobenius_sq(t, np.eye(2, dtype=bool)) == 17.0

    def test_all_true_equals_unmasked(self):
        rng = np.random.default_rng(9)
        t = rng.standard_normal((3, 4))
        assert masked_frobenius_sq(t, np.ones_like(t, bool)) == pytest.approx(
            float(np.sum(t ** 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            masked_frobenius_sq(np.ones((2, 2)), np.ones((2, 3), bool))


class TestValidation:
    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_tensor(np.array([1.0, np.nan]))

    def test_nan_allowed_when_marking_missing(self):
        t = as_tensor(np.array([1.0, np.nan]), allow_nan=True)
        assert np.isnan(t[1])
