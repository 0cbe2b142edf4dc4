import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ktbo.linalg import (
    KronOperator,
    LinalgError,
    PrecisionOverflowError,
    SingularOperatorError,
    kron_eig_solve,
    kron_logdet,
    kron_mvm,
    matrix_root,
    reduced_precision_mvm,
    sym_eig,
)


def random_sym(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a + a.T) / 2.0


def random_psd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T) / n


def dense_kron(factors):
    out = np.array([[1.0]])
    for f in factors:
        out = np.kron(out, f)
    return out


class TestKronMVM:
    def test_identity_factors(self):
        op = KronOperator((np.eye(2), np.eye(3)))
        v = np.arange(1.0, 7.0)
        np.testing.assert_array_equal(kron_mvm(op, v), v)

    def test_scaled_identity(self):
        op = KronOperator((2.0 * np.eye(2), np.eye(2)))
        np.testing.assert_array_equal(kron_mvm(op, np.ones(4)), 2.0 * np.ones(4))

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        factors = [random_sym(rng, 3), random_sym(rng, 4)]
        v = rng.standard_normal(12)
        expected = dense_kron(factors) @ v
        np.testing.assert_allclose(kron_mvm(KronOperator(tuple(factors)), v), expected, rtol=1e-12)

    def test_batched_columns(self):
        rng = np.random.default_rng(1)
        factors = [random_sym(rng, 2), random_sym(rng, 3), random_sym(rng, 2)]
        v = rng.standard_normal((12, 5))
        expected = dense_kron(factors) @ v
        np.testing.assert_allclose(kron_mvm(factors, v), expected, rtol=1e-12)

    def test_dimension_mismatch(self):
        op = KronOperator((np.eye(2), np.eye(2)))
        with pytest.raises(LinalgError):
            kron_mvm(op, np.ones(5))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_dense_agreement_property(self, seed):
        rng = np.random.default_rng(seed)
        n_factors = rng.integers(1, 4)
        dims, total = [], 1
        for _ in range(n_factors):
            d = int(rng.integers(1, 9))
            if total * d > 4096:
                break
            dims.append(d)
            total *= d
        factors = [random_sym(rng, d) for d in dims] or [random_sym(rng, 3)]
        total = math.prod(f.shape[0] for f in factors)
        v = rng.standard_normal(total)
        dense = dense_kron(factors) @ v
        got = kron_mvm(KronOperator(tuple(factors)), v)
        scale = max(np.max(np.abs(dense)), 1e-30)
        assert np.max(np.abs(got - dense)) <= 1e-10 * scale


class TestSymEig:
    def test_identity(self):
        pair = sym_eig(np.eye(3))
        np.testing.assert_allclose(pair.values, np.ones(3))
        np.testing.assert_allclose(pair.vectors.T @ pair.vectors, np.eye(3), atol=1e-12)

    def test_diagonal_descending(self):
        pair = sym_eig(np.diag([4.0, 1.0]))
        np.testing.assert_allclose(pair.values, [4.0, 1.0])

    def test_reconstruction(self):
        rng = np.random.default_rng(2)
        a = random_sym(rng, 5)
        pair = sym_eig(a)
        recon = (pair.vectors * pair.values) @ pair.vectors.T
        assert np.max(np.abs(recon - a)) <= 1e-8 * np.max(np.abs(a))
        assert np.max(np.abs(pair.vectors.T @ pair.vectors - np.eye(5))) <= 1e-10

    def test_nonfinite_rejected(self):
        a = np.eye(2)
        a[0, 1] = a[1, 0] = np.nan
        with pytest.raises(LinalgError):
            sym_eig(a)


class TestKronEigSolve:
    def test_identity_plus_identity(self):
        op = KronOperator((np.eye(2), np.eye(2)))
        got = kron_eig_solve(op, 1.0, 2.0 * np.ones(4))
        np.testing.assert_allclose(got, np.ones(4))

    def test_one_by_one_factors(self):
        op = KronOperator((np.array([[3.0]]), np.array([[1.0]])))
        got = kron_eig_solve(op, 1.0, np.array([8.0]))
        np.testing.assert_allclose(got, [2.0])

    def test_dense_solve_oracle(self):
        rng = np.random.default_rng(3)
        factors = [random_psd(rng, 3), random_psd(rng, 4)]
        sigma2 = 0.1
        v = rng.standard_normal(12)
        dense = dense_kron(factors) + sigma2 * np.eye(12)
        expected = np.linalg.solve(dense, v)
        got = kron_eig_solve(KronOperator(tuple(factors)), sigma2, v)
        np.testing.assert_allclose(got, expected, rtol=1e-8)

    def test_solve_then_multiply_roundtrip(self):
        rng = np.random.default_rng(4)
        factors = [random_psd(rng, 4), random_psd(rng, 3), random_psd(rng, 2)]
        op = KronOperator(tuple(factors))
        sigma2 = 0.5
        v = rng.standard_normal(op.total_dim)
        x = kron_eig_solve(op, sigma2, v)
        back = kron_mvm(op, x) + sigma2 * x
        np.testing.assert_allclose(back, v, rtol=1e-6)

    def test_singular_raises(self):
        op = KronOperator((np.zeros((2, 2)),))
        with pytest.raises(SingularOperatorError):
            kron_eig_solve(op, 0.0, np.ones(2))


class TestMatrixRoot:
    def test_identity(self):
        np.testing.assert_allclose(matrix_root(np.eye(4)), np.eye(4), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(matrix_root(np.diag([9.0, 4.0])), np.diag([3.0, 2.0]), atol=1e-12)

    def test_reconstruction(self):
        rng = np.random.default_rng(5)
        a = random_psd(rng, 6)
        r = matrix_root(a)
        assert np.max(np.abs(r @ r.T - a)) <= 1e-6 * np.max(np.abs(a))

    def test_output_psd_with_floor(self):
        rng = np.random.default_rng(6)
        a = random_psd(rng, 5)
        a -= 1.5 * np.min(np.linalg.eigvalsh(a)) * np.eye(5)  # keep PSD but near-singular
        clamp = 1e-10
        r = matrix_root(a, clamp_eps=clamp)
        np.testing.assert_allclose(r, r.T, atol=1e-10)
        eigs = np.linalg.eigvalsh(r @ r.T)
        assert np.min(eigs) >= clamp - 1e-12


class TestKronLogdet:
    def test_identity(self):
        assert kron_logdet([np.ones(2), np.ones(2)], 0.0) == pytest.approx(0.0)

    def test_scalar_case(self):
        assert kron_logdet([np.ones(1), np.ones(1)], 1.0) == pytest.approx(math.log(2.0))

    def test_dense_oracle(self):
        rng = np.random.default_rng(7)
        factors = [random_psd(rng, 3), random_psd(rng, 2)]
        sigma2 = 0.5
        dense = dense_kron(factors) + sigma2 * np.eye(6)
        expected = np.linalg.slogdet(dense)[1]
        eigs = [np.linalg.eigvalsh(f) for f in factors]
        assert kron_logdet(eigs, sigma2) == pytest.approx(expected, abs=1e-8)

    def test_singular_raises(self):
        with pytest.raises(SingularOperatorError):
            kron_logdet([np.array([0.0, 1.0])], 0.0)


class TestReducedPrecisionMVM:
    def test_identity_roundtrip(self):
        op = KronOperator((np.eye(2), np.eye(3)))
        v = np.array([1.0, 0.5, 0.25, -1.0, 2.0, 4.0])
        np.testing.assert_array_equal(reduced_precision_mvm(op, v), v)

    def test_unit_range_accuracy(self):
        rng = np.random.default_rng(8)
        factors = [rng.uniform(-1, 1, (4, 4)) for _ in range(2)]
        factors = [(f + f.T) / 2 for f in factors]
        v = rng.uniform(-1, 1, 16)
        exact = kron_mvm(factors, v)
        approx = reduced_precision_mvm(factors, v)
        assert np.max(np.abs(approx - exact)) <= 1e-2 * max(np.max(np.abs(exact)), 1e-12)

    def test_large_magnitude_scaling(self):
        rng = np.random.default_rng(9)
        factors = [1e6 * random_sym(rng, 3), random_sym(rng, 2)]
        v = 1e6 * rng.standard_normal(6)
        exact = kron_mvm(factors, v)
        approx = reduced_precision_mvm(factors, v)
        assert np.max(np.abs(approx - exact)) <= 1e-2 * np.max(np.abs(exact))

    def test_well_conditioned_relative_error(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            factors = [random_psd(rng, 5) + 0.1 * np.eye(5), random_psd(rng, 3) + 0.1 * np.eye(3)]
            v = rng.standard_normal(15)
            exact = kron_mvm(factors, v)
            approx = reduced_precision_mvm(factors, v)
            assert np.linalg.norm(approx - exact) <= 1e-2 * np.linalg.norm(exact)

    def test_nonfinite_raises(self):
        factors = [np.array([[np.inf]])]
        with pytest.raises(PrecisionOverflowError):
            reduced_precision_mvm(factors, np.ones(1))


class TestKronOperator:
    def test_total_dim(self):
        op = KronOperator((np.eye(2), np.eye(3), np.eye(5)))
        assert op.total_dim == 30

    def test_requires_factor(self):
        with pytest.raises(LinalgError):
            KronOperator(())

    def test_rejects_asymmetric(self):
        with pytest.raises(LinalgError):
            KronOperator((np.array([[0.0, 1.0], [0.0, 0.0]]),))
