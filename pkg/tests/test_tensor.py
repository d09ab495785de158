import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kfac_ws.tensor import (
    DefinitenessError, DimensionError, RankError, as_tensor, cholesky, kron, matmul,
    rel_frobenius, solve_spd, sym_eig, unvec, vec,
)


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def kron_definition(a, b):
    m, n = a.shape
    p, q = b.shape
    out = np.zeros((m * p, n * q))
    for i in range(m):
        for j in range(n):
            for k in range(p):
                for l in range(q):
                    out[i * p + k, j * q + l] = a[i, j] * b[k, l]
    return out


def finite(shape):
    return arrays(np.float64, shape, elements=st.floats(-3, 3, allow_nan=False, allow_infinity=False))


class TestTensor:
    def test_as_tensor_rejects_bad_rank(self):
        with pytest.raises(RankError):
            as_tensor(np.zeros((2, 2, 2, 2)))
        with pytest.raises(RankError):
            as_tensor(3.0)

    def test_as_tensor_rejects_empty_extent(self):
        with pytest.raises(DimensionError):
            as_tensor(np.zeros((0, 3)))


class TestMatmul:
    def test_identity(self, rng):
        M = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(matmul(np.eye(2), M), M)

    def test_hand_sum(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(finite((3, 4)), finite((4, 2)), finite((2, 5)))
    def test_associativity(self, a, b, c):
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        scale = np.linalg.norm(np.abs(a) @ np.abs(b) @ np.abs(c)) + 1e-300
        assert np.linalg.norm(left - right) / scale < 1e-10


class TestKron:
    def test_identity(self):
        np.testing.assert_array_equal(kron(np.eye(2), np.eye(2)), np.eye(4))

    def test_scalar(self, rng):
        b = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(kron([[2.0]], b), 2 * b)

    def test_definition_oracle(self, rng):
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((2, 2))
        np.testing.assert_array_equal(kron(a, b), kron_definition(a, b))

    def test_rank_error(self):
        with pytest.raises(RankError):
            kron(np.ones(3), np.ones((2, 2)))

    @settings(max_examples=50, deadline=None)
    @given(finite((2, 3)), finite((2, 2)), finite((3, 2)), finite((2, 3)))
    def test_mixed_product(self, A, B, C, D):
        lhs = kron(A, B) @ kron(C, D)
        rhs = kron(A @ C, B @ D)
        scale = np.linalg.norm(kron(np.abs(A) @ np.abs(C), np.abs(B) @ np.abs(D))) + 1e-300
        assert np.linalg.norm(lhs - rhs) / scale < 1e-10


class TestVec:
    def test_column_major(self):
        np.testing.assert_array_equal(vec([[1, 2], [3, 4]]), [1, 3, 2, 4])

    def test_round_trip(self, rng):
        M = rng.standard_normal((3, 5))
        np.testing.assert_array_equal(unvec(vec(M), M.shape), M)

    def test_vec_identity_oracle(self, rng):
        A, X, B = (rng.standard_normal((3, 3)) for _ in range(3))
        np.testing.assert_allclose(vec(A @ X @ B.T), kron(B, A) @ vec(X), rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(finite((2, 3)), finite((3, 4)), finite((5, 4)))
    def test_vec_identity_property(self, A, X, B):
        lhs = vec(A @ X @ B.T)
        rhs = kron(B, A) @ vec(X)
        scale = np.linalg.norm(kron(np.abs(B), np.abs(A)) @ np.abs(vec(X))) + 1e-300
        assert np.linalg.norm(lhs - rhs) / scale < 1e-10

    def test_unvec_length_mismatch(self):
        with pytest.raises(DimensionError):
            unvec(np.ones(5), (2, 3))


class TestSolveSPD:
    def test_identity(self, rng):
        r = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(solve_spd(np.eye(3), r), r)

    def test_diagonal(self):
        np.testing.assert_allclose(solve_spd(np.diag([2.0, 4.0]), [[2.0], [4.0]]), [[1.0], [1.0]])

    def test_residual(self, rng):
        M = rng.standard_normal((6, 6))
        A = M.T @ M + np.eye(6)
        rhs = rng.standard_normal((6, 3))
        x = solve_spd(A, rhs)
        assert np.linalg.norm(A @ x - rhs) / np.linalg.norm(rhs) < 1e-10

    def test_vector_rhs(self, rng):
        A = np.diag([1.0, 2.0, 4.0])
        np.testing.assert_allclose(solve_spd(A, [1.0, 2.0, 4.0]), np.ones(3))

    def test_non_spd_names_pivot(self):
        A = np.diag([1.0, 2.0, -1.0, 3.0])
        with pytest.raises(DefinitenessError) as info:
            solve_spd(A, np.ones(4))
        assert info.value.pivot == 2

    def test_cholesky_reconstructs(self, rng):
        M = rng.standard_normal((5, 5))
        A = M @ M.T + np.eye(5)
        L = cholesky(A)
        np.testing.assert_allclose(L @ L.T, A, atol=1e-12)
        assert np.allclose(L, np.tril(L))

    @settings(max_examples=50, deadline=None)
    @given(finite((4, 4)), finite((4, 2)))
    def test_solve_then_multiply(self, M, rhs):
        A = M @ M.T + np.eye(4)
        x = solve_spd(A, rhs)
        assert np.linalg.norm(A @ x - rhs) <= 1e-8 * (np.linalg.norm(rhs) + 1e-300) + 1e-300


class TestSymEig:
    def test_identity(self):
        np.testing.assert_allclose(sym_eig(np.eye(3)).eigenvalues, [1, 1, 1])

    def test_diagonal(self):
        e = sym_eig(np.diag([5.0, 1.0]))
        np.testing.assert_allclose(e.eigenvalues, [1, 5])
        np.testing.assert_allclose(np.abs(e.eigenvectors), [[0, 1], [1, 0]])

    def test_reconstruction(self, rng):
        M = rng.standard_normal((6, 6))
        A = M + M.T
        e = sym_eig(A)
        assert rel_frobenius(e.reconstruct(), A) < 1e-10
        np.testing.assert_allclose(e.eigenvectors.T @ e.eigenvectors, np.eye(6), atol=1e-10)
        assert np.all(np.diff(e.eigenvalues) >= 0)

    def test_symmetrizes_input(self):
        A = np.array([[1.0, 2.0], [0.0, 1.0]])
        e = sym_eig(A)
        np.testing.assert_allclose(e.reconstruct(), [[1.0, 1.0], [1.0, 1.0]], atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(finite((5, 5)))
    def test_invariants(self, M):
        A = M + M.T
        e = sym_eig(A)
        err = np.linalg.norm(e.reconstruct() - A)
        assert err <= 1e-10 * max(np.linalg.norm(A), 1.0)
        np.testing.assert_allclose(e.eigenvectors.T @ e.eigenvectors, np.eye(5), atol=1e-10)


def test_rel_frobenius_zero_reference():
    assert rel_frobenius(np.ones((2, 2)), np.zeros((2, 2))) == 2.0
