"""Dense linear-algebra core.

Every other module works on plain ``numpy.ndarray`` values of dtype float64.
The helpers here add the shape checks, the column-major ``vec`` convention and
the SPD / symmetric-eigen routines the curvature code relies on.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class RankError(ValueError):
    """Operand has the wrong number of axes."""


class DefinitenessError(np.linalg.LinAlgError):
    """A matrix expected to be symmetric positive definite is not."""

    def __init__(self, pivot, msg=None):
        self.pivot = pivot
        super().__init__(msg or f"matrix is not positive definite (failing pivot {pivot})")


class NumericError(ArithmeticError):
    """An iterative routine did not converge."""


def as_tensor(x, ndim=None):
    a = np.asarray(x, dtype=np.float64)
    if ndim is not None and a.ndim != ndim:
        raise RankError(f"expected rank {ndim}, got shape {a.shape}")
    if a.ndim < 1 or a.ndim > 3:
        raise RankError(f"tensors have rank 1-3, got shape {a.shape}")
    if 0 in a.shape:
        raise DimensionError(f"all extents must be >= 1, got {a.shape}")
    return a


def matmul(a, b):
    """Matrix product with an explicit shape check."""
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def kron(a, b):
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    return np.kron(a, b)


def vec(a):
    """Stack the columns of a matrix into one vector."""
    a = as_tensor(a, 2)
    return a.reshape(-1, order="F").copy()


def unvec(v, shape):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != shape[0] * shape[1]:
        raise DimensionError(f"cannot unvec length {v.size} into {shape}")
    return v.reshape(shape, order="F").copy()


def cholesky(a):
    """Lower Cholesky factor of an SPD matrix.

    Raises
    ------
    DefinitenessError
        If factorisation breaks down; ``err.pivot`` is the 0-based index of
        the first non-positive pivot.
    """
    a = as_tensor(a, 2)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise DefinitenessError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def solve_spd(a, rhs):
    """Solve ``a @ x = rhs`` for symmetric positive definite ``a`` via Cholesky."""
    a = as_tensor(a, 2)
    rhs = np.asarray(rhs, dtype=np.float64)
    vector_rhs = rhs.ndim == 1
    if vector_rhs:
        rhs = rhs[:, None]
    if rhs.ndim != 2 or rhs.shape[0] != a.shape[0]:
        raise DimensionError(f"rhs shape {rhs.shape} does not match {a.shape}")
    c = cholesky(a)
    x, info = lapack.dpotrs(c, rhs, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs: illegal argument {-info}")
    return x[:, 0] if vector_rhs else x


@dataclass(frozen=True)
class SymEig:
    """Eigen-decomposition ``Q diag(w) Q^T`` of a symmetric matrix.

    ``eigenvalues`` are ascending; column ``i`` of ``eigenvectors`` belongs to
    ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self):
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def sym_eig(a):
    a = as_tensor(a, 2)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    sym = 0.5 * (a + a.T)
    try:
        w, q = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as err:
        raise NumericError(str(err)) from err
    return SymEig(w, q)


def symmetrize(a):
    return 0.5 * (a + a.T)


def rel_frobenius(approx, exact):
    """``||approx - exact||_F / ||exact||_F`` (absolute error if ``exact`` is 0)."""
    denom = np.linalg.norm(exact)
    diff = np.linalg.norm(np.asarray(approx) - np.asarray(exact))
    return diff / denom if denom > 0 else diff
