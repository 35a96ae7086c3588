"""Small dense/sparse linear algebra kernels shared across the package.

Sparse matrices are scipy CSR; dense matrices are float64 numpy arrays.
The vectorization convention everywhere is column stacking, which is the
one satisfying vec(X Y Z) = (Z^T kron X) vec(Y).
"""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

KRON_ENTRY_CAP = 10**6


class SizeCapError(ValueError):
    """Raised when an operation meant for small problems is asked to allocate too much."""


class SingularSystemError(RuntimeError):
    """Raised by dense_solve when elimination hits a negligible pivot."""

    def __init__(self, smallest_pivot: float, threshold: float):
        self.smallest_pivot = smallest_pivot
        self.threshold = threshold
        super().__init__(
            f"system is numerically singular: smallest pivot {smallest_pivot:.3e} "
            f"below threshold {threshold:.3e}"
        )


def _require_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite entries")


def spmm(a: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    """Sparse (CSR) times dense product.

    Cost is proportional to nnz(a) * b.shape[1]; the result is a dense array.
    """
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    if not sp.issparse(a):
        a = sp.csr_array(a)
    _require_finite("sparse values", a.data)
    _require_finite("dense operand", b)
    return np.asarray(a @ b)


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product, restricted to small (reference/oracle) problem sizes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    entries = a.shape[0] * a.shape[1] * b.shape[0] * b.shape[1]
    if entries > KRON_ENTRY_CAP:
        raise SizeCapError(
            f"kron result would have {entries} entries, cap is {KRON_ENTRY_CAP}"
        )
    _require_finite("kron operand A", a)
    _require_finite("kron operand B", b)
    return np.kron(a, b)


def vectorize(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization: columns of ``m`` concatenated top to bottom."""
    return np.asarray(m).flatten(order="F")


def unvectorize(v: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    return np.asarray(v).reshape(shape, order="F")


class PowerIterResult(NamedTuple):
    value: float
    iterations: int
    converged: bool


def _dominant_eig(
    apply: Callable[[np.ndarray], np.ndarray],
    v: np.ndarray,
    tol: float,
    max_iters: int,
) -> tuple[float, np.ndarray, int, bool]:
    """Power iteration for the largest-magnitude eigenvalue of a symmetric operator."""
    estimate = 0.0
    iterations = 0
    for iterations in range(1, max_iters + 1):
        w = apply(v)
        norm = float(np.linalg.norm(w))
        if norm < 1e-300:
            # operator annihilates the iterate; spectrum is 0 along this subspace
            return 0.0, v, iterations, True
        w = w / norm
        new_estimate = float(w @ apply(w))
        if iterations > 1 and abs(new_estimate - estimate) < tol:
            return new_estimate, w, iterations, True
        estimate = new_estimate
        v = w
    return estimate, v, iterations, False


def power_iteration_sym(
    apply: Callable[[np.ndarray], np.ndarray],
    n: int,
    tol: float = 1e-6,
    max_iters: int = 10_000,
) -> PowerIterResult:
    """Estimate the maximum (signed) eigenvalue of a symmetric linear operator.

    ``apply`` is called matrix-free on vectors of length ``n``. The start vector
    comes from a fixed pseudo-random seed so repeated runs agree bitwise. A first
    pass finds the dominant (largest magnitude) eigenvalue; if that is negative,
    a second pass on the shifted operator recovers the signed maximum.

    Non-convergence is reported through ``converged=False`` rather than raised;
    at small scale callers can fall back to a dense eigensolve.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if n == 0:
        return PowerIterResult(0.0, 0, True)
    rng = np.random.default_rng(20240411)
    v0 = rng.standard_normal(n)
    v0 /= np.linalg.norm(v0)

    dominant, vec, iters, ok = _dominant_eig(apply, v0, tol, max_iters)
    if dominant >= 0.0:
        return PowerIterResult(dominant, iters, ok)

    # Dominant eigenvalue is negative: shift so the top of the spectrum dominates.
    shift = abs(dominant)

    def shifted(x: np.ndarray) -> np.ndarray:
        return apply(x) + shift * x

    remaining = max(max_iters - iters, 1)
    top, _, iters2, ok2 = _dominant_eig(shifted, v0, tol, remaining)
    return PowerIterResult(top - shift, iters + iters2, ok and ok2)


def dense_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a X = b with a pivoted LU factorization.

    Raises :class:`SingularSystemError` when the smallest pivot falls below
    1e-12 times the matrix scale.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    _require_finite("system matrix", a)
    _require_finite("right-hand side", b)

    lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    scale = float(np.abs(a).max()) if a.size else 0.0
    threshold = 1e-12 * max(scale, 1e-300)
    smallest = float(pivots.min()) if pivots.size else 0.0
    if smallest < threshold:
        raise SingularSystemError(smallest, threshold)
    x = scipy.linalg.lu_solve((lu, piv), b, check_finite=False)
    return np.asarray(x)
