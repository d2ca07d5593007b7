"""Small dense matrix helpers for the control computations.

Matrices are plain 2-D ``numpy`` float arrays. The helpers here add the
validation the rest of the package relies on (finite entries, square
shapes) and a zero test with a fixed absolute tolerance.
"""

import numpy as np

ZERO_TOL = 1e-9


class NumericalError(ArithmeticError):
    """An iterative numerical routine failed to converge."""


def as_mat(m, name="matrix"):
    """Return ``m`` as a finite 2-D float array (row vectors are promoted)."""
    arr = np.array(m, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _check_square(m):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")


def mat_pow(m, e):
    """``m`` raised to the non-negative integer power ``e``."""
    m = as_mat(m)
    _check_square(m)
    if e < 0 or int(e) != e:
        raise ValueError(f"exponent must be a non-negative integer, got {e}")
    return np.linalg.matrix_power(m, int(e))


def power_table(m, max_e):
    """Stack of ``m**0 .. m**max_e`` with shape ``(max_e + 1, n, n)``."""
    m = as_mat(m)
    _check_square(m)
    n = m.shape[0]
    out = np.empty((max_e + 1, n, n))
    out[0] = np.eye(n)
    for e in range(1, max_e + 1):
        out[e] = out[e - 1] @ m
    return out


def spectral_radius(m):
    """Largest eigenvalue modulus of a square matrix."""
    m = as_mat(m)
    _check_square(m)
    try:
        eig = np.linalg.eigvals(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue iteration did not converge: {exc}") from exc
    return float(np.max(np.abs(eig)))


def trace_product(p, q):
    """``Tr(p @ q)`` without forming the product."""
    return float(np.einsum("ij,ji->", p, q))


def is_zero(m, tol=ZERO_TOL):
    return bool(np.all(np.abs(m) < tol))


def is_symmetric(m, tol=1e-9):
    return m.shape[0] == m.shape[1] and bool(np.allclose(m, m.T, atol=tol, rtol=0.0))


def min_eigenvalue_sym(m):
    return float(np.linalg.eigvalsh((m + m.T) / 2.0)[0])
