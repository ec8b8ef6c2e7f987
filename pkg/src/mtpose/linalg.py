"""Dense linear-algebra kernels used by every solver in the package.

Everything operates on 2-D float64 numpy arrays ("matrices") and never
mutates its inputs.  Public operations validate shapes and finiteness so
NaN/Inf cannot leak silently into the iterative solvers downstream.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

from .exceptions import NumericsError, ShapeError

__all__ = [
    "SvdResult",
    "as_matrix",
    "matmul",
    "thin_svd",
    "solve_spd",
    "nuclear_norm",
    "save_matrix_csv",
    "load_matrix_csv",
]


class SvdResult(NamedTuple):
    """Thin SVD: a = u @ diag(s) @ vt with s nonincreasing, nonnegative."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericsError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit dimension checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions differ: {a.shape[0]}x{a.shape[1]} @ "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def thin_svd(a) -> SvdResult:
    """Thin SVD of a general matrix.

    Returns u (m x k), s (k,), vt (k x n) with k = min(m, n).
    """
    a = as_matrix(a, "a")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        # LAPACK bailed out; report the scale of the offending matrix.
        raise NumericsError(
            f"SVD failed to converge (fro norm {np.linalg.norm(a):.3e})"
        ) from exc
    return SvdResult(u=u, s=s, vt=vt)


def solve_spd(a, b) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite `a` via Cholesky."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"a must be square, got {a.shape[0]}x{a.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"b has {b.shape[0]} rows, expected {a.shape[0]}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise NumericsError("matrix is not symmetric")
    try:
        c, low = scipy.linalg.cho_factor(a, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericsError("matrix is not positive definite") from exc
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


def nuclear_norm(a) -> float:
    """Sum of singular values."""
    return float(np.sum(thin_svd(a).s))


def save_matrix_csv(a, path) -> None:
    """Write one row per line, comma-separated, %.17g (round-trip exact)."""
    a = as_matrix(a, "a")
    with open(path, "w") as fh:
        for row in a:
            fh.write(",".join("%.17g" % v for v in row))
            fh.write("\n")


def load_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return as_matrix(np.array(rows, dtype=np.float64), path if isinstance(path, str) else "matrix")
