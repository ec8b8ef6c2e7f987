"""Low-rank representation (LRR) by inexact augmented Lagrange multipliers,
and the manifold feature-cleaning transform built on it.

The problem solved is

    min_{Z,E}  ||Z||_* + lambda ||E||_{2,1}   s.t.  X = A Z + E,

with the auxiliary split Z = J carrying the nuclear-norm term.  E uses
column groups (per-sample corruption).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import MtposeError, ShapeError
from .linalg import as_matrix, save_matrix_csv, solve_spd, thin_svd
from .prox import ShrinkAxis, l21_shrink, svt

__all__ = ["LrrProblem", "LrrResult", "solve_lrr", "mrcl_transform", "lrr_affinity"]

log = logging.getLogger(__name__)


@dataclass
class LrrProblem:
    x: np.ndarray  # (D, N) samples as columns
    a: np.ndarray  # (D, M) dictionary
    lam: float

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        self.a = as_matrix(self.a, "a")
        if self.x.shape[0] != self.a.shape[0]:
            raise ShapeError(
                f"x has {self.x.shape[0]} rows, dictionary has {self.a.shape[0]}"
            )
        if self.lam <= 0:
            raise MtposeError(f"lambda must be > 0, got {self.lam}")


@dataclass
class LrrResult:
    z: np.ndarray  # (M, N)
    e: np.ndarray  # (D, N)
    primal_residuals: tuple[float, float]  # (||X-AZ-E||_inf, ||Z-J||_inf)
    iterations: int
    converged: bool
    residual_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


def solve_lrr(
    problem: LrrProblem,
    mu0: float = 0.5,
    rho: float = 1.1,
    mu_max: float = 1e6,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> LrrResult:
    """Inexact ALM for LRR.

    Update order per sweep: J (singular value thresholding), Z (SPD solve
    with I + A'A), E (column-wise group shrinkage), multipliers, mu.
    Non-convergence within max_iter is reported via converged=False, not
    raised.
    """
    if tol <= 0 or mu0 <= 0 or rho <= 1 or mu_max <= 0:
        raise MtposeError("need tol > 0, mu0 > 0, rho > 1, mu_max > 0")
    x, a, lam = problem.x, problem.a, problem.lam
    d, n = x.shape
    m = a.shape[1]

    z = np.zeros((m, n))
    j = np.zeros((m, n))
    e = np.zeros((d, n))
    y1 = np.zeros((d, n))
    y2 = np.zeros((m, n))
    mu = float(mu0)

    gram = np.eye(m) + a.T @ a  # SPD, factored fresh each sweep for clarity
    res_trace = []
    it = 0
    converged = False
    r1 = r2 = np.inf
    while it < max_iter:
        it += 1
        j = svt(z + y2 / mu, 1.0 / mu)
        rhs = a.T @ (x - e) + j + (a.T @ y1 - y2) / mu
        z = solve_spd(gram, rhs)
        e = l21_shrink(x - a @ z + y1 / mu, lam / mu, ShrinkAxis.COLUMNS)

        leq1 = x - a @ z - e
        leq2 = z - j
        y1 = y1 + mu * leq1
        y2 = y2 + mu * leq2
        mu = min(rho * mu, mu_max)

        r1 = float(np.max(np.abs(leq1))) if leq1.size else 0.0
        r2 = float(np.max(np.abs(leq2))) if leq2.size else 0.0
        res_trace.append((r1, r2))
        if r1 < tol and r2 < tol:
            converged = True
            break

    return LrrResult(
        z=z, e=e, primal_residuals=(r1, r2), iterations=it,
        converged=converged, residual_trace=np.array(res_trace),
    )


def mrcl_transform(
    features, lam: float = 0.3, target_norm: float | None = None, **solver_kwargs
) -> np.ndarray:
    """Manifold-regularized cleanup of a feature matrix (rows = samples).

    Solves the self-expressive LRR with the features themselves as the
    dictionary and returns the low-rank reconstruction (A Z*)', i.e. the
    input with sample-specific corruption stripped.  If the ALM loop does
    not converge the input is returned unchanged (with a warning).

    `target_norm` rescales the features so the mean sample norm hits that
    value before solving (and undoes the scaling afterwards).  The trade-off
    between the nuclear-norm and corruption terms depends on the absolute
    feature scale, so fixing it makes one `lam` usable across feature
    extractors of different magnitudes.
    """
    f = as_matrix(features, "features")
    if f.shape[0] < 2:
        raise MtposeError("need at least 2 samples")
    scale = 1.0
    if target_norm is not None:
        if target_norm <= 0:
            raise MtposeError("target_norm must be > 0")
        mean_norm = float(np.linalg.norm(f, axis=1).mean())
        if mean_norm > 0:
            scale = target_norm / mean_norm
    x = (f * scale).T  # columns are samples
    result = solve_lrr(LrrProblem(x=x, a=x, lam=lam), **solver_kwargs)
    if not result.converged:
        log.warning(
            "LRR did not converge in %d iterations (residuals %.3e / %.3e); "
            "returning features unchanged",
            result.iterations, *result.primal_residuals,
        )
        return f.copy()
    return (x @ result.z).T / scale


def lrr_affinity(z_star) -> np.ndarray:
    """Symmetric nonnegative affinity (|Z| + |Z'|) / 2 for diagnostics."""
    z = as_matrix(z_star, "z_star")
    if z.shape[0] != z.shape[1]:
        raise ShapeError(f"z_star must be square, got {z.shape}")
    return 0.5 * (np.abs(z) + np.abs(z.T))


def dump_diagnostics(result: LrrResult, prefix: str) -> None:
    """Write Z*, E* and the residual trace as CSV files for external checks."""
    save_matrix_csv(result.z, f"{prefix}_z.csv")
    save_matrix_csv(result.e, f"{prefix}_e.csv")
    save_matrix_csv(result.residual_trace.reshape(-1, 2), f"{prefix}_residuals.csv")


# re-exported for callers that only need the shape-interaction oracle
def shape_interaction(x) -> np.ndarray:
    """V V' from the thin SVD of x: the clean-data LRR fixed point."""
    u, s, vt = thin_svd(x)
    keep = s > 1e-12 * max(1.0, s[0] if s.size else 0.0)
    v = vt[keep, :].T
    return v @ v.T
