"""Closed-form proximal operators and spectral projections.

These are the building blocks shared by the multi-task solvers and the
low-rank representation ALM loop.  All functions are pure.
"""

from __future__ import annotations

import enum

import numpy as np

from .exceptions import MtposeError, ShapeError
from .linalg import as_matrix, thin_svd

__all__ = [
    "ShrinkAxis",
    "soft_threshold",
    "l21_shrink",
    "svt",
    "project_l1_ball",
    "project_trace_ball",
]


class ShrinkAxis(enum.Enum):
    ROWS = "rows"
    COLUMNS = "columns"


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau < 0.0:
        raise MtposeError(f"threshold must be finite and >= 0, got {tau}")
    return tau


def soft_threshold(m, tau: float) -> np.ndarray:
    """Elementwise sign(x) * max(|x| - tau, 0): prox of tau * ||.||_1."""
    m = as_matrix(m, "m")
    tau = _check_tau(tau)
    return np.sign(m) * np.maximum(np.abs(m) - tau, 0.0)


def l21_shrink(m, tau: float, axis: ShrinkAxis = ShrinkAxis.ROWS) -> np.ndarray:
    """Group shrinkage: each row (or column) g -> g * max(0, 1 - tau/||g||).

    Prox of tau times the sum of group Euclidean norms.  Zero groups stay
    zero.
    """
    m = as_matrix(m, "m")
    tau = _check_tau(tau)
    along = 1 if axis is ShrinkAxis.ROWS else 0
    norms = np.linalg.norm(m, axis=along, keepdims=True)
    scale = np.zeros_like(norms)
    nz = norms > 0.0
    scale[nz] = np.maximum(0.0, 1.0 - tau / norms[nz])
    return m * scale


def svt(m, tau: float) -> np.ndarray:
    """Singular value thresholding: prox of tau times the nuclear norm."""
    m = as_matrix(m, "m")
    tau = _check_tau(tau)
    if tau == 0.0:
        return m.copy()
    u, s, vt = thin_svd(m)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0.0
    return (u[:, keep] * s[keep]) @ vt[keep, :] if np.any(keep) else np.zeros_like(m)


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of a vector onto {x : ||x||_1 <= radius}.

    Sort-and-threshold simplex algorithm (Duchi et al. style).
    """
    radius = _check_tau(radius)
    v = np.asarray(v, dtype=np.float64)
    if np.sum(np.abs(v)) <= radius:
        return v.copy()
    if radius == 0.0:
        return np.zeros_like(v)
    a = np.abs(v)
    u = np.sort(a)[::-1]
    cs = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    idx = np.nonzero(u - (cs - radius) / k > 0.0)[0][-1]
    theta = (cs[idx] - radius) / (idx + 1)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def project_trace_ball(m, tau: float) -> np.ndarray:
    """Euclidean projection onto {Q : nuclear norm of Q <= tau}.

    Projects the spectrum onto the l1 ball of radius tau and reconstructs.
    """
    m = as_matrix(m, "m")
    tau = _check_tau(tau)
    if tau == 0.0:
        return np.zeros_like(m)
    u, s, vt = thin_svd(m)
    if np.sum(s) <= tau:
        return m.copy()
    s = project_l1_ball(s, tau)
    keep = s > 0.0
    if not np.any(keep):
        return np.zeros_like(m)
    return (u[:, keep] * s[keep]) @ vt[keep, :]


def shape_guard(a, b, what: str) -> None:
    """Raise ShapeError unless a and b have identical shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
