"""Multi-task regularized least-squares solvers.

Four penalty variants over a stacked weight matrix W of shape
(d1, V * d2), whose v-th column block is the regressor of task v:

  * LeastTrace        0.5 * sum_v ||Y_v - X_v W_v||_F^2 + rho1 ||W||_*
  * LeastL21          ... + rho_l2 ||W||_F^2 + rho1 ||W||_{2,1}  (row groups)
  * LeastLasso        ... + rho_l2 ||W||_F^2 + rho1 ||W||_1
  * LeastSparseTrace  ... + gamma ||P||_1  s.t.  W = P + Q, ||Q||_* <= tau

All of them are solved by FISTA with backtracking line search and
restart-on-increase, which makes the recorded objective trace literally
nonincreasing.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import MtposeError, NumericsError, ShapeError
from .linalg import as_matrix, nuclear_norm
from .prox import ShrinkAxis, l21_shrink, project_trace_ball, soft_threshold, svt

__all__ = [
    "Penalty",
    "TaskDataset",
    "SolverOpts",
    "MtlModel",
    "SparseTraceModel",
    "objective",
    "solve",
    "solve_least_trace",
    "solve_least_l21",
    "solve_least_lasso",
    "solve_least_sparse_trace",
    "predict",
    "save_model",
    "load_model",
]


class Penalty(enum.Enum):
    TRACE = "LeastTrace"
    L21 = "LeastL21"
    LASSO = "LeastLasso"
    SPARSE_TRACE = "LeastSparseTrace"


@dataclass
class TaskDataset:
    """Training data of one task: features x (N x d1), targets y (N x d2)."""

    task_id: int
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = as_matrix(self.x, f"task {self.task_id} x")
        self.y = as_matrix(self.y, f"task {self.task_id} y")
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(
                f"task {self.task_id}: x has {self.x.shape[0]} rows, "
                f"y has {self.y.shape[0]}"
            )


@dataclass
class SolverOpts:
    rho1: float = 0.1
    rho_l2: float = 0.0
    gamma: float = 0.1
    tau: float | None = None  # None -> 0.5 * nuclear norm of the ridge fit
    max_iter: int = 5000
    tol: float = 1e-6
    step_init: float = 1.0
    standardize: bool = False

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.step_init <= 0:
            raise MtposeError("tol and step_init must be > 0, max_iter >= 1")
        for name in ("rho1", "rho_l2", "gamma"):
            if getattr(self, name) < 0:
                raise MtposeError(f"{name} must be >= 0")
        if self.tau is not None and self.tau < 0:
            raise MtposeError("tau must be >= 0")


@dataclass
class MtlModel:
    w: np.ndarray  # (d1, V * d2)
    d1: int
    d2: int
    task_ids: list[int]
    penalty: Penalty
    opts: SolverOpts
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # per-task feature scalers / target offsets, present iff opts.standardize
    x_mean: np.ndarray | None = None  # (V, d1)
    x_scale: np.ndarray | None = None  # (V, d1)
    y_mean: np.ndarray | None = None  # (V, d2)

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    def block(self, v: int) -> np.ndarray:
        return self.w[:, v * self.d2 : (v + 1) * self.d2]


@dataclass
class SparseTraceModel(MtlModel):
    p: np.ndarray | None = None
    q: np.ndarray | None = None
    max_q_nuclear: float = 0.0  # largest ||Q||_* seen over all iterates


def _check_tasks(tasks: list[TaskDataset]) -> tuple[int, int]:
    if not tasks:
        raise MtposeError("at least one task is required")
    d1 = tasks[0].x.shape[1]
    d2 = tasks[0].y.shape[1]
    for t in tasks:
        if t.x.shape[1] != d1 or t.y.shape[1] != d2:
            raise ShapeError(
                f"task {t.task_id}: dims ({t.x.shape[1]}, {t.y.shape[1]}) "
                f"differ from ({d1}, {d2})"
            )
    return d1, d2


def _standardize(tasks: list[TaskDataset]):
    """Zero-mean / unit-variance features per task; constant dims untouched.

    Targets are centered as well (their means are stored and added back at
    prediction time): with centered features a linear model has no way to
    express the constant offset otherwise.
    """
    means, scales, y_means, out = [], [], [], []
    for t in tasks:
        mu = t.x.mean(axis=0)
        sd = t.x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        ym = t.y.mean(axis=0)
        means.append(mu)
        scales.append(sd)
        y_means.append(ym)
        out.append(TaskDataset(t.task_id, (t.x - mu) / sd, t.y - ym))
    return out, np.array(means), np.array(scales), np.array(y_means)


def _loss_and_grad(tasks, w, d2, want_grad=True):
    loss = 0.0
    grad = np.zeros_like(w) if want_grad else None
    for v, t in enumerate(tasks):
        wv = w[:, v * d2 : (v + 1) * d2]
        r = t.x @ wv - t.y
        loss += 0.5 * float(np.sum(r * r))
        if want_grad:
            grad[:, v * d2 : (v + 1) * d2] = t.x.T @ r
    return loss, grad


def _penalty_value(w, penalty: Penalty, opts: SolverOpts, p=None) -> float:
    if penalty is Penalty.TRACE:
        return opts.rho1 * nuclear_norm(w)
    if penalty is Penalty.L21:
        return opts.rho_l2 * float(np.sum(w * w)) + opts.rho1 * float(
            np.sum(np.linalg.norm(w, axis=1))
        )
    if penalty is Penalty.LASSO:
        return opts.rho_l2 * float(np.sum(w * w)) + opts.rho1 * float(
            np.sum(np.abs(w))
        )
    if penalty is Penalty.SPARSE_TRACE:
        if p is None:
            p = w  # convention: Q = 0
        return opts.gamma * float(np.sum(np.abs(p)))
    raise MtposeError(f"unknown penalty {penalty}")


def objective(tasks, w, penalty: Penalty, opts: SolverOpts, p=None) -> float:
    """Full objective value at W (and P for the sparse+trace variant)."""
    d1, d2 = _check_tasks(tasks)
    w = as_matrix(w, "w")
    if w.shape != (d1, len(tasks) * d2):
        raise ShapeError(f"w has shape {w.shape}, expected ({d1}, {len(tasks) * d2})")
    loss, _ = _loss_and_grad(tasks, w, d2, want_grad=False)
    return loss + _penalty_value(w, penalty, opts, p=p)


def _fista(shape, smooth, prox, pen_val, opts):
    """Monotone FISTA: backtracking line search + restart on increase.

    smooth(w)      -> (value, gradient) of the differentiable part
    prox(m, step)  -> prox of step * (nonsmooth part) at m
    pen_val(w)     -> nonsmooth penalty value
    Returns (w, trace) with trace[k] the full objective after iteration k
    (trace[0] is the value at the zero start).
    """
    w = np.zeros(shape)
    y = w.copy()
    t_mom = 1.0
    lip = 1.0 / opts.step_init
    f_w, _ = smooth(w)
    trace = [f_w + pen_val(w)]

    for it in range(opts.max_iter):
        f_y, g_y = smooth(y)
        if not np.all(np.isfinite(g_y)):
            raise NumericsError(f"non-finite gradient at iteration {it}")

        def take_step(base, f_base, g_base):
            nonlocal lip
            while True:
                cand = prox(base - g_base / lip, 1.0 / lip)
                delta = cand - base
                quad = f_base + float(np.sum(g_base * delta)) + 0.5 * lip * float(
                    np.sum(delta * delta)
                )
                f_cand, _ = smooth(cand)
                if f_cand <= quad + 1e-12 * max(1.0, abs(quad)):
                    return cand, f_cand
                lip *= 2.0
                if lip > 1e18:
                    raise NumericsError(f"line search failed at iteration {it}")

        w_new, f_new = take_step(y, f_y, g_y)
        obj_new = f_new + pen_val(w_new)
        if obj_new > trace[-1]:
            # momentum overshot: restart from the last accepted iterate;
            # a prox step from w cannot increase the objective
            f_w, g_w = smooth(w)
            w_new, f_new = take_step(w, f_w, g_w)
            obj_new = f_new + pen_val(w_new)
            t_mom = 1.0

        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        y = w_new + ((t_mom - 1.0) / t_next) * (w_new - w)
        w = w_new
        t_mom = t_next

        prev = trace[-1]
        trace.append(min(obj_new, prev))
        if abs(prev - obj_new) <= opts.tol * max(1.0, abs(prev)):
            break
    return w, np.array(trace)


def _prepare(tasks, opts):
    d1, d2 = _check_tasks(tasks)
    if opts.standardize:
        tasks, mu, sd, ym = _standardize(tasks)
    else:
        mu = sd = ym = None
    return tasks, d1, d2, mu, sd, ym


def solve_least_trace(tasks: list[TaskDataset], opts: SolverOpts | None = None) -> MtlModel:
    opts = opts or SolverOpts()
    tasks, d1, d2, mu, sd, ym = _prepare(tasks, opts)
    shape = (d1, len(tasks) * d2)

    def smooth(w):
        return _loss_and_grad(tasks, w, d2)

    w, trace = _fista(
        shape, smooth,
        prox=lambda m, step: svt(m, opts.rho1 * step),
        pen_val=lambda w: opts.rho1 * nuclear_norm(w),
        opts=opts,
    )
    return MtlModel(w, d1, d2, [t.task_id for t in tasks], Penalty.TRACE, opts,
                    trace, mu, sd, ym)


def _smooth_with_ridge(tasks, d2, rho_l2):
    def smooth(w):
        loss, grad = _loss_and_grad(tasks, w, d2)
        if rho_l2 > 0:
            loss += rho_l2 * float(np.sum(w * w))
            grad = grad + 2.0 * rho_l2 * w
        return loss, grad

    return smooth


def solve_least_l21(tasks: list[TaskDataset], opts: SolverOpts | None = None) -> MtlModel:
    opts = opts or SolverOpts()
    tasks, d1, d2, mu, sd, ym = _prepare(tasks, opts)
    shape = (d1, len(tasks) * d2)
    w, trace = _fista(
        shape, _smooth_with_ridge(tasks, d2, opts.rho_l2),
        prox=lambda m, step: l21_shrink(m, opts.rho1 * step, ShrinkAxis.ROWS),
        pen_val=lambda w: opts.rho1 * float(np.sum(np.linalg.norm(w, axis=1)))
        + opts.rho_l2 * float(np.sum(w * w)),
        opts=opts,
    )
    return MtlModel(w, d1, d2, [t.task_id for t in tasks], Penalty.L21, opts,
                    trace, mu, sd, ym)


def solve_least_lasso(tasks: list[TaskDataset], opts: SolverOpts | None = None) -> MtlModel:
    opts = opts or SolverOpts()
    tasks, d1, d2, mu, sd, ym = _prepare(tasks, opts)
    shape = (d1, len(tasks) * d2)
    w, trace = _fista(
        shape, _smooth_with_ridge(tasks, d2, opts.rho_l2),
        prox=lambda m, step: soft_threshold(m, opts.rho1 * step),
        pen_val=lambda w: opts.rho1 * float(np.sum(np.abs(w)))
        + opts.rho_l2 * float(np.sum(w * w)),
        opts=opts,
    )
    return MtlModel(w, d1, d2, [t.task_id for t in tasks], Penalty.LASSO, opts,
                    trace, mu, sd, ym)


def ridge_fit(tasks: list[TaskDataset], reg: float = 1e-3) -> np.ndarray:
    """Per-task ridge solution, stacked; used for the default trace-ball radius."""
    d1, d2 = _check_tasks(tasks)
    w = np.zeros((d1, len(tasks) * d2))
    for v, t in enumerate(tasks):
        a = t.x.T @ t.x + reg * np.eye(d1)
        w[:, v * d2 : (v + 1) * d2] = np.linalg.solve(a, t.x.T @ t.y)
    return w


def solve_least_sparse_trace(
    tasks: list[TaskDataset], opts: SolverOpts | None = None
) -> SparseTraceModel:
    """Sparse + low-rank split W = P + Q with gamma ||P||_1 and ||Q||_* <= tau.

    Accelerated proximal gradient on the (P, Q) product space: both blocks
    share the smooth-loss gradient at W = P + Q; P takes a soft-threshold
    step, Q is projected exactly onto the trace-norm ball every iteration.
    """
    opts = opts or SolverOpts()
    tasks, d1, d2, mu, sd, ym = _prepare(tasks, opts)
    shape = (d1, len(tasks) * d2)
    tau = opts.tau
    if tau is None:
        tau = 0.5 * nuclear_norm(ridge_fit(tasks))

    p = np.zeros(shape)
    q = np.zeros(shape)
    yp, yq = p.copy(), q.copy()
    t_mom = 1.0
    lip = 1.0 / opts.step_init

    def f_val(p_, q_):
        loss, _ = _loss_and_grad(tasks, p_ + q_, d2, want_grad=False)
        return loss

    def obj(p_, q_):
        return f_val(p_, q_) + opts.gamma * float(np.sum(np.abs(p_)))

    trace = [obj(p, q)]
    max_q_nuc = 0.0

    for it in range(opts.max_iter):

        def take_step(bp, bq):
            nonlocal lip
            f_base, g = _loss_and_grad(tasks, bp + bq, d2)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient at iteration {it}")
            while True:
                pc = soft_threshold(bp - g / lip, opts.gamma / lip)
                qc = project_trace_ball(bq - g / lip, tau)
                dp, dq = pc - bp, qc - bq
                quad = (
                    f_base
                    + float(np.sum(g * dp))
                    + float(np.sum(g * dq))
                    + 0.5 * lip * (float(np.sum(dp * dp)) + float(np.sum(dq * dq)))
                )
                fc = f_val(pc, qc)
                if fc <= quad + 1e-12 * max(1.0, abs(quad)):
                    return pc, qc
                lip *= 2.0
                if lip > 1e18:
                    raise NumericsError(f"line search failed at iteration {it}")

        p_new, q_new = take_step(yp, yq)
        obj_new = obj(p_new, q_new)
        if obj_new > trace[-1]:
            p_new, q_new = take_step(p, q)
            obj_new = obj(p_new, q_new)
            t_mom = 1.0

        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        beta = (t_mom - 1.0) / t_next
        yp = p_new + beta * (p_new - p)
        yq = q_new + beta * (q_new - q)
        p, q = p_new, q_new
        t_mom = t_next

        max_q_nuc = max(max_q_nuc, nuclear_norm(q))
        prev = trace[-1]
        trace.append(min(obj_new, prev))
        if abs(prev - obj_new) <= opts.tol * max(1.0, abs(prev)):
            break

    model = SparseTraceModel(
        p + q, d1, d2, [t.task_id for t in tasks], Penalty.SPARSE_TRACE, opts,
        np.array(trace), mu, sd, ym,
    )
    model.p = p
    model.q = q
    model.max_q_nuclear = max_q_nuc
    return model


_SOLVERS = {
    Penalty.TRACE: solve_least_trace,
    Penalty.L21: solve_least_l21,
    Penalty.LASSO: solve_least_lasso,
    Penalty.SPARSE_TRACE: solve_least_sparse_trace,
}


def solve(tasks: list[TaskDataset], penalty: Penalty, opts: SolverOpts | None = None):
    """Dispatch to the solver for the given penalty variant."""
    return _SOLVERS[penalty](tasks, opts)


def predict(model: MtlModel, x, task_id: int) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != model.d1:
        raise ShapeError(f"x has {x.shape[1]} columns, model expects {model.d1}")
    try:
        v = model.task_ids.index(task_id)
    except ValueError:
        raise MtposeError(
            f"unknown task_id {task_id}; model has {model.task_ids}"
        ) from None
    if model.x_mean is not None:
        x = (x - model.x_mean[v]) / model.x_scale[v]
        return x @ model.block(v) + model.y_mean[v]
    return x @ model.block(v)


def save_model(model: MtlModel, path) -> None:
    """Checkpoint as an .npz bundle; round-trip is bit exact."""
    opts = asdict(model.opts)
    meta = {
        "d1": model.d1,
        "d2": model.d2,
        "task_ids": model.task_ids,
        "penalty": model.penalty.value,
        "opts": opts,
        "kind": "sparse_trace" if isinstance(model, SparseTraceModel) else "mtl",
    }
    arrays = {"w": model.w, "objective_trace": model.objective_trace}
    if model.x_mean is not None:
        arrays["x_mean"] = model.x_mean
        arrays["x_scale"] = model.x_scale
        arrays["y_mean"] = model.y_mean
    if isinstance(model, SparseTraceModel):
        arrays["p"] = model.p
        arrays["q"] = model.q
        arrays["max_q_nuclear"] = np.array(model.max_q_nuclear)
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_model(path) -> MtlModel:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        opts = SolverOpts(**meta["opts"])
        penalty = Penalty(meta["penalty"])
        kw = dict(
            w=z["w"], d1=meta["d1"], d2=meta["d2"], task_ids=list(meta["task_ids"]),
            penalty=penalty, opts=opts, objective_trace=z["objective_trace"],
            x_mean=z["x_mean"] if "x_mean" in z else None,
            x_scale=z["x_scale"] if "x_scale" in z else None,
            y_mean=z["y_mean"] if "y_mean" in z else None,
        )
        if meta["kind"] == "sparse_trace":
            model = SparseTraceModel(**kw)
            model.p = z["p"]
            model.q = z["q"]
            model.max_q_nuclear = float(z["max_q_nuclear"])
            return model
        return MtlModel(**kw)
