"""Scikit-learn style wrappers around the solvers and the CNN.

These are thin adapters: the flat keyword-argument constructors and
fit/predict/transform methods follow the sklearn estimator contract
(get_params/set_params work via BaseEstimator) while delegating all the
numerics to the functional modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import cnn
from .exceptions import MtposeError
from .lrr import mrcl_transform
from .multitask import Penalty, SolverOpts, TaskDataset, predict, solve

__all__ = ["MultiTaskRegressor", "ManifoldCleaner", "ConvNetRegressor"]


class MultiTaskRegressor(BaseEstimator, RegressorMixin):
    """Joint multi-task least-squares regressor with a coupling penalty.

    fit(X, y, tasks=...) groups the rows of X by integer task id and
    solves all tasks jointly; predict(X, tasks=...) applies each row's
    task-specific coefficient block.
    """

    def __init__(
        self,
        penalty: str = "LeastSparseTrace",
        rho1: float = 0.1,
        rho_l2: float = 0.0,
        gamma: float = 0.1,
        tau: float | None = None,
        max_iter: int = 5000,
        tol: float = 1e-6,
        standardize: bool = True,
    ):
        self.penalty = penalty
        self.rho1 = rho1
        self.rho_l2 = rho_l2
        self.gamma = gamma
        self.tau = tau
        self.max_iter = max_iter
        self.tol = tol
        self.standardize = standardize

    def _opts(self) -> SolverOpts:
        return SolverOpts(
            rho1=self.rho1, rho_l2=self.rho_l2, gamma=self.gamma,
            tau=self.tau, max_iter=self.max_iter, tol=self.tol,
            standardize=self.standardize,
        )

    def fit(self, X, y, tasks=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if tasks is None:
            tasks = np.zeros(X.shape[0], dtype=int)
        tasks = np.asarray(tasks)
        if tasks.shape[0] != X.shape[0]:
            raise MtposeError("tasks must have one entry per row of X")
        datasets = [
            TaskDataset(int(t), X[tasks == t], y[tasks == t])
            for t in np.unique(tasks)
        ]
        self.model_ = solve(datasets, Penalty(self.penalty), self._opts())
        return self

    def predict(self, X, tasks=None):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        if tasks is None:
            tasks = np.zeros(X.shape[0], dtype=int)
        tasks = np.asarray(tasks)
        out = np.empty((X.shape[0], self.model_.d2))
        for t in np.unique(tasks):
            mask = tasks == t
            out[mask] = predict(self.model_, X[mask], int(t))
        return out[:, 0] if self.model_.d2 == 1 else out

    @property
    def coef_(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.w


class ManifoldCleaner(BaseEstimator, TransformerMixin):
    """Low-rank manifold cleanup of a feature matrix (rows = samples).

    Transductive: transform() cleans exactly the rows it is given, so
    train and test rows that must stay consistent should be passed in one
    call.  fit() is a no-op kept for pipeline compatibility.
    """

    def __init__(
        self,
        lam: float = 0.3,
        target_norm: float | None = 10.0,
        max_iter: int = 500,
        tol: float = 1e-6,
    ):
        self.lam = lam
        self.target_norm = target_norm
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return mrcl_transform(
            np.asarray(X, dtype=np.float64),
            lam=self.lam, target_norm=self.target_norm,
            max_iter=self.max_iter, tol=self.tol,
        )


class ConvNetRegressor(BaseEstimator, RegressorMixin):
    """Small CNN regressor on (N, 1, H, W) image batches, plain SGD."""

    def __init__(
        self,
        activation: str = "relu",
        epochs: int = 10,
        eta: float = 0.05,
        batch_size: int = 8,
        seed: int = 0,
    ):
        self.activation = activation
        self.epochs = epochs
        self.eta = eta
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if X.ndim != 4:
            raise MtposeError("X must be (N, channels, H, W)")
        self.spec_ = cnn.default_spec(
            y.shape[1], cnn.Activation(self.activation), input_hw=X.shape[-1]
        )
        self.state_ = cnn.init_state(self.spec_, self.seed)
        rng = np.random.default_rng(self.seed)
        for _ in range(self.epochs):
            self.state_, self.loss_ = cnn.train_epoch(
                self.spec_, self.state_, X, y,
                eta=self.eta, batch_size=self.batch_size, rng=rng,
            )
        self._single = y.shape[1] == 1
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        pred, _ = cnn.forward(self.spec_, self.state_, np.asarray(X, dtype=np.float64))
        return pred[:, 0] if self._single else pred

    def features(self, X) -> np.ndarray:
        """Post-activation fully-connected features (the stage-1 output)."""
        check_is_fitted(self, "state_")
        return cnn.extract_features(
            self.spec_, self.state_, np.asarray(X, dtype=np.float64)
        )
