"""Generalized score matching for ordinal data.

The estimation loss is built from forward/backward probability ratios of
neighbouring support points, passed through the transform
``u -> 1/(1+u)``.  Because only ratios of unnormalized probabilities
enter, the normalizing constant cancels structurally: models expose
log-ratios, never probabilities.

Boundary convention: at the top of the support the forward ratio is 0
(transform value 1); at the bottom the backward ratio is +inf (transform
value 0).  Log-ratios use ``-inf``/``+inf`` sentinels for these cases and
are mapped through the transform before any arithmetic, so no NaN can
enter a sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .numkit import MinResult, nelder_mead_minimize


class SupportError(ValueError):
    """Raised when a value lies outside the declared support."""


def ratio_transform(u: float | np.ndarray) -> float | np.ndarray:
    """The ratio transform ``1/(1+u)`` for ``u in [0, +inf]``.

    Strictly decreasing, maps 0 -> 1 and +inf -> 0.
    """
    arr = np.asarray(u, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise ValueError("ratio transform requires u >= 0 (or +inf)")
    with np.errstate(divide="ignore"):
        out = np.where(np.isinf(arr), 0.0, 1.0 / (1.0 + arr))
    return float(out) if np.isscalar(u) or arr.ndim == 0 else out


def _transform_log_ratio(log_ratio: float) -> float:
    """Transform value for a ratio given on the log scale.

    ``1/(1 + e^L)`` evaluated stably; ``L = -inf`` -> 1, ``L = +inf`` -> 0.
    """
    if log_ratio == math.inf:
        return 0.0
    if log_ratio == -math.inf:
        return 1.0
    if log_ratio > 0:
        e = math.exp(-log_ratio)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(log_ratio))


@dataclass
class ParamVec:
    """Named parameter vector with an optional test partition.

    ``partition`` lists the indices of the parameters under test (the
    leading block after rearrangement); the remaining indices are the
    nuisance block.
    """

    values: np.ndarray
    names: list[str] = field(default_factory=list)
    partition: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not self.names:
            self.names = [f"theta{j + 1}" for j in range(self.values.size)]
        if len(self.names) != self.values.size:
            raise ValueError("names and values length mismatch")
        if len(set(self.names)) != len(self.names):
            raise ValueError("parameter names must be unique")
        for idx in self.partition:
            if not 0 <= idx < self.values.size:
                raise ValueError(f"partition index {idx} out of range")

    def index_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class OrdinalModel:
    """Unnormalized ordinal model described through neighbour log-ratios.

    ``log_ratio_up(y, j, theta, i)`` returns
    ``log p_i(y^(j+)|theta) - log p_i(y|theta)`` and must be ``-inf``
    exactly when coordinate ``j`` sits at the upper support bound.
    ``log_ratio_down(y, j, theta, i)`` returns
    ``log p_i(y|theta) - log p_i(y^(j-)|theta)`` and must be ``+inf``
    exactly when coordinate ``j`` sits at the lower bound.  The row index
    ``i`` lets regression models depend on their own covariates; IID
    models ignore it.

    Supports are integer lattices per coordinate with ``-inf``/``+inf``
    bound sentinels; non-unit-step ordered supports can supply their own
    successor/predecessor maps.
    """

    dim: int
    lower: Sequence[float]
    upper: Sequence[float]
    log_ratio_up: Callable[[np.ndarray, int, np.ndarray, int], float]
    log_ratio_down: Callable[[np.ndarray, int, np.ndarray, int], float]
    successor: Callable[[float, int], float] | None = None
    predecessor: Callable[[float, int], float] | None = None

    def check_support(self, y: np.ndarray) -> None:
        y = np.atleast_1d(y)
        if y.size != self.dim:
            raise SupportError(f"expected {self.dim} coordinates, got {y.size}")
        for j in range(self.dim):
            if not (self.lower[j] <= y[j] <= self.upper[j]):
                raise SupportError(
                    f"coordinate {j} value {y[j]} outside [{self.lower[j]}, {self.upper[j]}]"
                )


def gsm_row_loss_univariate(model: OrdinalModel, y: float, theta: ParamVec,
                            row: int = 0) -> float:
    """Per-observation loss for a univariate ordinal model.

    ``t(r+)^2 + t(r)^2 - 2 t(r+)`` with ``r+ = p(y+)/p(y)`` and
    ``r = p(y)/p(y-)``, boundary ratios resolved by the model's
    sentinels.
    """
    if model.dim != 1:
        raise ValueError("univariate loss requires a model with dim 1")
    yv = np.atleast_1d(np.asarray(y, dtype=float))
    model.check_support(yv)
    th = theta.values
    t_up = _transform_log_ratio(model.log_ratio_up(yv, 0, th, row))
    t_dn = _transform_log_ratio(model.log_ratio_down(yv, 0, th, row))
    return t_up * t_up + t_dn * t_dn - 2.0 * t_up


def gsm_row_loss(model: OrdinalModel, y: np.ndarray, theta: ParamVec,
                 row: int = 0) -> float:
    """Per-observation loss summed over coordinates (multivariate form)."""
    yv = np.atleast_1d(np.asarray(y, dtype=float))
    model.check_support(yv)
    th = theta.values
    total = 0.0
    for j in range(model.dim):
        t_up = _transform_log_ratio(model.log_ratio_up(yv, j, th, row))
        t_dn = _transform_log_ratio(model.log_ratio_down(yv, j, th, row))
        total += t_up * t_up + t_dn * t_dn - 2.0 * t_up
    return total


def gsm_objective(model: OrdinalModel, data: Dataset, theta: ParamVec) -> float:
    """Mean per-row loss over a dataset (rows may carry their own covariates)."""
    if data.n == 0:
        raise ValueError("dataset is empty")
    total = 0.0
    for i in range(data.n):
        total += gsm_row_loss(model, data.responses[i], theta, row=i)
    return total / data.n


def fit_gsm(model: OrdinalModel, data: Dataset, theta_init: ParamVec,
            tol: float = 1e-8, max_iter: int | None = None) -> MinResult:
    """Minimize the generalized score matching objective over theta."""
    obj = lambda v: gsm_objective(model, data, ParamVec(v, list(theta_init.names)))
    f0 = obj(theta_init.values)
    if not np.isfinite(f0):
        raise ValueError("objective not finite at the initial point")
    return nelder_mead_minimize(obj, theta_init.values, tol=tol, max_iter=max_iter)


def lattice_model_from_logpmf(
    log_pmf: Callable[[np.ndarray, np.ndarray, int], float],
    dim: int,
    lower: Sequence[float],
    upper: Sequence[float],
) -> OrdinalModel:
    """Build an :class:`OrdinalModel` from an unnormalized log-pmf.

    Convenience for tests and custom models on integer lattices: the
    log-ratios are formed by evaluating the log-pmf at neighbouring
    points, with the boundary sentinels supplied automatically.
    """

    def up(y: np.ndarray, j: int, theta: np.ndarray, i: int) -> float:
        if y[j] >= upper[j]:
            return -math.inf
        y_next = y.copy()
        y_next[j] += 1
        return log_pmf(y_next, theta, i) - log_pmf(y, theta, i)

    def down(y: np.ndarray, j: int, theta: np.ndarray, i: int) -> float:
        if y[j] <= lower[j]:
            return math.inf
        y_prev = y.copy()
        y_prev[j] -= 1
        return log_pmf(y, theta, i) - log_pmf(y_prev, theta, i)

    return OrdinalModel(dim=dim, lower=list(lower), upper=list(upper),
                        log_ratio_up=up, log_ratio_down=down)


def population_divergence(
    model: OrdinalModel,
    support: np.ndarray,
    q: np.ndarray,
    theta: ParamVec,
) -> float:
    """Exhaustive population divergence for a finite-support univariate model.

    Sums ``q(y) { [t(p+/p) - t(q+/q)]^2 + [t(p/p-) - t(q/q-)]^2 }`` over
    the whole support.  Used as the independent oracle for the
    decomposition and identifiability checks; never used in estimation.
    """
    if model.dim != 1:
        raise ValueError("exhaustive divergence implemented for dim 1")
    support = np.asarray(support, dtype=float)
    q = np.asarray(q, dtype=float)
    n_sup = support.size
    th = theta.values
    total = 0.0
    for k in range(n_sup):
        y = support[k:k + 1]
        t_up_p = _transform_log_ratio(model.log_ratio_up(y, 0, th, 0))
        t_dn_p = _transform_log_ratio(model.log_ratio_down(y, 0, th, 0))
        r_up_q = q[k + 1] / q[k] if k + 1 < n_sup else 0.0
        r_dn_q = q[k] / q[k - 1] if k >= 1 else math.inf
        t_up_q = ratio_transform(r_up_q)
        t_dn_q = ratio_transform(r_dn_q)
        total += q[k] * ((t_up_p - t_up_q) ** 2 + (t_dn_p - t_dn_q) ** 2)
    return total


def population_loss_mean(
    model: OrdinalModel,
    support: np.ndarray,
    q: np.ndarray,
    theta: ParamVec,
) -> float:
    """Expectation of the per-observation loss under a finite-support pmf q."""
    support = np.asarray(support, dtype=float)
    q = np.asarray(q, dtype=float)
    total = 0.0
    for k in range(support.size):
        total += q[k] * gsm_row_loss_univariate(model, support[k], theta)
    return total
