"""Euclidean score matching and the log-transformed truncated Gaussian model.

The generic layer evaluates ``2 * laplacian(log p) + ||grad(log p)||^2``
for any model exposing those two derivatives of its unnormalized log
density (the normalizer drops out of both).

The concrete model is a positive-orthant truncated Gaussian regression:
responses ``y_i > 0`` with latent ``N(B x_i, Lambda^{-1})``.  After the
elementwise log transform the support is all of R^d and the objective
has a closed form in ``t = exp(y_tilde)`` (the original responses) and
``T = diag(t)``.  Analytic score and Hessian over
``(vec(B), vech(Lambda))`` back sandwich inference; an equivalent
weighted-score-matching objective on the original scale is provided as
an independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .numkit import (MinResult, duplication_matrix, nelder_mead_minimize,
                     unvech, vech)


@dataclass
class ContinuousModel:
    """Continuous model described by derivatives of its unnormalized log density.

    ``grad_log_p(y, i, theta)`` is the gradient with respect to the data
    vector; ``laplacian_log_p(y, i, theta)`` the sum of its second
    partials.  The row index ``i`` carries fixed-design covariates.
    """

    dim: int
    grad_log_p: Callable[[np.ndarray, int, np.ndarray], np.ndarray]
    laplacian_log_p: Callable[[np.ndarray, int, np.ndarray], float]


def sm_row_loss(model: ContinuousModel, y: np.ndarray, i: int, theta: np.ndarray) -> float:
    """Per-observation loss ``2 * laplacian + ||grad||^2``."""
    grad = np.asarray(model.grad_log_p(y, i, theta), dtype=float)
    lap = float(model.laplacian_log_p(y, i, theta))
    val = 2.0 * lap + float(grad @ grad)
    if not math.isfinite(val):
        raise ValueError("non-finite derivative in score matching loss")
    return val


def sm_objective(model: ContinuousModel, data: Dataset, theta: np.ndarray) -> float:
    """Mean per-row loss over the dataset."""
    if data.n == 0:
        raise ValueError("dataset is empty")
    return sum(sm_row_loss(model, data.responses[i], i, theta)
               for i in range(data.n)) / data.n


def log_transform(data: Dataset) -> Dataset:
    """Elementwise natural log of the responses; covariates unchanged."""
    if np.any(data.responses <= 0):
        raise ValueError("log transform requires strictly positive responses")
    return Dataset(responses=np.log(data.responses),
                   covariates=data.covariates,
                   response_names=list(data.response_names),
                   covariate_names=list(data.covariate_names))


@dataclass
class TruncGaussParams:
    """Regression coefficient matrix B (d x p) and symmetric precision Lambda (d x d)."""

    B: np.ndarray
    Lambda: np.ndarray

    def __post_init__(self) -> None:
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.Lambda = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        d = self.B.shape[0]
        if self.Lambda.shape != (d, d):
            raise ValueError("Lambda must be d x d with d matching B's rows")
        if np.max(np.abs(self.Lambda - self.Lambda.T)) > 1e-10 * max(1.0, np.max(np.abs(self.Lambda))):
            raise ValueError("Lambda must be symmetric")
        self.Lambda = 0.5 * (self.Lambda + self.Lambda.T)

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.B.flatten(order="F"), vech(self.Lambda)])

    @staticmethod
    def unpack(theta: np.ndarray, d: int, p: int) -> "TruncGaussParams":
        theta = np.asarray(theta, dtype=float).ravel()
        b = theta[:d * p].reshape(d, p, order="F")
        lam = unvech(theta[d * p:], d)
        return TruncGaussParams(B=b, Lambda=lam)

    @staticmethod
    def names(d: int, p: int) -> list[str]:
        out = [f"B{i + 1}{j + 1}" for j in range(p) for i in range(d)]
        out += [f"L{i + 1}{j + 1}" for j in range(d) for i in range(j, d)]
        return out


def _tg_pieces(data: Dataset, params: TruncGaussParams):
    """Shared per-row arrays: t = exp(log response), residual r = t - B x."""
    t = np.exp(data.responses)  # original-scale responses
    r = t - data.covariates @ params.B.T
    return t, r


def tg_log_objective(data: Dataset, params: TruncGaussParams) -> float:
    """Score matching objective of the log-transformed model.

    Per row: ``-4 r' L t - 2 tr(T L T) + r' L T T L r`` with
    ``t = exp(y_tilde)``, ``T = diag(t)``, ``r = t - B x``.
    """
    if data.n == 0:
        raise ValueError("dataset is empty")
    if data.d != params.d or data.p != params.p:
        raise ValueError("dataset dimensions do not match parameters")
    lam = params.Lambda
    t, r = _tg_pieces(data, params)
    r_lam = r @ lam
    term1 = -4.0 * np.sum(r_lam * t, axis=1)
    term2 = -2.0 * (t * t) @ np.diag(lam)
    term3 = np.sum((t * r_lam) ** 2, axis=1)
    return float(np.mean(term1 + term2 + term3))


def tg_weighted_objective(
    data: Dataset,
    params: TruncGaussParams,
    g: Sequence[Callable[[np.ndarray], np.ndarray]],
    g_prime: Sequence[Callable[[np.ndarray], np.ndarray]],
) -> float:
    """Weighted score matching objective on the original positive scale.

    Per row: ``-2 g'(y)' L (y - Bx) + (y - Bx)' L G L (y - Bx)
    - 2 tr(G^(1/2) L G^(1/2))`` with ``G = diag(g(y))``.  With
    ``g_j(y) = y^2`` this equals :func:`tg_log_objective` on the
    log-transformed data.
    """
    if data.n == 0:
        raise ValueError("dataset is empty")
    d = params.d
    if len(g) != d or len(g_prime) != d:
        raise ValueError("one weight function (and derivative) per coordinate")
    y = data.responses
    gv = np.column_stack([np.asarray(g[j](y[:, j]), dtype=float) for j in range(d)])
    gp = np.column_stack([np.asarray(g_prime[j](y[:, j]), dtype=float) for j in range(d)])
    if np.any(gv < 0):
        raise ValueError("weight functions must be non-negative on the data")
    lam = params.Lambda
    r = y - data.covariates @ params.B.T
    r_lam = r @ lam
    term1 = -2.0 * np.sum(gp * r_lam, axis=1)
    term2 = np.sum(gv * r_lam * r_lam, axis=1)
    term3 = -2.0 * gv @ np.diag(lam)
    return float(np.mean(term1 + term2 + term3))


def tg_score_rows(data: Dataset, params: TruncGaussParams) -> np.ndarray:
    """Per-row gradients over (vec(B), vech(Lambda)); shape (n, dp + d(d+1)/2)."""
    d, p = params.d, params.p
    lam = params.Lambda
    x = data.covariates
    t, r = _tg_pieces(data, params)
    r_lam = r @ lam
    t2 = t * t
    # B block: vec(4 L t x' - 2 L T^2 L r x'), column-major over (d, p)
    w = 4.0 * t @ lam - 2.0 * (t2 * r_lam) @ lam
    s_b = np.einsum("ia,ij->iaj", x, w).reshape(data.n, d * p)
    # Lambda block: D' vec(-4 r t' - 2 T^2 + 2 T^2 L r r')
    m = (-4.0 * np.einsum("ij,ik->ijk", r, t)
         - 2.0 * np.einsum("ij,jk->ijk", t2, np.eye(d))
         + 2.0 * np.einsum("ij,ik->ijk", t2 * r_lam, r))
    vec_m = m.transpose(0, 2, 1).reshape(data.n, d * d)
    s_l = vec_m @ duplication_matrix(d)
    return np.column_stack([s_b, s_l])


def tg_score(data: Dataset, params: TruncGaussParams) -> np.ndarray:
    """Gradient of the objective (mean of the per-row gradients)."""
    return tg_score_rows(data, params).mean(axis=0)


def tg_hessian(data: Dataset, params: TruncGaussParams) -> np.ndarray:
    """Hessian of the objective over (vec(B), vech(Lambda)); symmetric.

    Curvature convention: this is the plain second derivative of the
    objective, i.e. the matrix whose finite-difference counterpart is the
    Jacobian of :func:`tg_score`.
    """
    d, p = params.d, params.p
    n = data.n
    lam = params.Lambda
    x = data.covariates
    t, r = _tg_pieces(data, params)
    t2 = t * t
    r_lam = r @ lam
    dup = duplication_matrix(d)
    n_b, n_l = d * p, d * (d + 1) // 2
    h = np.zeros((n_b + n_l, n_b + n_l))

    # BB block: mean of 2 (x x') kron (L T^2 L)
    lt2l = np.einsum("jk,ik,kl->ijl", lam, t2, lam)  # (n, d, d): L diag(t2_i) L
    h_bb = 2.0 * np.einsum("ia,ib,ijk->ajbk", x, x, lt2l) / n
    h[:n_b, :n_b] = h_bb.reshape(n_b, n_b)
    # row index a*d + j over vec(B), likewise columns: (a,j,b,k) ordering

    # B-Lambda block: mean of [4 (x t') kron I - 2 (x (t2*Lr)') kron I
    #                          - 2 (x r') kron (L T^2)] D
    eye = np.eye(d)
    u = t2 * r_lam  # rows: T^2 L r
    lt2 = np.einsum("jk,ik->ijk", lam, t2)  # (n, d, d): L diag(t2_i)
    blk = (4.0 * np.einsum("ia,ib,jk->ajbk", x, t, eye)
           - 2.0 * np.einsum("ia,ib,jk->ajbk", x, u, eye)
           - 2.0 * np.einsum("ia,ib,ijk->ajbk", x, r, lt2)) / n
    h_bl = blk.reshape(n_b, d * d) @ dup
    h[:n_b, n_b:] = h_bl
    h[n_b:, :n_b] = h_bl.T

    # Lambda-Lambda block: mean of 2 D' (r r' kron T^2) D
    t2_diag = np.einsum("ij,jk->ijk", t2, eye)
    ll = 2.0 * np.einsum("ia,ib,ijk->ajbk", r, r, t2_diag) / n
    h[n_b:, n_b:] = dup.T @ ll.reshape(d * d, d * d) @ dup

    return 0.5 * (h + h.T)


def fit_tg(data: Dataset, init: TruncGaussParams, tol: float = 1e-8,
           max_iter: int | None = None, polish_steps: int = 1,
           log_data: bool = False) -> MinResult:
    """Fit the truncated Gaussian regression by score matching.

    ``data`` holds the original positive responses unless ``log_data``
    is set.  Nelder-Mead over (vec(B), vech(Lambda)) followed by damped
    Newton polish steps using the analytic derivatives (skipped if the
    Hessian is not positive definite).  The fitted Lambda is symmetric
    by construction of the vech parametrization; a warning flag is set
    in ``converged`` only for optimizer failure, while indefiniteness of
    the fitted Lambda is reported by :func:`lambda_is_pd`.
    """
    tdata = data if log_data else log_transform(data)
    d, p = init.d, init.p

    def obj(v: np.ndarray) -> float:
        return tg_log_objective(tdata, TruncGaussParams.unpack(v, d, p))

    res = nelder_mead_minimize(obj, init.pack(), tol=tol, max_iter=max_iter)
    theta, value = res.x, res.value
    for _ in range(polish_steps):
        params = TruncGaussParams.unpack(theta, d, p)
        grad = tg_score(tdata, params)
        hess = tg_hessian(tdata, params)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        cand = theta - step
        cand_val = obj(cand)
        if not math.isfinite(cand_val) or cand_val > value + 1e-12:
            break
        theta, value = cand, cand_val
    return MinResult(x=theta, value=value, iterations=res.iterations,
                     converged=res.converged)


def lambda_is_pd(params: TruncGaussParams) -> bool:
    """Whether the fitted precision matrix is positive definite."""
    try:
        np.linalg.cholesky(params.Lambda)
        return True
    except np.linalg.LinAlgError:
        return False


def tg_model(data: Dataset, d: int, p: int) -> ContinuousModel:
    """The log-transformed truncated Gaussian as a generic continuous model."""

    def grad(y_tilde: np.ndarray, i: int, theta: np.ndarray) -> np.ndarray:
        params = TruncGaussParams.unpack(theta, d, p)
        t = np.exp(y_tilde)
        r = t - params.B @ data.covariates[i]
        return 1.0 - t * (params.Lambda @ r)

    def lap(y_tilde: np.ndarray, i: int, theta: np.ndarray) -> float:
        params = TruncGaussParams.unpack(theta, d, p)
        t = np.exp(y_tilde)
        r = t - params.B @ data.covariates[i]
        return float(-t @ (params.Lambda @ r) - (t * t) @ np.diag(params.Lambda))

    return ContinuousModel(dim=d, grad_log_p=grad, laplacian_log_p=lap)
