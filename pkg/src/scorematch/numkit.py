"""Dense numerical kernel shared by the model fitters.

Symmetric linear algebra (eigendecomposition, matrix square root, SPD
solves), central-difference gradients for derivative checking, the
duplication matrix used to differentiate with respect to the free entries
of a symmetric matrix, and a derivative-free Nelder-Mead minimizer.

Everything here operates on plain numpy arrays.  The symmetric routines
are thin validated wrappers over LAPACK (via numpy/scipy); the minimizer
is implemented directly because its initial-simplex and stopping rules
are part of this package's contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg


class NumericError(ValueError):
    """Base class for numerical-kernel failures."""


class NotSymmetricError(NumericError):
    pass


class NotPSDError(NumericError):
    pass


class SingularMatrixError(NumericError):
    pass


@dataclass
class MinResult:
    """Outcome of a minimization run."""

    x: np.ndarray
    value: float
    iterations: int
    converged: bool


def nelder_mead_minimize(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> MinResult:
    """Minimize ``f`` with the Nelder-Mead simplex algorithm.

    Standard coefficients (reflection 1, expansion 2, contraction 0.5,
    shrink 0.5).  The initial simplex perturbs each coordinate of ``x0``
    by ``max(0.05 * |x0_j|, 0.00025)``.  Converged when both the spread
    of simplex function values and the simplex diameter drop below
    ``tol``.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = x0.size
    if max_iter is None:
        max_iter = 2000 * max(n, 1)

    f0 = float(f(x0))
    if not np.isfinite(f0):
        raise NumericError("objective is not finite at the initial point")

    verts = np.tile(x0, (n + 1, 1))
    for j in range(n):
        verts[j + 1, j] += max(0.05 * abs(x0[j]), 0.00025)
    vals = np.empty(n + 1)
    vals[0] = f0
    for j in range(1, n + 1):
        vals[j] = float(f(verts[j]))

    iterations = 0
    converged = False
    while iterations < max_iter:
        order = np.argsort(vals, kind="stable")
        verts, vals = verts[order], vals[order]

        spread = vals[-1] - vals[0]
        diameter = np.max(np.abs(verts[1:] - verts[0])) if n else 0.0
        if spread < tol and diameter < tol:
            converged = True
            break

        iterations += 1
        centroid = verts[:-1].mean(axis=0)
        worst = verts[-1]

        reflected = centroid + (centroid - worst)
        f_ref = float(f(reflected))
        if vals[0] <= f_ref < vals[-2]:
            verts[-1], vals[-1] = reflected, f_ref
            continue
        if f_ref < vals[0]:
            expanded = centroid + 2.0 * (centroid - worst)
            f_exp = float(f(expanded))
            if f_exp < f_ref:
                verts[-1], vals[-1] = expanded, f_exp
            else:
                verts[-1], vals[-1] = reflected, f_ref
            continue
        contracted = centroid + 0.5 * (worst - centroid)
        f_con = float(f(contracted))
        if f_con < vals[-1]:
            verts[-1], vals[-1] = contracted, f_con
            continue
        # shrink toward the best vertex
        for j in range(1, n + 1):
            verts[j] = verts[0] + 0.5 * (verts[j] - verts[0])
            vals[j] = float(f(verts[j]))

    order = np.argsort(vals, kind="stable")
    verts, vals = verts[order], vals[order]
    return MinResult(x=verts[0].copy(), value=float(vals[0]),
                     iterations=iterations, converged=converged)


def fd_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``x``.

    Component ``j`` uses step ``h * max(1, |x_j|)`` so that the step
    scales with the magnitude of the coordinate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float).ravel()
    grad = np.empty_like(x)
    for j in range(x.size):
        hj = h * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += hj
        xm[j] -= hj
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"objective not finite near x[{j}]")
        grad[j] = (fp - fm) / (2.0 * hj)
    return grad


def fd_jacobian(
    g: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function."""
    x = np.asarray(x, dtype=float).ravel()
    cols = []
    for j in range(x.size):
        hj = h * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += hj
        xm[j] -= hj
        cols.append((np.asarray(g(xp), dtype=float) - np.asarray(g(xm), dtype=float)) / (2.0 * hj))
    return np.stack(cols, axis=-1)


def _check_symmetric(m: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotSymmetricError("expected a square matrix")
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - m.T)) > rtol * scale:
        raise NotSymmetricError("matrix is not symmetric within tolerance")
    return 0.5 * (m + m.T)


def sym_eigen(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    m = _check_symmetric(m)
    vals, vecs = np.linalg.eigh(m)
    return vals[::-1].copy(), vecs[:, ::-1].copy()


def sym_sqrt(m: np.ndarray, neg_tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root.

    Eigenvalues in ``[-neg_tol * max_eig, 0)`` are clamped to zero;
    anything more negative raises :class:`NotPSDError` rather than being
    silently repaired.
    """
    m = _check_symmetric(m)
    vals, vecs = np.linalg.eigh(m)
    scale = max(1.0, float(np.max(np.abs(vals))) if vals.size else 1.0)
    if np.any(vals < -neg_tol * scale):
        raise NotPSDError(f"matrix has eigenvalue {vals.min():.3e}, not PSD")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def solve_spd(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``m @ x = b`` for symmetric positive definite ``m``."""
    m = _check_symmetric(m)
    b = np.asarray(b, dtype=float)
    try:
        c, low = scipy.linalg.cho_factor(m, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"matrix is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


def inv_spd(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix."""
    return solve_spd(m, np.eye(np.asarray(m).shape[0]))


def duplication_matrix(p: int) -> np.ndarray:
    """Duplication matrix D with ``D @ vech(S) = vec(S)`` for symmetric S.

    ``vec`` stacks columns; ``vech`` stacks columns of the lower triangle
    (diagonal included).  Shape is (p*p, p*(p+1)/2).
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    cols = p * (p + 1) // 2
    d = np.zeros((p * p, cols))
    vech_index = {}
    k = 0
    for j in range(p):
        for i in range(j, p):
            vech_index[(i, j)] = k
            k += 1
    for j in range(p):
        for i in range(p):
            key = (i, j) if i >= j else (j, i)
            d[j * p + i, vech_index[key]] = 1.0
    return d


def vech(s: np.ndarray) -> np.ndarray:
    """Column-stack the lower triangle (diagonal included) of a square matrix."""
    s = np.asarray(s, dtype=float)
    p = s.shape[0]
    return np.concatenate([s[j:, j] for j in range(p)])


def unvech(v: np.ndarray, p: int) -> np.ndarray:
    """Inverse of :func:`vech` for symmetric matrices."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((p, p))
    k = 0
    for j in range(p):
        m = p - j
        out[j:, j] = v[k:k + m]
        out[j, j:] = v[k:k + m]
        k += m
    return out
