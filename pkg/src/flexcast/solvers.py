"""Linear fitters used by the mean model and changepoint detection.

Objectives, for reference::

    ridge      ||y - X b||^2 + lambda2 * sum_{j penalized} b_j^2
    lasso      1/(2n) ||y - X b||^2 + lambda1 * sum_j w_j |b_j|
    mixed      ||y - X0 b0 - X1 b1 - X2 b2||^2 + lambda1 * sum w_j |b1_j| + lambda2 ||b2||^2
    quantile   mean_i rho_tau(y_i - x_i b)
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

CD_TOL = 1e-7
CD_MAX_ITER = 10_000


class SolverError(RuntimeError):
    """Numeric failure inside a fitter."""


class RankDeficiencyError(SolverError):
    def __init__(self, message, dependent_columns=()):
        super().__init__(message)
        self.dependent_columns = list(dependent_columns)


class ConvergenceError(SolverError):
    def __init__(self, message, coef, gap):
        super().__init__(message)
        self.coef = coef
        self.gap = gap


def _as_design(X, y=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise ValueError("design matrix contains non-finite values")
    if y is None:
        return X
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {len(y)}")
    if not np.all(np.isfinite(y)):
        raise ValueError("target contains non-finite values")
    return X, y


def default_penalty_mask(X) -> np.ndarray:
    """Penalize every column except all-ones (intercept) columns."""
    X = np.asarray(X, dtype=float)
    return ~np.all(X == 1.0, axis=0)


def _dependent_columns(X, rtol=1e-10) -> list[int]:
    if X.shape[1] == 0:
        return []
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        return sorted(piv.tolist())
    rank = int(np.sum(diag > rtol * diag[0]))
    return sorted(piv[rank:].tolist())


def _describe(cols, names):
    if names is None:
        return ", ".join(str(c) for c in cols)
    return ", ".join(str(names[c]) for c in cols)


def fit_ridge(X, y, lambda2=0.0, penalty_mask=None, column_names=None) -> np.ndarray:
    """Minimize ``||y - X b||^2 + lambda2 * ||b[mask]||^2`` by normal equations.

    With ``lambda2 = 0`` this is ordinary least squares. The system
    ``(X'X + lambda2 D) b = X'y`` is solved by Cholesky factorization, where
    ``D`` is diagonal with zeros on unpenalized columns.
    """
    X, y = _as_design(X, y)
    if X.shape[0] < 1:
        raise ValueError("need at least one row")
    if lambda2 < 0:
        raise ValueError("lambda2 must be non-negative")
    mask = default_penalty_mask(X) if penalty_mask is None else np.asarray(penalty_mask, dtype=bool)
    if mask.shape != (X.shape[1],):
        raise ValueError("penalty_mask must cover every column")

    free = ~mask if lambda2 > 0 else np.ones(X.shape[1], dtype=bool)
    dep = _dependent_columns(X[:, free])
    if dep:
        idx = np.flatnonzero(free)[dep]
        raise RankDeficiencyError(
            f"design is rank deficient; linearly dependent unpenalized columns: "
            f"{_describe(idx, column_names)}",
            idx,
        )

    gram = X.T @ X + lambda2 * np.diag(mask.astype(float))
    try:
        factor = scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"regularized Gram matrix is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(factor, X.T @ y)


@numba.njit(cache=True)
def _cd_kernel(G, c, thr, beta, tol, max_iter, obj0, trace_out):
    p = G.shape[0]
    grad = G @ beta
    sweeps = 0
    change = np.inf
    while sweeps < max_iter:
        change = 0.0
        for j in range(p):
            gjj = G[j, j]
            old = beta[j]
            if gjj <= 0.0:
                new = 0.0
            else:
                z = c[j] - grad[j] + gjj * old
                a = abs(z)
                # rounding guard: |z| equal to the threshold up to ulps is zero
                if a <= thr[j] * (1.0 + 1e-12):
                    new = 0.0
                else:
                    new = np.sign(z) * (a - thr[j]) / gjj
            d = new - old
            if d != 0.0:
                beta[j] = new
                for k in range(p):
                    grad[k] += d * G[k, j]
                if abs(d) > change:
                    change = abs(d)
        trace_out[sweeps] = obj0 - c @ beta + 0.5 * (beta @ grad) + np.sum(thr * np.abs(beta))
        sweeps += 1
        if change < tol:
            break
    return sweeps, change


def fit_lasso_cd(
    X,
    y,
    lambda1,
    weights=None,
    tol=CD_TOL,
    max_iter=CD_MAX_ITER,
    trace=None,
) -> np.ndarray:
    """Weighted lasso by cyclic coordinate descent with soft-thresholding.

    Minimizes ``1/(2n) ||y - X b||^2 + lambda1 * sum_j w_j |b_j|``; a zero
    weight leaves that column unpenalized.

    Columns with positive weight are rescaled to unit standard deviation before
    the sweeps and their weights rescaled to match, so the objective itself is
    unchanged. Convergence is declared when the largest change of a rescaled
    coefficient in one sweep falls below ``tol * rms(y)``.

    Parameters
    ----------
    trace : list, optional
        If given, the objective value after every sweep is appended to it.

    Raises
    ------
    ConvergenceError
        After ``max_iter`` sweeps without convergence; carries the last iterate.
    """
    X, y = _as_design(X, y)
    n, p = X.shape
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (p,) or np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite, non-negative, one per column")
    if lambda1 < 0:
        raise ValueError("lambda1 must be non-negative")

    scale = np.ones(p)
    std = X.std(axis=0)
    penalized = w > 0
    constant = penalized & (std == 0)
    if np.any(constant & np.any(X != 0, axis=0)):
        warnings.warn("constant penalized column(s) left unscaled", RuntimeWarning, stacklevel=2)
    scale[penalized & (std > 0)] = std[penalized & (std > 0)]

    Xs = X / scale
    G = Xs.T @ Xs / n
    c = Xs.T @ y / n
    thr = lambda1 * w / scale
    beta = np.zeros(p)
    yy = float(y @ y) / n
    y_rms = np.sqrt(yy) if yy > 0 else 1.0
    history = np.empty(max_iter)
    done, change = 0, np.inf
    while done < max_iter:
        block = min(POLISH_EVERY, max_iter - done)
        sweeps, change = _cd_kernel(G, c, thr, beta, tol * y_rms, block, 0.5 * yy, history[done:])
        done += sweeps
        if change < tol * y_rms:
            break
        _polish(G, c, thr, beta, 0.5 * yy)
    if trace is not None:
        trace.extend(history[:done].tolist())
    coef = beta / scale
    if change >= tol * y_rms:
        raise ConvergenceError(
            f"coordinate descent did not converge in {max_iter} sweeps (last change {change:.3g})",
            coef,
            change,
        )
    return coef


POLISH_EVERY = 50


def _cd_objective(G, c, thr, beta, obj0):
    return obj0 - c @ beta + 0.5 * beta @ G @ beta + np.sum(thr * np.abs(beta))


def _polish(G, c, thr, beta, obj0):
    """Feature-sign refinement on the current support.

    Solves the sign-fixed quadratic on the active set; if some coefficient
    would change sign, moves only up to the first zero crossing (the objective
    decreases along that segment), drops the crossing coordinate and repeats.
    Inactive coordinates are left to the following sweeps.
    """
    active = list(np.flatnonzero(beta))
    while active:
        idx = np.array(active)
        signs = np.sign(beta[idx])
        try:
            cand = np.linalg.solve(G[np.ix_(idx, idx)], c[idx] - thr[idx] * signs)
        except np.linalg.LinAlgError:
            return
        flipped = np.sign(cand) != signs
        if not np.any(flipped):
            trial = beta.copy()
            trial[idx] = cand
            if _cd_objective(G, c, thr, trial, obj0) <= _cd_objective(G, c, thr, beta, obj0):
                beta[:] = trial
            return
        cur = beta[idx]
        steps = np.where(flipped, cur / (cur - cand), np.inf)
        k = int(np.argmin(steps))
        beta[idx] = cur + steps[k] * (cand - cur)
        beta[idx[k]] = 0.0
        active = [j for j in active if beta[j] != 0.0 and j != idx[k]]


def lasso_objective(X, y, coef, lambda1, weights=None) -> float:
    X, y = _as_design(X, y)
    w = np.ones(X.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    r = y - X @ coef
    return float(r @ r / (2 * len(y)) + lambda1 * np.sum(w * np.abs(coef)))


def lambda_max(X, y, weights=None) -> float:
    """Smallest ``lambda1`` for which the weighted lasso zeroes every penalized
    coefficient: ``max_j |x_j' r| / (n w_j)`` over penalized columns, where
    ``r`` is ``y`` after regressing out the unpenalized (zero-weight) columns.
    """
    X, y = _as_design(X, y)
    n, p = X.shape
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float)
    penalized = w > 0
    if not np.any(penalized):
        raise ValueError("lambda_max needs at least one penalized column")
    r = y
    if np.any(~penalized):
        X0 = X[:, ~penalized]
        coef, *_ = np.linalg.lstsq(X0, y, rcond=None)
        r = y - X0 @ coef
    return float(np.max(np.abs(X[:, penalized].T @ r) / (n * w[penalized])))


def adaptive_weights(X, y, gamma=1.0, epsilon=1e-8, penalty_mask=None, lambda2=None) -> np.ndarray:
    """Adaptive-lasso weights ``1 / (|b_init|^gamma + epsilon)``.

    ``b_init`` is a ridge fit with ``lambda2 = 1e-4 * trace(X'X) / p`` unless
    given. Unpenalized columns get weight 0.
    """
    X, y = _as_design(X, y)
    mask = default_penalty_mask(X) if penalty_mask is None else np.asarray(penalty_mask, dtype=bool)
    if lambda2 is None:
        lambda2 = 1e-4 * float(np.sum(X * X)) / X.shape[1]
    init = fit_ridge(X, y, lambda2, mask)
    w = 1.0 / (np.abs(init) ** gamma + epsilon)
    w[~mask] = 0.0
    return w


@dataclass
class MixedProblem:
    """Least squares with an unpenalized block ``X0``, an L1 block ``X1`` and
    an L2 block ``X2``."""

    X0: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    y: np.ndarray
    lambda1: float
    lambda2: float = 0.0
    weights1: np.ndarray | None = None
    column_names: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = len(self.y)

        def block(a):
            if a is None:
                return np.zeros((n, 0))
            a = np.asarray(a, dtype=float)
            if a.size == 0:
                return np.zeros((n, 0))
            return a[:, None] if a.ndim == 1 else a

        self.X0, self.X1, self.X2 = block(self.X0), block(self.X1), block(self.X2)
        for name in ("X0", "X1", "X2"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} row count differs from y")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalties must be non-negative")
        if self.weights1 is None:
            self.weights1 = np.ones(self.X1.shape[1])
        self.weights1 = np.asarray(self.weights1, dtype=float)

    def objective(self, b0, b1, b2) -> float:
        r = self.y - self.X0 @ b0 - self.X1 @ b1 - self.X2 @ b2
        return float(
            r @ r
            + self.lambda1 * np.sum(self.weights1 * np.abs(b1))
            + self.lambda2 * np.sum(np.asarray(b2) ** 2)
        )


@dataclass
class ProjectedLasso:
    """The lasso left after profiling out the unpenalized and ridge blocks."""

    X: np.ndarray
    y: np.ndarray
    lambda_cd: float
    gram_factor: object
    X02: np.ndarray


def reduce_mixed(problem: MixedProblem) -> ProjectedLasso:
    """Profile ``(b0, b2)`` out of the mixed objective.

    The ridge block is written as ``q`` extra rows ``sqrt(lambda2) [0 | I]``
    appended to ``X02 = [X0, X2]`` (zeros appended to ``y`` and ``X1``), after
    which the profile is an orthogonal projection. The top ``n x n`` block of
    the projection is ``I - X02 (X02'X02 + lambda2 D)^-1 X02'``.
    """
    n = len(problem.y)
    m0, q = problem.X0.shape[1], problem.X2.shape[1]
    X02 = np.hstack([problem.X0, problem.X2])
    if X02.shape[1] == 0:
        return ProjectedLasso(problem.X1, problem.y, problem.lambda1 / (2 * n), None, X02)

    pen_rows = np.hstack([np.zeros((q, m0)), np.sqrt(problem.lambda2) * np.eye(q)])
    X02a = np.vstack([X02, pen_rows])
    X1a = np.vstack([problem.X1, np.zeros((q, problem.X1.shape[1]))])
    ya = np.concatenate([problem.y, np.zeros(q)])

    D = np.diag(np.r_[np.zeros(m0), np.ones(q)])
    gram = X02.T @ X02 + problem.lambda2 * D
    try:
        factor = scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"regularized Gram matrix of the unpenalized/ridge block is singular: {exc}") from exc
    dep = _dependent_columns(X02a)
    if dep:
        raise RankDeficiencyError("unpenalized/ridge block is rank deficient", dep)

    def project(v):
        return v - X02a @ scipy.linalg.cho_solve(factor, X02a.T @ v)

    N = n + q
    return ProjectedLasso(project(X1a), project(ya), problem.lambda1 / (2 * N), factor, X02)


def fit_mixed_two_step(problem: MixedProblem, tol=CD_TOL, max_iter=CD_MAX_ITER):
    """Solve the mixed-penalty problem in two steps.

    Step 1 solves the lasso on the projected design (see :func:`reduce_mixed`);
    step 2 recovers ``b02 = (X02'X02 + lambda2 D)^-1 X02' (y - X1 b1)``.

    Returns
    -------
    (b0, b1, b2)
    """
    red = reduce_mixed(problem)
    m0, q = problem.X0.shape[1], problem.X2.shape[1]
    if problem.X1.shape[1]:
        b1 = fit_lasso_cd(red.X, red.y, red.lambda_cd, problem.weights1, tol=tol, max_iter=max_iter)
    else:
        b1 = np.zeros(0)
    if red.gram_factor is None:
        return np.zeros(0), b1, np.zeros(0)
    b02 = scipy.linalg.cho_solve(red.gram_factor, red.X02.T @ (problem.y - problem.X1 @ b1))
    return b02[:m0], b1, b02[m0 : m0 + q]


def mixed_lambda_max(problem: MixedProblem) -> float:
    """Smallest ``lambda1`` (mixed-objective scale) that zeroes ``b1``."""
    red = reduce_mixed(problem)
    return 2 * red.X.shape[0] * lambda_max(red.X, red.y, problem.weights1)


def pinball_loss(residuals, tau) -> np.ndarray:
    r = np.asarray(residuals, dtype=float)
    return np.where(r >= 0, tau * r, (tau - 1) * r)


def _vertex_polish(X, y, coef, tau):
    """Snap to the exact minimizer when the smoothed solution sits next to it.

    A linear quantile fit interpolates ``p`` observations. The ``p`` smallest
    residuals of the smoothed fit identify the candidate basis; the
    interpolating solution is kept only if it lowers the exact pinball loss.
    """
    p = X.shape[1]
    r = y - X @ coef
    basis = np.argsort(np.abs(r), kind="stable")[:p]
    try:
        cand = np.linalg.solve(X[basis], y[basis])
    except np.linalg.LinAlgError:
        return coef
    if np.mean(pinball_loss(y - X @ cand, tau)) < np.mean(pinball_loss(r, tau)):
        return cand
    return coef


def fit_quantile(X, y, tau, tol=1e-10, max_iter=5000, smoothing=None) -> np.ndarray:
    """Linear quantile regression through a smoothed pinball loss.

    The absolute value inside ``rho_tau(r) = |r|/2 + (tau - 1/2) r`` is
    replaced by its Huber-type smoothing of width ``h`` (default
    ``1e-4 * IQR(y)``) and minimized by majorize-minimize iterations, each a
    weighted least-squares solve. Stops when the relative objective change
    drops below ``tol``, then tries the exact interpolating solution on the
    ``p`` best-fitted points.
    """
    X, y = _as_design(X, y)
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if smoothing is None:
        q75, q25 = np.quantile(y, [0.75, 0.25])
        smoothing = 1e-4 * (q75 - q25)
        if smoothing <= 0:
            smoothing = 1e-4 * max(float(np.std(y)), 1e-8)
    h = float(smoothing)

    def objective(r):
        a = np.abs(r)
        smooth = np.where(a >= h, a, r * r / (2 * h) + h / 2)
        return float(np.mean(0.5 * smooth + (tau - 0.5) * r))

    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    f = objective(r)
    lin = (tau - 0.5) * X.sum(axis=0)
    for _ in range(max_iter):
        wts = 1.0 / (2.0 * np.maximum(np.abs(r), h))
        Xw = X * wts[:, None]
        try:
            coef = np.linalg.solve(Xw.T @ X, Xw.T @ y + lin)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"quantile fit: singular weighted system: {exc}") from exc
        r = y - X @ coef
        f_new = objective(r)
        if abs(f - f_new) <= tol * max(abs(f_new), 1e-300):
            return _vertex_polish(X, y, coef, tau)
        f = f_new
    raise ConvergenceError(f"quantile fit did not converge in {max_iter} iterations", coef, abs(f - f_new))
