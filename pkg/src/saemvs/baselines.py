"""Two-step baseline: per-individual least squares, then lasso on the fitted parameters."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional, Sequence

import numba
import numpy as np
from scipy.optimize import least_squares

from ._parallel import ordered_map
from .errors import ConfigError, NotConverged, ShapeMismatch, TooFewConverged
from .model import DesignMatrices, NonlinearModel, ObservationSet
from .selection import SupportSet

START_FACTORS = (1.0, 0.7, 1.4)


# ---------------------------------------------------------------------------
# Individual fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndividualFit:
    phi_hat: np.ndarray
    residual_ss: float
    converged: bool
    iterations: int


def fit_individual(y_i, t_i, model: NonlinearModel, phi_init, psi=None,
                   max_nfev: int = 2000) -> IndividualFit:
    """Levenberg-Marquardt fit of ``phi`` for one individual.

    Three starts: ``phi_init`` and two componentwise rescalings of it (x0.7,
    x1.4).  The converged start with the smallest residual sum of squares
    wins.  Jacobians are finite differences.
    """
    y_i = np.asarray(y_i, float)
    t_i = np.asarray(t_i, float)
    q = model.q
    if len(y_i) < q:
        raise ShapeMismatch(f"need at least q={q} observations, got {len(y_i)}")
    psi = np.zeros(model.s) if psi is None else np.asarray(psi, float)
    phi_init = np.broadcast_to(np.asarray(phi_init, float), (q,))

    def resid(phi):
        pred = model.eval(np.broadcast_to(phi, (len(t_i), q)), psi, t_i)
        r = y_i - pred
        return np.where(np.isfinite(r), r, 1e150)

    best = None
    total_nfev = 0
    for factor in START_FACTORS:
        try:
            sol = least_squares(resid, phi_init * factor, method="lm", max_nfev=max_nfev)
        except ValueError:
            continue
        total_nfev += sol.nfev
        rss = float(np.sum(sol.fun ** 2))
        ok = sol.success and np.all(np.isfinite(sol.x)) and rss < 1e100
        if ok and (best is None or rss < best[1]):
            best = (sol.x.copy(), rss)
    if best is None:
        raise NotConverged(f"no start converged within {max_nfev} evaluations")
    return IndividualFit(best[0], best[1], True, total_nfev)


def _fit_one(args, model, psi, max_nfev):
    y_i, t_i, phi_init = args
    try:
        return fit_individual(y_i, t_i, model, phi_init, psi, max_nfev)
    except NotConverged:
        return IndividualFit(np.full(model.q, np.nan), np.inf, False, max_nfev)


def fit_all(obs: ObservationSet, model: NonlinearModel, phi_init, psi=None, workers=1,
            max_nfev: int = 2000) -> List[IndividualFit]:
    phi_init = np.asarray(phi_init, float)
    inits = np.broadcast_to(phi_init, (obs.n, model.q))
    tasks = [obs.individual(i) + (inits[i],) for i in range(obs.n)]
    return ordered_map(partial(_fit_one, model=model, psi=psi, max_nfev=max_nfev), tasks, workers)


# ---------------------------------------------------------------------------
# Lasso
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _cd_sweep(X, R, B, xsq, lam, z, active_only):
    # One cyclic pass; returns the largest xsq_j * ||delta B_j||^2.
    n, p = X.shape
    q = R.shape[1]
    worst = 0.0
    for j in range(p):
        if xsq[j] == 0.0:
            continue
        if active_only:
            nonzero = False
            for m in range(q):
                if B[j, m] != 0.0:
                    nonzero = True
            if not nonzero:
                continue
        norm = 0.0
        for m in range(q):
            acc = 0.0
            for i in range(n):
                acc += X[i, j] * R[i, m]
            z[m] = acc / n + xsq[j] * B[j, m]
            norm += z[m] * z[m]
        norm = np.sqrt(norm)
        shrink = 0.0
        if norm > lam:
            shrink = (1.0 - lam / norm) / xsq[j]
        change = 0.0
        for m in range(q):
            new = shrink * z[m]
            delta = new - B[j, m]
            if delta != 0.0:
                for i in range(n):
                    R[i, m] -= X[i, j] * delta
                B[j, m] = new
                change += delta * delta
        change *= xsq[j]
        if change > worst:
            worst = change
    return worst


@numba.njit(cache=True)
def _group_cd_path(X, Y, lambdas, tol, max_iter):
    # Minimizes (1/2n)||Y - X B||_F^2 + lam * sum_j ||B_j||_2 along lambdas
    # with warm starts; X and Y are centered.  Row-wise group soft-thresholding;
    # for a single response this is ordinary lasso soft-thresholding.
    # Converged when no coordinate moves the fit by more than tol times the
    # null mean square; passes alternate between the active set and all rows.
    n, p = X.shape
    q = Y.shape[1]
    L = lambdas.shape[0]
    out = np.zeros((L, p, q))
    iters = np.zeros(L, dtype=np.int64)
    B = np.zeros((p, q))
    R = Y.copy()
    xsq = np.zeros(p)
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += X[i, j] * X[i, j]
        xsq[j] = acc / n
    null = 0.0
    for i in range(n):
        for m in range(q):
            null += Y[i, m] * Y[i, m]
    null /= n
    thresh = tol * null if null > 0.0 else tol
    z = np.zeros(q)
    for k in range(L):
        lam = lambdas[k]
        it = 0
        while it < max_iter:
            it += 1
            if _cd_sweep(X, R, B, xsq, lam, z, False) < thresh:
                break
            while it < max_iter:
                it += 1
                if _cd_sweep(X, R, B, xsq, lam, z, True) < thresh:
                    break
        iters[k] = it
        out[k] = B
    return out, iters


@dataclass
class LassoPath:
    lambda_values: np.ndarray
    coefs: np.ndarray
    intercepts: np.ndarray
    iterations: np.ndarray
    cv_mse: Optional[np.ndarray] = None
    cv_se: Optional[np.ndarray] = None
    lambda_min: Optional[float] = None
    lambda_1se: Optional[float] = None

    @property
    def index_1se(self) -> int:
        return int(np.flatnonzero(self.lambda_values == self.lambda_1se)[0])

    def coef_at(self, lam: float) -> np.ndarray:
        return self.coefs[int(np.argmin(np.abs(self.lambda_values - lam)))]


def lambda_max(targets, V) -> float:
    Y = np.asarray(targets, float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    X = np.asarray(V, float)
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    return float(np.max(np.linalg.norm(Xc.T @ Yc, axis=1)) / X.shape[0])


def default_lambda_grid(targets, V, count: int = 100, ratio: Optional[float] = None) -> np.ndarray:
    """``count`` log-spaced values from ``lambda_max`` down to ``ratio * lambda_max``.

    The default ratio is 0.01 when there are fewer rows than covariates and
    1e-4 otherwise.
    """
    if ratio is None:
        n, p = np.shape(V)
        ratio = 1e-2 if n < p else 1e-4
    lmax = lambda_max(targets, V)
    if lmax <= 0:
        lmax = 1.0
    return np.geomspace(lmax, lmax * ratio, count)


def _fit_path(Y, X, lambdas, tol, max_iter) -> LassoPath:
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = np.ascontiguousarray(X - x_mean)
    Yc = np.ascontiguousarray(Y - y_mean)
    coefs, iters = _group_cd_path(Xc, Yc, lambdas, tol, max_iter)
    intercepts = y_mean[None, :] - np.einsum("j,ljm->lm", x_mean, coefs)
    return LassoPath(lambdas, coefs, intercepts, iters)


def _prep(targets, V_std, lambda_grid):
    Y = np.asarray(targets, float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    X = np.asarray(V_std, float)
    if X.shape[0] != Y.shape[0]:
        raise ShapeMismatch("targets and covariates have different row counts")
    lambdas = default_lambda_grid(Y, X) if lambda_grid is None \
        else np.asarray(lambda_grid, float)
    if np.any(lambdas < 0) or np.any(np.diff(lambdas) >= 0):
        raise ConfigError("lambda grid must be nonnegative and strictly decreasing")
    return Y, X, lambdas


def lasso_univariate(targets, V_std, lambda_grid=None, tol: float = 1e-7,
                     max_iter: int = 100_000) -> LassoPath:
    """Lasso path ``(1/2n)||y - b0 - V b||^2 + lam ||b||_1`` by cyclic coordinate descent.

    ``coefs`` has shape ``(L, p)``.
    """
    Y, X, lambdas = _prep(targets, V_std, lambda_grid)
    if Y.shape[1] != 1:
        raise ShapeMismatch("lasso_univariate takes a single response")
    path = _fit_path(Y, X, lambdas, tol, max_iter)
    path.coefs = path.coefs[:, :, 0]
    path.intercepts = path.intercepts[:, 0]
    return path


def lasso_multivariate(targets, V_std, lambda_grid=None, tol: float = 1e-7,
                       max_iter: int = 100_000) -> LassoPath:
    """Group-lasso path tying the ``q`` responses of each covariate together.

    ``coefs`` has shape ``(L, p, q)``.
    """
    Y, X, lambdas = _prep(targets, V_std, lambda_grid)
    return _fit_path(Y, X, lambdas, tol, max_iter)


def fold_ids(n: int, folds: int, seed=0) -> np.ndarray:
    if not 2 <= folds <= n:
        raise ConfigError(f"need 2 <= folds <= n, got {folds}")
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=int)
    ids[perm] = np.arange(n) % folds
    return ids


def cross_validate(targets, V_std, folds: int = 10, lambda_grid=None, seed=0,
                   multivariate: Optional[bool] = None, tol: float = 1e-7) -> LassoPath:
    """K-fold CV; returns the full-data path with ``cv_mse``, ``cv_se`` and ``lambda_1se``.

    The fold error is the mean over held-out rows of the squared residual norm.
    ``lambda_1se`` is the largest lambda whose CV error is within one
    standard error of the minimum.
    """
    Y, X, lambdas = _prep(targets, V_std, lambda_grid)
    n = X.shape[0]
    ids = fold_ids(n, folds, seed)
    errs = np.empty((folds, len(lambdas)))
    for f in range(folds):
        test = ids == f
        sub = _fit_path(Y[~test], X[~test], lambdas, tol, 100_000)
        pred = sub.intercepts[:, None, :] + np.einsum("ij,ljm->lim", X[test], sub.coefs)
        errs[f] = np.mean(np.sum((Y[test][None] - pred) ** 2, axis=2), axis=1)
    cv_mse = errs.mean(axis=0)
    cv_se = errs.std(axis=0, ddof=1) / np.sqrt(folds)
    i_min = int(np.argmin(cv_mse))
    ok = np.flatnonzero(cv_mse <= cv_mse[i_min] + cv_se[i_min])
    i_1se = int(ok.min())
    path = _fit_path(Y, X, lambdas, tol, 100_000)
    multivariate = Y.shape[1] > 1 if multivariate is None else multivariate
    if not multivariate:
        path.coefs = path.coefs[:, :, 0]
        path.intercepts = path.intercepts[:, 0]
    path.cv_mse, path.cv_se = cv_mse, cv_se
    path.lambda_min, path.lambda_1se = float(lambdas[i_min]), float(lambdas[i_1se])
    return path


# ---------------------------------------------------------------------------
# Two-step selection
# ---------------------------------------------------------------------------


@dataclass
class TwoStepResult:
    support: SupportSet
    fits: List[IndividualFit]
    converged: np.ndarray
    phi_hat: np.ndarray
    paths: List[LassoPath] = field(repr=False, default_factory=list)

    @property
    def n_converged(self) -> int:
        return int(self.converged.sum())


def two_step_select(obs: ObservationSet, design: DesignMatrices, model: NonlinearModel,
                    variant: str = "gaussian", *, phi_init, psi=None, folds: int = 10,
                    seed=0, workers=1, min_converged: float = 0.5) -> TwoStepResult:
    """Fit each individual, then lasso the fitted parameters on the covariates.

    ``variant="gaussian"`` runs one lasso per component under selection;
    ``"mgaussian"`` runs a single group lasso across them, so all of them
    share one support.  The penalty is the one-standard-error CV choice.
    Individuals whose fit does not converge are dropped.
    """
    if variant not in ("gaussian", "mgaussian"):
        raise ConfigError(f"unknown two-step variant {variant!r}")
    fits = fit_all(obs, model, phi_init, psi, workers)
    ok = np.array([f.converged for f in fits])
    if ok.mean() < min_converged:
        raise TooFewConverged(f"only {ok.sum()} of {obs.n} individual fits converged")
    if not ok.all():
        warnings.warn(f"{(~ok).sum()} individual fits did not converge and were dropped")
    phi_hat = np.vstack([f.phi_hat for f in fits])
    comps = np.flatnonzero(model.selection_mask)
    X = design.V_std[ok]
    targets = phi_hat[ok][:, comps]
    mask = np.zeros((design.p, model.q), dtype=bool)
    paths = []
    if variant == "gaussian":
        for k, m in enumerate(comps):
            path = cross_validate(targets[:, k], X, folds, seed=np.random.SeedSequence([seed, k]),
                                  multivariate=False)
            mask[:, m] = path.coefs[path.index_1se] != 0
            paths.append(path)
    else:
        path = cross_validate(targets, X, folds, seed=np.random.SeedSequence([seed, 0]),
                              multivariate=True)
        active = np.any(path.coefs[path.index_1se] != 0, axis=1)
        mask[:, comps] = active[:, None]
        paths.append(path)
    return TwoStepResult(SupportSet.from_mask(mask), fits, ok, phi_hat, paths)
