"""Thresholding, Monte-Carlo marginal likelihood, eBIC and the grid procedure.

For every spike variance ``nu0`` on a grid the MAP is computed and thresholded
into a support.  Each distinct support is then refitted by maximum likelihood
and scored with the extended BIC; the best-scoring ``nu0`` gives the final
model.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import partial
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

from ._parallel import ordered_map
from .errors import AllPointsFailed, ConfigError, DegenerateEstimate, SaemvsError
from .model import DesignMatrices, HyperParams, NonlinearModel, ObservationSet, PopulationParams
from .saem import MapResult, SaemSchedule, run_map, run_mle

LOGLIK_STREAM = 7_919
MLE_STREAM = 104_729


# ---------------------------------------------------------------------------
# Grid and supports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    nu0_values: Tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.nu0_values)
        if not vals:
            raise ConfigError("the nu0 grid is empty")
        if any(not v > 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError("nu0 grid values must be positive and strictly increasing")
        object.__setattr__(self, "nu0_values", vals)

    @classmethod
    def from_log10(cls, lo: float, hi: float, count: int) -> "Grid":
        """``10 ** (lo + k (hi - lo) / (count - 1))`` for ``k = 0 .. count - 1``."""
        count = int(count)
        if count < 1:
            raise ConfigError("grid count must be at least 1")
        if count == 1:
            return cls((10.0 ** lo,))
        k = np.arange(count)
        return cls(tuple(10.0 ** (lo + k * (hi - lo) / (count - 1))))

    def check(self, nu1: float) -> "Grid":
        if self.nu0_values[-1] >= nu1:
            raise ConfigError(f"every nu0 must be below nu1={nu1}")
        return self

    def __len__(self):
        return len(self.nu0_values)


@dataclass(frozen=True)
class SupportSet:
    """Selected ``(l, m)`` pairs, 0-based: covariate ``l``, component ``m``."""

    pairs: FrozenSet[Tuple[int, int]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "pairs", frozenset((int(l), int(m)) for l, m in self.pairs))

    @classmethod
    def from_mask(cls, mask) -> "SupportSet":
        return cls(frozenset(zip(*np.nonzero(np.asarray(mask, bool)))))

    def as_mask(self, p: int, q: int) -> np.ndarray:
        out = np.zeros((p, q), dtype=bool)
        for l, m in self.pairs:
            out[l, m] = True
        return out

    def sorted(self) -> List[Tuple[int, int]]:
        return sorted(self.pairs, key=lambda lm: (lm[1], lm[0]))

    def __len__(self):
        return len(self.pairs)

    def __contains__(self, item):
        return tuple(item) in self.pairs

    def __iter__(self):
        return iter(self.sorted())

    def label(self, names: Sequence[str] = (), phi_names: Sequence[str] = ()) -> str:
        if not self.pairs:
            return "{}"
        fmt = []
        for l, m in self.sorted():
            cov = names[l] if names else f"V{l + 1}"
            comp = phi_names[m] if phi_names else f"phi{m + 1}"
            fmt.append(f"{cov}:{comp}")
        return "{" + ",".join(fmt) + "}"


def threshold(nu0: float, nu1: float, alpha) -> np.ndarray:
    """Smallest ``|beta|`` at which the slab is at least as likely as the spike.

    ``sqrt(2 nu0 nu1 / (nu1 - nu0) log(sqrt(nu1 / nu0) (1 - alpha) / alpha))``;
    zero when the log argument is at most one, infinite when ``alpha == 0``.
    """
    if not 0 < nu0 < nu1:
        raise ConfigError("need 0 < nu0 < nu1")
    alpha = np.asarray(alpha, float)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ConfigError("alpha must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_arg = 0.5 * (np.log(nu1) - np.log(nu0)) + np.log1p(-alpha) - np.log(alpha)
        val = np.sqrt(2.0 * nu0 * nu1 / (nu1 - nu0) * np.maximum(log_arg, 0.0))
    val = np.where(alpha == 0, np.inf, val)
    return val if val.ndim else float(val)


def select_support(beta_hat, alpha_hat, nu0: float, nu1: float, mask=None) -> SupportSet:
    """Pairs with ``|beta_hat[l, m]| >= threshold(nu0, nu1, alpha_hat[m])`` on masked components."""
    beta_hat = np.asarray(beta_hat, float)
    q = beta_hat.shape[1]
    s = np.broadcast_to(threshold(nu0, nu1, np.broadcast_to(alpha_hat, (q,))), (q,))
    chosen = np.abs(beta_hat) >= s[None, :]
    if mask is not None:
        chosen &= np.asarray(mask, bool)[None, :]
    return SupportSet.from_mask(chosen)


def ebic(loglik: float, support_size: int, n: int, p: int, q: int) -> float:
    """``-2 loglik + |S| log n + 2 log C(pq, |S|)``."""
    total = p * q
    if not 0 <= support_size <= total:
        raise ConfigError(f"support size {support_size} outside [0, {total}]")
    log_binom = gammaln(total + 1) - gammaln(support_size + 1) - gammaln(total - support_size + 1)
    return float(-2.0 * loglik + support_size * np.log(n) + 2.0 * log_binom)


# ---------------------------------------------------------------------------
# Monte-Carlo marginal likelihood
# ---------------------------------------------------------------------------


def log_marginal_likelihood(obs: ObservationSet, design: DesignMatrices, model: NonlinearModel,
                            theta: PopulationParams, T: int = 10_000, seed=0,
                            chunk: int = 500) -> float:
    """Prior-sampling estimate of ``log p(y | theta)``.

    ``phi_i^(t) ~ N(V_i beta_tilde, Gamma)`` i.i.d. for ``t = 1..T``; each
    individual contributes ``log mean_t p(y_i | phi_i^(t), eta, sigma2)``,
    reduced with log-sum-exp.  The fixed effects are evaluated at ``eta``.
    Drawing the same standard normals for every ``theta`` (same ``seed``)
    keeps comparisons between sub-models free of independent Monte-Carlo
    noise.
    """
    if T < 1:
        raise ConfigError("T must be positive")
    rng = np.random.default_rng(seed)
    q = model.q
    means = design.augmented @ theta.beta_tilde
    L = np.linalg.cholesky(theta.Gamma)
    sigma2 = theta.sigma2
    n = obs.n
    acc = np.full(n, -np.inf)
    done = 0
    while done < T:
        b = min(chunk, T - done)
        z = rng.standard_normal((b, n, q))
        phi = means[None] + z @ L.T
        pred = model.eval(phi[:, obs.ind].reshape(-1, q), theta.eta, np.tile(obs.t, b))
        with np.errstate(over="ignore", invalid="ignore"):
            r2 = (np.tile(obs.y, b) - pred) ** 2
            r2 = np.where(np.isfinite(r2), r2, np.inf).reshape(b, -1)
            ss = np.stack([np.bincount(obs.ind, weights=row, minlength=n) for row in r2])
            # a residual too large for the scale contributes exp(-inf) = 0
            acc = np.logaddexp(acc, logsumexp(-0.5 * ss / sigma2, axis=0))
        done += b
    if not np.all(np.isfinite(acc)):
        bad = int(np.flatnonzero(~np.isfinite(acc))[0])
        raise DegenerateEstimate(f"likelihood of individual {bad} underflowed for every draw")
    return float(np.sum(acc - np.log(T) - 0.5 * obs.n_i * np.log(2.0 * np.pi * sigma2)))


# ---------------------------------------------------------------------------
# Grid procedure
# ---------------------------------------------------------------------------


@dataclass
class SupportFit:
    support: SupportSet
    nu0_indices: List[int]
    theta_mle: Optional[PopulationParams] = None
    loglik: float = np.nan
    ebic: float = np.nan
    error: Optional[str] = None


@dataclass
class SelectionResult:
    grid: Grid
    nu1: float
    map_estimates: List[Optional[PopulationParams]]
    thresholds: np.ndarray
    supports: List[Optional[SupportSet]]
    support_id: List[Optional[int]]
    fits: List[SupportFit]
    failures: Dict[int, str]
    nu0_hat_index: int
    seed: int
    map_results: List[Optional[MapResult]] = field(default_factory=list, repr=False)

    @property
    def nu0_hat(self) -> float:
        return self.grid.nu0_values[self.nu0_hat_index]

    @property
    def final_support(self) -> SupportSet:
        return self.supports[self.nu0_hat_index]

    @property
    def final_fit(self) -> SupportFit:
        return self.fits[self.support_id[self.nu0_hat_index]]

    @property
    def regularization_path(self) -> np.ndarray:
        """``(|grid|, p, q)`` MAP coefficients (NaN rows for failed points)."""
        ref = next(t for t in self.map_estimates if t is not None)
        out = np.full((len(self.grid),) + ref.beta.shape, np.nan)
        for g, th in enumerate(self.map_estimates):
            if th is not None:
                out[g] = th.beta
        return out


def _map_task(args, obs, design, model, hyper, schedule, theta0, keep_traces):
    g, nu0, seed = args
    try:
        res = run_map(obs, design, model, hyper.with_nu0(nu0), schedule, theta0,
                      np.random.SeedSequence([seed, g]), record_trace=keep_traces)
        return g, res, None
    except SaemvsError as exc:
        return g, None, f"{type(exc).__name__}: {exc}"


def _mle_task(args, obs, design, model, hyper, schedule, T):
    j, support, theta_init, seed = args
    try:
        res = run_mle(obs, design, model, support.sorted(), schedule, theta_init,
                      np.random.SeedSequence([seed, MLE_STREAM, j]), hyper=hyper)
        ll = log_marginal_likelihood(obs, design, model, res.theta_hat, T,
                                     np.random.SeedSequence([seed, LOGLIK_STREAM]))
        return j, res.theta_hat, ll, None
    except SaemvsError as exc:
        return j, None, np.nan, f"{type(exc).__name__}: {exc}"


def mle_start(theta_map: PopulationParams, theta0: PopulationParams,
              support: SupportSet) -> PopulationParams:
    """MAP estimate restricted to ``support``, with Gamma reset to its initial value.

    The MAP Gamma can be far smaller than the sub-model's (spike coefficients
    soak up random-effect variance), and SAEM grows a small Gamma very slowly.
    """
    beta = np.where(support.as_mask(*theta_map.beta.shape), theta_map.beta, 0.0)
    return replace(theta_map, beta=beta, Gamma=theta0.Gamma)


def run_saemvs(obs: ObservationSet, design: DesignMatrices, model: NonlinearModel,
               hyper: HyperParams, grid: Grid, schedule: SaemSchedule, theta0: PopulationParams,
               seed: int, *, mle_schedule: Optional[SaemSchedule] = None, T: int = 10_000,
               workers: Optional[int] = 1, keep_traces: bool = False) -> SelectionResult:
    """Run the full grid procedure.

    Grid point ``g`` uses the seed ``SeedSequence([seed, g])``; support refits
    are indexed by first appearance along the (ascending) grid, so results do
    not depend on ``workers``.  Ties in eBIC go to the smaller support, then
    to the smaller ``nu0``.
    """
    grid.check(hyper.nu1)
    mle_schedule = schedule if mle_schedule is None else mle_schedule
    resolved = hyper.resolved(model.q, model.s, design.p)
    tasks = [(g, nu0, seed) for g, nu0 in enumerate(grid.nu0_values)]
    map_fn = partial(_map_task, obs=obs, design=design, model=model, hyper=resolved,
                     schedule=schedule, theta0=theta0, keep_traces=keep_traces)
    outcomes = ordered_map(map_fn, tasks, workers)

    q = model.q
    mask = np.asarray(model.selection_mask, bool)
    thresholds = np.full((len(grid), q), np.nan)
    estimates: List[Optional[PopulationParams]] = [None] * len(grid)
    supports: List[Optional[SupportSet]] = [None] * len(grid)
    failures: Dict[int, str] = {}
    map_results: List[Optional[MapResult]] = [None] * len(grid)
    for g, res, err in outcomes:
        if err is not None:
            failures[g] = err
            continue
        nu0 = grid.nu0_values[g]
        th = res.theta_hat
        estimates[g] = th
        thresholds[g] = np.where(mask, threshold(nu0, hyper.nu1, th.alpha), np.nan)
        supports[g] = select_support(th.beta, th.alpha, nu0, hyper.nu1, mask)
        if keep_traces:
            map_results[g] = res

    fits: List[SupportFit] = []
    lookup: Dict[FrozenSet, int] = {}
    support_id: List[Optional[int]] = [None] * len(grid)
    for g, sup in enumerate(supports):
        if sup is None:
            continue
        if sup.pairs not in lookup:
            lookup[sup.pairs] = len(fits)
            fits.append(SupportFit(sup, []))
        support_id[g] = lookup[sup.pairs]
        fits[support_id[g]].nu0_indices.append(g)
    if not fits:
        raise AllPointsFailed(f"all {len(grid)} grid points failed: {failures}")

    mle_tasks = [(j, f.support, mle_start(estimates[f.nu0_indices[0]], theta0, f.support), seed)
                 for j, f in enumerate(fits)]
    mle_fn = partial(_mle_task, obs=obs, design=design, model=model, hyper=resolved,
                     schedule=mle_schedule, T=T)
    for j, th, ll, err in ordered_map(mle_fn, mle_tasks, workers):
        fit = fits[j]
        if err is not None:
            fit.error = err
            continue
        fit.theta_mle, fit.loglik = th, ll
        fit.ebic = ebic(ll, len(fit.support), design.n, design.p, int(mask.sum()))

    candidates = [(fits[support_id[g]].ebic, len(supports[g]), grid.nu0_values[g], g)
                  for g in range(len(grid))
                  if support_id[g] is not None and np.isfinite(fits[support_id[g]].ebic)]
    if not candidates:
        raise AllPointsFailed("no grid point produced a support with a finite eBIC")
    best = min(candidates)[3]
    return SelectionResult(grid, float(hyper.nu1), estimates, thresholds, supports, support_id,
                           fits, failures, best, int(seed), map_results)
