"""Synthetic designs, selection metrics and replicate campaigns.

Two designs are provided: the logistic growth model with Gaussian covariates
(optionally correlated through one of four structured covariance matrices)
and the one-compartment pharmacokinetic model with binary covariates and
optional early dropout.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._parallel import ordered_map
from .baselines import two_step_select
from .errors import ConfigError, EmptyTruth, InvalidCorrelation, SaemvsError
from .model import (DesignMatrices, HyperParams, ObservationSet, PopulationParams, get_model)
from .saem import SaemSchedule
from .selection import Grid, SupportSet, run_saemvs

LOGISTIC_TIMES = tuple(150.0 + j * (3000.0 - 150.0) / 9.0 for j in range(10))
PK_TIMES = (0.05, 0.15, 0.25, 0.4, 0.5, 0.8, 1.0, 2.0, 7.0, 12.0, 24.0, 40.0)
OUTCOMES = ("exact", "over", "fn_only", "fp_and_fn")
METHODS = ("saemvs", "two_step_gaussian", "two_step_mgaussian")


# ---------------------------------------------------------------------------
# Specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    """Data-generating design.

    ``covariate_law`` is ``"iid_gaussian"``, ``"iid_binomial"`` (success
    probability ``binom_prob``) or ``"ar"`` with ``ar_scenario`` in 1..4 and
    correlation ``rho``.  ``true_beta`` acts on standardized covariates.
    The first ``round(p_partial * n)`` individuals keep only their first
    ``partial_keep`` observations.
    """

    model_name: str
    n: int
    p: int
    true_mu: Tuple[float, ...]
    true_beta: np.ndarray
    true_Gamma: np.ndarray
    true_sigma2: float
    times: Tuple[float, ...]
    true_psi: Tuple[float, ...] = ()
    model_constants: Dict[str, float] = field(default_factory=dict)
    covariate_law: str = "iid_gaussian"
    binom_prob: float = 0.2
    ar_scenario: int = 0
    rho: float = 0.0
    p_partial: float = 0.0
    partial_keep: int = 3
    replicates: int = 1
    base_seed: int = 0

    def __post_init__(self):
        beta = np.array(self.true_beta, float)
        q = len(self.true_mu)
        if beta.ndim == 1:
            beta = beta[:, None]
        if beta.shape != (self.p, q):
            raise ConfigError(f"true_beta must have shape ({self.p}, {q})")
        G = np.atleast_2d(np.array(self.true_Gamma, float))
        if G.shape != (q, q) or not np.allclose(G, G.T) or np.linalg.eigvalsh(G).min() < -1e-12:
            raise ConfigError("true_Gamma must be symmetric positive semidefinite")
        if self.covariate_law not in ("iid_gaussian", "iid_binomial", "ar"):
            raise ConfigError(f"unknown covariate law {self.covariate_law!r}")
        if self.covariate_law == "ar" and self.ar_scenario not in (1, 2, 3, 4):
            raise ConfigError("ar_scenario must be 1, 2, 3 or 4")
        if not abs(self.rho) < 1:
            raise InvalidCorrelation("|rho| must be below 1")
        if not 0 <= self.p_partial < 1:
            raise ConfigError("p_partial must lie in [0, 1)")
        if self.true_sigma2 < 0 or self.n < 2 or self.p < 1 or self.replicates < 1:
            raise ConfigError("invalid sizes or noise level")
        beta.setflags(write=False)
        G.setflags(write=False)
        object.__setattr__(self, "true_beta", beta)
        object.__setattr__(self, "true_Gamma", G)
        object.__setattr__(self, "true_mu", tuple(float(v) for v in self.true_mu))
        object.__setattr__(self, "true_psi", tuple(float(v) for v in self.true_psi))
        object.__setattr__(self, "times", tuple(float(v) for v in self.times))

    @property
    def q(self) -> int:
        return len(self.true_mu)

    @property
    def model(self):
        return get_model(self.model_name, **self.model_constants)

    @property
    def truth(self) -> SupportSet:
        return SupportSet.from_mask(self.true_beta != 0)


def logistic_scenario(n: int = 200, p: int = 500, Gamma2: float = 200.0, *, ar_scenario: int = 0,
                      rho: float = 0.0, replicates: int = 1, base_seed: int = 0) -> ScenarioSpec:
    """Logistic growth design: ``mu = 1200``, ``beta = (100, 50, 20, 0, ...)``,
    ``psi = (200, 300)``, ``sigma2 = 30``, ten equally spaced times on [150, 3000]."""
    beta = np.zeros(p)
    beta[:3] = [100.0, 50.0, 20.0][:p]
    law = "ar" if ar_scenario else "iid_gaussian"
    return ScenarioSpec("logistic_growth", n, p, (1200.0,), beta, [[Gamma2]], 30.0, LOGISTIC_TIMES,
                        true_psi=(200.0, 300.0), covariate_law=law, ar_scenario=ar_scenario,
                        rho=rho, replicates=replicates, base_seed=base_seed)


def pk_scenario(n: int = 200, p: int = 500, p_partial: float = 0.0, *, replicates: int = 1,
                base_seed: int = 0) -> ScenarioSpec:
    """One-compartment design with Bernoulli(0.2) covariates.

    ``mu = (6, 8)``, ``Gamma = [[0.2, 0.05], [0.05, 0.1]]``, ``sigma2 = 1e-3``;
    covariates 1-3 act on the first component (3, 2, 1) and 3-5 on the second.
    """
    if p < 5:
        raise ConfigError("the pharmacokinetic design needs p >= 5")
    beta = np.zeros((p, 2))
    beta[:3, 0] = [3.0, 2.0, 1.0]
    beta[2:5, 1] = [3.0, 2.0, 1.0]
    return ScenarioSpec("one_compartment_pk", n, p, (6.0, 8.0), beta, [[0.2, 0.05], [0.05, 0.1]],
                        1e-3, PK_TIMES, model_constants={"D": 100.0, "V": 30.0},
                        covariate_law="iid_binomial", p_partial=p_partial,
                        replicates=replicates, base_seed=base_seed)


# ---------------------------------------------------------------------------
# Covariates and data
# ---------------------------------------------------------------------------


def _ar(rho: float, k: int) -> np.ndarray:
    idx = np.arange(k)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def covariance(p: int, scenario: int, rho: float) -> np.ndarray:
    """Covariance of the covariates for the four correlated scenarios.

    1: identity on the first three, AR(rho) on the rest; 2: covariate 3 has
    correlation ``rho^(j-3)`` with every covariate ``j >= 4``; 3: AR(rho) on
    the first three only; 4: AR(rho) on all.
    """
    S = np.eye(p)
    k = min(3, p)
    if scenario == 1:
        S[k:, k:] = _ar(rho, p - k)
    elif scenario == 2:
        if p > 3:
            a = rho ** (np.arange(4, p + 1) - 3.0)
            S[2, 3:] = a
            S[3:, 2] = a
    elif scenario == 3:
        S[:k, :k] = _ar(rho, k)
    elif scenario == 4:
        S = _ar(rho, p)
    else:
        raise ConfigError(f"unknown correlation scenario {scenario}")
    return S


def gen_covariates(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    """Raw ``n x p`` covariates for ``spec``.

    Gaussian laws always draw ``Z ~ N(0, I)`` first and multiply by the
    Cholesky factor, so ``rho = 0`` reproduces the i.i.d. draws exactly.
    """
    n, p = spec.n, spec.p
    if spec.covariate_law == "iid_binomial":
        return (rng.uniform(size=(n, p)) < spec.binom_prob).astype(float)
    Z = rng.standard_normal((n, p))
    if spec.covariate_law == "iid_gaussian" or spec.rho == 0:
        return Z
    S = covariance(p, spec.ar_scenario, spec.rho)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise InvalidCorrelation(
            f"scenario {spec.ar_scenario} covariance is not positive definite at rho={spec.rho}"
        ) from None
    return Z @ L.T


@dataclass(frozen=True)
class Truth:
    support: SupportSet
    phi: np.ndarray
    beta: np.ndarray
    seed: int


def _psd_root(G):
    w, U = np.linalg.eigh(G)
    return U * np.sqrt(np.clip(w, 0.0, None))


def replicate_seed(spec: ScenarioSpec, index: int) -> int:
    return int(spec.base_seed) + int(index)


def gen_dataset(spec: ScenarioSpec, replicate_index: int = 0):
    """Simulate one replicate; returns ``(ObservationSet, DesignMatrices, Truth)``."""
    seed = replicate_seed(spec, replicate_index)
    rng = np.random.default_rng(seed)
    model = spec.model
    V = gen_covariates(spec, rng)
    design = DesignMatrices.from_raw(V)
    q = spec.q
    xi = rng.standard_normal((spec.n, q)) @ _psd_root(spec.true_Gamma).T
    phi = np.asarray(spec.true_mu)[None, :] + design.V_std @ spec.true_beta + xi
    t = np.asarray(spec.times)
    J = len(t)
    pred = model.eval(np.repeat(phi, J, axis=0), np.asarray(spec.true_psi), np.tile(t, spec.n))
    y = pred + np.sqrt(spec.true_sigma2) * rng.standard_normal(spec.n * J)
    obs = ObservationSet(y, np.tile(t, spec.n), np.repeat(np.arange(spec.n), J), spec.n)
    n_first = int(round(spec.p_partial * spec.n))
    if n_first:
        obs = obs.truncate(n_first, spec.partial_keep)
    phi.setflags(write=False)
    return obs, design, Truth(spec.truth, phi, spec.true_beta, seed)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _classify(tp, fp, fn) -> str:
    if fp == 0 and fn == 0:
        return "exact"
    if fn == 0:
        return "over"
    if fp == 0:
        return "fn_only"
    return "fp_and_fn"


def evaluate(selected: SupportSet, truth: SupportSet, p: int, q: int, components=None) -> dict:
    """Sensitivity, specificity, accuracy and outcome class of one selection.

    ``components`` restricts the comparison to some components of ``phi``
    (all by default); the universe is then ``p * len(components)`` pairs.
    """
    comps = range(q) if components is None else list(components)
    sel = selected.as_mask(p, q)[:, comps]
    tru = truth.as_mask(p, q)[:, comps]
    if not tru.any():
        raise EmptyTruth("the true support is empty; sensitivity is undefined")
    tp = int(np.sum(sel & tru))
    fp = int(np.sum(sel & ~tru))
    fn = int(np.sum(~sel & tru))
    tn = int(np.sum(~sel & ~tru))
    return {"se": tp / (tp + fn), "sp": tn / (tn + fp) if tn + fp else 1.0,
            "ac": (tp + tn) / sel.size, "outcome": _classify(tp, fp, fn),
            "tp": tp, "fp": fp, "fn": fn, "tn": tn}


@dataclass
class ReplicateRecord:
    index: int
    seed: int
    method: str
    metrics: Optional[dict] = None
    component_metrics: List[Optional[dict]] = field(default_factory=list)
    mee: Optional[List[float]] = None
    support: str = ""
    nu0_hat: Optional[float] = None
    n_converged: Optional[int] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class MetricsReport:
    method: str
    records: List[ReplicateRecord]
    sensitivity: Tuple[float, float]
    specificity: Tuple[float, float]
    accuracy: Tuple[float, float]
    outcome_counts: Dict[str, int]
    component_outcome_counts: List[Dict[str, int]]
    mee: Optional[List[float]]
    n_failed: int

    @property
    def n_replicates(self) -> int:
        return len(self.records)

    def exact_rate(self, component: Optional[int] = None) -> float:
        counts = self.outcome_counts if component is None else self.component_outcome_counts[component]
        total = sum(counts.values())
        return counts["exact"] / total if total else float("nan")

    def to_dict(self) -> dict:
        return {"method": self.method, "replicates": self.n_replicates, "failed": self.n_failed,
                "se_mean": self.sensitivity[0], "se_se": self.sensitivity[1],
                "sp_mean": self.specificity[0], "sp_se": self.specificity[1],
                "ac_mean": self.accuracy[0], "ac_se": self.accuracy[1],
                "outcome_counts": self.outcome_counts,
                "component_outcome_counts": self.component_outcome_counts, "mee": self.mee}


def _mean_se(values) -> Tuple[float, float]:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def aggregate(method: str, records: Sequence[ReplicateRecord], q: int) -> MetricsReport:
    records = sorted(records, key=lambda r: r.index)
    good = [r for r in records if r.ok and r.metrics is not None]
    counts = {k: 0 for k in OUTCOMES}
    comp_counts = [{k: 0 for k in OUTCOMES} for _ in range(q)]
    for r in good:
        counts[r.metrics["outcome"]] += 1
        for m, cm in enumerate(r.component_metrics):
            if cm is not None:
                comp_counts[m][cm["outcome"]] += 1
    mees = [r.mee for r in records if r.ok and r.mee is not None]
    mee = [float(np.mean([x[m] for x in mees])) for m in range(q)] if mees else None
    return MetricsReport(method, list(records), _mean_se(r.metrics["se"] for r in good),
                         _mean_se(r.metrics["sp"] for r in good),
                         _mean_se(r.metrics["ac"] for r in good), counts, comp_counts, mee,
                         sum(not r.ok for r in records))


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaemvsSettings:
    hyper: HyperParams
    schedule: SaemSchedule
    grid: Grid
    theta0: PopulationParams
    mle_schedule: Optional[SaemSchedule] = None
    T: int = 10_000


def logistic_settings(p: int, n_grid: int = 20) -> SaemvsSettings:
    """Reference settings for the logistic design.

    The Gamma floor (x0.98 per burn-in iteration) keeps the annealing
    temperature high long enough for the fixed effects to reach their mode.
    """
    hyper = HyperParams(nu1=12000.0, sigma2_mu=3000.0 ** 2, nu_sigma=1.0, lambda_sigma=1.0,
                        nu_Gamma=1.0, lambda_Gamma=1.0, a=1.0, b=float(p), rho2=1200.0,
                        Omega0=20.0)
    schedule = SaemSchedule(K=500, n_burnin=350, gamma_exp=2.0 / 3.0, h=3,
                            anneal_decay=0.98, anneal_iters=350)
    beta0 = np.ones((p, 1))
    beta0[:10] = 100.0
    theta0 = PopulationParams.initial(1, p, mu=1400.0, Gamma=5000.0, sigma2=100.0, beta=beta0,
                                      alpha=0.5, eta=(400.0, 400.0))
    return SaemvsSettings(hyper, schedule, Grid.from_log10(-2.0, 2.0, n_grid), theta0)


def pk_settings(p: int, n_grid: int = 10) -> SaemvsSettings:
    """Reference settings for the pharmacokinetic design."""
    hyper = HyperParams(nu1=1000.0, sigma2_mu=25.0, nu_sigma=1.0, lambda_sigma=1.0,
                        Sigma_Gamma=0.2 * np.eye(2), d=4.0, a=1.0, b=float(p))
    # Without the Gamma floor the prior pins phi near V beta before it reaches
    # the data and sigma2 settles two orders of magnitude too high.  With
    # partial observations the MAP also needs Gamma to stay moderate for a
    # long stretch, hence the longer, slower burn-in.  The refits start close
    # to their optimum and keep the shorter schedule.
    schedule = SaemSchedule(K=600, n_burnin=450, gamma_exp=2.0 / 3.0, h=3,
                            anneal_decay=0.99, anneal_iters=450)
    mle_schedule = SaemSchedule(K=300, n_burnin=150, gamma_exp=2.0 / 3.0, h=3,
                                anneal_decay=0.98, anneal_iters=150)
    beta0 = np.full((p, 2), 0.1)
    beta0[:10] = 1.0
    theta0 = PopulationParams.initial(2, p, mu=(10.0, 10.0), Gamma=[[0.5, 0.1], [0.1, 0.5]],
                                      sigma2=1e-2, beta=beta0, alpha=0.5)
    return SaemvsSettings(hyper, schedule, Grid.from_log10(-3.0, -3.0 + (n_grid - 1) / 3.0, n_grid),
                          theta0, mle_schedule)


def default_settings(spec: ScenarioSpec) -> SaemvsSettings:
    if spec.model_name == "logistic_growth":
        return logistic_settings(spec.p)
    if spec.model_name == "one_compartment_pk":
        return pk_settings(spec.p)
    raise ConfigError(f"no default SAEMVS settings for model {spec.model_name!r}")


def run_replicate(index: int, spec: ScenarioSpec, method: str,
                  settings: Optional[SaemvsSettings] = None, folds: int = 10) -> ReplicateRecord:
    seed = replicate_seed(spec, index)
    record = ReplicateRecord(index, seed, method)
    try:
        obs, design, truth = gen_dataset(spec, index)
        model = spec.model
        if method == "saemvs":
            settings = default_settings(spec) if settings is None else settings
            res = run_saemvs(obs, design, model, settings.hyper, settings.grid, settings.schedule,
                             settings.theta0, seed, mle_schedule=settings.mle_schedule,
                             T=settings.T)
            selected = res.final_support
            record.nu0_hat = res.nu0_hat
        elif method in ("two_step_gaussian", "two_step_mgaussian"):
            variant = method.rsplit("_", 1)[1]
            ts = two_step_select(obs, design, model, variant, phi_init=spec.true_mu,
                                 psi=spec.true_psi or None, folds=folds, seed=seed)
            selected = ts.support
            record.n_converged = ts.n_converged
            err = np.abs(ts.phi_hat - truth.phi)[ts.converged]
            record.mee = [float(v) for v in err.mean(axis=0)]
        else:
            raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
        record.support = selected.label(design.names, model.phi_names)
        record.metrics = evaluate(selected, truth.support, spec.p, spec.q,
                                  np.flatnonzero(model.selection_mask))
        for m in range(spec.q):
            try:
                record.component_metrics.append(evaluate(selected, truth.support, spec.p, spec.q, [m]))
            except EmptyTruth:
                record.component_metrics.append(None)
    except SaemvsError as exc:
        record.error = f"{type(exc).__name__}: {exc}"
    return record


def run_campaign(spec: ScenarioSpec, method: str, settings: Optional[SaemvsSettings] = None,
                 workers: Optional[int] = 1, folds: int = 10) -> MetricsReport:
    """Run ``spec.replicates`` replicates of ``method`` and aggregate the metrics.

    Replicate ``r`` uses the seed ``spec.base_seed + r`` both for the data and
    for the method.  Standard errors are ``sd / sqrt(R)``.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    fn = partial(run_replicate, spec=spec, method=method, settings=settings, folds=folds)
    records = ordered_map(fn, range(spec.replicates), workers)
    return aggregate(method, records, spec.q)
