"""Data model: observations, design matrices, nonlinear mean functions, parameters.

The individual-level model is

    y_ij = g(phi_i, psi, t_ij) + eps_ij,        eps_ij ~ N(0, sigma2)
    phi_i = mu + lambda^T v_i + beta^T V_i + xi_i,  xi_i ~ N_q(0, Gamma)

where ``v_i`` are adjustment covariates that are always included and ``V_i``
the covariates subject to selection.  Internally the intercept, the forced
block and the selectable block are stacked in a single coefficient matrix
``beta_tilde`` of shape ``(1 + p_f + p, q)`` acting on the augmented design
``[1 | forced | V_std]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ConstantColumn, NonFiniteOutput, ShapeMismatch

CONSTANT_VARIANCE_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationSet:
    """Ragged longitudinal observations stored in flat arrays.

    ``ind[k]`` is the (0-based) individual of observation ``k``; observations
    of one individual are contiguous and ordered as given.
    """

    y: np.ndarray
    t: np.ndarray
    ind: np.ndarray
    n: int
    ids: Tuple = ()

    def __post_init__(self):
        y = _frozen(self.y)
        t = _frozen(self.t)
        ind = _frozen(self.ind, dtype=np.int64)
        if not (y.ndim == t.ndim == ind.ndim == 1 and len(y) == len(t) == len(ind)):
            raise ShapeMismatch("y, t and ind must be 1-d arrays of equal length")
        if self.n < 2:
            raise ShapeMismatch("at least two individuals are required")
        if np.any(np.diff(ind) < 0) or (len(ind) and (ind[0] < 0 or ind[-1] >= self.n)):
            raise ShapeMismatch("observations must be grouped by individual in increasing order")
        counts = np.bincount(ind, minlength=self.n)
        if np.any(counts < 1):
            raise ShapeMismatch("every individual needs at least one observation")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(t))):
            raise ShapeMismatch("observations must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "ind", ind)
        ids = tuple(self.ids) if len(self.ids) else tuple(range(self.n))
        if len(ids) != self.n:
            raise ShapeMismatch("ids must have one entry per individual")
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_lists(cls, ys: Sequence, ts: Sequence, ids: Sequence = ()) -> "ObservationSet":
        if len(ys) != len(ts):
            raise ShapeMismatch("ys and ts must have the same number of individuals")
        for i, (yi, ti) in enumerate(zip(ys, ts)):
            if len(yi) != len(ti):
                raise ShapeMismatch(f"individual {i}: len(y) != len(t)")
        ind = np.concatenate([np.full(len(yi), i) for i, yi in enumerate(ys)])
        return cls(np.concatenate([np.asarray(v, float) for v in ys]),
                   np.concatenate([np.asarray(v, float) for v in ts]), ind, len(ys), tuple(ids))

    @property
    def n_i(self) -> np.ndarray:
        return np.bincount(self.ind, minlength=self.n)

    @property
    def n_tot(self) -> int:
        return int(len(self.y))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_i)])

    def individual(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        o = self.offsets
        return self.y[o[i]:o[i + 1]], self.t[o[i]:o[i + 1]]

    def truncate(self, n_first: int, keep: int) -> "ObservationSet":
        """Keep only the first ``keep`` observations of the first ``n_first`` individuals."""
        o = self.offsets
        mask = np.ones(self.n_tot, dtype=bool)
        for i in range(min(n_first, self.n)):
            mask[o[i] + keep:o[i + 1]] = False
        return ObservationSet(self.y[mask], self.t[mask], self.ind[mask], self.n, self.ids)


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------


def standardize(V) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale each column to mean 0 and sample standard deviation 1.

    Returns ``(V_std, means, sds)``.  Raises :class:`ConstantColumn` for the
    first column whose variance is below ``1e-12``.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise ShapeMismatch("V must be a 2-d array")
    if V.shape[0] < 2:
        raise ShapeMismatch("standardization needs at least two rows")
    means = V.mean(axis=0)
    var = V.var(axis=0, ddof=1)
    bad = np.flatnonzero(~(var >= CONSTANT_VARIANCE_TOL))
    if bad.size:
        raise ConstantColumn(int(bad[0]))
    sds = np.sqrt(var)
    return (V - means) / sds, means, sds


def build_augmented(V_std, forced=None) -> np.ndarray:
    """Return ``[1 | forced | V_std]``."""
    V_std = np.asarray(V_std, dtype=float)
    n = V_std.shape[0]
    if forced is None:
        forced = np.zeros((n, 0))
    forced = np.asarray(forced, dtype=float)
    if forced.ndim == 1:
        forced = forced[:, None]
    if forced.shape[0] != n:
        raise ShapeMismatch(f"forced covariates have {forced.shape[0]} rows, expected {n}")
    return np.hstack([np.ones((n, 1)), forced, V_std])


@dataclass(frozen=True)
class DesignMatrices:
    V: np.ndarray
    forced: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    V_std: np.ndarray
    augmented: np.ndarray
    names: Tuple[str, ...] = ()
    forced_names: Tuple[str, ...] = ()

    @classmethod
    def from_raw(cls, V, forced=None, names: Sequence[str] = (), forced_names: Sequence[str] = ()):
        V = np.asarray(V, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
        V_std, means, sds = standardize(V)
        aug = build_augmented(V_std, forced)
        p_f = aug.shape[1] - 1 - V.shape[1]
        forced_arr = aug[:, 1:1 + p_f].copy()
        names = tuple(names) or tuple(f"V{j + 1}" for j in range(V.shape[1]))
        forced_names = tuple(forced_names) or tuple(f"F{j + 1}" for j in range(p_f))
        if len(names) != V.shape[1] or len(forced_names) != p_f:
            raise ShapeMismatch("covariate names do not match matrix widths")
        return cls(_frozen(V), _frozen(forced_arr), _frozen(means), _frozen(sds),
                   _frozen(V_std), _frozen(aug), names, forced_names)

    @property
    def n(self) -> int:
        return self.augmented.shape[0]

    @property
    def p(self) -> int:
        return self.V_std.shape[1]

    @property
    def p_f(self) -> int:
        return self.forced.shape[1]

    @property
    def width(self) -> int:
        return self.augmented.shape[1]

    def subset_rows(self, rows) -> "DesignMatrices":
        """Restrict to some individuals, keeping the original standardization."""
        rows = np.asarray(rows)
        return DesignMatrices(_frozen(self.V[rows]), _frozen(self.forced[rows]), self.means, self.sds,
                              _frozen(self.V_std[rows]), _frozen(self.augmented[rows]),
                              self.names, self.forced_names)

    def permute_columns(self, perm) -> "DesignMatrices":
        perm = np.asarray(perm)
        return DesignMatrices.from_raw(self.V[:, perm], self.forced,
                                       tuple(self.names[j] for j in perm), self.forced_names)


def beta_to_raw_scale(beta_std, mu_std, means, sds):
    """Back-transform coefficients estimated on standardized covariates.

    Returns ``(beta_raw, mu_raw)`` such that
    ``mu_std + V_std @ beta_std == mu_raw + V @ beta_raw``.
    """
    beta_std = np.asarray(beta_std, float)
    beta_raw = beta_std / np.asarray(sds)[:, None]
    mu_raw = np.asarray(mu_std, float) - np.asarray(means) @ beta_raw
    return beta_raw, mu_raw


# ---------------------------------------------------------------------------
# Nonlinear mean functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NonlinearModel:
    """A structural model ``g(phi, psi, t)``.

    ``func`` is vectorized: it receives ``phi`` of shape ``(N, q)``, ``psi`` of
    shape ``(s,)`` and ``t`` of shape ``(N,)`` and returns shape ``(N,)``.
    """

    name: str
    q: int
    s: int
    func: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    selection_mask: Tuple[bool, ...] = ()
    phi_names: Tuple[str, ...] = ()
    psi_names: Tuple[str, ...] = ()
    constants: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.q < 1 or self.s < 0:
            raise ConfigError("model needs q >= 1 and s >= 0")
        mask = tuple(bool(b) for b in self.selection_mask) or (True,) * self.q
        if len(mask) != self.q:
            raise ConfigError("selection_mask must have q entries")
        object.__setattr__(self, "selection_mask", mask)
        if not self.phi_names:
            object.__setattr__(self, "phi_names", tuple(f"phi{m + 1}" for m in range(self.q)))
        if not self.psi_names:
            object.__setattr__(self, "psi_names", tuple(f"psi{r + 1}" for r in range(self.s)))

    def eval(self, phi, psi, t) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        t = np.asarray(t, dtype=float)
        if phi.ndim == 1:
            phi = np.broadcast_to(phi, (t.shape[0], self.q))
        psi = np.asarray(psi if psi is not None else (), dtype=float).reshape(self.s)
        with np.errstate(all="ignore"):
            return self.func(phi, psi, t)

    def with_mask(self, mask: Sequence[bool]) -> "NonlinearModel":
        return replace(self, selection_mask=tuple(mask))


def predict(model: NonlinearModel, phi_i, psi, t_i) -> np.ndarray:
    """Evaluate ``g(phi_i, psi, t_ij)`` over the times of one individual."""
    t_i = np.atleast_1d(np.asarray(t_i, dtype=float))
    phi_i = np.asarray(phi_i, dtype=float).reshape(1, model.q)
    out = model.eval(np.repeat(phi_i, len(t_i), axis=0), psi, t_i)
    if not np.all(np.isfinite(out)):
        raise NonFiniteOutput(f"{model.name} returned non-finite values for phi={phi_i.ravel()}")
    return out


def _logistic(phi, psi, t):
    return psi[0] * expit((t - phi[:, 0]) / psi[1])


# Parameterized mean functions are small callables rather than closures so
# that models pickle into worker processes.


@dataclass(frozen=True)
class _LogisticRandomScale:
    asymptote: float

    def __call__(self, phi, psi, t):
        return self.asymptote * expit((t - phi[:, 0]) / phi[:, 1])


@dataclass(frozen=True)
class _OneCompartment:
    dose: float
    volume: float

    # First-order absorption (rate phi1), elimination rate phi2 / volume.  The
    # difference quotient (e^{-ke t} - e^{-ka t}) / (ka - ke) is symmetric in
    # (ka, ke); evaluating it from the smaller rate with expm1 is stable and
    # reduces to t * e^{-k t} when ka == ke.
    def __call__(self, phi, psi, t):
        ka = phi[:, 0]
        ke = phi[:, 1] / self.volume
        lo = np.minimum(ka, ke)
        gap = np.abs(ka - ke)
        gt = gap * t
        safe_gap = np.where(gap > 0, gap, 1.0)
        quotient = np.where(gt > 1e-300, -np.expm1(-gt) / safe_gap, t)
        return self.dose * ka / self.volume * np.exp(-lo * t) * quotient


def _linear_growth(phi, psi, t):
    return phi[:, 0] * t


def logistic_growth() -> NonlinearModel:
    """``psi1 / (1 + exp(-(t - phi) / psi2))`` with shared fixed effects ``psi``."""
    return NonlinearModel("logistic_growth", q=1, s=2, func=_logistic,
                          phi_names=("phi",), psi_names=("psi1", "psi2"))


def logistic_growth_fixed_asymptote(asymptote: float = 100.0) -> NonlinearModel:
    """Logistic curve with a known asymptote, individual midpoint and scale.

    Only the midpoint is subject to covariate selection.
    """
    return NonlinearModel("logistic_growth_fixed_asymptote", q=2, s=0,
                          func=_LogisticRandomScale(float(asymptote)),
                          selection_mask=(True, False), phi_names=("phi", "psi"),
                          constants={"asymptote": float(asymptote)})


def one_compartment_pk(D: float = 100.0, V: float = 30.0) -> NonlinearModel:
    """One-compartment model with first-order absorption after a single dose.

    ``y = D ka / (V (ka - ke)) (exp(-ke t) - exp(-ka t))`` with ``ka = phi1``
    and ``ke = phi2 / V`` (``phi2`` is a clearance).
    """
    return NonlinearModel("one_compartment_pk", q=2, s=0, func=_OneCompartment(float(D), float(V)),
                          phi_names=("phi1", "phi2"), constants={"D": float(D), "V": float(V)})


def linear_growth() -> NonlinearModel:
    """``phi * t``: a linear mixed model, used as an analytic reference."""
    return NonlinearModel("linear_growth", q=1, s=0, func=_linear_growth, phi_names=("phi",))


MODELS: Dict[str, Callable[..., NonlinearModel]] = {
    "logistic_growth": logistic_growth,
    "logistic_growth_fixed_asymptote": logistic_growth_fixed_asymptote,
    "one_compartment_pk": one_compartment_pk,
    "linear_growth": linear_growth,
}


def get_model(name: str, **constants) -> NonlinearModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; available: {sorted(MODELS)}") from None
    try:
        return factory(**constants)
    except TypeError as exc:
        raise ConfigError(f"bad constants for model {name!r}: {exc}") from None


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PopulationParams:
    mu: np.ndarray
    lam: np.ndarray
    beta: np.ndarray
    Gamma: np.ndarray
    sigma2: float
    alpha: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        mu = _frozen(np.atleast_1d(self.mu))
        q = mu.shape[0]
        beta = _frozen(np.asarray(self.beta, float).reshape(-1, q))
        lam = _frozen(np.asarray(self.lam, float).reshape(-1, q))
        G = _frozen(np.atleast_2d(self.Gamma))
        if G.shape != (q, q):
            raise ShapeMismatch(f"Gamma must be {q}x{q}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "Gamma", G)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "alpha", _frozen(np.broadcast_to(self.alpha, (q,))))
        object.__setattr__(self, "eta", _frozen(np.atleast_1d(np.asarray(self.eta, float))))

    @property
    def q(self) -> int:
        return self.mu.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def p_f(self) -> int:
        return self.lam.shape[0]

    @property
    def beta_tilde(self) -> np.ndarray:
        return np.vstack([self.mu[None, :], self.lam, self.beta])

    def with_beta_tilde(self, bt, **changes) -> "PopulationParams":
        bt = np.asarray(bt, float)
        p_f = self.p_f
        return replace(self, mu=bt[0], lam=bt[1:1 + p_f], beta=bt[1 + p_f:], **changes)

    def validate(self):
        if not np.all(np.isfinite(self.Gamma)) or not np.allclose(self.Gamma, self.Gamma.T):
            raise ConfigError("Gamma must be finite and symmetric")
        if np.linalg.eigvalsh(self.Gamma).min() <= 0:
            raise ConfigError("Gamma must be positive definite")
        if not self.sigma2 > 0:
            raise ConfigError("sigma2 must be positive")
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise ConfigError("alpha must lie in [0, 1]")
        return self

    def flat(self) -> Dict[str, float]:
        """Flatten to ``name -> value`` (upper triangle of Gamma only)."""
        out = {}
        q = self.q
        for m in range(q):
            out[f"mu_{m + 1}"] = self.mu[m]
        for l in range(self.p_f):
            for m in range(q):
                out[f"lambda_{l + 1}_{m + 1}"] = self.lam[l, m]
        for l in range(self.p):
            for m in range(q):
                out[f"beta_{l + 1}_{m + 1}"] = self.beta[l, m]
        for a in range(q):
            for b in range(a, q):
                out[f"Gamma_{a + 1}_{b + 1}"] = self.Gamma[a, b]
        out["sigma2"] = self.sigma2
        for m in range(q):
            out[f"alpha_{m + 1}"] = self.alpha[m]
        for r in range(self.eta.shape[0]):
            out[f"eta_{r + 1}"] = self.eta[r]
        return {k: float(v) for k, v in out.items()}

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "lambda": self.lam.tolist(), "beta": self.beta.tolist(),
                "Gamma": self.Gamma.tolist(), "sigma2": self.sigma2, "alpha": self.alpha.tolist(),
                "eta": self.eta.tolist()}

    @classmethod
    def initial(cls, q: int, p: int, p_f: int = 0, *, mu, Gamma, sigma2, beta=0.0, lam=0.0,
                alpha=0.5, eta=()) -> "PopulationParams":
        """Convenience constructor broadcasting scalars to the right shapes."""
        mu = np.broadcast_to(np.asarray(mu, float), (q,)).copy()
        beta = np.broadcast_to(np.asarray(beta, float), (p, q)) if np.ndim(beta) < 2 \
            else np.asarray(beta, float)
        lam = np.broadcast_to(np.asarray(lam, float), (p_f, q))
        G = np.asarray(Gamma, float)
        if G.ndim == 0:
            G = G * np.eye(q)
        elif G.ndim == 1:
            G = np.diag(G)
        return cls(mu, lam.copy(), np.array(beta), G, sigma2, alpha, eta)


@dataclass(frozen=True)
class HyperParams:
    """Prior hyperparameters.

    ``None`` entries are filled in by :meth:`resolved` from the problem
    dimensions: ``a = 1``, ``b = p``, ``Sigma_Gamma = I_q``, ``d = q + 2``.
    When ``nu_Gamma``/``lambda_Gamma`` are set (q = 1 only) the inverse-gamma
    prior ``IG(nu_Gamma/2, nu_Gamma*lambda_Gamma/2)`` on Gamma is used, which
    is the inverse-Wishart prior with ``Sigma_Gamma = nu_Gamma*lambda_Gamma``
    and ``d = nu_Gamma``.
    """

    nu0: float = 0.04
    nu1: float = 12000.0
    sigma2_mu: float = 3000.0 ** 2
    sigma2_lambda: float = 100.0
    nu_sigma: float = 1.0
    lambda_sigma: float = 1.0
    Sigma_Gamma: Optional[np.ndarray] = None
    d: Optional[float] = None
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    rho2: Optional[np.ndarray] = None
    Omega0: Optional[np.ndarray] = None
    kappa: int = 40
    tau: float = 0.9
    nu_Gamma: Optional[float] = None
    lambda_Gamma: Optional[float] = None
    sigma2_prior: str = "inverse_gamma"
    sigma2_max: float = 200.0

    def __post_init__(self):
        if not 0 < self.nu0 < self.nu1:
            raise ConfigError(f"need 0 < nu0 < nu1, got nu0={self.nu0}, nu1={self.nu1}")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.kappa < 1:
            raise ConfigError("kappa must be a positive integer")
        if self.sigma2_prior not in ("inverse_gamma", "uniform"):
            raise ConfigError("sigma2_prior must be 'inverse_gamma' or 'uniform'")
        for name in ("sigma2_mu", "sigma2_lambda", "nu_sigma", "lambda_sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def with_nu0(self, nu0: float) -> "HyperParams":
        return replace(self, nu0=float(nu0))

    def resolved(self, q: int, s: int, p: int) -> "HyperParams":
        if self.nu_Gamma is not None or self.lambda_Gamma is not None:
            if q != 1 or self.nu_Gamma is None or self.lambda_Gamma is None:
                raise ConfigError("nu_Gamma/lambda_Gamma need both values and q = 1")
            Sigma_Gamma = np.array([[self.nu_Gamma * self.lambda_Gamma]])
            d = float(self.nu_Gamma)
        else:
            Sigma_Gamma = np.eye(q) if self.Sigma_Gamma is None else np.asarray(self.Sigma_Gamma, float)
            if Sigma_Gamma.ndim == 0:
                Sigma_Gamma = Sigma_Gamma * np.eye(q)
            d = float(q + 2) if self.d is None else float(self.d)
        if Sigma_Gamma.shape != (q, q) or np.linalg.eigvalsh(Sigma_Gamma).min() <= 0:
            raise ConfigError("Sigma_Gamma must be a q x q SPD matrix")
        if not d > 0:
            raise ConfigError("d must be positive")
        a = np.broadcast_to(np.asarray(1.0 if self.a is None else self.a, float), (q,)).copy()
        b = np.broadcast_to(np.asarray(float(p) if self.b is None else self.b, float), (q,)).copy()
        if np.any(a <= 0) or np.any(b <= 0):
            raise ConfigError("a and b must be positive")
        rho2 = np.broadcast_to(np.asarray(1e6 if self.rho2 is None else self.rho2, float), (s,)).copy()
        Omega0 = np.asarray(1.0 if self.Omega0 is None else self.Omega0, float)
        if Omega0.ndim == 2:
            Omega0 = np.diag(Omega0)
        Omega0 = np.broadcast_to(Omega0, (s,)).copy()
        if np.any(rho2 <= 0) or np.any(Omega0 <= 0):
            raise ConfigError("rho2 and Omega0 must be positive")
        return replace(self, Sigma_Gamma=Sigma_Gamma, d=d, a=a, b=b, rho2=rho2, Omega0=Omega0,
                       nu_Gamma=None, lambda_Gamma=None)

    def omega2_at(self, k: int) -> np.ndarray:
        """Diagonal of the psi prior covariance at iteration ``k`` (0-based)."""
        return np.asarray(self.Omega0, float) * self.tau ** (k // self.kappa)

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        return out
