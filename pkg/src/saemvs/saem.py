"""MCMC-SAEM for the spike-and-slab nonlinear mixed-effects model.

One iteration ``k`` consists of

1. S-step: ``h`` sweeps of random-walk Metropolis-within-Gibbs targeting
   ``pi(phi, psi | y, Theta_k)``;
2. SA-step: ``S_{k+1} = S_k + gamma_k (S(y, phi_k, psi_k) - S_k)``;
3. M-step: closed-form maximization of ``-Psi(theta, Theta_k) + <S_{k+1}, phi(theta)>``
   for ``theta`` and of ``Q2`` for ``alpha``.

The inclusion indicators are never sampled: their conditional expectations
enter the M-step through :func:`p_star` and :func:`d_star`.

The same recursion with flat priors (``mode="mle"``) gives the maximum
likelihood estimate in a fixed sub-model, which the selection step needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import ConfigError, Diverged, SingularSystem
from .model import DesignMatrices, HyperParams, NonlinearModel, ObservationSet, PopulationParams

LOG_2PI = np.log(2.0 * np.pi)
TARGET_ACCEPTANCE = (0.25, 0.45)


# ---------------------------------------------------------------------------
# Schedule and state containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaemSchedule:
    """Iteration budget and step sizes.

    ``anneal_decay`` enables the optional variance-floor annealing: during the
    first ``anneal_iters`` iterations each diagonal entry of Gamma is kept above
    ``anneal_decay`` times its previous value.  It is off by default; the
    annealing then comes only from a large initial Gamma.

    ``laplace`` adds one independence proposal per sweep from a Gaussian
    approximation of each individual's conditional posterior (see
    :func:`laplace_approximation`).
    """

    K: int = 500
    n_burnin: int = 350
    gamma_exp: float = 2.0 / 3.0
    h: int = 3
    adapt_every: int = 5
    laplace: bool = False
    anneal_decay: Optional[float] = None
    anneal_iters: int = 0

    def __post_init__(self):
        if self.K < 1 or not 0 <= self.n_burnin < self.K:
            raise ConfigError(f"need 0 <= n_burnin < K, got K={self.K}, n_burnin={self.n_burnin}")
        if not 0.5 < self.gamma_exp <= 1.0:
            raise ConfigError("gamma_exp must lie in (0.5, 1]")
        if self.h < 1 or self.adapt_every < 1:
            raise ConfigError("h and adapt_every must be positive")
        if self.anneal_decay is not None and not 0 < self.anneal_decay < 1:
            raise ConfigError("anneal_decay must lie in (0, 1)")

    def step_sizes(self) -> np.ndarray:
        return step_sizes(self.K, self.n_burnin, self.gamma_exp)


def step_sizes(K: int, n_burnin: int, gamma_exp: float) -> np.ndarray:
    """``gamma_k = 1`` for ``k < n_burnin``, ``(k - n_burnin + 1)^-gamma_exp`` after."""
    k = np.arange(K)
    out = np.ones(K)
    post = k >= n_burnin
    out[post] = (k[post] - n_burnin + 1.0) ** (-gamma_exp)
    return out


@dataclass
class LatentState:
    phi: np.ndarray
    psi: np.ndarray
    scale_phi: np.ndarray
    scale_psi: np.ndarray
    accepted_phi: np.ndarray = None
    tried_phi: np.ndarray = None
    accepted_psi: np.ndarray = None
    tried_psi: np.ndarray = None

    def __post_init__(self):
        if self.accepted_phi is None:
            self.accepted_phi = np.zeros_like(self.phi)
            self.tried_phi = np.zeros_like(self.phi)
            self.accepted_psi = np.zeros_like(self.psi)
            self.tried_psi = np.zeros_like(self.psi)

    @classmethod
    def initial(cls, phi, psi, psi_scale=None) -> "LatentState":
        phi = np.array(phi, float)
        psi = np.array(psi, float).ravel()
        scale_psi = np.ones_like(psi) if psi_scale is None else np.array(psi_scale, float).ravel()
        return cls(phi, psi, np.ones_like(phi), scale_psi)

    def copy(self) -> "LatentState":
        return LatentState(self.phi.copy(), self.psi.copy(), self.scale_phi.copy(),
                           self.scale_psi.copy(), self.accepted_phi.copy(), self.tried_phi.copy(),
                           self.accepted_psi.copy(), self.tried_psi.copy())

    def reset_counters(self):
        for arr in (self.accepted_phi, self.tried_phi, self.accepted_psi, self.tried_psi):
            arr[...] = 0.0


@dataclass(frozen=True)
class SuffStats:
    s1: float
    s2: np.ndarray
    s3: np.ndarray
    s4: np.ndarray
    s5: np.ndarray

    @classmethod
    def zeros(cls, n: int, q: int, s: int) -> "SuffStats":
        return cls(0.0, np.zeros((q, q)), np.zeros((n, q)), np.zeros(s), np.zeros(s))


@dataclass
class MapResult:
    theta_hat: PopulationParams
    traces: np.ndarray
    trace_names: List[str]
    final_pstar: np.ndarray
    acceptance_phi: np.ndarray
    acceptance_psi: np.ndarray
    state: LatentState = field(repr=False, default=None)
    stats: SuffStats = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Spike-and-slab expectations
# ---------------------------------------------------------------------------


def _log_normal0(x, var):
    return -0.5 * (LOG_2PI + np.log(var) + x * x / var)


def p_star(beta, alpha, nu0: float, nu1: float) -> np.ndarray:
    """Conditional inclusion probabilities ``E[delta_lm | Theta]``.

    ``alpha_m phi_nu1(b) / (alpha_m phi_nu1(b) + (1 - alpha_m) phi_nu0(b))``
    evaluated on the log-odds scale.
    """
    if not 0 < nu0 < nu1:
        raise ConfigError("need 0 < nu0 < nu1")
    beta = np.asarray(beta, float)
    alpha = np.broadcast_to(np.asarray(alpha, float), beta.shape[-1:] if beta.ndim else ())
    with np.errstate(divide="ignore"):
        prior_logit = np.log(alpha) - np.log1p(-alpha)
    return expit(prior_logit + _log_normal0(beta, nu1) - _log_normal0(beta, nu0))


def d_star(pstar, nu0: float, nu1: float, sigma2_mu: float, sigma2_lambda: float = 1.0,
           p_f: int = 0) -> np.ndarray:
    """Expected prior precisions of the stacked coefficients ``[mu; lambda; beta]``."""
    pstar = np.asarray(pstar, float)
    q = pstar.shape[1]
    rows = [np.full((1, q), 1.0 / sigma2_mu), np.full((p_f, q), 1.0 / sigma2_lambda),
            (1.0 - pstar) / nu0 + pstar / nu1]
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# Sufficient statistics and the Q1 identity
# ---------------------------------------------------------------------------


def residual_ss(obs: ObservationSet, model: NonlinearModel, phi, psi) -> np.ndarray:
    """Per-individual residual sum of squares (``inf`` where g is not finite)."""
    pred = model.eval(np.asarray(phi)[obs.ind], psi, obs.t)
    with np.errstate(over="ignore", invalid="ignore"):
        r2 = (obs.y - pred) ** 2
    r2 = np.where(np.isfinite(r2), r2, np.inf)
    return np.bincount(obs.ind, weights=r2, minlength=obs.n)


def suff_stats(obs: ObservationSet, model: NonlinearModel, phi, psi) -> SuffStats:
    phi = np.asarray(phi, float)
    psi = np.asarray(psi, float).ravel()
    return SuffStats(float(residual_ss(obs, model, phi, psi).sum()), phi.T @ phi, phi.copy(),
                     psi * psi, psi.copy())


def sa_step(S: SuffStats, S_new: SuffStats, gamma_k: float) -> SuffStats:
    if not 0.0 <= gamma_k <= 1.0:
        raise ConfigError("step size must lie in [0, 1]")
    mix = lambda a, b: a + gamma_k * (b - a)  # noqa: E731
    return SuffStats(mix(S.s1, S_new.s1), mix(S.s2, S_new.s2), mix(S.s3, S_new.s3),
                     mix(S.s4, S_new.s4), mix(S.s5, S_new.s5))


def _gamma_prior_terms(hyper: HyperParams, mode: str, q: int) -> Tuple[np.ndarray, float]:
    """``(Sigma_Gamma, d)``; the flat prior of the MLE is ``Sigma = 0, d = -(q + 1)``."""
    if mode == "mle":
        return np.zeros((q, q)), -(q + 1.0)
    return np.asarray(hyper.Sigma_Gamma, float), float(hyper.d)


def _sigma2_prior_terms(hyper: HyperParams, mode: str) -> Tuple[float, float]:
    """``(shape_extra, scale)`` in ``-(n_tot + shape_extra)/2 log s2 - scale/(2 s2)``."""
    if mode == "mle" or hyper.sigma2_prior == "uniform":
        return 0.0, 0.0
    return hyper.nu_sigma + 2.0, hyper.nu_sigma * hyper.lambda_sigma


def q1_tilde(obs: ObservationSet, design: DesignMatrices, model: NonlinearModel, phi, psi,
             theta: PopulationParams, pstar, hyper: HyperParams, omega2=None,
             mode: str = "map") -> float:
    """Direct evaluation of the theta-dependent part of the complete-data log-posterior.

    ``pstar`` is the inclusion-probability matrix computed at the previous
    iterate; normalizing constants are dropped.
    """
    phi = np.asarray(phi, float)
    psi = np.asarray(psi, float).ravel()
    n, q = phi.shape
    bt = theta.beta_tilde
    resid = obs.y - model.eval(phi[obs.ind], psi, obs.t)
    sigma2 = theta.sigma2
    shape_extra, scale = _sigma2_prior_terms(hyper, mode)
    val = -0.5 * np.sum(resid ** 2) / sigma2 - 0.5 * (obs.n_tot + shape_extra) * np.log(sigma2)
    val -= 0.5 * scale / sigma2
    E = phi - design.augmented @ bt
    Ginv = np.linalg.inv(theta.Gamma)
    val -= 0.5 * np.trace(E.T @ E @ Ginv)
    Sigma_G, d = _gamma_prior_terms(hyper, mode, q)
    val -= 0.5 * (n + d + q + 1.0) * np.linalg.slogdet(theta.Gamma)[1]
    val -= 0.5 * np.trace(Sigma_G @ Ginv)
    if mode == "map":
        ds = d_star(pstar, hyper.nu0, hyper.nu1, hyper.sigma2_mu, hyper.sigma2_lambda, design.p_f)
        val -= 0.5 * np.sum(bt ** 2 * ds)
    if psi.size:
        w2 = np.asarray(omega2, float)
        val -= np.sum((psi - theta.eta) ** 2 / (2.0 * w2))
        if mode == "map":
            val -= np.sum(theta.eta ** 2 / (2.0 * np.asarray(hyper.rho2, float)))
    return float(val)


def expfam_objective(S: SuffStats, design: DesignMatrices, theta: PopulationParams, pstar,
                     hyper: HyperParams, n_tot: int, omega2=None, mode: str = "map") -> float:
    """``-Psi(theta, Theta_k) + <S, phi(theta)>`` for any statistic ``S``."""
    q = theta.q
    n = design.n
    bt = theta.beta_tilde
    B = design.augmented @ bt
    Ginv = np.linalg.inv(theta.Gamma)
    Sigma_G, d = _gamma_prior_terms(hyper, mode, q)
    shape_extra, scale = _sigma2_prior_terms(hyper, mode)
    psi_val = 0.5 * np.sum((B.T @ B) * Ginv)
    if mode == "map":
        ds = d_star(pstar, hyper.nu0, hyper.nu1, hyper.sigma2_mu, hyper.sigma2_lambda, design.p_f)
        psi_val += 0.5 * np.sum(bt ** 2 * ds)
    psi_val += 0.5 * (n_tot + shape_extra) * np.log(theta.sigma2)
    psi_val += 0.5 * (n + d + q + 1.0) * np.linalg.slogdet(theta.Gamma)[1]
    psi_val += 0.5 * scale / theta.sigma2 + 0.5 * np.sum(Sigma_G * Ginv)
    inner = -S.s1 / (2.0 * theta.sigma2) - 0.5 * np.sum(S.s2 * Ginv) + np.sum(S.s3 * (B @ Ginv))
    if S.s5.size:
        w2 = np.asarray(omega2, float)
        psi_val += np.sum(theta.eta ** 2 / (2.0 * w2))
        if mode == "map":
            psi_val += np.sum(theta.eta ** 2 / (2.0 * np.asarray(hyper.rho2, float)))
        inner += np.sum(-S.s4 / (2.0 * w2)) + np.sum(S.s5 * theta.eta / w2)
    return float(-psi_val + inner)


def q2_tilde(alpha, pstar, nu0: float, nu1: float, a, b) -> np.ndarray:
    """Per-component ``Q2(alpha_m)``; ``pstar`` has shape ``(p, q)``."""
    alpha = np.asarray(alpha, float)
    p = pstar.shape[0]
    sp = pstar.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (0.5 * np.log(nu0 / nu1) + np.log(alpha) - np.log1p(-alpha)) * sp \
            + (np.asarray(a) - 1.0) * np.log(alpha) + (p + np.asarray(b) - 1.0) * np.log1p(-alpha)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def coefficient_mask(design: DesignMatrices, model: NonlinearModel, support=None) -> np.ndarray:
    """Boolean ``(1 + p_f + p, q)`` mask of the free entries of ``beta_tilde``.

    The intercept is always free.  Forced covariates enter every component
    under selection.  Selectable covariates are free on components under
    selection (``support=None``) or on the listed ``(l, m)`` pairs only.
    """
    q = model.q
    sel = np.asarray(model.selection_mask, bool)
    mask = np.zeros((design.width, q), dtype=bool)
    mask[0] = True
    mask[1:1 + design.p_f] = sel
    if support is None:
        mask[1 + design.p_f:] = sel
    else:
        for l, m in support:
            if not (0 <= l < design.p and 0 <= m < q):
                raise ConfigError(f"support pair {(l, m)} out of range")
            mask[1 + design.p_f + l, m] = True
    return mask


def _cholesky_solve(A, rhs):
    try:
        return linalg.cho_solve(linalg.cho_factor(A, lower=True, check_finite=True), rhs)
    except (linalg.LinAlgError, ValueError):
        pass
    jitter = 1e-8 * max(np.trace(A) / A.shape[0], 1e-300)
    try:
        return linalg.cho_solve(
            linalg.cho_factor(A + jitter * np.eye(A.shape[0]), lower=True, check_finite=True), rhs)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(f"coefficient system not positive definite: {exc}") from None


def solve_beta_tilde(Vt, gram, Gamma, dmat, free, s3, method: str = "auto") -> np.ndarray:
    """Solve the coefficient update of the M-step.

    Minimizes ``1/2 tr((s3 - Vt B)^T (s3 - Vt B) Gamma^-1) + 1/2 sum(d * B^2)``
    over the free entries of ``B``.  Multiplying the normal equations
    ``(I_q (x) Vt'Vt + (Gamma (x) I) diag(vec d)) vec B = vec(Vt' s3)`` by
    ``Gamma^-1 (x) I`` gives the symmetric positive definite system
    ``(Gamma^-1 (x) Vt'Vt + diag(vec d)) vec B = vec(Vt' s3 Gamma^-1)``, which
    is assembled block by block (``method="primal"``) or, when the number of
    free coefficients exceeds ``q n``, solved through the Woodbury identity
    in an ``(q n) x (q n)`` space (``method="dual"``).
    """
    Vt = np.asarray(Vt, float)
    n, P = Vt.shape
    q = Gamma.shape[0]
    Ginv = linalg.cho_solve(linalg.cho_factor(Gamma, lower=True), np.eye(q))
    Ginv = 0.5 * (Ginv + Ginv.T)
    rhs = (Vt.T @ s3) @ Ginv
    idx = [np.flatnonzero(free[:, m]) for m in range(q)]
    n_free = sum(len(ix) for ix in idx)
    out = np.zeros((P, q))
    if n_free == 0:
        return out
    dfree = [dmat[ix, m] for m, ix in enumerate(idx)]
    if method == "auto":
        positive = all(np.all(dv > 0) for dv in dfree)
        method = "dual" if positive and q * n < n_free else "primal"
    if method == "primal":
        sizes = np.cumsum([0] + [len(ix) for ix in idx])
        A = np.empty((n_free, n_free))
        for m in range(q):
            sm = slice(sizes[m], sizes[m + 1])
            for k in range(m, q):
                sk = slice(sizes[k], sizes[k + 1])
                block = Ginv[m, k] * gram[np.ix_(idx[m], idx[k])]
                A[sm, sk] = block
                A[sk, sm] = block.T
            A[sm, sm] += np.diag(dfree[m])
        r = np.concatenate([rhs[ix, m] for m, ix in enumerate(idx)])
        x = _cholesky_solve(A, r)
        for m in range(q):
            out[idx[m], m] = x[sizes[m]:sizes[m + 1]]
        return out
    L = np.linalg.cholesky(Ginv)
    Vf = [Vt[:, ix] for ix in idx]
    dinv_r = [rhs[ix, m] / dfree[m] for m, ix in enumerate(idx)]
    H = [(Vf[k] / dfree[k]) @ Vf[k].T for k in range(q)]
    M = np.eye(q * n)
    u = np.zeros(q * n)
    for a in range(q):
        sa = slice(a * n, (a + 1) * n)
        for k in range(q):
            u[sa] += L[k, a] * (Vf[k] @ dinv_r[k])
        for b in range(a, q):
            sb = slice(b * n, (b + 1) * n)
            blk = sum(L[k, a] * L[k, b] * H[k] for k in range(q))
            M[sa, sb] += blk
            if b != a:
                M[sb, sa] += blk.T
    w = _cholesky_solve(M, u)
    for k in range(q):
        corr = sum(L[k, a] * (Vf[k].T @ w[a * n:(a + 1) * n]) for a in range(q))
        out[idx[k], k] = dinv_r[k] - corr / dfree[k]
    return out


def m_step(S: SuffStats, theta: PopulationParams, pstar, hyper: HyperParams,
           design: DesignMatrices, n_tot: int, free, omega2=None, mode: str = "map",
           gram=None, method: str = "auto") -> PopulationParams:
    """Closed-form parameter update given the approximated statistics ``S``.

    ``theta`` is the current iterate: its Gamma enters the coefficient update
    and ``pstar`` (computed from it) the prior precisions and alpha.
    """
    Vt = design.augmented
    n = design.n
    q = theta.q
    gram = Vt.T @ Vt if gram is None else gram
    if mode == "map":
        dmat = d_star(pstar, hyper.nu0, hyper.nu1, hyper.sigma2_mu, hyper.sigma2_lambda, design.p_f)
    else:
        dmat = np.zeros((design.width, q))
    bt = solve_beta_tilde(Vt, gram, theta.Gamma, dmat, free, S.s3, method=method)
    B = Vt @ bt
    cross = B.T @ S.s3
    R = S.s2 - cross - cross.T + B.T @ B
    Sigma_G, d = _gamma_prior_terms(hyper, mode, q)
    Gamma = (Sigma_G + R) / (n + d + q + 1.0)
    Gamma = 0.5 * (Gamma + Gamma.T)
    shape_extra, scale = _sigma2_prior_terms(hyper, mode)
    if mode == "map" and hyper.sigma2_prior == "uniform":
        sigma2 = min(S.s1 / n_tot, hyper.sigma2_max)
    else:
        sigma2 = (scale + S.s1) / (n_tot + shape_extra)
    alpha = np.array(theta.alpha, float)
    if mode == "map":
        p = pstar.shape[0]
        sel = np.flatnonzero(free[1 + design.p_f:].any(axis=0)) if p else np.array([], int)
        a = np.asarray(hyper.a, float)
        b = np.asarray(hyper.b, float)
        for m in sel:
            alpha[m] = (pstar[:, m].sum() + a[m] - 1.0) / (p + b[m] + a[m] - 2.0)
        alpha = np.clip(alpha, 0.0, 1.0)
    eta = np.asarray(S.s5, float).copy()
    if eta.size and mode == "map":
        eta = eta / (1.0 + np.asarray(omega2, float) / np.asarray(hyper.rho2, float))
    return theta.with_beta_tilde(bt, Gamma=Gamma, sigma2=float(sigma2), alpha=alpha, eta=eta)


# ---------------------------------------------------------------------------
# S-step
# ---------------------------------------------------------------------------


def phi_log_target(obs: ObservationSet, model: NonlinearModel, phi, psi, theta: PopulationParams,
                   means, Gamma_inv) -> np.ndarray:
    """Unnormalized ``log pi(phi_i | y_i, psi, Theta)`` for every individual."""
    ss = residual_ss(obs, model, phi, psi)
    E = np.asarray(phi) - means
    return -0.5 * ss / theta.sigma2 - 0.5 * np.einsum("ij,jk,ik->i", E, Gamma_inv, E)


def _jacobian(obs: ObservationSet, model: NonlinearModel, phi, psi, pred):
    """Forward-difference ``d g / d phi`` at every observation, shape ``(n_tot, q)``."""
    phi_obs = phi[obs.ind]
    J = np.empty((obs.n_tot, model.q))
    for m in range(model.q):
        step = 1e-6 * np.maximum(1.0, np.abs(phi[:, m]))
        shifted = phi_obs.copy()
        shifted[:, m] += step[obs.ind]
        with np.errstate(over="ignore", invalid="ignore"):
            J[:, m] = (model.eval(shifted, psi, obs.t) - pred) / step[obs.ind]
    return J


def _gn_system(obs, model, phi, psi, means, Ginv, sigma2):
    """Objective, Gauss-Newton Hessian and gradient of ``-log pi(phi_i | y_i)``."""
    q = model.q
    pred = model.eval(phi[obs.ind], psi, obs.t)
    J = _jacobian(obs, model, phi, psi, pred)
    with np.errstate(over="ignore", invalid="ignore"):
        r = obs.y - pred
    E = phi - means
    H = np.empty((obs.n, q, q))
    grad = E @ Ginv
    for a in range(q):
        grad[:, a] -= np.bincount(obs.ind, weights=J[:, a] * r, minlength=obs.n) / sigma2
        for b in range(a, q):
            v = np.bincount(obs.ind, weights=J[:, a] * J[:, b], minlength=obs.n) / sigma2
            H[:, a, b] = v + Ginv[a, b]
            H[:, b, a] = H[:, a, b]
    with np.errstate(over="ignore", invalid="ignore"):
        obj = 0.5 * residual_ss(obs, model, phi, psi) / sigma2 \
            + 0.5 * np.einsum("ij,jk,ik->i", E, Ginv, E)
    return obj, H, grad


def laplace_approximation(obs: ObservationSet, model: NonlinearModel, psi, means, Gamma,
                          sigma2: float, iters: int = 6) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian approximation ``N(mode_i, H_i^{-1})`` of every ``pi(phi_i | y_i, Theta)``.

    Damped Gauss-Newton iterations start from the prior mean, never from the
    current chain state, so the result is a valid independence proposal.
    Individuals whose iterations produce anything non-finite fall back to the
    prior ``N(means_i, Gamma)``.  Returns ``(mode, H)`` with ``H`` the
    ``(n, q, q)`` precision matrices.
    """
    Ginv = np.linalg.inv(Gamma)
    phi = np.array(means, float)
    obj, H, grad = _gn_system(obs, model, phi, psi, means, Ginv, sigma2)
    for _ in range(iters):
        ok = np.isfinite(obj) & np.all(np.isfinite(H), axis=(1, 2)) & np.all(np.isfinite(grad), axis=1)
        H_safe = np.where(ok[:, None, None], H, Ginv)
        # Levenberg damping keeps near rank-deficient systems solvable
        H_safe = H_safe + 1e-8 * np.trace(H_safe, axis1=1, axis2=2)[:, None, None] * np.eye(model.q)
        delta = -np.linalg.solve(H_safe, np.where(ok[:, None], grad, 0.0)[..., None])[..., 0]
        t = np.ones(obs.n)
        for _ in range(4):
            cand = phi + t[:, None] * delta
            with np.errstate(over="ignore", invalid="ignore"):
                E = cand - means
                cand_obj = 0.5 * residual_ss(obs, model, cand, psi) / sigma2 \
                    + 0.5 * np.einsum("ij,jk,ik->i", E, Ginv, E)
            better = cand_obj <= obj
            if better.all():
                break
            t = np.where(better, t, 0.5 * t)
        move = better & ok
        phi = np.where(move[:, None], cand, phi)
        obj, H, grad = _gn_system(obs, model, phi, psi, means, Ginv, sigma2)
    bad = ~(np.isfinite(obj) & np.all(np.isfinite(H), axis=(1, 2)) & np.all(np.isfinite(phi), axis=1))
    H[bad] = Ginv
    with np.errstate(invalid="ignore"):
        ev = np.linalg.eigvalsh(H)
    bad |= ~(ev[:, 0] > 1e-10 * ev[:, -1])
    phi[bad] = means[bad]
    H[bad] = Ginv
    return phi, H


def s_step(state: LatentState, obs: ObservationSet, design: DesignMatrices, model: NonlinearModel,
           theta: PopulationParams, h: int, rng: np.random.Generator, omega2=None,
           independent: bool = True, laplace: bool = False) -> LatentState:
    """``h`` sweeps of componentwise random-walk Metropolis-within-Gibbs.

    Individuals are conditionally independent given ``psi``, so each
    component update is performed for all of them at once.  When
    ``independent`` is set, every sweep starts with an independence proposal
    drawn from ``N(V beta, Gamma)``, which lets the chain jump across the wide
    early-iteration distribution.  The random-walk proposal for
    ``phi_im`` has standard deviation ``scale_phi[i, m] * sqrt(Gamma_mm)``; the
    shared ``psi`` block is updated componentwise against its prior
    ``N(eta, diag(omega2))``.  Non-finite targets are rejected.

    With ``laplace`` each sweep also proposes from the Gaussian approximation
    of :func:`laplace_approximation`, built once per call.  It keeps narrow,
    data-dominated conditionals mixing when the prior is much wider.
    """
    st = state.copy()
    q = model.q
    means = design.augmented @ theta.beta_tilde
    Ginv = np.linalg.inv(theta.Gamma)
    sd = np.sqrt(np.diag(theta.Gamma))
    sigma2 = theta.sigma2
    ss = residual_ss(obs, model, st.phi, st.psi)
    E = st.phi - means
    quad = np.einsum("ij,jk,ik->i", E, Ginv, E)
    w2 = None if omega2 is None else np.asarray(omega2, float)
    chol = np.linalg.cholesky(theta.Gamma)
    if laplace:
        mode, prec = laplace_approximation(obs, model, st.psi, means, theta.Gamma, sigma2)
        prec_chol = np.linalg.cholesky(prec)

        def log_q(x):
            # Gaussian log density up to the individual's constant
            z = np.einsum("iba,ib->ia", prec_chol, x - mode)
            return -0.5 * np.einsum("ia,ia->i", z, z)
    for _ in range(h):
        if laplace:
            z = rng.standard_normal((obs.n, q))
            prop = mode + np.linalg.solve(np.swapaxes(prec_chol, 1, 2), z[..., None])[..., 0]
            ss_p = residual_ss(obs, model, prop, st.psi)
            E_p = prop - means
            quad_p = np.einsum("ij,jk,ik->i", E_p, Ginv, E_p)
            with np.errstate(over="ignore", invalid="ignore"):
                log_r = -0.5 * (ss_p - ss) / sigma2 - 0.5 * (quad_p - quad) \
                    + log_q(st.phi) - log_q(prop)
            log_r = np.where(np.isnan(log_r), -np.inf, log_r)
            acc = np.log(rng.uniform(size=obs.n)) < log_r
            st.phi[acc] = prop[acc]
            ss = np.where(acc, ss_p, ss)
            quad = np.where(acc, quad_p, quad)
        if independent:
            # proposal from the conditional prior: the ratio reduces to the likelihood ratio
            prop = means + rng.standard_normal((obs.n, q)) @ chol.T
            ss_p = residual_ss(obs, model, prop, st.psi)
            with np.errstate(over="ignore", invalid="ignore"):
                log_r = -0.5 * (ss_p - ss) / sigma2
            log_r = np.where(np.isnan(log_r), -np.inf, log_r)
            acc = np.log(rng.uniform(size=obs.n)) < log_r
            st.phi[acc] = prop[acc]
            ss = np.where(acc, ss_p, ss)
            E = st.phi - means
            quad = np.einsum("ij,jk,ik->i", E, Ginv, E)
        for m in range(q):
            step = st.scale_phi[:, m] * sd[m] * rng.standard_normal(obs.n)
            prop = st.phi.copy()
            prop[:, m] += step
            ss_p = residual_ss(obs, model, prop, st.psi)
            E_p = prop - means
            quad_p = np.einsum("ij,jk,ik->i", E_p, Ginv, E_p)
            with np.errstate(over="ignore", invalid="ignore"):
                log_r = -0.5 * (ss_p - ss) / sigma2 - 0.5 * (quad_p - quad)
            log_r = np.where(np.isnan(log_r), -np.inf, log_r)
            acc = np.log(rng.uniform(size=obs.n)) < log_r
            st.phi[acc] = prop[acc]
            ss = np.where(acc, ss_p, ss)
            quad = np.where(acc, quad_p, quad)
            st.accepted_phi[:, m] += acc
            st.tried_phi[:, m] += 1
        for r in range(st.psi.shape[0]):
            prop = st.psi.copy()
            prop[r] += st.scale_psi[r] * rng.standard_normal()
            ss_p = residual_ss(obs, model, st.phi, prop)
            tot_p = ss_p.sum()
            with np.errstate(over="ignore", invalid="ignore"):
                log_r = -0.5 * (tot_p - ss.sum()) / sigma2 \
                    - 0.5 * ((prop[r] - theta.eta[r]) ** 2 - (st.psi[r] - theta.eta[r]) ** 2) / w2[r]
            if not np.isfinite(tot_p) or np.isnan(log_r):
                log_r = -np.inf
            accept = np.log(rng.uniform()) < log_r
            if accept:
                st.psi = prop
                ss = ss_p
            st.accepted_psi[r] += accept
            st.tried_psi[r] += 1
    return st


def _adapt_scales(state: LatentState):
    lo, hi = TARGET_ACCEPTANCE
    with np.errstate(invalid="ignore", divide="ignore"):
        rate_phi = state.accepted_phi / state.tried_phi
        rate_psi = state.accepted_psi / state.tried_psi
    for scale, rate in ((state.scale_phi, rate_phi), (state.scale_psi, rate_psi)):
        scale *= np.where(rate < lo, 0.7, np.where(rate > hi, 1.4, 1.0))
        np.clip(scale, 1e-8, 1e8, out=scale)
    state.reset_counters()


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def _check_finite(theta: PopulationParams, bound: float, k: int):
    vals = np.concatenate([theta.beta_tilde.ravel(), theta.Gamma.ravel(), [theta.sigma2],
                           theta.eta.ravel()])
    if not np.all(np.isfinite(vals)) or np.max(np.abs(vals)) > bound:
        raise Diverged(f"parameters left the bound {bound:g} at iteration {k}")
    if not theta.sigma2 > 0:
        raise Diverged(f"residual variance collapsed at iteration {k}")
    try:
        np.linalg.cholesky(theta.Gamma)
    except np.linalg.LinAlgError:
        raise Diverged(f"Gamma lost positive definiteness at iteration {k}") from None


def _anneal(Gamma_new, Gamma_old, decay):
    floor = decay * np.diag(Gamma_old)
    diag_new = np.diag(Gamma_new)
    target = np.maximum(diag_new, floor)
    if np.allclose(target, diag_new):
        return Gamma_new
    scale = np.sqrt(target / diag_new)
    return Gamma_new * np.outer(scale, scale)


def _run_saem(obs, design, model, hyper, schedule, theta0, seed, *, mode, support,
              divergence_bound, psi_scale, record_trace) -> MapResult:
    if design.n != obs.n:
        raise ConfigError(f"design has {design.n} rows but data has {obs.n} individuals")
    q, s = model.q, model.s
    hyper = hyper.resolved(q, s, design.p)
    theta = theta0.validate()
    if theta.q != q or theta.p != design.p or theta.p_f != design.p_f or theta.eta.size != s:
        raise ConfigError("initial parameters do not match model/design dimensions")
    free = coefficient_mask(design, model, support)
    theta = theta.with_beta_tilde(np.where(free, theta.beta_tilde, 0.0))
    rng = np.random.default_rng(seed)
    gram = design.augmented.T @ design.augmented
    sel_cols = free[1 + design.p_f:].any(axis=0) if support is None \
        else np.asarray(model.selection_mask, bool)
    phi0 = design.augmented @ theta.beta_tilde
    if psi_scale is None:
        psi_scale = np.sqrt(hyper.omega2_at(0)) if s else None
    state = LatentState.initial(phi0, theta.eta, psi_scale)
    S = SuffStats.zeros(obs.n, q, s)
    gammas = schedule.step_sizes()
    names = list(theta.flat().keys())
    traces = np.empty((schedule.K + 1, len(names))) if record_trace else np.empty((0, len(names)))
    if record_trace:
        traces[0] = list(theta.flat().values())
    acc_phi_total = np.zeros((obs.n, q))
    acc_psi_total = np.zeros(s)
    tried_phi_total = np.zeros((obs.n, q))
    tried_psi_total = np.zeros(s)
    for k in range(schedule.K):
        omega2 = hyper.omega2_at(k) if s else None
        state = s_step(state, obs, design, model, theta, schedule.h, rng, omega2,
                       laplace=schedule.laplace)
        acc_phi_total += state.accepted_phi
        tried_phi_total += state.tried_phi
        acc_psi_total += state.accepted_psi
        tried_psi_total += state.tried_psi
        if k < schedule.n_burnin and (k + 1) % schedule.adapt_every == 0:
            _adapt_scales(state)
        elif k >= schedule.n_burnin or (k + 1) % schedule.adapt_every == 0:
            state.reset_counters()
        S = sa_step(S, suff_stats(obs, model, state.phi, state.psi), gammas[k])
        if mode == "map":
            pstar = np.zeros((design.p, q))
            pstar[:, sel_cols] = p_star(theta.beta[:, sel_cols], theta.alpha[sel_cols],
                                        hyper.nu0, hyper.nu1)
        else:
            pstar = None
        new = m_step(S, theta, pstar, hyper, design, obs.n_tot, free, omega2, mode, gram)
        if schedule.anneal_decay is not None and k < schedule.anneal_iters:
            new = replace(new, Gamma=_anneal(new.Gamma, theta.Gamma, schedule.anneal_decay))
        _check_finite(new, divergence_bound, k)
        theta = new
        if record_trace:
            traces[k + 1] = list(theta.flat().values())
    final = np.zeros((design.p, q))
    if mode == "map":
        final[:, sel_cols] = p_star(theta.beta[:, sel_cols], theta.alpha[sel_cols],
                                    hyper.nu0, hyper.nu1)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc_phi = acc_phi_total.sum(axis=0) / np.maximum(tried_phi_total.sum(axis=0), 1)
        acc_psi = acc_psi_total / np.maximum(tried_psi_total, 1)
    return MapResult(theta, traces, names, final, acc_phi, acc_psi, state, S)


def run_map(obs: ObservationSet, design: DesignMatrices, model: NonlinearModel, hyper: HyperParams,
            schedule: SaemSchedule, theta0: PopulationParams, seed, *,
            divergence_bound: float = 1e12, psi_scale=None, record_trace: bool = True) -> MapResult:
    """MAP estimate of the population parameters under the spike-and-slab prior."""
    return _run_saem(obs, design, model, hyper, schedule, theta0, seed, mode="map", support=None,
                     divergence_bound=divergence_bound, psi_scale=psi_scale,
                     record_trace=record_trace)


def run_mle(obs: ObservationSet, design: DesignMatrices, model: NonlinearModel,
            support: Iterable[Tuple[int, int]], schedule: SaemSchedule, theta0: PopulationParams,
            seed, *, hyper: Optional[HyperParams] = None, divergence_bound: float = 1e12,
            psi_scale=None, record_trace: bool = False) -> MapResult:
    """Maximum-likelihood estimate in the sub-model with the given ``(l, m)`` support.

    Coefficients outside the support are fixed at zero and no prior is used,
    except for the annealed ``psi ~ N(eta, Omega)`` layer of the extended
    model (``hyper`` supplies ``Omega0``, ``kappa`` and ``tau``).
    """
    support = sorted(set(tuple(int(v) for v in pair) for pair in support))
    hyper = HyperParams() if hyper is None else hyper
    return _run_saem(obs, design, model, hyper, schedule, theta0, seed, mode="mle",
                     support=support, divergence_bound=divergence_bound, psi_scale=psi_scale,
                     record_trace=record_trace)
