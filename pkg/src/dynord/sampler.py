"""Posterior simulation for the dynamic DDP mixture of multivariate normals.

One sweep visits, in this fixed order: latent responses (z, w), component
labels, the shared stick Gaussians zeta, the AR paths eta (year by year),
alpha, phi, the atom means mu (year by year), the component covariances,
the hyperparameters (m, V, D) and the diagonal AR matrix Theta, which gets
a centred Metropolis step followed by a non-centred one that moves mu along.

Given the labels, stick ``l`` only interacts with itself, so every
zeta/eta/mu/Sigma update is carried out for all components at once; the
per-component conditionals are exactly the single-site ones.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .draws import DrawWriter, PosteriorDraw, truncate_after
from .model import Dataset, HyperConfig, age_bounds
from .prior import ar1_path, log_stick_weights
from .rng import stream
from .synth import sample_mixture_records
from .stats import (
    NotPositiveDefinite,
    NumericalUnderflow,
    invwishart_sample,
    invwishart_sample_many,
    mvn_sample,
    sample_truncated_normal,
    sample_two_interval_normal,
    sym_inv,
    wishart_sample,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class AllZeroWeights(ArithmeticError):
    """Every component has zero probability for some observation."""


class SweepAborted(RuntimeError):
    def __init__(self, message: str, state_dump: dict | None = None):
        super().__init__(message)
        self.state_dump = state_dump or {}


@dataclass
class ChainConfig:
    iterations: int = 20_000
    burn_in: int = 5_000
    thin: int = 1
    seed: int = 0
    chain: int = 0
    scale_alpha: float = 0.6
    scale_phi: float = 0.6
    scale_theta: float = 0.5
    pilot: int = 0

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("an explicit seed is required")
        if self.iterations <= self.burn_in:
            raise ValueError("iterations must exceed burn-in")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if min(self.scale_alpha, self.scale_phi, self.scale_theta) <= 0:
            raise ValueError("proposal scales must be positive")


@dataclass
class ChainState:
    zeta: np.ndarray
    eta: np.ndarray
    alpha: float
    phi: float
    mu: np.ndarray
    Sigma: np.ndarray
    theta: np.ndarray
    m: np.ndarray
    V: np.ndarray
    D: np.ndarray
    L: np.ndarray
    ystar: np.ndarray
    rng: np.random.Generator
    iteration: int = 0
    M: np.ndarray | None = None
    ysum: np.ndarray | None = None

    def to_draw(self) -> PosteriorDraw:
        return PosteriorDraw(
            iteration=self.iteration,
            zeta=self.zeta.copy(),
            eta=self.eta.copy(),
            alpha=float(self.alpha),
            phi=float(self.phi),
            mu=self.mu.copy(),
            Sigma=self.Sigma.copy(),
            theta=self.theta.copy(),
            m=self.m.copy(),
            V=self.V.copy(),
            D=self.D.copy(),
        )

    def dump(self) -> dict:
        """JSON-friendly snapshot for diagnosing an aborted sweep."""
        return {
            "iteration": self.iteration,
            "alpha": float(self.alpha),
            "phi": float(self.phi),
            "theta": self.theta.tolist(),
            "Sigma_eigmin": [_safe_eigmin(s) for s in self.Sigma],
            "V": self.V.tolist(),
            "D": self.D.tolist(),
            "occupancy": None if self.M is None else self.M.sum(axis=1).tolist(),
        }


def _safe_eigmin(m: np.ndarray) -> float | None:
    try:
        return float(np.linalg.eigvalsh(m).min())
    except np.linalg.LinAlgError:
        return None


@dataclass
class SweepReport:
    iteration: int
    accept: dict
    occupancy: np.ndarray
    loglik: float
    seconds: float


def _logit_transform(support: str):
    """(forward, inverse, log|d value / d y|) for a bounded scalar."""
    if support == "unit":
        return (
            lambda v: math.log(v / (1.0 - v)),
            lambda y: 1.0 / (1.0 + math.exp(-y)) if y > -700 else 0.0,
            lambda v: math.log(v) + math.log1p(-v),
        )
    return (
        lambda v: math.log((1.0 + v) / (1.0 - v)),
        lambda y: math.tanh(0.5 * y),
        lambda v: math.log1p(-v * v),
    )


def _support_ok(v: float, support: str) -> bool:
    return (0.0 < v < 1.0) if support == "unit" else (-1.0 < v < 1.0)


class Sampler:
    """Full-conditional updates for one chain over a fixed dataset.

    All update methods mutate the passed :class:`ChainState` in place and
    draw randomness from ``state.rng`` only.
    """

    def __init__(self, dataset: Dataset, hyper: HyperConfig, config: ChainConfig | None = None):
        if dataset.layout != hyper.layout:
            raise ValueError("dataset layout does not match the hyperparameters")
        if dataset.C != hyper.C:
            raise ValueError("number of categories differs between data and cutoffs")
        self.hyper = hyper
        self.config = config or ChainConfig()
        self.N = hyper.N
        self.T = dataset.T
        self.d = hyper.d
        self.layout = hyper.layout
        self.scales = {
            "alpha": self.config.scale_alpha,
            "phi": self.config.scale_phi,
            "theta": self.config.scale_theta,
        }
        self._Bm_inv = sym_inv(hyper.B_m)
        self._Bd_inv = sym_inv(hyper.B_D)
        self._V0_inv = sym_inv(hyper.V0)
        self.load_data(dataset)

    # ------------------------------------------------------------------
    # data and state construction
    # ------------------------------------------------------------------

    def load_data(self, dataset: Dataset) -> None:
        if dataset.T != self.T:
            raise ValueError("dataset T changed")
        self.dataset = dataset
        self.year = dataset.year
        self.n = dataset.n
        lo = [self.hyper.cutoffs.bounds(dataset.y)[0]]
        hi = [self.hyper.cutoffs.bounds(dataset.y)[1]]
        if self.layout.has_age:
            a_lo, a_hi = age_bounds(dataset.u)
            lo.append(a_lo)
            hi.append(a_hi)
        self.lower = np.stack(lo, axis=1) if self.n else np.zeros((0, len(lo)))
        self.upper = np.stack(hi, axis=1) if self.n else np.zeros((0, len(hi)))

    def _support_init(self, support: str) -> float:
        return 0.5 if support == "unit" else 0.0

    def initial_state(self, rng: np.random.Generator) -> ChainState:
        """Deterministic-ish starting point near the prior centre."""
        h, N, T, d = self.hyper, self.N, self.T, self.d
        alpha = h.b_alpha / (h.a_alpha - 1.0) if h.a_alpha > 1 else h.b_alpha
        phi = self._support_init(h.phi_support)
        theta = np.full(d, self._support_init(h.theta_support))
        m = h.a_m * (1.0 - theta)
        V = h.B_V / max(h.a_V - d - 1.0, 1.0)
        D = h.a_D * h.B_D
        Sigma = np.repeat((D / max(h.nu - d - 1.0, 1.0))[None], N, axis=0)
        zeta = rng.standard_normal(N - 1)
        eta = ar1_path(phi, T, rng, size=N - 1).reshape(N - 1, T)
        ystar = self._initial_latents()
        mu = np.repeat(h.a_m[None, None, :], N, axis=0).repeat(T, axis=1).copy()
        mu[:, 0, :] = h.m0
        if self.n:
            for t in range(T):
                idx = np.flatnonzero(self.year == t)
                pool = idx if idx.size else np.arange(self.n)
                mu[:, t, :] = ystar[rng.choice(pool, size=N)]
        state = ChainState(zeta=zeta, eta=eta, alpha=alpha, phi=phi, mu=mu, Sigma=Sigma,
                           theta=theta, m=m, V=V, D=D, L=np.zeros(self.n, dtype=np.int64),
                           ystar=ystar, rng=rng)
        self.update_configs(state)
        return state

    def _initial_latents(self) -> np.ndarray:
        ystar = np.empty((self.n, self.d))
        for j in range(self.lower.shape[1]):
            lo, hi = self.lower[:, j], self.upper[:, j]
            mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                           np.where(np.isfinite(lo), lo + 0.5, hi - 0.5))
            ystar[:, j] = mid
        ystar[:, len(self.layout.latent):] = self.dataset.x
        return ystar

    def sample_prior(self, rng: np.random.Generator, alpha: float | None = None,
                     theta=None) -> ChainState:
        """All parameters drawn from the prior; no observations attached.

        ``alpha`` and ``theta`` may be pinned to fixed values (the draws for
        the other parameters are then from the conditional prior).
        """
        h, N, T, d = self.hyper, self.N, self.T, self.d
        drawn_alpha = h.b_alpha / rng.gamma(h.a_alpha)
        alpha = drawn_alpha if alpha is None else float(alpha)
        lo = 0.0 if h.phi_support == "unit" else -1.0
        phi = float(rng.uniform(lo, 1.0))
        lo_t = 0.0 if h.theta_support == "unit" else -1.0
        drawn_theta = rng.uniform(lo_t, 1.0, size=d)
        theta = drawn_theta if theta is None else np.broadcast_to(np.asarray(theta, dtype=np.float64), (d,)).copy()
        zeta = rng.standard_normal(N - 1)
        eta = ar1_path(phi, T, rng, size=N - 1).reshape(N - 1, T)
        m = mvn_sample(h.a_m, h.B_m, rng)
        V = invwishart_sample(h.a_V, h.B_V, rng)
        D = wishart_sample(h.a_D, h.B_D, rng)
        Sigma = np.stack([invwishart_sample(h.nu, D, rng) for _ in range(N)])
        mu = np.empty((N, T, d))
        mu[:, 0] = mvn_sample(h.m0, h.V0, rng, size=N)
        for t in range(1, T):
            mu[:, t] = m + theta * mu[:, t - 1] + mvn_sample(np.zeros(d), V, rng, size=N)
        return ChainState(zeta=zeta, eta=eta, alpha=alpha, phi=phi, mu=mu, Sigma=Sigma,
                          theta=theta, m=m, V=V, D=D, L=np.zeros(0, dtype=np.int64),
                          ystar=np.zeros((0, d)), rng=rng)

    def simulate_data(self, state: ChainState, n_t) -> Dataset:
        """Draw labels and latent vectors given the parameters, discretize them,
        attach the result as this sampler's data and return it."""
        logw = log_stick_weights(state.zeta, state.eta, state.alpha)
        ds, ystar, L = sample_mixture_records(np.exp(logw), state.mu, state.Sigma, n_t,
                                              self.hyper.cutoffs, self.layout, state.rng,
                                              self.dataset.labels)
        self.load_data(ds)
        state.L = L
        state.ystar = ystar
        self.refresh(state)
        return ds

    def refresh(self, state: ChainState) -> None:
        """Recompute per-(component, year) counts and latent sums from the labels."""
        N, T, d = self.N, self.T, self.d
        idx = state.L * T + self.year
        state.M = np.bincount(idx, minlength=N * T).reshape(N, T)
        ysum = np.empty((N * T, d))
        for k in range(d):
            ysum[:, k] = np.bincount(idx, weights=state.ystar[:, k], minlength=N * T)
        state.ysum = ysum.reshape(N, T, d)

    # ------------------------------------------------------------------
    # latent responses and labels
    # ------------------------------------------------------------------

    def update_latents(self, state: ChainState) -> None:
        """Gibbs sub-steps z | (w, x) then w | (z, x) within the recorded intervals."""
        if self.n == 0:
            return
        prec = np.linalg.inv(state.Sigma)
        mu_i = state.mu[state.L, self.year]
        Q = prec[state.L]
        ystar = state.ystar
        for j in range(len(self.layout.latent)):
            resid = ystar - mu_i
            qjj = Q[:, j, j]
            cross = np.einsum("nk,nk->n", Q[:, j, :], resid) - qjj * resid[:, j]
            cmean = mu_i[:, j] - cross / qjj
            sd = 1.0 / np.sqrt(qjj)
            try:
                draw = sample_truncated_normal(cmean, sd, self.lower[:, j], self.upper[:, j], state.rng)
            except NumericalUnderflow:
                log.debug("latent truncation underflow; retrying without the mass check")
                draw = sample_truncated_normal(cmean, sd, self.lower[:, j], self.upper[:, j],
                                               state.rng, check_mass=False)
            ystar[:, j] = draw

    def config_log_probs(self, state: ChainState) -> np.ndarray:
        """Unnormalized log p_{l,t} N(y*_i; mu_{l,t}, Sigma_l), shape (N, n)."""
        try:
            chol = np.linalg.cholesky(state.Sigma)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        Linv = np.linalg.inv(chol)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        resid = state.ystar[None, :, :] - state.mu[:, self.year, :]
        sol = np.einsum("lij,lnj->lni", Linv, resid)
        logk = -0.5 * np.einsum("lni,lni->ln", sol, sol) - 0.5 * (logdet[:, None] + self.d * LOG_2PI)
        logw = log_stick_weights(state.zeta, state.eta, state.alpha)
        return logw[:, self.year] + logk

    def update_configs(self, state: ChainState) -> float:
        """Resample every label; returns the mixture log-likelihood of y*."""
        if self.n == 0:
            state.L = np.zeros(0, dtype=np.int64)
            self.refresh(state)
            return 0.0
        logp = self.config_log_probs(state)
        top = logp.max(axis=0)
        if not np.all(np.isfinite(top)):
            raise AllZeroWeights("all component probabilities vanish for some observation")
        cum = np.cumsum(np.exp(logp - top), axis=0)
        u = state.rng.random(self.n) * cum[-1]
        state.L = np.minimum((cum < u).sum(axis=0), self.N - 1)
        self.refresh(state)
        return float(np.sum(top + np.log(cum[-1])))

    # ------------------------------------------------------------------
    # stick-breaking weights
    # ------------------------------------------------------------------

    def _later_counts(self, state: ChainState) -> np.ndarray:
        """G[l, t] = sum_{r > l} M[r, t] for l = 0..N-2."""
        tail = np.cumsum(state.M[::-1], axis=0)[::-1]
        return tail[1:]

    def _slice_bounds(self, state: ChainState, s_cur, counts, other_sq):
        """Lower bounds on the squared free variable from the slice variables.

        For each entry with a positive count an auxiliary
        u ~ U(0, (1 - beta)^M) is drawn; the slice is
        free^2 > -other^2 - 2 alpha log(1 - u^(1/M)).  Entries with a zero
        count impose nothing (-inf).
        """
        alpha = state.alpha
        bound = np.full(s_cur.shape, -np.inf)
        active = counts > 0
        k = int(active.sum())
        if k == 0:
            return bound
        u = state.rng.random(k)
        mk = counts[active]
        log_one_minus_beta = np.log(-np.expm1(-s_cur[active] / (2.0 * alpha)))
        log_v = np.log(u) / mk + log_one_minus_beta
        bound[active] = -other_sq[active] - 2.0 * alpha * np.log(-np.expm1(log_v))
        return bound

    def update_zeta(self, state: ChainState, ls=None) -> None:
        if self.N == 1:
            return
        ls = np.arange(self.N - 1) if ls is None else np.atleast_1d(ls)
        G = self._later_counts(state)[ls]
        var = 1.0 / (1.0 + G.sum(axis=1) / state.alpha)
        eta = state.eta[ls]
        s_cur = state.zeta[ls, None] ** 2 + eta**2
        bound = self._slice_bounds(state, s_cur, state.M[ls], eta**2).max(axis=1)
        thr = np.sqrt(np.maximum(bound, 0.0))
        state.zeta[ls] = sample_two_interval_normal(0.0, np.sqrt(var), thr, state.rng)

    def eta_conditional(self, state: ChainState, t: int, ls=None):
        """Mean and variance of the Gaussian factor of eta[l, t]'s conditional."""
        ls = np.arange(self.N - 1) if ls is None else np.atleast_1d(ls)
        S = self._later_counts(state)[ls, t]
        phi, T = state.phi, self.T
        e = 1.0 - phi * phi
        eta = state.eta
        lin = np.zeros(ls.size)
        if T == 1:
            prec_ar = 1.0
        elif t == 0 or t == T - 1:
            prec_ar = 1.0 / e
        else:
            prec_ar = (1.0 + phi * phi) / e
        if t > 0:
            lin += phi * eta[ls, t - 1] / e
        if t < T - 1:
            lin += phi * eta[ls, t + 1] / e
        prec = S / state.alpha + prec_ar
        return lin / prec, 1.0 / prec

    def update_eta(self, state: ChainState, t: int, ls=None) -> None:
        if self.N == 1:
            return
        ls = np.arange(self.N - 1) if ls is None else np.atleast_1d(ls)
        mean, var = self.eta_conditional(state, t, ls)
        zsq = state.zeta[ls] ** 2
        s_cur = zsq + state.eta[ls, t] ** 2
        bound = self._slice_bounds(state, s_cur, state.M[ls, t], zsq)
        thr = np.sqrt(np.maximum(bound, 0.0))
        state.eta[ls, t] = sample_two_interval_normal(mean, np.sqrt(var), thr, state.rng)

    def alpha_log_target(self, state: ChainState, alpha: float) -> float:
        """Log full conditional of alpha (up to a constant) on the alpha scale."""
        h = self.hyper
        out = -(h.a_alpha + 1.0) * math.log(alpha) - h.b_alpha / alpha
        if self.N == 1 or self.n == 0:
            return out
        s = state.zeta[:, None] ** 2 + state.eta**2
        G = self._later_counts(state)
        M = state.M[:-1]
        active = M > 0
        out -= float(np.sum(G * s)) / (2.0 * alpha)
        if np.any(active):
            out += float(np.sum(M[active] * np.log(-np.expm1(-s[active] / (2.0 * alpha)))))
        return out

    def update_alpha(self, state: ChainState, proposal_scale: float | None = None) -> bool:
        """Random-walk Metropolis on log(alpha)."""
        scale = self.scales["alpha"] if proposal_scale is None else proposal_scale
        cur = state.alpha
        prop = cur * math.exp(scale * state.rng.standard_normal())
        log_ratio = (self.alpha_log_target(state, prop) + math.log(prop)
                     - self.alpha_log_target(state, cur) - math.log(cur))
        if math.log(state.rng.random()) < log_ratio:
            state.alpha = prop
            return True
        return False

    def phi_log_target(self, state: ChainState, phi: float) -> float:
        if self.T == 1 or self.N == 1:
            return 0.0
        eta = state.eta
        prev, nxt = eta[:, :-1], eta[:, 1:]
        e = 1.0 - phi * phi
        quad = float(np.sum((nxt - phi * prev) ** 2))
        n_terms = prev.size
        return -0.5 * n_terms * math.log(e) - quad / (2.0 * e)

    def update_phi(self, state: ChainState, proposal_scale: float | None = None) -> bool:
        """Metropolis on the logit of phi (uniform prior on its support)."""
        scale = self.scales["phi"] if proposal_scale is None else proposal_scale
        support = self.hyper.phi_support
        fwd, inv, log_jac = _logit_transform(support)
        cur = state.phi
        prop = inv(fwd(cur) + scale * state.rng.standard_normal())
        if not _support_ok(prop, support):
            state.rng.random()
            return False
        log_ratio = (self.phi_log_target(state, prop) + log_jac(prop)
                     - self.phi_log_target(state, cur) - log_jac(cur))
        if math.log(state.rng.random()) < log_ratio:
            state.phi = prop
            return True
        return False

    # ------------------------------------------------------------------
    # atoms and hyperparameters
    # ------------------------------------------------------------------

    def mu_conditional(self, state: ChainState, t: int, ls=None, Sigma_inv=None, V_inv=None):
        """Precision and linear term of mu[l, t]'s Gaussian full conditional.

        The forward term of the next transition enters as Theta' V^{-1} Theta
        and Theta' V^{-1} (mu_{t+1} - m), which stays defined at Theta = 0.
        """
        h = self.hyper
        ls = np.arange(self.N) if ls is None else np.atleast_1d(ls)
        Sinv = sym_inv_many(state.Sigma) if Sigma_inv is None else Sigma_inv
        Vinv = sym_inv(state.V) if V_inv is None else V_inv
        theta = state.theta
        k = ls.size
        if t == 0:
            P = np.repeat(self._V0_inv[None], k, axis=0)
            hlin = np.repeat((self._V0_inv @ h.m0)[None], k, axis=0)
        else:
            P = np.repeat(Vinv[None], k, axis=0)
            hlin = (state.m + theta * state.mu[ls, t - 1]) @ Vinv
        if t < self.T - 1:
            P = P + (theta[:, None] * Vinv * theta[None, :])[None]
            hlin = hlin + theta * ((state.mu[ls, t + 1] - state.m) @ Vinv)
        M = state.M[ls, t]
        P = P + M[:, None, None] * Sinv[ls]
        hlin = hlin + np.einsum("lij,lj->li", Sinv[ls], state.ysum[ls, t])
        return P, hlin

    def update_mu(self, state: ChainState, t: int, ls=None, Sigma_inv=None, V_inv=None) -> None:
        ls = np.arange(self.N) if ls is None else np.atleast_1d(ls)
        P, hlin = self.mu_conditional(state, t, ls, Sigma_inv, V_inv)
        try:
            chol = np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        mean = np.linalg.solve(P, hlin[..., None])[..., 0]
        eps = state.rng.standard_normal((ls.size, self.d))
        cholT = np.swapaxes(chol, -1, -2)
        state.mu[ls, t] = mean + np.linalg.solve(cholT, eps[..., None])[..., 0]

    def sigma_posterior(self, state: ChainState):
        """Inverse-Wishart parameters (dof, scale) for every Sigma_l."""
        d = self.d
        scatter = np.zeros((self.N, d, d))
        if self.n:
            resid = state.ystar - state.mu[state.L, self.year]
            for i in range(d):
                for j in range(i, d):
                    s = np.bincount(state.L, weights=resid[:, i] * resid[:, j], minlength=self.N)
                    scatter[:, i, j] = s
                    scatter[:, j, i] = s
        counts = state.M.sum(axis=1)
        return self.hyper.nu + counts, state.D[None] + scatter

    def update_sigma(self, state: ChainState, ls=None) -> None:
        ls = np.arange(self.N) if ls is None else np.atleast_1d(ls)
        dofs, scales = self.sigma_posterior(state)
        state.Sigma[ls] = invwishart_sample_many(dofs[ls], scales[ls], state.rng)

    def update_psi(self, state: ChainState, Sigma_inv=None) -> None:
        """Conjugate draws of m, then V, then D."""
        h, d, N, T, rng = self.hyper, self.d, self.N, self.T, state.rng
        if T > 1:
            diff = (state.mu[:, 1:] - state.theta * state.mu[:, :-1]).reshape(-1, d)
            Vinv = sym_inv(state.V)
            P = self._Bm_inv + diff.shape[0] * Vinv
            lin = self._Bm_inv @ h.a_m + Vinv @ diff.sum(axis=0)
            state.m = _draw_from_precision(lin, P, rng)
            r = diff - state.m
            state.V = invwishart_sample(h.a_V + r.shape[0], h.B_V + r.T @ r, rng)
        else:
            state.m = mvn_sample(h.a_m, h.B_m, rng)
            state.V = invwishart_sample(h.a_V, h.B_V, rng)
        Sinv = sym_inv_many(state.Sigma) if Sigma_inv is None else Sigma_inv
        scale = sym_inv(self._Bd_inv + Sinv.sum(axis=0))
        state.D = wishart_sample(h.a_D + N * h.nu, scale, rng)

    def theta_log_target(self, state: ChainState, theta: np.ndarray, V_inv=None) -> float:
        if self.T == 1:
            return 0.0
        Vinv = sym_inv(state.V) if V_inv is None else V_inv
        r = (state.mu[:, 1:] - state.m - theta * state.mu[:, :-1]).reshape(-1, self.d)
        return -0.5 * float(np.einsum("ni,ij,nj->", r, Vinv, r))

    def update_theta(self, state: ChainState, proposal_scale: float | None = None) -> np.ndarray:
        """Independent logit-scale Metropolis steps for each diagonal element."""
        scale = self.scales["theta"] if proposal_scale is None else proposal_scale
        support = self.hyper.theta_support
        fwd, inv, log_jac = _logit_transform(support)
        Vinv = sym_inv(state.V)
        accepted = np.zeros(self.d, dtype=bool)
        cur_lp = self.theta_log_target(state, state.theta, Vinv)
        for j in range(self.d):
            cur = state.theta[j]
            prop_val = inv(fwd(cur) + scale * state.rng.standard_normal())
            u = state.rng.random()
            if not _support_ok(prop_val, support):
                continue
            prop = state.theta.copy()
            prop[j] = prop_val
            prop_lp = self.theta_log_target(state, prop, Vinv)
            if math.log(u) < prop_lp + log_jac(prop_val) - cur_lp - log_jac(cur):
                state.theta = prop
                cur_lp = prop_lp
                accepted[j] = True
        return accepted

    def _mu_data_term(self, mu: np.ndarray, Sigma_inv: np.ndarray, state: ChainState) -> float:
        """log prod N(y*_i; mu_{L_i,t_i}, Sigma) up to terms free of mu."""
        a = np.einsum("lij,ltj->lti", Sigma_inv, mu)
        return float(np.sum(a * state.ysum) - 0.5 * np.sum(state.M[..., None] * a * mu))

    def update_theta_shift(self, state: ChainState, proposal_scale: float | None = None) -> np.ndarray:
        """Non-centred Metropolis step for each theta_j.

        The transition innovations mu[:, t, j] - m_j - theta_j mu[:, t-1, j]
        are held fixed and mu[:, 1:, j] is rebuilt under the proposed value.
        The map has unit Jacobian and leaves the prior density of mu
        unchanged, so only the latent-data likelihood and the transform
        Jacobian enter the ratio.  Without data this move is always accepted,
        which breaks the ridge between theta_j and the level of mu[:, 1:, j]
        that slows the centred update.
        """
        accepted = np.zeros(self.d, dtype=bool)
        if self.T == 1:
            return accepted
        scale = self.scales["theta"] if proposal_scale is None else proposal_scale
        support = self.hyper.theta_support
        fwd, inv, log_jac = _logit_transform(support)
        Sinv = sym_inv_many(state.Sigma) if self.n else None
        cur_ll = self._mu_data_term(state.mu, Sinv, state) if self.n else 0.0
        for j in range(self.d):
            cur = state.theta[j]
            prop_val = inv(fwd(cur) + scale * state.rng.standard_normal())
            u = state.rng.random()
            if not _support_ok(prop_val, support):
                continue
            innov = state.mu[:, 1:, j] - cur * state.mu[:, :-1, j]
            new = state.mu.copy()
            for t in range(1, self.T):
                new[:, t, j] = prop_val * new[:, t - 1, j] + innov[:, t - 1]
            new_ll = self._mu_data_term(new, Sinv, state) if self.n else 0.0
            if math.log(u) < new_ll + log_jac(prop_val) - cur_ll - log_jac(cur):
                state.mu = new
                state.theta = state.theta.copy()
                state.theta[j] = prop_val
                cur_ll = new_ll
                accepted[j] = True
        return accepted

    # ------------------------------------------------------------------
    # orchestration
    # ------------------------------------------------------------------

    def sweep(self, state: ChainState) -> SweepReport:
        start = time.perf_counter()
        try:
            self.update_latents(state)
            loglik = self.update_configs(state)
            self.update_zeta(state)
            for t in range(self.T):
                self.update_eta(state, t)
            acc_alpha = self.update_alpha(state)
            acc_phi = self.update_phi(state)
            Sinv = sym_inv_many(state.Sigma)
            Vinv = sym_inv(state.V)
            for t in range(self.T):
                self.update_mu(state, t, Sigma_inv=Sinv, V_inv=Vinv)
            self.update_sigma(state)
            self.update_psi(state)
            acc_theta = self.update_theta(state)
            acc_shift = self.update_theta_shift(state)
        except (NotPositiveDefinite, NumericalUnderflow, AllZeroWeights, FloatingPointError,
                np.linalg.LinAlgError, ValueError) as exc:
            raise SweepAborted(f"sweep {state.iteration + 1} failed: {exc}", state.dump()) from exc
        state.iteration += 1
        return SweepReport(
            iteration=state.iteration,
            accept={"alpha": float(acc_alpha), "phi": float(acc_phi),
                    **{f"theta{j + 1}": float(a) for j, a in enumerate(acc_theta)},
                    **{f"theta{j + 1}_shift": float(a) for j, a in enumerate(acc_shift)}},
            occupancy=state.M.sum(axis=1),
            loglik=loglik,
            seconds=time.perf_counter() - start,
        )


def sym_inv_many(mats: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(mats)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    inv_chol = np.linalg.inv(chol)
    out = np.swapaxes(inv_chol, -1, -2) @ inv_chol
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _draw_from_precision(lin, P, rng):
    try:
        chol = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    mean = np.linalg.solve(P, lin)
    return mean + np.linalg.solve(chol.T, rng.standard_normal(lin.shape[0]))


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------


def tune_proposals(sampler: Sampler, state: ChainState, sweeps: int, batch: int = 50,
                   target: float = 0.35) -> dict:
    """Pilot run adapting the random-walk scales toward ``target`` acceptance.

    Only used before the recorded chain; scales stay fixed afterwards.
    """
    names = ["alpha", "phi"] + [f"theta{j + 1}" for j in range(sampler.d)]
    hits = dict.fromkeys(names, 0.0)
    for i in range(1, sweeps + 1):
        rep = sampler.sweep(state)
        for k in names:
            hits[k] += rep.accept[k]
        if i % batch == 0:
            for key, members in (("alpha", ["alpha"]), ("phi", ["phi"]),
                                 ("theta", [n for n in names if n.startswith("theta")])):
                rate = sum(hits[k] for k in members) / (batch * len(members))
                sampler.scales[key] *= math.exp(rate - target)
            hits = dict.fromkeys(names, 0.0)
    return dict(sampler.scales)


def save_checkpoint(path, state: ChainState, scales: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(
        tmp,
        zeta=state.zeta, eta=state.eta, alpha=state.alpha, phi=state.phi, mu=state.mu,
        Sigma=state.Sigma, theta=state.theta, m=state.m, V=state.V, D=state.D, L=state.L,
        ystar=state.ystar, iteration=state.iteration,
        rng=json.dumps(state.rng.bit_generator.state), scales=json.dumps(scales),
    )
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ChainState, dict]:
    with np.load(path) as f:
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = json.loads(str(f["rng"]))
        state = ChainState(
            zeta=f["zeta"].copy(), eta=f["eta"].copy(), alpha=float(f["alpha"]), phi=float(f["phi"]),
            mu=f["mu"].copy(), Sigma=f["Sigma"].copy(), theta=f["theta"].copy(), m=f["m"].copy(),
            V=f["V"].copy(), D=f["D"].copy(), L=f["L"].copy(), ystar=f["ystar"].copy(), rng=rng,
            iteration=int(f["iteration"]),
        )
        scales = json.loads(str(f["scales"]))
    return state, scales


@dataclass
class ChainRun:
    """Handle returned by :func:`run_chain`; iterate it to get the kept draws."""

    sampler: Sampler
    state: ChainState
    config: ChainConfig
    writer: DrawWriter | None = None
    checkpoint: Path | None = None
    on_sweep: object = None
    reports: list = field(default_factory=list)

    def __iter__(self):
        cfg = self.config
        try:
            while self.state.iteration < cfg.iterations:
                rep = self.sampler.sweep(self.state)
                if self.on_sweep is not None:
                    self.on_sweep(rep)
                it = self.state.iteration
                if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                    draw = self.state.to_draw()
                    if self.writer is not None:
                        self.writer.write(draw)
                        if self.checkpoint is not None:
                            save_checkpoint(self.checkpoint, self.state, self.sampler.scales)
                    yield draw
        finally:
            if self.writer is not None:
                self.writer.close()


def run_chain(dataset: Dataset, hyper: HyperConfig, config: ChainConfig, draws_path=None,
              header: dict | None = None, checkpoint=None, resume: bool = False,
              on_sweep=None) -> ChainRun:
    """Set up a chain; the returned object yields a :class:`PosteriorDraw` per kept sweep.

    With ``draws_path`` every kept draw is appended to an NDJSON draw file
    (header first).  With ``checkpoint`` the full chain state is saved after
    each persisted draw, and ``resume=True`` continues from it, producing the
    same stream an uninterrupted run would.
    """
    sampler = Sampler(dataset, hyper, config)
    writer = None
    if resume:
        if checkpoint is None or not Path(checkpoint).exists():
            raise FileNotFoundError("resume requested but no checkpoint found")
        state, scales = load_checkpoint(checkpoint)
        sampler.scales.update(scales)
        sampler.refresh(state)
        if draws_path is not None:
            truncate_after(draws_path, state.iteration)
            writer = DrawWriter(draws_path, append=True)
    else:
        state = sampler.initial_state(stream(config.seed, "chain", config.chain))
        if config.pilot > 0:
            pilot_rng = state.rng
            state.rng = stream(config.seed, "pilot", config.chain)
            tune_proposals(sampler, state, config.pilot)
            state.rng = pilot_rng
            state.iteration = 0
        if draws_path is not None:
            writer = DrawWriter(draws_path, header=header)
    return ChainRun(sampler, state, config, writer, None if checkpoint is None else Path(checkpoint),
                    on_sweep)
