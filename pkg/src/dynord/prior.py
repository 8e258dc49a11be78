"""Time-dependent stick-breaking prior built on an exponentiated AR(1) process.

Each stick variable is ``beta_{l,t} = exp(-(zeta_l^2 + eta_{l,t}^2) / (2 alpha))``
with a shared standard normal ``zeta_l`` and a stationary AR(1) path
``eta_{l,.}`` with unit marginal variance.  Marginally ``beta_{l,t}`` is
beta(alpha, 1), so every ``G_t`` is a Dirichlet process.  The closed-form
moments below are used as oracles for the sampler and exposed through the
``validate-prior`` CLI command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TruncationInsufficient(ValueError):
    """Raised when a truncated series leaves more than the allowed tail mass."""


@dataclass(frozen=True)
class MomentQuery:
    alpha: float
    phi: float
    lag: int = 1
    index: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not abs(self.phi) < 1:
            raise ValueError("|phi| must be < 1")
        if self.lag < 1 or self.index < 1:
            raise ValueError("lag and weight index start at 1")

    @property
    def rho(self) -> float:
        return self.phi**self.lag


@dataclass
class WeightState:
    """Latent Gaussians driving the weights: ``zeta`` (N-1,), ``eta`` (N-1, T)."""

    zeta: np.ndarray
    eta: np.ndarray
    alpha: float
    phi: float

    @property
    def beta(self) -> np.ndarray:
        return beta_transform(self.zeta[:, None], self.eta, self.alpha)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(log_stick_weights(self.zeta, self.eta, self.alpha))


def beta_transform(zeta, eta, alpha):
    return np.exp(-(np.square(zeta) + np.square(eta)) / (2.0 * alpha))


def ar1_path(phi: float, T: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Stationary AR(1) paths with N(0, 1) marginals; shape ``size + (T,)``."""
    if not abs(phi) < 1:
        raise ValueError("|phi| must be < 1")
    lead = () if size is None else tuple(np.atleast_1d(size))
    eps = rng.standard_normal(lead + (T,))
    out = np.empty_like(eps)
    out[..., 0] = eps[..., 0]
    innov_sd = math.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        out[..., t] = phi * out[..., t - 1] + innov_sd * eps[..., t]
    return out


def stick_break(beta) -> np.ndarray:
    """Weights ``(N, T)`` from stick variables ``(N-1, T)``.

    ``p_1 = 1 - beta_1``, ``p_l = (1 - beta_l) prod_{r<l} beta_r`` and the
    last weight takes the remaining stick, so columns sum to one.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 1:
        beta = beta[:, None]
    n_minus_1, T = beta.shape
    out = np.empty((n_minus_1 + 1, T))
    remaining = np.ones(T)
    for l in range(n_minus_1):
        out[l] = (1.0 - beta[l]) * remaining
        remaining = remaining * beta[l]
    out[-1] = remaining
    return out


def log_stick_weights(zeta, eta, alpha) -> np.ndarray:
    """log p_{l,t} computed directly from (zeta, eta, alpha), shape (N, T)."""
    eta = np.asarray(eta, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    if eta.ndim == 1:
        eta = eta[:, None]
    log_beta = -(zeta[:, None] ** 2 + eta**2) / (2.0 * alpha)
    T = eta.shape[1]
    with np.errstate(divide="ignore"):
        log_one_minus = np.log(-np.expm1(log_beta))
    out = np.empty((eta.shape[0] + 1, T))
    csum = np.zeros(T)
    for l in range(eta.shape[0]):
        out[l] = log_one_minus[l] + csum
        csum = csum + log_beta[l]
    out[-1] = csum
    return out


def sample_weight_state(N: int, T: int, alpha: float, phi: float, rng: np.random.Generator) -> WeightState:
    zeta = rng.standard_normal(N - 1)
    eta = ar1_path(phi, T, rng, size=N - 1) if N > 1 else np.zeros((0, T))
    return WeightState(zeta=zeta, eta=eta.reshape(N - 1, T), alpha=alpha, phi=phi)


# ---------------------------------------------------------------------------
# truncation level
# ---------------------------------------------------------------------------


def expected_truncated_mass(alpha, N: int):
    """E(sum of the first N stick-breaking weights | alpha) = 1 - (alpha/(alpha+1))^N."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return 1.0 - (alpha / (alpha + 1.0)) ** N


def choose_truncation(alpha, tolerance: float, rng: np.random.Generator | None = None,
                      n_draws: int = 10_000, max_n: int = 10_000) -> int:
    """Smallest N whose expected retained mass is at least ``1 - tolerance``.

    ``alpha`` is either a fixed positive value or an ``(a, b)`` pair for an
    inverse-gamma prior; in the latter case the expectation is averaged over
    ``n_draws`` prior draws.
    """
    if not 0 < tolerance < 1:
        raise ValueError("tolerance must lie in (0, 1)")
    if np.ndim(alpha) == 0:
        ratio = np.array([alpha / (alpha + 1.0)])
    else:
        a, b = alpha
        rng = np.random.default_rng(0) if rng is None else rng
        draws = b / rng.gamma(a, 1.0, size=n_draws)
        ratio = draws / (draws + 1.0)
    for N in range(1, max_n + 1):
        if 1.0 - np.mean(ratio**N) >= 1.0 - tolerance:
            return N
    raise TruncationInsufficient(f"no N <= {max_n} meets tolerance {tolerance}")


# ---------------------------------------------------------------------------
# closed-form moments
# ---------------------------------------------------------------------------


def beta_mean(alpha):
    return alpha / (alpha + 1.0)


def beta_var(alpha):
    return alpha / ((alpha + 1.0) ** 2 * (alpha + 2.0))


def beta_cross_moment(alpha, rho):
    """E(beta_t beta_{t+k}) for lag correlation ``rho`` of the AR process.

    Product of E exp(-zeta^2/alpha) = sqrt(alpha/(alpha+2)) and the bivariate
    normal expectation alpha / sqrt((1+alpha)^2 - rho^2).
    """
    return alpha**1.5 / math.sqrt((2.0 + alpha) * ((1.0 + alpha) ** 2 - rho * rho))


def beta_autocorr(q: MomentQuery) -> float:
    """corr(beta_t, beta_{t+k} | alpha, phi) with rho_k = phi^k."""
    a = q.alpha
    return (beta_cross_moment(a, q.rho) - beta_mean(a) ** 2) / beta_var(a)


def beta_autocorr_printed(alpha: float, rho: float) -> float:
    """The autocorrelation in its original printed arrangement.

    Singular at rho = 1; kept as an independent cross-check of
    :func:`beta_autocorr`.
    """
    e = 1.0 - rho * rho
    num = math.sqrt(alpha) * math.sqrt(e) * (alpha + 1.0) ** 2 * math.sqrt(alpha + 2.0)
    den = math.sqrt((e + alpha) ** 2 - alpha * alpha * rho * rho)
    return num / den - alpha * (alpha + 2.0)


def weight_mean(alpha: float, l: int) -> float:
    return alpha ** (l - 1) / (1.0 + alpha) ** l


def weight_var(alpha: float, l: int) -> float:
    second = 2.0 * alpha ** (l - 1) / ((1.0 + alpha) * (2.0 + alpha) ** l)
    return second - alpha ** (2 * l - 2) / (1.0 + alpha) ** (2 * l)


def weight_lag_cov(q: MomentQuery) -> float:
    """cov(p_{l,t}, p_{l,t+k} | alpha, phi); lag enters through phi^k."""
    a, l = q.alpha, q.index
    c = beta_cross_moment(a, q.rho)
    return c ** (l - 1) * (1.0 - 2.0 * a / (a + 1.0) + c) - a ** (2 * l - 2) / (1.0 + a) ** (2 * l)


# the lag-1 covariance is the k = 1 case of the general expression
weight_lag1_cov = weight_lag_cov


def weight_lagk_corr(q: MomentQuery) -> float:
    return weight_lag_cov(q) / weight_var(q.alpha, q.index)


def _cross_weight_moments(alpha: float, rho: float, K: int) -> np.ndarray:
    """Matrix of E(p_{l,t} p_{m,t+k}) for l, m = 1..K.

    Built factor by factor: shared sticks r < min(l, m) contribute
    E(beta beta'), stick min(l, m) contributes E(beta'(1 - beta)) (l != m) or
    E((1 - beta)(1 - beta')) (l = m), sticks strictly between contribute
    E(beta) and the last stick contributes E(1 - beta).
    """
    a = beta_mean(alpha)
    c = beta_cross_moment(alpha, rho)
    idx = np.arange(1, K + 1)
    lo = np.minimum.outer(idx, idx)
    hi = np.maximum.outer(idx, idx)
    shared = c ** (lo - 1)
    off = shared * (a - c) * a ** np.maximum(hi - lo - 1, 0) * (1.0 - a)
    diag = shared * (1.0 - 2.0 * a + c)
    return np.where(lo == hi, diag, off)


def dist_measure_corr(g0_mass: float, alpha: float, phi: float, sum_truncation: int = 200,
                      lag: int = 1, tail_tol: float = 1e-8) -> float:
    """corr(G_t(A), G_{t+k}(A)) for a set with base measure ``g0_mass``.

    The double series over (l, m) is truncated at ``max(l, m) <= sum_truncation``;
    the neglected mass is bounded by ``2 (alpha/(alpha+1))^K``.
    """
    if not 0 < g0_mass < 1:
        raise ValueError("g0_mass must lie in (0, 1)")
    K = int(sum_truncation)
    bound = 2.0 * beta_mean(alpha) ** K
    if bound > tail_tol:
        raise TruncationInsufficient(f"tail bound {bound:.3g} exceeds {tail_tol:g} at K={K}")
    cross = _cross_weight_moments(alpha, phi**lag, K)
    same = np.trace(cross)
    other = cross.sum() - same
    e_prod = g0_mass * same + g0_mass**2 * other
    var = g0_mass * (1.0 - g0_mass) / (alpha + 1.0)
    return (e_prod - g0_mass**2) / var


# ---------------------------------------------------------------------------
# Monte Carlo oracle table
# ---------------------------------------------------------------------------


def simulate_sticks(alpha: float, phi: float, n_paths: int, n_sticks: int, T: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Prior draws of beta with shape (n_paths, n_sticks, T)."""
    zeta = rng.standard_normal((n_paths, n_sticks, 1))
    eta = ar1_path(phi, T, rng, size=(n_paths, n_sticks))
    return beta_transform(zeta, eta, alpha)


def prior_oracle_table(alphas=(0.5, 1.0, 5.0), phis=(0.0, 0.5, 0.9), lags=(1, 3),
                       indices=(1, 2, 3), n_paths: int = 1_000_000,
                       rng: np.random.Generator | None = None) -> list[dict]:
    """Closed-form vs Monte Carlo autocorrelations of sticks and weights.

    One row per (quantity, alpha, phi, lag, index); ``quantity`` is ``"beta"``
    (index fixed at 1) or ``"weight"``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    rows = []
    T = max(lags) + 1
    L = max(indices)
    for alpha in alphas:
        for phi in phis:
            beta = simulate_sticks(alpha, phi, n_paths, L, T, rng)
            w = stick_break_paths(beta)
            for k in lags:
                q = MomentQuery(alpha, phi, k, 1)
                mc = _corr(beta[:, 0, 0], beta[:, 0, k])
                rows.append(_row("beta", q, beta_autocorr(q), mc))
                for l in indices:
                    q = MomentQuery(alpha, phi, k, l)
                    mc = _corr(w[:, l - 1, 0], w[:, l - 1, k])
                    rows.append(_row("weight", q, weight_lagk_corr(q), mc))
    return rows


def stick_break_paths(beta: np.ndarray) -> np.ndarray:
    """Leading weights p_1..p_L from sticks of shape (n, L, T); remainder dropped."""
    log_b = np.log(beta)
    csum = np.cumsum(log_b, axis=1) - log_b
    return (1.0 - beta) * np.exp(csum)


def _corr(x, y) -> float:
    return float(np.corrcoef(x, y)[0, 1])


def _row(quantity, q, analytic, mc):
    return {
        "quantity": quantity,
        "alpha": q.alpha,
        "phi": q.phi,
        "k": q.lag,
        "l": q.index,
        "analytic": analytic,
        "monte_carlo": mc,
        "abs_err": abs(analytic - mc),
    }
