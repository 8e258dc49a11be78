"""Posterior functionals of the year-t mixture and their across-draw summaries.

Every functional here is a closed-form operation on one
:class:`MixtureSnapshot` (weights, means and covariances of the truncated
mixture at one year).  Conditioning on observed coordinates uses the exact
Gaussian formulas within each component, which reweights the components by
their marginal density at the conditioning point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, ndtr

from .model import Cutoffs, Layout

LENGTH_GRID = np.arange(150.0, 550.0 + 1e-9, 2.0)
AGE_GRID = np.arange(0.5, 16.0 + 1e-9, 0.05)
LOG_2PI = np.log(2.0 * np.pi)


class DomainError(ValueError):
    pass


class ZeroCategoryMass(ArithmeticError):
    pass


@dataclass
class MixtureSnapshot:
    t: int
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    cutoffs: Cutoffs
    layout: Layout = Layout()

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-8:
            raise ValueError("weights must lie on the simplex")
        if self.means.shape != (self.weights.size, self.layout.d):
            raise ValueError("means must be (N, d)")

    @property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)


# ---------------------------------------------------------------------------
# Gaussian conditioning helpers
# ---------------------------------------------------------------------------


def _condition(snap: MixtureSnapshot, target: int, given: list[int], values: np.ndarray):
    """Per-component conditional of coordinate ``target`` given ``given`` = values.

    ``values`` has shape (P, len(given)).  Returns the normalized posterior
    component log-weights (P, N), conditional means (P, N) and conditional
    standard deviations (N,).  With nothing given the prior weights are used.
    """
    mu, S = snap.means, snap.covs
    P = values.shape[0]
    if not given:
        logw = np.broadcast_to(snap.log_weights, (P, mu.shape[0]))
        return logw, np.broadcast_to(mu[:, target], (P, mu.shape[0])), np.sqrt(S[:, target, target])
    g = np.asarray(given)
    Sgg = S[:, g[:, None], g[None, :]]
    Stg = S[:, target, g]
    Sgg_inv = np.linalg.inv(Sgg)
    resid = values[:, None, :] - mu[None, :, g]  # (P, N, k)
    sol = np.einsum("lij,plj->pli", Sgg_inv, resid)
    quad = np.einsum("pli,pli->pl", resid, sol)
    logdet = np.linalg.slogdet(Sgg)[1]
    log_marg = -0.5 * (quad + logdet[None, :] + g.size * LOG_2PI)
    logw = snap.log_weights[None, :] + log_marg
    logw = logw - logsumexp(logw, axis=1, keepdims=True)
    cmean = mu[None, :, target] + np.einsum("li,pli->pl", Stg, sol)
    cvar = S[:, target, target] - np.einsum("li,lij,lj->l", Stg, Sgg_inv, Stg)
    return logw, cmean, np.sqrt(cvar)


def _category_probs(logw, cmean, csd, cutoffs: Cutoffs) -> np.ndarray:
    """Mixture probabilities of every category, shape (P, C)."""
    gam = cutoffs.array  # (C+1,) including the infinite ends
    cdf = ndtr((gam[None, None, :] - cmean[:, :, None]) / csd[None, :, None])
    per_comp = np.diff(cdf, axis=2)  # (P, N, C)
    return np.einsum("pl,plc->pc", np.exp(logw), per_comp)


def _points(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=np.float64))


def _check_age(u_star) -> np.ndarray:
    u = _points(u_star)
    if np.any(u <= 0):
        raise DomainError("continuous age must be positive")
    return u


def _check_category(snap: MixtureSnapshot, j: int) -> None:
    if not 1 <= j <= snap.cutoffs.C:
        raise ValueError(f"category must be in 1..{snap.cutoffs.C}")


def _require_age(snap: MixtureSnapshot) -> None:
    if not snap.layout.has_age:
        raise DomainError("the model has no age coordinate")


# ---------------------------------------------------------------------------
# ordinal probability curves
# ---------------------------------------------------------------------------


def category_probs_given_length(snap: MixtureSnapshot, x, age=None) -> np.ndarray:
    """Pr(Y = j | X = x; G_t) for all j, shape (P, C).

    By default age is marginalized inside each component; passing ``age``
    profiles at that fixed continuous age instead.
    """
    x = _points(x)
    L = snap.layout
    if age is None:
        return _category_probs(*_condition(snap, L.z, [L.x], x[:, None]), snap.cutoffs)
    _require_age(snap)
    w = np.log(_check_age(age))
    vals = np.column_stack(np.broadcast_arrays(w, x))
    return _category_probs(*_condition(snap, L.z, [L.w, L.x], vals), snap.cutoffs)


def ordinal_prob_given_length(snap: MixtureSnapshot, j: int, x, age=None) -> np.ndarray:
    _check_category(snap, j)
    return category_probs_given_length(snap, x, age)[:, j - 1]


def category_probs_given_age(snap: MixtureSnapshot, u_star) -> np.ndarray:
    _require_age(snap)
    w = np.log(_check_age(u_star))
    return _category_probs(*_condition(snap, snap.layout.z, [snap.layout.w], w[:, None]), snap.cutoffs)


def ordinal_prob_given_age(snap: MixtureSnapshot, j: int, u_star) -> np.ndarray:
    _check_category(snap, j)
    return category_probs_given_age(snap, u_star)[:, j - 1]


def category_probs_given_age_length(snap: MixtureSnapshot, w, x) -> np.ndarray:
    """Pr(Y = j | W = w, X = x; G_t), with ``w`` on the log-age scale."""
    _require_age(snap)
    vals = np.column_stack(np.broadcast_arrays(_points(w), _points(x)))
    L = snap.layout
    return _category_probs(*_condition(snap, L.z, [L.w, L.x], vals), snap.cutoffs)


def expected_category(snap: MixtureSnapshot, w, x) -> np.ndarray:
    """E(Y | W = w, X = x; G_t) = sum_j j Pr(Y = j | w, x)."""
    probs = category_probs_given_age_length(snap, w, x)
    return probs @ np.arange(1, snap.cutoffs.C + 1)


def category_mass(snap: MixtureSnapshot) -> np.ndarray:
    """Pr(Y = j; G_t) for every category."""
    z = snap.layout.z
    sd = np.sqrt(snap.covs[:, z, z])
    cdf = ndtr((snap.cutoffs.array[None, :] - snap.means[:, z, None]) / sd[:, None])
    return snap.weights @ np.diff(cdf, axis=1)


# ---------------------------------------------------------------------------
# densities and growth curves
# ---------------------------------------------------------------------------


def _normal_mixture_1d(snap: MixtureSnapshot, coord: int, v: np.ndarray) -> np.ndarray:
    mu = snap.means[:, coord]
    var = snap.covs[:, coord, coord]
    logk = -0.5 * ((v[:, None] - mu) ** 2 / var + np.log(var) + LOG_2PI)
    return np.exp(logk + snap.log_weights).sum(axis=1)


def marginal_density(snap: MixtureSnapshot, coordinate: str, points) -> np.ndarray:
    """Density of length (``"length"``) or continuous age (``"age"``).

    The age density is on the u* scale: f_W(log u*) / u*.
    """
    pts = _points(points)
    if coordinate == "length":
        return _normal_mixture_1d(snap, snap.layout.x, pts)
    if coordinate == "age":
        _require_age(snap)
        u = _check_age(pts)
        return _normal_mixture_1d(snap, snap.layout.w, np.log(u)) / u
    raise ValueError("coordinate must be 'length' or 'age'")


def _joint_wx_components(snap: MixtureSnapshot, w, x) -> np.ndarray:
    """log p_l + log N2((w, x); mu_l, Sigma_l) per point and component, shape (P, N)."""
    L = snap.layout
    idx = np.array([L.w, L.x])
    S = snap.covs[:, idx[:, None], idx[None, :]]
    resid = np.stack(np.broadcast_arrays(w, x), axis=-1)[:, None, :] - snap.means[None, :, idx]
    sol = np.einsum("lij,plj->pli", np.linalg.inv(S), resid)
    quad = np.einsum("pli,pli->pl", resid, sol)
    logdet = np.linalg.slogdet(S)[1]
    return snap.log_weights + (-0.5 * (quad + logdet + 2 * LOG_2PI))


def joint_age_length_density(snap: MixtureSnapshot, u_star, x) -> np.ndarray:
    """f(u*, x; G_t), broadcasting ``u_star`` against ``x``."""
    _require_age(snap)
    u, x = np.broadcast_arrays(_check_age(u_star), _points(x))
    logc = _joint_wx_components(snap, np.log(u), x)
    return np.exp(logsumexp(logc, axis=1)) / u


def growth_curve(snap: MixtureSnapshot, u_star) -> np.ndarray:
    """E(X | U* = u*; G_t)."""
    _require_age(snap)
    w = np.log(_check_age(u_star))
    logw, cmean, _ = _condition(snap, snap.layout.x, [snap.layout.w], w[:, None])
    return np.einsum("pl,pl->p", np.exp(logw), cmean)


def inverse_density(snap: MixtureSnapshot, j: int, u_star, x) -> np.ndarray:
    """f(u*, x | Y = j; G_t)."""
    _require_age(snap)
    _check_category(snap, j)
    mass = category_mass(snap)[j - 1]
    if mass < 1e-12:
        raise ZeroCategoryMass(f"Pr(Y={j}) = {mass:.3g} is numerically zero")
    u, x = np.broadcast_arrays(_check_age(u_star), _points(x))
    w = np.log(u)
    L = snap.layout
    logc = _joint_wx_components(snap, w, x)
    _, cmean, csd = _condition(snap, L.z, [L.w, L.x], np.column_stack([w, x]))
    lo, hi = snap.cutoffs.array[j - 1], snap.cutoffs.array[j]
    band = ndtr((hi - cmean) / csd) - ndtr((lo - cmean) / csd)
    return (np.exp(logc) * band).sum(axis=1) / u / mass


# ---------------------------------------------------------------------------
# thresholds and summaries
# ---------------------------------------------------------------------------


@dataclass
class ThresholdSample:
    values: np.ndarray
    n_excluded: int
    grid_step: float


def maturity_threshold(snapshots, predictor: str = "age", level: float = 0.9, floor: float = 2.0,
                       grid=None) -> ThresholdSample:
    """Per draw, the first grid value where Pr(Y > 1 | predictor) exceeds ``level``.

    For age the search starts at ``floor`` years.  Draws whose curve never
    exceeds the level are left out and counted in ``n_excluded``.
    """
    if predictor == "age":
        grid = AGE_GRID if grid is None else np.asarray(grid, dtype=np.float64)
        grid = grid[grid >= floor]
        curve = lambda s: 1.0 - ordinal_prob_given_age(s, 1, grid)  # noqa: E731
    elif predictor == "length":
        grid = LENGTH_GRID if grid is None else np.asarray(grid, dtype=np.float64)
        curve = lambda s: 1.0 - ordinal_prob_given_length(s, 1, grid)  # noqa: E731
    else:
        raise ValueError("predictor must be 'age' or 'length'")
    if grid.size == 0:
        raise ValueError("empty threshold grid")
    values, excluded = [], 0
    for s in snapshots:
        above = np.flatnonzero(curve(s) > level)
        if above.size:
            values.append(grid[above[0]])
        else:
            excluded += 1
    step = float(np.max(np.diff(grid))) if grid.size > 1 else 0.0
    return ThresholdSample(np.asarray(values), excluded, step)


@dataclass
class GridEstimate:
    t: int
    grid: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_draws: int
    grid2: np.ndarray | None = None

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def summarize(values, grid, t: int = 0, quantiles=(0.025, 0.975), grid2=None) -> GridEstimate:
    """Pointwise posterior mean and empirical quantiles across draws (axis 0)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < 2:
        raise ValueError("at least two draws are needed")
    lo, hi = np.quantile(values, quantiles, axis=0)
    return GridEstimate(t, np.asarray(grid), values.mean(axis=0), lo, hi, values.shape[0],
                        None if grid2 is None else np.asarray(grid2))


def evaluate_over_draws(snapshots, fn) -> np.ndarray:
    """Stack ``fn(snapshot)`` over draws, shape (n_draws, ...)."""
    return np.stack([np.asarray(fn(s)) for s in snapshots])


def write_grid_csv(estimates, path, meta: dict | None = None) -> None:
    """Columns ``t, grid_value[, grid_value2], mean, lo, hi, n_draws``.

    ``meta`` entries are written first as ``# key=value`` comment lines.
    """
    estimates = list(estimates)
    two_d = any(e.grid2 is not None for e in estimates)
    with open(Path(path), "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        out = csv.writer(fh)
        head = ["t", "grid_value"] + (["grid_value2"] if two_d else []) + ["mean", "lo", "hi", "n_draws"]
        out.writerow(head)
        for e in estimates:
            cols = [e.grid.ravel()] + ([e.grid2.ravel()] if two_d else [])
            for i, row in enumerate(zip(*cols, e.mean.ravel(), e.lower.ravel(), e.upper.ravel())):
                out.writerow([e.t, *(repr(float(v)) for v in row), e.n_draws])
