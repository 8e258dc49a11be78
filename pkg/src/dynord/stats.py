"""Dense small-dimension linear algebra and exact sampling primitives.

Everything here is a pure function of its inputs and an explicitly passed
``numpy.random.Generator``.  Dimensions are tiny (d <= 4 in practice), so
plain LAPACK calls through numpy are used throughout.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, ndtr, ndtri

LOG_TINY_MASS = math.log(1e-300)
# standardized lower bound beyond which the tail rejection sampler is used
TAIL_SWITCH = 4.0


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a covariance-like matrix fails Cholesky factorization."""


class NumericalUnderflow(ArithmeticError):
    """Raised when a truncation region carries (numerically) no mass."""


class InvalidDof(ValueError):
    """Raised for Wishart degrees of freedom not exceeding d - 1."""


@dataclass(frozen=True)
class Interval:
    """Half-open interval ``(lower, upper]``; either end may be infinite."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"empty interval ({self.lower}, {self.upper}]")

    def __contains__(self, value) -> bool:
        return self.lower < value <= self.upper


def _as_sym(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    return m


def cholesky(m) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric positive-definite matrix."""
    m = _as_sym(m)
    if m.shape[-1] != m.shape[-2]:
        raise ValueError("matrix must be square")
    absm = np.abs(m)
    scale = max(1.0, float(absm.max()))
    if float(np.abs(m - np.swapaxes(m, -1, -2)).max()) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def sym_inv(m) -> np.ndarray:
    """Inverse of an SPD matrix via its Cholesky factor (result symmetrized)."""
    chol = cholesky(m)
    inv_chol = np.linalg.inv(chol)
    out = inv_chol.T @ inv_chol
    return 0.5 * (out + out.T)


def mvn_sample(mean, cov, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from N(mean, cov). ``size`` adds leading sample dimensions."""
    mean = np.asarray(mean, dtype=np.float64)
    chol = cholesky(cov)
    shape = (mean.shape[-1],) if size is None else tuple(np.atleast_1d(size)) + (mean.shape[-1],)
    eps = rng.standard_normal(shape)
    return mean + eps @ chol.T


def mvn_sample_precision(linear, precision, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(P^{-1} h, P^{-1}) given the precision ``P`` and ``h``.

    This is the natural output of every conjugate Gaussian update and
    avoids forming the covariance explicitly.
    """
    chol = cholesky(precision)
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, linear))
    eps = rng.standard_normal(mean.shape[0])
    return mean + np.linalg.solve(chol.T, eps)


def mvn_logpdf(x, mean, cov) -> np.ndarray:
    """Log density of N(mean, cov) at the rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    chol = cholesky(cov)
    d = chol.shape[0]
    resid = np.atleast_2d(x - mean)
    sol = np.linalg.solve(chol, resid.T)
    quad = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (quad + logdet + d * math.log(2.0 * math.pi))
    return out if x.ndim > 1 else out[0]


def mvn_condition(mean, cov, observed_indices, observed_values):
    """Gaussian conditional of the free coordinates given observed ones.

    Returns ``(cond_mean, cond_cov)`` for the coordinates not listed in
    ``observed_indices`` (in their original order).  ``observed_values``
    may carry leading batch dimensions; ``cond_cov`` never depends on them.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = _as_sym(cov)
    d = mean.shape[-1]
    obs = np.atleast_1d(np.asarray(observed_indices, dtype=int))
    if obs.size and (obs.min() < 0 or obs.max() >= d or len(set(obs.tolist())) != obs.size):
        raise IndexError("invalid observed indices")
    free = np.array([i for i in range(d) if i not in set(obs.tolist())], dtype=int)
    values = np.asarray(observed_values, dtype=np.float64)
    if obs.size == 0:
        return mean[free], cov[np.ix_(free, free)]
    s_ff = cov[np.ix_(free, free)]
    s_fo = cov[np.ix_(free, obs)]
    s_oo = cov[np.ix_(obs, obs)]
    chol = cholesky(s_oo)
    # gain = s_fo s_oo^{-1}
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, s_fo.T)).T
    resid = values - mean[obs]
    cond_mean = mean[free] + resid @ gain.T
    cond_cov = s_ff - gain @ s_fo.T
    return cond_mean, 0.5 * (cond_cov + cond_cov.T)


# ---------------------------------------------------------------------------
# truncated normals
# ---------------------------------------------------------------------------


def _log_interval_mass(a, b):
    """log(Phi(b) - Phi(a)) for standardized bounds, stable in both tails."""
    # mirror so the interval is never entirely in the upper tail
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lb = log_ndtr(hi)
    la = log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = la - lb
        out = lb + np.log(-np.expm1(diff))
    return np.where(np.isfinite(lb), out, -np.inf)


def _tail_sample(a, b, rng):
    """Standard normal restricted to (a, b] with a >= TAIL_SWITCH, vectorized.

    Exponential proposals with the optimal rate (Robert, 1995) for wide
    intervals, uniform proposals for intervals narrow relative to 1/a.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty_like(a)
    pending = np.arange(a.size)
    narrow = (b - a) < 0.5 / a
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    while pending.size:
        ap, bp, lp, nr = a[pending], b[pending], lam[pending], narrow[pending]
        expo = ap + rng.standard_exponential(pending.size) / lp
        with np.errstate(invalid="ignore"):
            unif = ap + (bp - ap) * rng.random(pending.size)
            cand = np.where(nr, unif, expo)
            log_acc = np.where(nr, 0.5 * (ap * ap - cand * cand), -0.5 * (cand - lp) ** 2)
        accept = (np.log(rng.random(pending.size)) <= log_acc) & (cand <= bp)
        out[pending[accept]] = cand[accept]
        pending = pending[~accept]
    return out


def sample_truncated_normal(mean, sd, lower, upper, rng: np.random.Generator,
                            check_mass: bool = True) -> np.ndarray:
    """Vectorized draw from N(mean, sd^2) restricted to (lower, upper].

    Inverse CDF in the body; exponential/uniform rejection when the whole
    interval lies beyond ``TAIL_SWITCH`` standard deviations.  The rejection
    branch never evaluates the interval mass, so ``check_mass=False`` lets
    callers sample intervals whose mass underflows.
    """
    mean, sd, lower, upper = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (mean, sd, lower, upper))
    )
    shape = mean.shape
    mean, sd, lower, upper = (v.ravel() for v in (mean, sd, lower, upper))
    if np.any(sd <= 0):
        raise ValueError("standard deviation must be positive")
    if np.any(~(lower < upper)):
        raise ValueError("empty truncation interval")
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    if check_mass and np.any(_log_interval_mass(a, b) < LOG_TINY_MASS):
        raise NumericalUnderflow("truncation interval mass below 1e-300")
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    std = np.empty_like(lo)
    tail = hi < -TAIL_SWITCH
    body = ~tail
    if np.any(body):
        pa = ndtr(lo[body])
        pb = ndtr(hi[body])
        u = rng.random(int(body.sum()))
        draw = ndtri(pa + u * (pb - pa))
        # guard the rounding at the interval ends
        std[body] = np.clip(draw, lo[body], hi[body])
    if np.any(tail):
        std[tail] = -_tail_sample(-hi[tail], -lo[tail], rng)
    std = np.where(flip, -std, std)
    out = mean + sd * std
    out = np.minimum(np.maximum(out, np.nextafter(lower, np.inf)), upper)
    return out.reshape(shape)


def truncnorm_sample(mean: float, var: float, interval: Interval, rng: np.random.Generator) -> float:
    """Scalar draw from N(mean, var) restricted to ``interval``."""
    if var <= 0:
        raise ValueError("variance must be positive")
    return float(
        sample_truncated_normal(mean, math.sqrt(var), interval.lower, interval.upper, rng)[()]
    )


def sample_two_interval_normal(mean, sd, threshold, rng: np.random.Generator) -> np.ndarray:
    """Vectorized N(mean, sd^2) restricted to (-inf, -threshold) U (threshold, inf).

    The side is chosen with probability proportional to the normal mass of
    each piece, ``1 - F(threshold)`` against ``F(-threshold)``; a zero
    threshold gives an unrestricted draw.
    """
    mean, sd, threshold = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (mean, sd, threshold))
    )
    shape = mean.shape
    mean, sd, threshold = (v.ravel() for v in (mean, sd, threshold))
    if np.any(sd <= 0):
        raise ValueError("standard deviation must be positive")
    if np.any(threshold < 0):
        raise ValueError("threshold must be nonnegative")
    log_up = log_ndtr((mean - threshold) / sd)
    log_down = log_ndtr((-threshold - mean) / sd)
    # log_ndtr stays finite far into the tails and the tail sampler never
    # needs the mass itself, so only a nonfinite pair is a real failure
    if np.any(~np.isfinite(np.maximum(log_up, log_down))):
        raise NumericalUnderflow("both tail masses vanish")
    p_up = expit(log_up - log_down)
    up = rng.random(mean.size) < p_up
    lower = np.where(up, threshold, -np.inf)
    upper = np.where(up, np.inf, -threshold)
    return sample_truncated_normal(mean, sd, lower, upper, rng, check_mass=False).reshape(shape)


def two_interval_normal_sample(mean: float, var: float, threshold: float, rng: np.random.Generator) -> float:
    """Scalar draw from N(mean, var) outside [-threshold, threshold]."""
    if var <= 0:
        raise ValueError("variance must be positive")
    return float(sample_two_interval_normal(mean, math.sqrt(var), threshold, rng)[()])


# ---------------------------------------------------------------------------
# Wishart family
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _strict_lower(d: int):
    return np.tril_indices(d, -1)


def _bartlett_factor(dof: float, d: int, rng: np.random.Generator) -> np.ndarray:
    a = np.zeros((d, d))
    idx = np.arange(d)
    a[idx, idx] = np.sqrt(rng.chisquare(dof - idx))
    rows, cols = _strict_lower(d)
    a[rows, cols] = rng.standard_normal(rows.size)
    return a


def wishart_sample(dof: float, scale, rng: np.random.Generator) -> np.ndarray:
    """W(dof, scale) draw (mean ``dof * scale``) by Bartlett decomposition."""
    scale = _as_sym(scale)
    d = scale.shape[0]
    if not dof > d - 1:
        raise InvalidDof(f"Wishart dof {dof} must exceed {d - 1}")
    f = cholesky(scale) @ _bartlett_factor(dof, d, rng)
    out = f @ f.T
    return 0.5 * (out + out.T)


def invwishart_sample(dof: float, scale, rng: np.random.Generator) -> np.ndarray:
    """IW(dof, scale) draw (mean ``scale / (dof - d - 1)``).

    Draws W ~ W(dof, scale^{-1}) and returns W^{-1}, inverting only the
    triangular Bartlett factor.
    """
    scale = _as_sym(scale)
    d = scale.shape[0]
    if not dof > d - 1:
        raise InvalidDof(f"inverse Wishart dof {dof} must exceed {d - 1}")
    # scale^{-1} = (L^{-T})(L^{-1}); factor of W is L^{-T} A
    chol = cholesky(scale)
    a = _bartlett_factor(dof, d, rng)
    # W^{-1} = L A^{-T} A^{-1} L^T
    g = chol @ np.linalg.inv(a).T
    out = g @ g.T
    return 0.5 * (out + out.T)


def invwishart_sample_many(dofs, scales, rng: np.random.Generator) -> np.ndarray:
    """Independent IW(dofs[k], scales[k]) draws, batched over the leading axis."""
    scales = np.asarray(scales, dtype=np.float64)
    dofs = np.asarray(dofs, dtype=np.float64)
    K, d, _ = scales.shape
    if np.any(dofs <= d - 1):
        raise InvalidDof(f"inverse Wishart dof must exceed {d - 1}")
    try:
        chol = np.linalg.cholesky(scales)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    a = np.zeros((K, d, d))
    idx = np.arange(d)
    a[:, idx, idx] = np.sqrt(rng.chisquare(dofs[:, None] - idx[None, :]))
    rows, cols = _strict_lower(d)
    a[:, rows, cols] = rng.standard_normal((K, rows.size))
    g = chol @ np.swapaxes(np.linalg.inv(a), -1, -2)
    out = g @ np.swapaxes(g, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))
