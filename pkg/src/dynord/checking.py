"""Model checking: posterior predictive replicates, test quantities,
cross-validation residuals, and a joint-distribution harness for the
sampler's full conditionals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .draws import PosteriorDraw
from .inference import expected_category
from .model import Dataset, HyperConfig, Layout, default_cutoffs
from .sampler import ChainConfig, Sampler
from .synth import sample_mixture_records


class EmptySubset(ValueError):
    """No record in the year qualifies for the statistic's subset."""


class InsufficientData(ValueError):
    pass


# ---------------------------------------------------------------------------
# replicates
# ---------------------------------------------------------------------------


def replicate(draw: PosteriorDraw, dataset: Dataset, hyper: HyperConfig, rng: np.random.Generator) -> Dataset:
    """Posterior predictive dataset with the same per-year sizes as ``dataset``."""
    return sample_mixture_records(draw.weights(), draw.mu, draw.Sigma, dataset.n_t, hyper.cutoffs,
                                  hyper.layout, rng, dataset.labels)[0]


# ---------------------------------------------------------------------------
# test quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestStatistic:
    """A per-year statistic: ``compute(year_dataset) -> (value, n_subset)``.

    ``compute`` raises :class:`EmptySubset` when the statistic is undefined.
    """

    __test__ = False  # not a pytest class

    name: str
    compute: Callable[[Dataset], tuple[float, int]]


def proportion_at_age(age: int = 6, level: int = 1) -> TestStatistic:
    """Fraction of fish of recorded age ``age`` at maturity ``level``."""
    def compute(ds: Dataset):
        sel = ds.u == age
        n = int(sel.sum())
        if n == 0:
            raise EmptySubset(f"no fish of age {age}")
        return float(np.mean(ds.y[sel] == level)), n

    return TestStatistic(f"prop_age{age}_level{level}", compute)


def proportion_old_long(min_age: int = 7, min_length: float = 400.0, level: int = 1) -> TestStatistic:
    """Fraction at ``level`` among fish with age >= ``min_age`` and length > ``min_length``."""
    def compute(ds: Dataset):
        sel = (ds.u >= min_age) & (ds.x[:, 0] > min_length)
        n = int(sel.sum())
        if n == 0:
            raise EmptySubset(f"no fish with age >= {min_age} and length > {min_length}")
        return float(np.mean(ds.y[sel] == level)), n

    return TestStatistic(f"prop_age{min_age}plus_len{min_length:g}_level{level}", compute)


def length_age_correlation(level: int = 2) -> TestStatistic:
    """Sample correlation of length and recorded age among fish at ``level``."""
    def compute(ds: Dataset):
        sel = ds.y == level
        n = int(sel.sum())
        if n < 2:
            raise EmptySubset(f"fewer than two fish at level {level}")
        a, x = ds.u[sel].astype(np.float64), ds.x[sel, 0]
        if a.std() == 0 or x.std() == 0:
            raise EmptySubset("correlation undefined for a constant variable")
        return float(np.corrcoef(a, x)[0, 1]), n

    return TestStatistic(f"corr_length_age_level{level}", compute)


BUILTIN_STATISTICS = {
    "prop_age": proportion_at_age,
    "prop_old_long": proportion_old_long,
    "corr_length_age": length_age_correlation,
}


def test_quantity(dataset: Dataset, stat: TestStatistic, t: int) -> tuple[float, int]:
    """Value of ``stat`` on 1-based year ``t`` of ``dataset``."""
    return stat.compute(dataset.year_slice(t))


test_quantity.__test__ = False


def two_sided_p(observed: float, replicated) -> float:
    """min(1, 2 min(P(T_rep >= T_obs), P(T_rep <= T_obs))) with the 1/(R+1) correction."""
    rep = np.asarray(replicated, dtype=np.float64)
    R = rep.size
    upper = (1 + np.sum(rep >= observed)) / (R + 1)
    lower = (1 + np.sum(rep <= observed)) / (R + 1)
    return float(min(1.0, 2.0 * min(upper, lower)))


@dataclass
class PPCRow:
    year: int
    statistic: str
    observed: float
    quantiles: np.ndarray  # 5, 25, 50, 75, 95 %
    p_two_sided: float
    n_subset: int
    n_replicates: int


PPC_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def ppc_summary(replicates, dataset: Dataset, stat: TestStatistic, years=None,
                min_replicates: int = 100) -> list[PPCRow]:
    """Compare the observed statistic per year with its replicate distribution.

    ``years`` defaults to every observed year.  A year whose observed subset
    is empty raises :class:`EmptySubset`; replicates with an empty subset are
    left out of that year's distribution.
    """
    replicates = list(replicates)
    if len(replicates) < min_replicates:
        raise ValueError(f"need at least {min_replicates} replicates")
    years = dataset.observed_years if years is None else list(years)
    rows = []
    for t in years:
        obs, n_sub = test_quantity(dataset, stat, t)
        vals = []
        for rep in replicates:
            try:
                vals.append(test_quantity(rep, stat, t)[0])
            except EmptySubset:
                continue
        vals = np.asarray(vals)
        q = np.quantile(vals, PPC_QUANTILES) if vals.size else np.full(len(PPC_QUANTILES), np.nan)
        p = two_sided_p(obs, vals) if vals.size else math.nan
        rows.append(PPCRow(t, stat.name, obs, q, p, n_sub, int(vals.size)))
    return rows


def write_ppc_csv(rows, path, meta: dict | None = None) -> None:
    with open(Path(path), "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        out = csv.writer(fh)
        out.writerow(["year", "statistic", "observed", "q05", "q25", "q50", "q75", "q95",
                      "p_two_sided", "n_subset"])
        for r in rows:
            out.writerow([r.year, r.statistic, repr(r.observed), *(repr(float(v)) for v in r.quantiles),
                          repr(r.p_two_sided), r.n_subset])


# ---------------------------------------------------------------------------
# cross-validation residuals
# ---------------------------------------------------------------------------


def holdout_mask(dataset: Dataset, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of held-out rows: ``round(fraction * n_t)`` per year."""
    if not 0 < fraction < 1:
        raise ValueError("holdout fraction must be in (0, 1)")
    mask = np.zeros(dataset.n, dtype=bool)
    for t in range(dataset.T):
        idx = np.flatnonzero(dataset.year == t)
        if idx.size == 0:
            continue
        k = int(round(fraction * idx.size))
        if idx.size - k < 1:
            raise InsufficientData(f"year {t + 1} would keep no training record")
        mask[rng.choice(idx, size=k, replace=False)] = True
    return mask


@dataclass
class CVResidual:
    year: int
    y: int
    u: int
    x: float
    expected: float

    @property
    def residual(self) -> float:
        return self.y - self.expected


def cv_residuals(dataset: Dataset, fit: Callable[[Dataset], tuple[HyperConfig, list]],
                 rng: np.random.Generator, holdout_fraction: float = 0.2) -> list[CVResidual]:
    """Refit without a stratified holdout and score each held-out record.

    ``fit(train)`` returns ``(hyper, draws)``.  The expectation
    E(Y | W = log(u + 0.5), X = x; G_t) is averaged over the draws; the
    recorded age is placed at the middle of its one-year interval.
    """
    if not dataset.layout.has_age:
        raise ValueError("cross-validation residuals need recorded ages")
    mask = holdout_mask(dataset, holdout_fraction, rng)
    hyper, draws = fit(dataset.subset(~mask))
    if not draws:
        raise InsufficientData("the refit produced no draws")
    test = dataset.subset(mask)
    w = np.log(test.u + 0.5)
    expected = np.zeros(test.n)
    for t in np.unique(test.year):
        rows = test.year == t
        acc = np.zeros(int(rows.sum()))
        for d in draws:
            acc += expected_category(d.snapshot(int(t) + 1, hyper), w[rows], test.x[rows, 0])
        expected[rows] = acc / len(draws)
    return [CVResidual(int(t) + 1, int(y), int(u), float(x), float(e))
            for t, y, u, x, e in zip(test.year, test.y, test.u, test.x[:, 0], expected)]


# ---------------------------------------------------------------------------
# joint-distribution test of the sampler
# ---------------------------------------------------------------------------


MONITORED = ("zeta1", "eta12", "alpha", "phi", "mu111", "Sigma1_11", "m1", "theta1")


def monitored_scalars(state) -> np.ndarray:
    return np.array([
        state.zeta[0], state.eta[0, 1], state.alpha, state.phi, state.mu[0, 0, 0],
        state.Sigma[0, 0, 0], state.m[0], state.theta[0],
    ])


def toy_hyperconfig() -> HyperConfig:
    """d=2 (latent ordinal + one continuous), C=3, N=3.

    Degrees of freedom and the alpha prior are large enough that the
    monitored second moments have finite variance.
    """
    d = 2
    eye = np.eye(d)
    return HyperConfig(
        a_m=np.zeros(d), B_m=0.5 * eye, a_V=12.0, B_V=0.5 * 9 * eye, a_D=12.0, B_D=0.5 / 12 * eye,
        nu=12.0, m0=np.zeros(d), V0=eye, N=3, cutoffs=default_cutoffs(3),
        a_alpha=6.0, b_alpha=5.0, layout=Layout(has_age=False, n_continuous=1),
    )


@dataclass
class GewekeRow:
    name: str
    moment: int
    mc_mean: float
    mc_se: float
    sc_mean: float
    sc_se: float

    @property
    def z(self) -> float:
        return (self.sc_mean - self.mc_mean) / math.hypot(self.mc_se, self.sc_se)


@dataclass
class GewekeResult:
    rows: list[GewekeRow] = field(default_factory=list)

    @property
    def max_abs_z(self) -> float:
        return max(abs(r.z) for r in self.rows)

    def passed(self, limit: float = 3.0) -> bool:
        return self.max_abs_z < limit


def _batch_means_se(x: np.ndarray, n_batches: int = 50) -> np.ndarray:
    n = x.shape[0] // n_batches * n_batches
    b = x[:n].reshape(n_batches, -1, *x.shape[1:]).mean(axis=1)
    return b.std(axis=0, ddof=1) / math.sqrt(n_batches)


def geweke_harness(iterations: int = 100_000, seed: int = 0, hyper: HyperConfig | None = None,
                   T: int = 3, n_per_year: int = 5, sampler_cls: type = Sampler,
                   burn_in: int = 1000) -> GewekeResult:
    """Compare prior draws with a transition-plus-resimulation chain.

    The marginal-conditional simulator draws parameters from the prior
    (independent draws, i.i.d. standard errors).  The successive-conditional
    simulator alternates one sweep with a fresh dataset drawn given the
    current parameters (batch-means standard errors).  Both see the same
    first and second moments of the monitored scalars if every full
    conditional is right.
    """
    from .rng import stream

    hyper = toy_hyperconfig() if hyper is None else hyper
    n_t = np.full(T, n_per_year)
    empty = Dataset.empty(T, hyper.C, hyper.layout)
    cfg = ChainConfig(iterations=iterations + burn_in, burn_in=burn_in, seed=seed)

    mc_rng = stream(seed, "geweke", 0)
    prior_sampler = Sampler(empty, hyper, cfg)
    mc = np.array([monitored_scalars(prior_sampler.sample_prior(mc_rng)) for _ in range(iterations)])

    sc_rng = stream(seed, "geweke", 1)
    sampler = sampler_cls(empty, hyper, cfg)
    state = sampler.sample_prior(sc_rng)
    sampler.simulate_data(state, n_t)
    sc = np.empty((iterations, len(MONITORED)))
    for i in range(burn_in + iterations):
        sampler.sweep(state)
        sampler.simulate_data(state, n_t)
        if i >= burn_in:
            sc[i - burn_in] = monitored_scalars(state)

    result = GewekeResult()
    for moment, f in ((1, lambda v: v), (2, np.square)):
        a, b = f(mc), f(sc)
        mc_se = a.std(axis=0, ddof=1) / math.sqrt(a.shape[0])
        sc_se = _batch_means_se(b)
        for k, name in enumerate(MONITORED):
            result.rows.append(GewekeRow(name, moment, float(a[:, k].mean()), float(mc_se[k]),
                                         float(b[:, k].mean()), float(sc_se[k])))
    return result


def write_geweke_csv(result: GewekeResult, path, meta: dict | None = None) -> None:
    with open(Path(path), "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        out = csv.writer(fh)
        out.writerow(["parameter", "moment", "mc_mean", "mc_se", "sc_mean", "sc_se", "z"])
        for r in result.rows:
            out.writerow([r.name, r.moment, repr(r.mc_mean), repr(r.mc_se), repr(r.sc_mean),
                          repr(r.sc_se), repr(r.z)])
