"""Synthetic datasets with a known mixture truth, for validation runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Cutoffs, Dataset, Layout, default_cutoffs, discretize_age


@dataclass
class MixtureTruth:
    """Finite normal mixture whose weights and means vary by year."""

    weights: np.ndarray  # (K, T)
    means: np.ndarray  # (K, T, d)
    covs: np.ndarray  # (K, d, d)
    cutoffs: Cutoffs
    layout: Layout = Layout()

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if not np.allclose(self.weights.sum(axis=0), 1.0):
            raise ValueError("weights must sum to one in every year")
        if self.means.shape[:2] != self.weights.shape or self.means.shape[2] != self.layout.d:
            raise ValueError("means have the wrong shape")

    @property
    def T(self) -> int:
        return self.weights.shape[1]

    def snapshot(self, t: int):
        """True mixture at 1-based year ``t``."""
        from .inference import MixtureSnapshot

        return MixtureSnapshot(t=t, weights=self.weights[:, t - 1], means=self.means[:, t - 1],
                               covs=self.covs, cutoffs=self.cutoffs, layout=self.layout)


def default_truth(T: int = 5, C: int = 3) -> MixtureTruth:
    """Two age/length clusters (young-immature, older-mature) whose balance
    shifts toward the older cluster over time."""
    cut = default_cutoffs(C)
    shift = np.linspace(0.0, 1.0, T)
    w_old = 0.35 + 0.3 * shift
    weights = np.vstack([1.0 - w_old, w_old])
    young = np.array([-1.0, np.log(3.0), 250.0])
    old = np.array([0.8, np.log(7.0), 400.0])
    means = np.empty((2, T, 3))
    means[0] = young + np.outer(shift, [0.1, 0.0, 10.0])
    means[1] = old + np.outer(shift, [0.2, 0.05, 15.0])

    def cov(sd, corr_zw, corr_zx, corr_wx):
        r = np.array([[1.0, corr_zw, corr_zx], [corr_zw, 1.0, corr_wx], [corr_zx, corr_wx, 1.0]])
        return np.outer(sd, sd) * r

    covs = np.stack([
        cov(np.array([0.7, 0.3, 40.0]), 0.3, 0.4, 0.8),
        cov(np.array([0.8, 0.25, 50.0]), 0.3, 0.4, 0.7),
    ])
    return MixtureTruth(weights, means, covs, cut)


def sample_mixture_records(weights, means, covs, n_t, cutoffs: Cutoffs, layout: Layout,
                           rng: np.random.Generator, labels=()):
    """Labels, latent vectors and the discretized dataset for ``n_t[t]`` draws per year.

    Returns ``(dataset, ystar, components)``; rows are ordered by year.
    """
    n_t = np.asarray(n_t, dtype=np.int64)
    T = weights.shape[1]
    if n_t.shape != (T,):
        raise ValueError("n_t must have one entry per year")
    year = np.repeat(np.arange(T), n_t)
    n = year.size
    cum = np.cumsum(weights, axis=0)[:, year]
    u = rng.random(n) * cum[-1] if n else np.zeros(0)
    comp = np.minimum((cum < u).sum(axis=0), weights.shape[0] - 1)
    chol = np.linalg.cholesky(covs)
    eps = rng.standard_normal((n, layout.d))
    ystar = means[comp, year] + np.einsum("nij,nj->ni", chol[comp], eps)
    y = cutoffs.discretize(ystar[:, 0])
    nlat = len(layout.latent)
    ages = discretize_age(ystar[:, 1]) if layout.has_age else None
    ds = Dataset(T, cutoffs.C, year, y, ystar[:, nlat:], ages, labels)
    return ds, ystar, comp


def synth_generate(truth: MixtureTruth, n_t, rng: np.random.Generator, labels=()) -> Dataset:
    """Draw ``n_t[t]`` records in each year; a zero count leaves the year missing."""
    return sample_mixture_records(truth.weights, truth.means, truth.covs, n_t, truth.cutoffs,
                                  truth.layout, rng, labels)[0]
