import math

import numpy as np
import pytest
from scipy import integrate
from scipy import stats as sps

from dynord.inference import (
    DomainError,
    MixtureSnapshot,
    ZeroCategoryMass,
    category_mass,
    category_probs_given_age,
    category_probs_given_length,
    expected_category,
    growth_curve,
    inverse_density,
    joint_age_length_density,
    marginal_density,
    maturity_threshold,
    ordinal_prob_given_age,
    ordinal_prob_given_length,
    summarize,
    write_grid_csv,
)
from dynord.model import Cutoffs
from dynord.stats import mvn_condition

CUT = Cutoffs((-math.inf, -0.5, 0.5, math.inf))


def single(mean, cov):
    return MixtureSnapshot(1, np.array([1.0]), np.array([mean]), np.array([cov]), CUT)


def quad_prob_given(snap, j, cond_index, value):
    """Brute-force Pr(Y=j | coordinate = value) by integrating the mixture over z."""
    lo, hi = CUT.array[j - 1], CUT.array[j]
    lo, hi = max(lo, -15.0), min(hi, 15.0)

    def joint(z):
        tot = 0.0
        for p, m, S in zip(snap.weights, snap.means, snap.covs):
            idx = [0, cond_index]
            tot += p * sps.multivariate_normal(m[idx], S[np.ix_(idx, idx)]).pdf([z, value])
        return tot

    num = integrate.quad(joint, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    den = integrate.quad(joint, -15.0, 15.0, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return num / den


class TestOrdinalCurves:
    def test_single_diagonal_component_constant(self):
        s = single([0.3, 1.5, 300.0], np.diag([0.8, 0.1, 900.0]))
        p = ordinal_prob_given_length(s, 2, np.array([200.0, 300.0, 500.0]))
        sd = math.sqrt(0.8)
        ref = sps.norm.cdf((0.5 - 0.3) / sd) - sps.norm.cdf((-0.5 - 0.3) / sd)
        np.testing.assert_allclose(p, ref, rtol=1e-12)
        np.testing.assert_allclose(ordinal_prob_given_age(s, 2, [1.0, 5.0]), ref, rtol=1e-12)

    @pytest.mark.parametrize("x", [220.0, 330.0, 460.0])
    @pytest.mark.parametrize("j", [1, 2, 3])
    def test_length_quadrature_oracle(self, snap2, j, x):
        assert ordinal_prob_given_length(snap2, j, x)[0] == pytest.approx(quad_prob_given(snap2, j, 2, x), abs=1e-6)

    @pytest.mark.parametrize("u", [1.5, 4.0, 9.0])
    def test_age_quadrature_oracle(self, snap2, u):
        for j in (1, 2, 3):
            assert ordinal_prob_given_age(snap2, j, u)[0] == pytest.approx(
                quad_prob_given(snap2, j, 1, math.log(u)), abs=1e-6)

    def test_normalization(self, snap2, rng):
        x = rng.uniform(100, 600, 100)
        np.testing.assert_allclose(category_probs_given_length(snap2, x).sum(1), 1.0, atol=1e-12)
        u = rng.uniform(0.2, 20, 100)
        np.testing.assert_allclose(category_probs_given_age(snap2, u).sum(1), 1.0, atol=1e-12)

    def test_complement(self, snap2):
        u = np.linspace(0.5, 15, 30)
        p1 = ordinal_prob_given_age(snap2, 1, u)
        above = category_probs_given_age(snap2, u)[:, 1:].sum(1)
        np.testing.assert_allclose(above, 1 - p1, atol=1e-15)

    def test_domain(self, snap2):
        with pytest.raises(DomainError):
            ordinal_prob_given_age(snap2, 1, 0.0)

    def test_profiled_option_differs(self, snap2):
        a = ordinal_prob_given_length(snap2, 1, 300.0)
        b = ordinal_prob_given_length(snap2, 1, 300.0, age=10.0)
        assert abs(a[0] - b[0]) > 1e-3

    def test_expected_category_range(self, snap2, rng):
        e = expected_category(snap2, rng.normal(1.5, 0.5, 50), rng.uniform(150, 550, 50))
        assert np.all((e >= 1) & (e <= 3))


class TestDensities:
    def test_single_length_density(self):
        s = single([0.0, 1.5, 300.0], np.diag([1.0, 0.1, 900.0]))
        x = np.array([250.0, 310.0])
        np.testing.assert_allclose(marginal_density(s, "length", x), sps.norm(300, 30).pdf(x), rtol=1e-12)

    def test_age_density_normalized(self, snap2):
        u = np.linspace(1e-4, 200.0, 400001)
        assert np.trapezoid(marginal_density(snap2, "age", u), u) == pytest.approx(1.0, abs=1e-3)

    def test_mixture_arithmetic(self, snap2):
        x = np.array([200.0, 350.0])
        ref = sum(p * sps.norm(m[2], math.sqrt(S[2, 2])).pdf(x)
                  for p, m, S in zip(snap2.weights, snap2.means, snap2.covs))
        np.testing.assert_allclose(marginal_density(snap2, "length", x), ref, rtol=1e-12)
        u = np.array([2.0, 6.0])
        ref_u = sum(p * sps.norm(m[1], math.sqrt(S[1, 1])).pdf(np.log(u)) / u
                    for p, m, S in zip(snap2.weights, snap2.means, snap2.covs))
        np.testing.assert_allclose(marginal_density(snap2, "age", u), ref_u, rtol=1e-12)

    def test_joint_arithmetic_and_normalization(self, snap2):
        u, x = np.array([3.0, 7.5]), np.array([270.0, 400.0])
        ref = sum(p * sps.multivariate_normal(m[1:], S[1:, 1:]).pdf(np.column_stack([np.log(u), x])) / u
                  for p, m, S in zip(snap2.weights, snap2.means, snap2.covs))
        np.testing.assert_allclose(joint_age_length_density(snap2, u, x), ref, rtol=1e-12)
        ug = np.linspace(0.05, 40, 800)
        xg = np.linspace(50, 700, 651)
        U, X = np.meshgrid(ug, xg, indexing="ij")
        f = joint_age_length_density(snap2, U.ravel(), X.ravel()).reshape(U.shape)
        total = np.trapezoid(np.trapezoid(f, xg, axis=1), ug)
        assert total == pytest.approx(1.0, abs=5e-3)


class TestGrowthCurve:
    def test_diagonal_constant(self):
        s = single([0.0, 1.5, 300.0], np.diag([1.0, 0.1, 900.0]))
        np.testing.assert_allclose(growth_curve(s, [1.0, 4.0, 12.0]), 300.0)

    def test_correlated_linear_in_log_age(self):
        cov = np.array([[1.0, 0.1, 5.0], [0.1, 0.1, 6.0], [5.0, 6.0, 900.0]])
        s = single([0.0, 1.5, 300.0], cov)
        u = np.array([2.0, 5.0])
        ref = 300.0 + cov[2, 1] / cov[1, 1] * (np.log(u) - 1.5)
        np.testing.assert_allclose(growth_curve(s, u), ref, rtol=1e-12)
        m, _ = mvn_condition(s.means[0], cov, [0, 1], np.array([[0.0, math.log(2.0)]]))
        assert m.shape[0] == 1

    def test_monte_carlo_conditional_mean(self, snap2, rng):
        n = 1_000_000
        comp = rng.random(n) < snap2.weights[1]
        draws = np.where(comp[:, None],
                         rng.multivariate_normal(snap2.means[1], snap2.covs[1], n),
                         rng.multivariate_normal(snap2.means[0], snap2.covs[0], n))
        u = np.exp(draws[:, 1])
        for target in (3.0, 6.0):
            keep = np.abs(u - target) < 0.05
            assert abs(draws[keep, 2].mean() - growth_curve(snap2, target)[0]) < 2.5


class TestInverseDensity:
    def test_bayes_identity(self, snap2, rng):
        u = rng.uniform(0.5, 15, 100)
        x = rng.uniform(150, 550, 100)
        mass = category_mass(snap2)
        forward = category_probs_given_age_length_ref(snap2, u, x)
        joint = joint_age_length_density(snap2, u, x)
        for j in (1, 2, 3):
            lhs = inverse_density(snap2, j, u, x) * mass[j - 1]
            np.testing.assert_allclose(lhs, forward[:, j - 1] * joint, rtol=1e-10, atol=1e-300)

    def test_normalization(self, snap2):
        ug = np.linspace(0.05, 40, 800)
        xg = np.linspace(50, 700, 651)
        U, X = np.meshgrid(ug, xg, indexing="ij")
        f = inverse_density(snap2, 2, U.ravel(), X.ravel()).reshape(U.shape)
        assert np.trapezoid(np.trapezoid(f, xg, axis=1), ug) == pytest.approx(1.0, abs=5e-3)

    def test_zero_mass(self):
        s = single([30.0, 1.5, 300.0], np.diag([1.0, 0.1, 900.0]))
        with pytest.raises(ZeroCategoryMass):
            inverse_density(s, 1, 2.0, 300.0)


def category_probs_given_age_length_ref(snap, u, x):
    from dynord.inference import category_probs_given_age_length

    return category_probs_given_age_length(snap, np.log(u), x)


class TestThresholds:
    def fixture(self, crossing):
        # single component: Pr(Y > 1 | u*) increases in u*; solve for the 0.9 crossing
        cov = np.array([[1.0, 0.6, 0.0], [0.6, 0.5, 0.0], [0.0, 0.0, 900.0]])
        beta = cov[0, 1] / cov[1, 1]
        sd = math.sqrt(cov[0, 0] - beta * cov[0, 1])
        # z | w has mean mu_z + beta (w - mu_w); choose mu_z so Pr(z > -0.5) = 0.9 at log(crossing)
        mu_w = 1.5
        mu_z = -0.5 + sps.norm.ppf(0.9) * sd - beta * (math.log(crossing) - mu_w)
        return single([mu_z, mu_w, 300.0], cov)

    def test_crossing(self):
        th = maturity_threshold([self.fixture(3.5)], "age")
        assert abs(th.values[0] - 3.5) <= th.grid_step + 1e-9
        assert th.n_excluded == 0

    def test_never_exceeding(self):
        s = single([-5.0, 1.5, 300.0], np.diag([1.0, 0.1, 900.0]))
        th = maturity_threshold([s, self.fixture(4.0)], "age")
        assert th.n_excluded == 1 and th.values.size == 1

    def test_floor(self):
        th = maturity_threshold([self.fixture(1.0)], "age")
        assert th.values[0] >= 2.0

    def test_length_predictor(self, snap2):
        th = maturity_threshold([snap2], "length")
        assert 150 <= th.values[0] <= 550


class TestSummaries:
    def test_constant_draws(self):
        g = summarize(np.ones((10, 4)), np.arange(4))
        np.testing.assert_allclose(g.width, 0.0)

    def test_quantiles_match_sort(self, rng):
        v = rng.normal(size=(1001, 3))
        g = summarize(v, np.arange(3))
        s = np.sort(v, axis=0)
        np.testing.assert_allclose(g.lower, s[25], rtol=1e-12)
        np.testing.assert_allclose(g.upper, s[975], rtol=1e-12)
        assert np.all(g.lower <= g.mean) and np.all(g.mean <= g.upper)

    def test_needs_two_draws(self):
        with pytest.raises(ValueError):
            summarize(np.ones((1, 3)), np.arange(3))

    def test_csv(self, tmp_path):
        g = summarize(np.arange(6.0).reshape(2, 3), np.array([1.0, 2.0, 3.0]), t=2)
        write_grid_csv([g], tmp_path / "g.csv", {"config_hash": "abc"})
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0] == "# config_hash=abc"
        assert lines[1] == "t,grid_value,mean,lo,hi,n_draws"
        assert lines[2].startswith("2,1.0,1.5,")

    def test_snapshot_validation(self):
        with pytest.raises(ValueError):
            MixtureSnapshot(1, np.array([0.5, 0.6]), np.zeros((2, 3)), np.tile(np.eye(3), (2, 1, 1)), CUT)
