import math

import numpy as np
import pytest
from scipy import stats as sps

import dynord.sampler as sampler_mod
from dynord.draws import read_draws
from dynord.model import Dataset, Layout
from dynord.prior import ar1_path
from dynord.sampler import ChainConfig, Sampler, SweepAborted, run_chain
from dynord.synth import default_truth, synth_generate

from conftest import make_hyper


def fixed_state(sampler, rng, alpha=1.0, phi=0.5):
    st = sampler.sample_prior(rng)
    st.alpha, st.phi = alpha, phi
    return st


def small_dataset(rng, n_t=(30, 30, 0, 30)):
    truth = default_truth(T=len(n_t))
    return synth_generate(truth, list(n_t), rng)


class TestConfigs:
    def test_log_probs_match_hand_computation(self, rng):
        ds = Dataset(1, 3, [0, 0], [1, 3], [[250.0], [420.0]], [2, 8])
        h = make_hyper(N=2)
        s = Sampler(ds, h)
        st = fixed_state(s, rng)
        st.ystar = np.array([[-1.0, 1.0, 250.0], [1.0, 2.1, 420.0]])
        lp = s.config_log_probs(st)
        w = np.exp(sampler_mod.log_stick_weights(st.zeta, st.eta, st.alpha))[:, 0]
        for l in range(2):
            for i in range(2):
                ref = math.log(w[l]) + sps.multivariate_normal(st.mu[l, 0], st.Sigma[l]).logpdf(st.ystar[i])
                assert lp[l, i] == pytest.approx(ref, abs=1e-10)

    def test_single_component(self, rng):
        ds = small_dataset(rng)
        s = Sampler(ds, make_hyper(N=1))
        st = s.initial_state(rng)
        s.update_configs(st)
        assert np.all(st.L == 0)

    def test_fair_coin(self, rng):
        n = 100_000
        ds = Dataset(1, 3, np.zeros(n, int), np.ones(n, int), np.full((n, 1), 300.0), np.full(n, 3))
        s = Sampler(ds, make_hyper(N=2))
        st = fixed_state(s, rng)
        st.zeta[:] = math.sqrt(2 * st.alpha * math.log(2.0))
        st.eta[:] = 0.0
        st.mu[1] = st.mu[0]
        st.Sigma[1] = st.Sigma[0]
        st.ystar = np.tile([-1.0, 1.2, 300.0], (n, 1))
        s.update_configs(st)
        assert abs(np.mean(st.L == 0) - 0.5) < 0.01


class TestWeightUpdates:
    def test_eta_bridge_at_missing_year(self, rng):
        s = Sampler(Dataset.empty(3), make_hyper(N=3))
        st = fixed_state(s, rng, alpha=1.7, phi=0.6)
        s.refresh(st)
        mean, var = s.eta_conditional(st, 1)
        phi = st.phi
        np.testing.assert_allclose(mean, phi * (st.eta[:, 0] + st.eta[:, 2]) / (1 + phi**2))
        np.testing.assert_allclose(var, (1 - phi**2) / (1 + phi**2))

    def test_eta_conditional_against_grid(self, rng):
        ds = small_dataset(rng, (40, 40, 40))
        s = Sampler(ds, make_hyper(N=3))
        st = s.initial_state(rng)
        st.alpha, st.phi = 1.3, 0.7
        l, t = 0, 1
        mean, var = s.eta_conditional(st, t, [l])
        S = st.M[l + 1:, t].sum()
        a, phi = st.alpha, st.phi
        # closed form in its original arrangement
        ref = phi * a * (st.eta[l, 0] + st.eta[l, 2]) / (phi**2 * (a - S) + a + S)
        assert mean[0] == pytest.approx(ref, rel=1e-12)
        # brute-force density: AR terms times exp(-S * s / 2a), Gaussian part only
        grid = np.linspace(-6, 6, 20001)
        logf = (-(grid - phi * st.eta[l, 0]) ** 2 - (st.eta[l, 2] - phi * grid) ** 2) / (2 * (1 - phi**2))
        logf += -S * (st.zeta[l] ** 2 + grid**2) / (2 * a)
        f = np.exp(logf - logf.max())
        f /= np.trapezoid(f, grid)
        assert np.trapezoid(grid * f, grid) == pytest.approx(mean[0], abs=1e-6)
        assert np.trapezoid((grid - mean[0]) ** 2 * f, grid) == pytest.approx(var[0], rel=1e-5)

    def test_empty_data_zeta_is_standard_normal(self, rng):
        s = Sampler(Dataset.empty(2), make_hyper(N=4))
        st = fixed_state(s, rng)
        s.refresh(st)
        draws = []
        for _ in range(5000):
            s.update_zeta(st)
            draws.append(st.zeta.copy())
        assert sps.kstest(np.ravel(draws), "norm").pvalue > 0.01

    def test_slices_keep_positive_likelihood(self, rng):
        ds = small_dataset(rng)
        s = Sampler(ds, make_hyper(N=5))
        st = s.initial_state(rng)
        for _ in range(30):
            s.sweep(st)
            logw = sampler_mod.log_stick_weights(st.zeta, st.eta, st.alpha)
            occupied = st.M > 0
            assert np.all(np.isfinite(logw[occupied]))

    def test_alpha_identity_proposal_accepts(self, rng):
        ds = small_dataset(rng)
        s = Sampler(ds, make_hyper(N=4))
        st = s.initial_state(rng)
        before = st.alpha
        assert s.update_alpha(st, proposal_scale=1e-300)
        assert st.alpha == before

    def test_phi_identity_proposal_accepts(self, rng):
        s = Sampler(Dataset.empty(3), make_hyper(N=3))
        st = fixed_state(s, rng)
        s.refresh(st)
        assert s.update_phi(st, proposal_scale=1e-300)

    def test_phi_recovers_simulated_value(self, rng):
        s = Sampler(Dataset.empty(15), make_hyper(N=51))
        st = fixed_state(s, rng)
        st.eta = ar1_path(0.9, 15, rng, size=50)
        s.refresh(st)
        draws = []
        for i in range(4000):
            s.update_phi(st, proposal_scale=0.5)
            if i >= 500:
                draws.append(st.phi)
        assert abs(np.mean(draws) - 0.9) < 0.05

    def test_phi_symmetric_support(self, rng):
        s = Sampler(Dataset.empty(3), make_hyper(N=3, phi_support="symmetric"))
        st = fixed_state(s, rng, phi=-0.3)
        s.refresh(st)
        for _ in range(200):
            s.update_phi(st)
            assert -1 < st.phi < 1


class TestAtomUpdates:
    def test_last_year_empty_theta_zero_is_transition(self, rng):
        s = Sampler(Dataset.empty(3), make_hyper(N=2))
        st = fixed_state(s, rng)
        st.theta[:] = 0.0
        s.refresh(st)
        P, h = s.mu_conditional(st, 2)
        for l in range(2):
            np.testing.assert_allclose(P[l], np.linalg.inv(st.V), rtol=1e-10)
            np.testing.assert_allclose(np.linalg.solve(P[l], h[l]), st.m, rtol=1e-8, atol=1e-8)

    def test_theta_zero_interior_has_no_forward_term(self, rng):
        s = Sampler(Dataset.empty(3), make_hyper(N=2))
        st = fixed_state(s, rng)
        st.theta[:] = 0.0
        s.refresh(st)
        s.update_mu(st, 1)
        assert np.all(np.isfinite(st.mu))

    def test_degenerate_variance_forces_bridge(self, rng):
        s = Sampler(Dataset.empty(3), make_hyper(N=2))
        st = fixed_state(s, rng)
        eps = 1e-8
        st.V = eps * np.eye(3)
        st.theta = np.array([0.8, 0.5, 0.2])
        s.refresh(st)
        s.update_mu(st, 1)
        th = st.theta
        for l in range(2):
            bridge = (st.m + th * st.mu[l, 0] + th * (st.mu[l, 2] - st.m)) / (1 + th**2)
            np.testing.assert_allclose(st.mu[l, 1], bridge, atol=1e-3)

    def test_sigma_posterior_cases(self, rng):
        ds = Dataset(1, 3, [0], [2], [[300.0]], [4])
        s = Sampler(ds, make_hyper(N=2))
        st = fixed_state(s, rng)
        st.ystar = np.array([[0.1, 1.5, 300.0]])
        st.L = np.array([1])
        s.refresh(st)
        dofs, scales = s.sigma_posterior(st)
        assert dofs[0] == s.hyper.nu and dofs[1] == s.hyper.nu + 1
        np.testing.assert_allclose(scales[0], st.D)
        r = st.ystar[0] - st.mu[1, 0]
        np.testing.assert_allclose(scales[1], st.D + np.outer(r, r))

    def test_psi_single_transition(self, rng, monkeypatch):
        s = Sampler(Dataset.empty(2), make_hyper(N=1))
        st = fixed_state(s, rng)
        st.theta[:] = 0.0
        s.refresh(st)
        seen = []
        real = sampler_mod.invwishart_sample

        def spy(dof, scale, rng_):
            seen.append((dof, np.array(scale)))
            return real(dof, scale, rng_)

        monkeypatch.setattr(sampler_mod, "invwishart_sample", spy)
        s.update_psi(st)
        dof, scale = seen[0]
        r = st.mu[0, 1] - st.m
        assert dof == s.hyper.a_V + 1
        np.testing.assert_allclose(scale, s.hyper.B_V + np.outer(r, r))

    def test_theta_identity_and_recovery(self, rng):
        h = make_hyper(N=50)
        s = Sampler(Dataset.empty(15), h)
        st = fixed_state(s, rng)
        true = np.array([0.8, 0.5, 0.2])
        st.V = np.diag([0.05, 0.02, 30.0])
        st.m = np.array([0.0, 0.5, 100.0])
        st.mu[:, 0] = rng.normal(st.m / (1 - true), np.sqrt(np.diag(st.V)), size=(50, 3))
        for t in range(1, 15):
            st.mu[:, t] = st.m + true * st.mu[:, t - 1] + rng.multivariate_normal(np.zeros(3), st.V, size=50)
        s.refresh(st)
        assert np.all(s.update_theta(st, proposal_scale=1e-300))
        draws = []
        for i in range(3000):
            s.update_theta(st, proposal_scale=0.3)
            if i >= 500:
                draws.append(st.theta.copy())
        np.testing.assert_allclose(np.mean(draws, 0), true, atol=0.1)


    def test_theta_shift_keeps_innovations(self, rng):
        h = make_hyper(N=5)
        s = Sampler(Dataset.empty(4), h)
        st = fixed_state(s, rng)
        s.refresh(st)
        before = st.mu[:, 1:] - st.m - st.theta * st.mu[:, :-1]
        first = st.mu[:, 0].copy()
        acc = s.update_theta_shift(st, proposal_scale=0.5)
        # without data every in-support proposal is accepted
        assert np.all(acc)
        after = st.mu[:, 1:] - st.m - st.theta * st.mu[:, :-1]
        np.testing.assert_allclose(after, before, atol=1e-9)
        np.testing.assert_array_equal(st.mu[:, 0], first)

    def test_theta_shift_ratio_matches_likelihood(self, rng):
        ds = small_dataset(rng, n_t=(20, 20, 20))
        h = make_hyper(N=3)
        s = Sampler(ds, h)
        st = s.initial_state(rng)
        Sinv = sampler_mod.sym_inv_many(st.Sigma)

        def loglik(mu):
            return sum(sps.multivariate_normal(mu[l, t], st.Sigma[l]).logpdf(st.ystar[i])
                       for i, (l, t) in enumerate(zip(st.L, s.year)))

        mu2 = st.mu + rng.normal(size=st.mu.shape)
        diff = s._mu_data_term(mu2, Sinv, st) - s._mu_data_term(st.mu, Sinv, st)
        assert diff == pytest.approx(loglik(mu2) - loglik(st.mu), rel=1e-9)


class TestLatents:
    def test_support_and_zero_age(self, rng):
        ds = small_dataset(rng)
        s = Sampler(ds, make_hyper(N=4))
        st = s.initial_state(rng)
        for _ in range(5):
            s.sweep(st)
        z, w = st.ystar[:, 0], st.ystar[:, 1]
        lo, hi = s.hyper.cutoffs.bounds(ds.y)
        assert np.all((z > lo) & (z <= hi))
        assert np.all((w > s.lower[:, 1]) & (w <= s.upper[:, 1]))
        assert np.all(w[ds.u == 0] <= 0)
        np.testing.assert_array_equal(st.ystar[:, 2], ds.x[:, 0])

    def test_rectangle_moments_against_rejection(self, rng):
        n = 4000
        ds = Dataset(1, 3, np.zeros(n, int), np.full(n, 2), np.full((n, 1), 320.0), np.full(n, 4))
        s = Sampler(ds, make_hyper(N=1))
        st = fixed_state(s, rng)
        st.mu[0, 0] = [0.2, 1.4, 300.0]
        sd = np.array([1.0, 0.4, 40.0])
        corr = np.array([[1.0, 0.5, 0.3], [0.5, 1.0, 0.6], [0.3, 0.6, 1.0]])
        st.Sigma[0] = sd[:, None] * corr * sd[None, :]
        st.ystar = np.tile([0.0, math.log(4.5), 320.0], (n, 1))
        st.L = np.zeros(n, int)
        draws = []
        for i in range(30):
            s.update_latents(st)
            if i >= 5:
                draws.append(st.ystar[:, :2].copy())
        gibbs = np.concatenate(draws).mean(0)
        # rejection from the (z, w) | x conditional onto the rectangle
        from dynord.stats import mvn_condition
        cm, cc = mvn_condition(st.mu[0, 0], st.Sigma[0], [2], np.array([320.0]))
        prop = rng.multivariate_normal(cm, cc, size=2_000_000)
        keep = (prop[:, 0] > -0.5) & (prop[:, 0] <= 0.5) & (prop[:, 1] > math.log(4)) & (prop[:, 1] <= math.log(5))
        np.testing.assert_allclose(gibbs, prop[keep].mean(0), atol=0.01)


class TestChains:
    def test_deterministic(self, rng, tmp_path):
        ds = small_dataset(rng)
        h = make_hyper(N=4)
        cfg = ChainConfig(iterations=30, burn_in=10, seed=5, pilot=20)
        a = list(run_chain(ds, h, cfg, draws_path=tmp_path / "a.ndjson", header={"record": "header"}))
        b = list(run_chain(ds, h, cfg, draws_path=tmp_path / "b.ndjson", header={"record": "header"}))
        assert len(a) == 20
        assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()

    def test_resume_matches_uninterrupted(self, rng, tmp_path):
        from dynord.draws import header_record

        ds = small_dataset(rng)
        h = make_hyper(N=4)
        cfg = ChainConfig(iterations=40, burn_in=10, seed=9, pilot=0)
        head = header_record(h, ds.T)
        list(run_chain(ds, h, cfg, draws_path=tmp_path / "full.ndjson", header=head))
        part = tmp_path / "part.ndjson"
        ck = tmp_path / "ck.npz"
        run = run_chain(ds, h, cfg, draws_path=part, header=head, checkpoint=ck)
        for i, _ in enumerate(run):
            if i == 11:
                break
        rest = list(run_chain(ds, h, cfg, draws_path=part, header=head, checkpoint=ck, resume=True))
        assert len(rest) == 18
        assert part.read_bytes() == (tmp_path / "full.ndjson").read_bytes()
        _, _, draws = read_draws(part)
        assert [d.iteration for d in draws] == list(range(11, 41))

    def test_abort_wraps_errors(self, rng):
        ds = small_dataset(rng)
        s = Sampler(ds, make_hyper(N=3))
        st = s.initial_state(rng)
        st.Sigma[0] = np.nan
        with pytest.raises(SweepAborted) as err:
            s.sweep(st)
        assert "iteration" in err.value.state_dump

    def test_chain_config_validation(self):
        with pytest.raises(ValueError):
            ChainConfig(iterations=10, burn_in=10)
        with pytest.raises(ValueError):
            ChainConfig(seed=None)

    def test_no_age_layout_runs(self, rng):
        h = make_hyper(N=3, d_layout=Layout(has_age=False))
        s = Sampler(Dataset.empty(2, layout=Layout(has_age=False)), h)
        st = s.sample_prior(rng)
        s.simulate_data(st, [10, 10])
        for _ in range(5):
            s.sweep(st)
        assert st.ystar.shape == (20, 2)

    def test_synthetic_occupancy(self, rng):
        ds = synth_generate(default_truth(), [100, 100, 0, 100, 100], rng)
        s = Sampler(ds, make_hyper(N=8))
        st = s.initial_state(rng)
        for _ in range(300):
            rep = s.sweep(st)
        assert np.sum(rep.occupancy > 10) >= 2
        assert all(0.0 <= v <= 1.0 for v in rep.accept.values())
