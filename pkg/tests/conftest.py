import sys
import math

import numpy as np
import pytest

from dynord.inference import MixtureSnapshot
from dynord.model import Cutoffs, HyperConfig, Layout, default_cutoffs


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_hyper(N=4, d_layout=Layout(), a_alpha=3.0, b_alpha=4.0, dof=None, **kw):
    d = d_layout.d
    dof = d + 4.0 if dof is None else dof
    scale = np.diag([0.5, 0.3, 400.0][:d]) if d == 3 else 0.5 * np.eye(d)
    a_m = np.array([0.0, 1.5, 300.0][:d]) if d == 3 else np.zeros(d)
    base = dict(
        a_m=a_m, B_m=scale, a_V=dof, B_V=scale * (dof - d - 1), a_D=dof, B_D=scale * (dof - d - 1) / dof,
        nu=dof, m0=a_m, V0=scale, N=N, cutoffs=default_cutoffs(3), a_alpha=a_alpha, b_alpha=b_alpha,
        layout=d_layout,
    )
    base.update(kw)
    return HyperConfig(**base)


@pytest.fixture
def hyper():
    return make_hyper()


def two_component_snapshot(t=1):
    """Correlated two-component mixture over (z, w, x) used as a fixture."""
    means = np.array([[-0.8, np.log(3.0), 260.0], [0.9, np.log(7.0), 410.0]])
    sd = np.array([[0.7, 0.3, 40.0], [0.8, 0.25, 50.0]])
    corr = np.array([[[1.0, 0.3, 0.5], [0.3, 1.0, 0.8], [0.5, 0.8, 1.0]],
                     [[1.0, 0.2, 0.4], [0.2, 1.0, 0.7], [0.4, 0.7, 1.0]]])
    covs = sd[:, :, None] * corr * sd[:, None, :]
    cut = Cutoffs((-math.inf, -0.5, 0.5, math.inf))
    return MixtureSnapshot(t=t, weights=np.array([0.45, 0.55]), means=means, covs=covs, cutoffs=cut)


@pytest.fixture
def snap2():
    return two_component_snapshot()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(results[k])
