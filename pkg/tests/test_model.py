import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynord.model import (
    Cutoffs,
    DataError,
    Dataset,
    DegenerateData,
    HyperConfig,
    InvalidCategory,
    Layout,
    UnsupportedBinaryCase,
    age_interval,
    collapse_maturity,
    default_cutoffs,
    discretize_age,
    elicit_hyperconfig,
    read_csv,
    write_csv,
)
from dynord.synth import default_truth, synth_generate


def write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


class TestDiscretization:
    def test_collapse(self):
        assert [collapse_maturity(k) for k in range(1, 7)] == [1, 2, 2, 2, 3, 3]
        with pytest.raises(InvalidCategory):
            collapse_maturity(7)

    def test_age_interval(self):
        assert age_interval(0).lower == -math.inf and age_interval(0).upper == 0.0
        iv = age_interval(4)
        assert iv.lower == pytest.approx(math.log(4)) and iv.upper == pytest.approx(math.log(5))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-5.0, 4.0))
    def test_age_roundtrip(self, w):
        u = int(discretize_age(w))
        assert w in age_interval(u)

    def test_age_boundaries(self):
        assert discretize_age(0.0) == 0
        assert discretize_age(math.log(3.0)) == 2
        assert discretize_age(math.nextafter(math.log(3.0), 10)) == 3

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-4.0, 4.0))
    def test_cutoff_roundtrip(self, z):
        cut = default_cutoffs(4)
        y = int(cut.discretize(z))
        assert z in cut.interval(y)

    def test_default_cutoffs(self):
        np.testing.assert_allclose(default_cutoffs(3).interior, [-0.5, 0.5])
        with pytest.raises(UnsupportedBinaryCase):
            default_cutoffs(2)

    def test_cutoffs_validation(self):
        with pytest.raises(ValueError):
            Cutoffs((-math.inf, 1.0, 0.5, math.inf))


class TestIngestion:
    def test_roundtrip_and_missing_years(self, tmp_path):
        p = write(tmp_path, "year,maturity,age,length\n2001,1,3,250\n2001,4,8,420\n2003,2,5,330\n")
        ds = read_csv(p)
        assert ds.T == 3 and ds.n == 3
        assert ds.missing_years == {2}
        assert ds.labels == (2001, 2002, 2003)
        out = tmp_path / "o.csv"
        write_csv(ds, out)
        ds2 = read_csv(out, maturity="collapsed", C=3)
        np.testing.assert_array_equal(ds2.y, ds.y)
        np.testing.assert_array_equal(ds2.x, ds.x)

    def test_drops_incomplete(self, tmp_path):
        p = write(tmp_path, "year,maturity,age,length\n2001,1,3,250\n2001,,8,420\n2001,2,,300\n")
        ds = read_csv(p)
        assert ds.n == 1 and ds.dropped == 2

    def test_malformed_line_number(self, tmp_path):
        p = write(tmp_path, "year,maturity,age,length\n2001,1,3,250\n2001,x,8,420\n")
        with pytest.raises(DataError) as err:
            read_csv(p)
        assert err.value.line == 3

    def test_bad_header(self, tmp_path):
        with pytest.raises(DataError):
            read_csv(write(tmp_path, "a,b,c\n1,2,3\n"))

    def test_dataset_sorted_by_year(self):
        ds = Dataset(2, 3, [1, 0], [1, 2], [[300.0], [200.0]], [3, 2])
        np.testing.assert_array_equal(ds.year, [0, 1])
        np.testing.assert_array_equal(ds.x[:, 0], [200.0, 300.0])


class TestElicitation:
    def test_limiting_covariance_split(self, rng):
        ds = synth_generate(default_truth(), [100, 100, 0, 100, 100], rng)
        h = elicit_hyperconfig(ds, N=10)
        share = h.B_m
        np.testing.assert_allclose(h.B_V / (h.a_V - h.d - 1), share)
        np.testing.assert_allclose(h.a_D * h.B_D / (h.nu - h.d - 1), share)
        np.testing.assert_allclose(h.limiting_covariance(), 3 * share)
        assert h.a_m[0] == 0.0
        logu = np.log(ds.u + 0.5)
        assert h.a_m[1] == pytest.approx(0.5 * (logu.min() + logu.max()))
        assert np.all(np.linalg.eigvalsh(h.V0) > 0)

    def test_raw_age_centre_option(self, rng):
        ds = synth_generate(default_truth(), [50] * 5, rng)
        h = elicit_hyperconfig(ds, N=5, age_center="raw")
        assert h.a_m[1] == pytest.approx(0.5 * (ds.u.min() + ds.u.max()))

    def test_default_truncation(self, rng):
        ds = synth_generate(default_truth(), [50] * 5, rng)
        h = elicit_hyperconfig(ds, rng=np.random.default_rng(0))
        assert h.N == 17

    def test_degenerate(self):
        ds = Dataset(1, 3, [0, 0], [1, 2], [[300.0], [300.0]], [3, 4])
        with pytest.raises(DegenerateData):
            elicit_hyperconfig(ds, N=3)

    def test_dict_roundtrip(self, hyper):
        h2 = HyperConfig.from_dict(hyper.to_dict())
        for k in ("a_m", "B_m", "B_V", "B_D", "V0", "m0"):
            np.testing.assert_array_equal(getattr(h2, k), getattr(hyper, k))
        assert h2.cutoffs == hyper.cutoffs and h2.layout == hyper.layout and h2.N == hyper.N

    def test_validation(self, hyper):
        d = hyper.to_dict()
        d["nu"] = 1.0
        with pytest.raises(ValueError):
            HyperConfig.from_dict(d)
        assert Layout(has_age=False).d == 2
