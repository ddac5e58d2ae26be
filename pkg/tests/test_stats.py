import math

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest
from scipy import stats as sps

from src.stats import (KsResult, ecdf, export_curves, format_p, kde_bandwidth, kolmogorov_sf, ks_statistic,
                       ks_table, ks_two_sample, summary_stats, summary_table, table1, write_curves)


def test_ecdf_is_right_continuous():
    S = ecdf([3.0, 1.0, 2.0, 2.0])
    assert S.n == 4
    npt.assert_allclose(S(np.array([0.5, 1.0, 2.0, 2.5, 3.0])), [0.0, 0.25, 0.75, 0.75, 1.0])
    with pytest.raises(ValueError):
        ecdf([])


def test_ks_statistic_matches_scipy(rng):
    for _ in range(30):
        m, n = int(rng.integers(1, 60)), int(rng.integers(1, 60))
        a = np.round(rng.normal(0.0, 1.0, m), 1)
        b = np.round(rng.normal(0.3, 1.2, n), 1)
        assert ks_statistic(a, b) == pytest.approx(sps.ks_2samp(a, b).statistic, abs=1e-12)


def test_exact_p_matches_scipy(rng):
    for m, n in [(3, 4), (5, 5), (6, 8), (8, 8), (2, 9)]:
        a, b = rng.normal(0.0, 1.0, m), rng.normal(0.5, 1.0, n)
        res = ks_two_sample(a, b)
        expected = sps.ks_2samp(a, b, method="exact").pvalue
        assert res.p_exact == pytest.approx(expected, rel=1e-6)


def test_exact_p_only_for_small_samples(rng):
    assert ks_two_sample(rng.random(9), rng.random(8)).p_exact is None
    assert ks_two_sample(rng.random(8), rng.random(8)).p_exact is not None


def test_exact_and_asymptotic_p_agree_at_eight_per_side(rng):
    worst = 0.0
    for _ in range(200):
        res = ks_two_sample(rng.normal(0.0, 1.0, 8), rng.normal(rng.uniform(0.0, 2.0), 1.0, 8))
        worst = max(worst, abs(res.p_exact - res.p_asymptotic))
    assert worst < 0.05


def test_disjoint_samples():
    res = ks_two_sample([1, 2, 3, 4], [5, 6, 7, 8])
    assert res.D == 1.0
    assert res.p_exact == pytest.approx(2 / 70)
    assert (res.m, res.n) == (4, 4)


def test_identical_samples():
    res = ks_two_sample([0.1, 0.5, 0.9], [0.9, 0.1, 0.5])
    assert res.D == 0.0
    assert res.p_asymptotic == 1.0
    assert res.p_exact == 1.0


def test_ks_rejects_empty_sample():
    with pytest.raises(ValueError):
        ks_two_sample([], [1.0])


@pytest.mark.parametrize("lam", [0.05, 0.2, 0.5, 0.9, 1.0, 1.36, 2.0, 3.0, 6.0])
def test_kolmogorov_sf_matches_scipy(lam):
    assert kolmogorov_sf(lam) == pytest.approx(sps.kstwobign.sf(lam), abs=1e-12)


def test_asymptotic_p_at_large_sample_scale():
    # D = 0.16 with 770 names per side
    p = kolmogorov_sf(0.16 * math.sqrt(770 * 770 / 1540))
    assert 3e-9 <= p <= 2e-8
    assert format_p(p).endswith("e-09")


def test_kolmogorov_sf_bounds():
    assert kolmogorov_sf(0.0) == 1.0
    assert kolmogorov_sf(-1.0) == 1.0
    assert kolmogorov_sf(20.0) == 0.0


def test_summary_stats():
    s = summary_stats([2, 4, 4, 4, 5, 5, 7, 9])
    assert s.mean == 5.0
    assert s.median == 4.5
    assert s.std == pytest.approx(math.sqrt(32 / 7))
    assert (s.min, s.max, s.n) == (2.0, 9.0, 8)
    assert summary_stats([3.0]).std == 0.0
    with pytest.raises(ValueError):
        summary_stats([])


def test_curves_integrate_to_one(rng):
    samples = rng.beta(5, 1, 400)
    c = export_curves(samples, bins=20)
    widths = c.histogram["right"] - c.histogram["left"]
    assert float((c.histogram["value"] * widths).sum()) == pytest.approx(1.0)
    assert len(c.kde) == 512
    assert np.trapz(c.kde["value"], c.kde["x"]) == pytest.approx(1.0, abs=1e-3)
    assert np.all(np.diff(c.ecdf["value"]) >= 0)
    assert c.ecdf["value"].iloc[-1] == 1.0
    assert c.bandwidth == pytest.approx(1.06 * np.std(samples, ddof=1) * 400 ** -0.2)


def test_constant_sample_uses_fallback_bandwidth():
    assert kde_bandwidth(np.full(10, 0.99)) == 0.01
    c = export_curves(np.full(10, 0.99), bins=5)
    assert c.bandwidth == 0.01
    assert np.isfinite(c.kde["value"]).all()


def test_write_curves(tmp_path, rng):
    paths = write_curves(str(tmp_path / "nocrf_SN1"), export_curves(rng.random(30)))
    assert sorted(paths) == ["ecdf", "histogram", "kde"]
    kde = pd.read_csv(paths["kde"])
    assert list(kde.columns) == ["x", "value"]


@pytest.mark.parametrize("p,text", [(5e-10, "<e-9"), (0.0123, "1.2e-02"), (None, ""), (float("nan"), "")])
def test_format_p(p, text):
    assert format_p(p) == text


def test_table1_layout():
    res = {
        "no-CRF": {"SN1": KsResult(0.16, 770, 770, 5.5e-9), "SN2": KsResult(0.02, 770, 770, 0.99),
                   "SNGN1": KsResult(0.3, 770, 770, 1e-30), "SNGN2": KsResult(0.05, 770, 770, 0.3)},
        "CRF": {"SN1": KsResult(0.1, 770, 770, 1e-4)},
    }
    t = table1(res)
    assert list(t["row"]) == ["SN1", "SN2", "SN1*", "SN2*"]
    assert list(t.columns) == ["row", "no-CRF D", "no-CRF p", "CRF D", "CRF p"]
    assert list(t["no-CRF p"]) == ["5.5e-09", "9.9e-01", "<e-9", "3.0e-01"]
    assert list(t["no-CRF D"])[2] == "3.0e-01"
    assert list(t["CRF D"]) == ["1.0e-01", "", "", ""]
    raw = ks_table(res)
    assert len(raw) == 5


def test_summary_table_skips_empty():
    t = summary_table({"CRF": {"ORIG": np.array([0.9, 1.0]), "SN1": np.array([])}})
    assert list(t["variant"]) == ["ORIG"]
    assert t["mean"].iloc[0] == pytest.approx(0.95)
