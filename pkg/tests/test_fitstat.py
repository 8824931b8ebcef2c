import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tofcal import fitstat
from tofcal.core import compute_label
from tofcal.errors import FitDegenerate, FitDiverged


def test_mae_examples():
    assert fitstat.mae([0, 0], [10, -10]) == 10.0
    assert fitstat.mae([1.5, 2.5], [1.5, 2.5]) == 0.0
    with pytest.raises(ValueError):
        fitstat.mae([], [])
    with pytest.raises(ValueError):
        fitstat.mae([1, 2], [1])


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=50), st.floats(-100, 100))
def test_mae_nonnegative_and_shift(y, d):
    y = np.array(y)
    assert fitstat.mae(y, y + d) == pytest.approx(abs(d), abs=1e-9)
    assert fitstat.mae(y, y) == 0.0


def test_mae_by_position():
    rows = fitstat.mae_by_position([5, -5, 5], [0, 0, 0], [1, 2, 3])
    assert [r["z_mm"] for r in rows] == [-5.0, 5.0]
    assert rows[1]["mae_ps"] == 2.0 and rows[1]["n"] == 2


def test_gaussian_sigma_recovered():
    x = np.random.default_rng(3).normal(0, 100, 100_000)
    fit = fitstat.fit_gaussian(x)
    assert 98 <= fit.sigma <= 102
    assert abs(fit.mu) < 3 * fit.sigma_mu + 1


def test_exact_expectation_histogram_has_zero_chi2():
    edges = np.arange(-500.0, 501.0, 10.0)
    counts = fitstat._gauss_binned(edges, 1e5, 12.0, 80.0)
    fit = fitstat.fit_histogram(0.5 * (edges[1:] + edges[:-1]), counts, (counts.max(), 0.0, 60.0))
    assert fit.chi2 == pytest.approx(0.0, abs=1e-12)
    assert fit.mu == pytest.approx(12.0, abs=1e-6) and fit.sigma == pytest.approx(80.0, abs=1e-6)


def test_bimodal_never_silent():
    r = np.random.default_rng(0)
    x = np.r_[r.normal(-1000, 50, 8000), r.normal(1000, 50, 2000)]
    try:
        fit = fitstat.fit_gaussian(x)
    except FitDiverged:
        return
    assert fit.sigma <= np.ptp(x)
    assert abs(fit.mu + 1000) < 100 or fit.sigma > 500


def test_too_few_samples():
    with pytest.raises(FitDiverged):
        fitstat.fit_gaussian(np.zeros(10))


def test_fwhm_closed_form():
    fit = fitstat.GaussianFit(0.0, 100.0, 1.0, 0.1, 1.0, 1.0)
    fwhm, err = fitstat.ctr_fwhm(fit)
    assert fwhm == pytest.approx(235.48, abs=5e-3)
    assert err == pytest.approx(2.35, abs=5e-3)
    assert fitstat.FWHM_FACTOR == pytest.approx(2.35482, abs=5e-6)


def _line(eps, b=0.0):
    z = np.arange(-75.0, 46.0, 5.0)
    return z, eps * compute_label(z) + b


def test_linearity_exact_line():
    z, mu = _line(1.0)
    fit = fitstat.fit_linearity(z, mu, np.ones_like(z))
    assert fit.epsilon == pytest.approx(1.0, abs=1e-9)
    assert fit.intercept == pytest.approx(0.0, abs=1e-9)


def test_linearity_doubled_slope():
    z, mu = _line(2.0, 30.0)
    fit = fitstat.fit_linearity(z, mu, np.ones_like(z))
    assert fit.epsilon == pytest.approx(2.0, abs=1e-9)
    assert fit.intercept == pytest.approx(30.0, abs=1e-7)


def test_linearity_window_excludes_edges():
    z = np.array([-130.0, -75.0, -15.0, 45.0, 100.0])
    mu = compute_label(z)
    mu[[0, -1]] += 500.0
    fit = fitstat.fit_linearity(z, mu, np.ones_like(z))
    assert fit.epsilon == pytest.approx(1.0, abs=1e-9)
    assert list(fit.z_mm) == [-75.0, -15.0, 45.0]


def test_linearity_degenerate():
    with pytest.raises(FitDegenerate):
        fitstat.fit_linearity([0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [1, 1, 1])
    with pytest.raises(FitDegenerate):
        fitstat.fit_linearity([0.0, 5.0], [1.0, 2.0], [1, 1])


def test_linearity_sign_convention():
    # swapping detectors negates the time difference: same epsilon magnitude, opposite intercept
    z, mu = _line(1.03, 12.0)
    a = fitstat.fit_linearity(z, mu, np.ones_like(z))
    b = fitstat.fit_linearity(-z, -mu, np.ones_like(z), window=None)
    assert b.epsilon == pytest.approx(a.epsilon, abs=1e-9)
    assert b.intercept == pytest.approx(-a.intercept, abs=1e-6)


@given(st.floats(0.5, 1.5), st.floats(-200, 200))
def test_linearity_recovers_noise_free_lines(eps, b):
    z, mu = _line(eps, b)
    fit = fitstat.fit_linearity(z, mu, np.full_like(z, 2.0))
    assert fit.epsilon == pytest.approx(eps, abs=1e-7)


def test_grid_linearity_averages_points():
    r = np.random.default_rng(4)
    z = np.repeat(np.arange(-75.0, 46.0, 15.0), 200)
    xy, zz, v = [], [], []
    for i, eps in enumerate((0.98, 1.0, 1.02)):
        xy.append(np.tile([i, 0.0], (len(z), 1)))
        zz.append(z)
        v.append(eps * compute_label(z) + r.normal(0, 1, len(z)))
    g = fitstat.fit_linearity_grid(np.vstack(xy), np.concatenate(zz), np.concatenate(v))
    assert len(g.points) == 3
    assert g.epsilon == pytest.approx(1.0, abs=2e-3)
    assert g.sigma_epsilon == pytest.approx(0.02, abs=2e-3)
    assert g.sem_epsilon == pytest.approx(g.sigma_epsilon / math.sqrt(3))
    assert g.within(3.0)


def test_runs_test():
    assert fitstat.sign_runs_test(np.r_[np.ones(15), -np.ones(15)]) < 1e-4
    alt = np.tile([1.0, -1.0], 15)
    assert fitstat.sign_runs_test(alt) < 1e-4
    r = np.random.default_rng(2)
    assert fitstat.sign_runs_test(r.normal(size=200)) > 0.01


def test_goodness_by_position_central_near_one():
    r = np.random.default_rng(9)
    z = np.repeat([-20.0, 0.0, 20.0], 20_000)
    pred = compute_label(z) + r.normal(0, 70, len(z))
    rows = fitstat.goodness_by_position(z, pred)
    assert all(0.8 <= row["chi2_ndf"] <= 1.5 for row in rows)
    rows = fitstat.goodness_by_position([0.0] * 10, np.zeros(10))
    assert rows[0]["valid"] is False


def test_chi2_ndf_calibrated_over_repetitions():
    r = np.random.default_rng(21)
    vals = []
    for _ in range(50):
        fit = fitstat.fit_gaussian(r.normal(0, 100, 20_000))
        assert abs(fit.sigma - 100) < 2
        vals.append(fit.chi2_ndf)
    assert 0.8 <= np.mean(vals) <= 1.3
