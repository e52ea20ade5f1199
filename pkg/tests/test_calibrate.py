import numpy as np
import pytest

from mlocp.calibrate import (RateFit, fit_mc_constant, fit_spatial_rate, fit_surplus_rate,
                             mixed_decay_probe, surplus_samples)
from mlocp.errors import ConfigurationError
from mlocp.ocp import OcpSpec

UNC = OcpSpec.benchmark(1)


def test_rate_fit_recovers_exact_line():
    x = np.arange(5.0)
    fit = RateFit.from_points("t", x, 1.5 - 2.0 * x, C=3.0)
    assert np.isclose(fit.slope, -2.0) and np.isclose(fit.intercept, 1.5)
    assert fit.residual < 1e-12 and not fit.warning
    assert fit["C"] == 3.0
    assert fit.refit() == (fit.slope, fit.intercept)


def test_rate_fit_flags_poor_fits():
    with pytest.warns(UserWarning):
        fit = RateFit.from_points("noisy", [0, 1, 2, 3], [0, 3, -2, 4])
    assert fit.warning


def test_rate_fit_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        RateFit.from_points("short", [0, 1], [0, 1])
    with pytest.raises(ConfigurationError):
        RateFit.from_points("nan", [0, 1, 2], [0, np.nan, 1])


def test_spatial_fit_small():
    fit = fit_spatial_rate(UNC, [0, 1, 2], gauss_n=2)
    assert 1.6 < fit["alpha"] < 2.4
    assert fit["reference_level"] == 4 and fit["C1"] > 0
    with pytest.raises(ConfigurationError):
        fit_spatial_rate(UNC, [0, 1, 2], reference_level=3)


def test_mc_fit_small_and_reproducible():
    a = fit_mc_constant(UNC, 1, ks=[2, 4, 6], repetitions=6, gauss_n=2)
    b = fit_mc_constant(UNC, 1, ks=[2, 4, 6], repetitions=6, gauss_n=2)
    assert a.y == b.y
    assert 0.3 < a["eta"] < 0.7
    c = fit_mc_constant(UNC, 1, ks=[2, 4, 6], repetitions=6, gauss_n=2, seed=1)
    assert c.y != a.y


def test_surplus_samples_schedule():
    assert [surplus_samples(l) for l in range(4)] == [4, 16, 64, 256]
    assert surplus_samples(2, n_base=2) == 32


def test_surplus_fit_small():
    fit = fit_surplus_rate(UNC, [1, 2, 3], repetitions=4, gauss_n=2)
    assert -3.8 < fit["rate"] < -2.2
    assert np.isclose(fit["beta"], -fit["rate"] - 1.0)
    assert np.isclose(fit["C3"], fit["C3_adjoint"] / UNC.nu)
    with pytest.raises(ConfigurationError):
        fit_surplus_rate(UNC, [0, 1, 2])


def test_surplus_gauss_collapse_measures_solver_error_only():
    rms = fit_surplus_rate(UNC, [1, 2], gauss_n=2, gauss_collapse=True, tol=1e-10)
    assert max(rms) < 1e-9


def test_mixed_probe_shape_and_sign():
    table = mixed_decay_probe(UNC, [0, 1, 2], [2, 3], repetitions=3, gauss_n=2)
    assert set(table.rms) == {(l, k) for l in (0, 1, 2) for k in (2, 3)}
    assert table.reference_level == 4
    # fitted against -l, so a mixed difference that shrinks with l has positive slope
    assert table.spatial_fit(2).slope > 1.0
