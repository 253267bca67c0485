import math
import warnings

import numpy as np
import pytest
from sklearn.base import clone

from decayscope.boundary import (
    BoundaryEstimate,
    MonotonicityWarning,
    SpatialBoundaryEstimator,
    check_monotonicity,
    estimate_boundary,
    partial_id_bounds,
)
from decayscope.errors import ConfigurationError, DegenerateInputError
from decayscope.kernels import Bandwidth, DecayCurve, get_kernel
from decayscope.synth import Exponential, SyntheticSpec, TwoRegime, generate

from conftest import EXP_DGP


def curve_from(m, grid=None):
    m = np.asarray(m, dtype=np.float64)
    grid = np.arange(m.size, dtype=np.float64) if grid is None else np.asarray(grid, float)
    z = np.zeros_like(m)
    return DecayCurve(grid, m, np.gradient(m, grid), np.ones_like(m) / m.size, z,
                      Bandwidth(1.0), get_kernel("epanechnikov"), 1, 100)


def test_exact_exponential_curve_interpolation_error():
    # linear interpolation on a 1 km grid: error bounded by curvature * spacing^2 / 8
    grid = np.arange(0.0, 201.0)
    c = curve_from(EXP_DGP(grid), grid)
    b = estimate_boundary(c, 0.5)
    truth = math.log(2) / EXP_DGP.kappa
    assert b.found and b.interpolated
    assert abs(b.d_star - truth) < EXP_DGP.kappa * 1.0 / 8
    assert b.d_star_grid == math.ceil(truth)
    assert b.d_star_lower == b.d_star_upper == b.d_star_grid
    assert b.threshold_level == pytest.approx(0.5 * 2.28)


def test_grid_rule_without_interpolation():
    c = curve_from([10, 8, 6, 4, 2])
    b = estimate_boundary(c, 0.5, interpolate=False)
    assert b.d_star == 3.0
    assert estimate_boundary(c, 0.5).d_star == pytest.approx(2.5)


def test_crossing_exactly_on_grid_point():
    c = curve_from([10, 7.5, 5, 2.5])
    assert estimate_boundary(c, 0.5).d_star == 2.0


def test_first_point_below_threshold():
    # epsilon close to 1 with first step already at or below
    c = curve_from([10.0, 9.0, 8.0])
    b = estimate_boundary(c, 0.95)
    assert b.d_star == pytest.approx(0.5)


def test_no_crossing_reported_not_raised():
    c = curve_from([10, 9.5, 9, 8.5])
    b = estimate_boundary(c, 0.5)
    assert not b.found and b.beyond_grid and b.d_star is None
    assert b.to_dict()["beyond_grid"] is True
    assert partial_id_bounds(c, 0.5) is None


def test_increasing_curve_warns():
    c = curve_from([1, 2, 3, 4])
    with pytest.warns(MonotonicityWarning):
        b = estimate_boundary(c, 0.5)
    assert b.beyond_grid


def test_nonpositive_source_level_raises():
    with pytest.raises(DegenerateInputError):
        estimate_boundary(curve_from([0.0, -1.0, -2.0]), 0.5)
    with pytest.raises(DegenerateInputError):
        estimate_boundary(curve_from([-1.0, 0.0]), 0.5)


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.2, 1.5, float("nan")])
def test_epsilon_domain(eps):
    with pytest.raises(ConfigurationError):
        estimate_boundary(curve_from([2, 1, 0.5]), eps)


def test_partial_id_non_monotone():
    # dips below 5 at 2, comes back above, re-enters at 5
    m = [10, 6, 4, 6, 7, 4.5, 3, 2]
    c = curve_from(m)
    b = estimate_boundary(c, 0.5)
    assert b.d_star_lower == 2.0 and b.d_star_upper == 5.0
    assert b.d_star_lower <= b.d_star_grid <= b.d_star_upper
    assert b.monotone_violations == 2
    assert partial_id_bounds(c, 0.5, mode="set") == (2.0, 7.0)
    with pytest.raises(ValueError):
        partial_id_bounds(c, 0.5, mode="other")


def test_partial_id_collapses_when_monotone(rng):
    m = np.sort(rng.uniform(0, 10, 50))[::-1] + 1
    c = curve_from(m)
    for eps in (0.2, 0.5, 0.8):
        b = estimate_boundary(c, eps)
        if b.found:
            assert b.d_star_lower == b.d_star_upper == b.d_star_grid


def test_monotonicity_diagnostics():
    d = check_monotonicity(curve_from([5, 4, 4.5, 3, 3.2]))
    assert (d.n_steps, d.n_increasing) == (4, 2)
    assert d.max_increase == pytest.approx(0.5)
    np.testing.assert_array_equal(d.increasing_at, [2.0, 4.0])
    assert not d.monotone
    assert check_monotonicity(curve_from([3, 2, 1])).monotone


def test_boundary_estimate_invariant():
    with pytest.raises(ValueError):
        BoundaryEstimate(0.5, 3.0, 5.0, 4.0)


def test_two_regime_boundary_from_data():
    form = TwoRegime(2.0, 0.05, 0.005, 10.0)
    s = generate(SyntheticSpec(form, 0.05, 50_000, seed=4)).sample
    est = SpatialBoundaryEstimator(epsilon=0.5).fit_sample(s)
    assert est.d_star_ == pytest.approx(form.boundary(0.5), abs=1.5)


def test_monotone_scaling_equivariance():
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 20_000, seed=2)).sample
    a = SpatialBoundaryEstimator(epsilon=0.6, bandwidth=4.0).fit(s.distances, s.outcomes)
    b = SpatialBoundaryEstimator(epsilon=0.6, bandwidth=4.0).fit(s.distances, 3.0 * s.outcomes)
    assert b.d_star_ == pytest.approx(a.d_star_, rel=1e-12)


def test_estimator_api_and_clone():
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 20_000, seed=5)).sample
    est = SpatialBoundaryEstimator(epsilon=0.6)
    est2 = clone(est)
    assert est2.get_params() == est.get_params()
    est.fit_sample(s)
    assert est.d_max == 100.0 and est.curve_.grid[-1] == 100.0
    assert est.d_star_ == pytest.approx(EXP_DGP.boundary(0.6), abs=4.0)
    np.testing.assert_allclose(est.predict([0.0, 50.0]), est.curve_.m_hat[[0, 50]])
    assert est.bandwidth_.method == "silverman"
    no_var = SpatialBoundaryEstimator(epsilon=0.6, compute_variance=False).fit_sample(s)
    assert no_var.d_star_ == est.d_star_


def test_exact_curve_on_unit_grid():
    grid = np.arange(0.0, 101.0)
    c = curve_from(EXP_DGP(grid), grid)
    assert estimate_boundary(c, 0.5, interpolate=False).d_star == 99.0
    assert estimate_boundary(c, 0.5).d_star == pytest.approx(math.log(2) / 0.00701, abs=0.01)
    far = estimate_boundary(c, 0.10)
    assert far.beyond_grid and far.d_star is None
    assert EXP_DGP.boundary(0.10) == pytest.approx(328.5, abs=0.1)


def test_two_excursions_bounds():
    grid = np.arange(0.0, 101.0)
    m = np.full(101, 8.0)
    m[30:41] = 3.0
    m[80:] = 3.0
    c = curve_from(m, grid)
    assert partial_id_bounds(c, 0.5) == (30.0, 80.0)
    assert partial_id_bounds(c, 0.5, mode="set") == (30.0, 100.0)
