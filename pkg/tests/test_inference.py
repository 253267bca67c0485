import math

import numpy as np
import pytest

from decayscope.boundary import SpatialBoundaryEstimator, estimate_boundary
from decayscope.errors import ConfigurationError, DegenerateInputError, InputValidationError
from decayscope.geo import haversine
from decayscope.inference import (
    BootstrapConfig,
    HacConfig,
    bootstrap_boundary_ci,
    boundary_report,
    hac_for_fit,
    integrated_squared_deviation,
    plug_in_ci,
    plug_in_variance,
    spatial_hac_se,
    specification_test,
)
from decayscope.ingest import DistancedSample
from decayscope.kernels import Bandwidth, DecayCurve, fit_decay_curve, get_kernel, \
    local_poly_evaluate, kernel_density, default_grid
from decayscope.parametric import fit_exponential, log_residuals
from decayscope.synth import (
    Exponential,
    SyntheticSpec,
    generate,
    generate_spatial,
    random_sources,
)

from conftest import EXP_DGP, QUAD_DGP


# ---------------------------------------------------------------- bootstrap

def test_bootstrap_config_validation():
    with pytest.raises(ConfigurationError, match="practical minimum"):
        BootstrapConfig(B=10)
    assert BootstrapConfig(B=10, allow_small_B=True).B == 10
    with pytest.raises(ConfigurationError):
        BootstrapConfig(n_b=50)
    with pytest.raises(ConfigurationError):
        BootstrapConfig(alpha=1.0)
    with pytest.raises(ConfigurationError):
        BootstrapConfig(B=1, allow_small_B=True)


def test_bootstrap_generators_independent_streams():
    g = BootstrapConfig(B=20, seed=3).generators()
    draws = [r.random() for r in g]
    assert len(set(draws)) == 20
    again = [r.random() for r in BootstrapConfig(B=20, seed=3).generators()]
    assert draws == again


def test_bootstrap_reproducible_and_thread_invariant():
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 20_000, seed=1)).sample
    est = SpatialBoundaryEstimator(epsilon=0.6)
    boot = BootstrapConfig(B=20, n_b=5000, seed=9)
    a = bootstrap_boundary_ci(s, est, boot)
    b = bootstrap_boundary_ci(s, est, boot, n_jobs=3)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert (a.lo, a.hi) == (b.lo, b.hi)
    ok = a.replicates[~np.isnan(a.replicates)]
    assert a.lo == pytest.approx(np.quantile(ok, 0.025))
    assert a.lo <= EXP_DGP.boundary(0.6) + 10 and a.hi >= EXP_DGP.boundary(0.6) - 10


def test_bootstrap_failures_counted():
    # threshold crossing sits just past the grid end for many resamples
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 20_000, seed=2)).sample
    est = SpatialBoundaryEstimator(epsilon=0.48)
    r = bootstrap_boundary_ci(s, est, BootstrapConfig(B=20, n_b=2000, seed=0))
    assert r.n_failed == int(np.isnan(r.replicates).sum())
    assert r.n_failed > 0
    assert r.unreliable == (r.n_failed > 10)
    d = r.to_dict()
    assert d["replicates"].count(None) == r.n_failed


def test_bootstrap_all_fail_gives_nan():
    s = generate(SyntheticSpec(Exponential(2.0, 0.0001), 0.01, 2000, seed=0)).sample
    r = bootstrap_boundary_ci(s, SpatialBoundaryEstimator(epsilon=0.2),
                              BootstrapConfig(B=20, n_b=500))
    assert r.n_failed == 20 and r.unreliable and math.isnan(r.lo)


# ---------------------------------------------------------------- plug-in

def synthetic_curve(grid, m, m1, f, s2, h=2.0, n=1000):
    return DecayCurve(grid, m, m1, f, s2, Bandwidth(h), get_kernel("epanechnikov"), 1, n)


def test_plug_in_variance_hand_values():
    grid = np.arange(0.0, 101.0)
    m = 10 - 0.05 * grid + 0.0001 * grid ** 2
    m1 = -0.05 + 0.0002 * grid
    c = synthetic_curve(grid, m, m1, np.full(101, 0.01), np.full(101, 0.04), h=3.0, n=5000)
    pv = plug_in_variance(c, 40.0)
    assert pv.m_prime == pytest.approx(-0.042)
    assert pv.m_double_prime == pytest.approx(0.0002)
    assert pv.bias == pytest.approx(0.5 * 9 * (0.0002 / -0.042) * 0.2)
    assert pv.V == pytest.approx(0.04 * 0.6 / (0.042 ** 2 * 0.01))
    assert pv.se == pytest.approx(math.sqrt(pv.V / (5000 * 3.0)))
    b = estimate_boundary(c, 0.7)
    r = plug_in_ci(c, b, source_term=False)
    centre = b.d_star - plug_in_variance(c, b.d_star).bias
    assert (r.lo + r.hi) / 2 == pytest.approx(centre)
    assert r.hi - r.lo == pytest.approx(2 * 1.959963984540054 * r.variance.se)
    # source term: f at the edge is doubled to undo the half kernel mass
    v = r.variance
    assert v.epsilon == pytest.approx(0.7)
    assert v.V_source == pytest.approx(0.49 * 0.04 * 4.497981796596762
                                       / (v.m_prime ** 2 * 0.02), rel=1e-6)
    full = plug_in_ci(c, b)
    assert full.source_term
    assert full.hi - full.lo == pytest.approx(2 * 1.959963984540054 * v.se_total)


def test_plug_in_linear_in_sigma2_and_unbiased_on_line():
    grid = np.arange(0.0, 101.0)
    m = 10 - 0.08 * grid
    c1 = synthetic_curve(grid, m, np.full(101, -0.08), np.full(101, 0.01), np.full(101, 0.04))
    c2 = synthetic_curve(grid, m, np.full(101, -0.08), np.full(101, 0.01), np.full(101, 0.08))
    a, b = plug_in_variance(c1, 50.0), plug_in_variance(c2, 50.0)
    assert b.V == pytest.approx(2 * a.V) and a.bias == 0.0


def test_plug_in_flat_crossing_refused():
    grid = np.arange(0.0, 11.0)
    c = synthetic_curve(grid, np.linspace(2, 0, 11), np.full(11, 1e-8), np.full(11, 0.1),
                        np.full(11, 0.04))
    b = estimate_boundary(c, 0.5)
    with pytest.raises(DegenerateInputError, match="slope floor"):
        plug_in_ci(c, b)
    rep = boundary_report(c, 0.5)
    assert rep.found and rep.ci is None


def test_plug_in_no_crossing_refused():
    grid = np.arange(0.0, 11.0)
    c = synthetic_curve(grid, np.full(11, 2.0), np.zeros(11), np.full(11, 0.1), np.full(11, 0.04))
    with pytest.raises(DegenerateInputError):
        plug_in_ci(c, estimate_boundary(c, 0.5))


def test_plug_in_se_matches_monte_carlo():
    # V alone describes the crossing of the true threshold; the total adds
    # the source-level noise and should track the spread of the estimator
    truth = EXP_DGP.boundary(0.6)
    tau = 0.6 * EXP_DGP.A
    ests, known, se, se_total = [], [], [], []
    for r in range(40):
        s = generate(SyntheticSpec(EXP_DGP, 0.2, 50_000, seed=500 + r)).sample
        c = fit_decay_curve(s)
        b = estimate_boundary(c, 0.6)
        g = np.flatnonzero(c.m_hat <= tau)[0]
        known.append(c.grid[g - 1] + (c.m_hat[g - 1] - tau) / (c.m_hat[g - 1] - c.m_hat[g]))
        ests.append(b.d_star)
        v = plug_in_variance(c, b.d_star)
        se.append(v.se)
        se_total.append(v.se_total)
    assert 0.75 < np.median(se) / np.std(known, ddof=1) < 1.33
    assert 0.75 < np.median(se_total) / np.std(ests, ddof=1) < 1.33
    assert abs(np.mean(ests) - truth) < 3 * np.std(ests) / math.sqrt(40) + 0.5


def test_boundary_report_attaches_ci():
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 20_000, seed=0)).sample
    rep = boundary_report(fit_decay_curve(s), 0.6)
    assert rep.ci_method == "plug-in" and rep.ci[0] < rep.d_star < rep.ci[1]


# ---------------------------------------------------------------- HAC

def hac_oracle(x, e, lat, lon, bw):
    x = x - x.mean()
    s = x * e
    D = haversine(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    W = np.where(D <= bw, 1 - D / bw, 0.0)
    return math.sqrt(s @ W @ s) / (x @ x)


def test_hac_matches_dense_oracle(rng):
    n = 400
    lat = rng.uniform(38, 40, n)
    lon = rng.uniform(-81, -79, n)
    x = rng.uniform(0, 100, n)
    e = rng.normal(size=n)
    for bw in (10.0, 60.0):
        r = spatial_hac_se(x, e, lat, lon, HacConfig(bandwidth_km=bw))
        assert r.subsample_share == 1.0
        assert r.se_hac == pytest.approx(hac_oracle(x, e, lat, lon, bw), rel=1e-10)
    xc = x - x.mean()
    assert r.se_hc0 == pytest.approx(math.sqrt(np.sum((xc * e) ** 2)) / (xc @ xc), rel=1e-12)
    assert r.se_iid == pytest.approx(math.sqrt(e @ e / (n - 2) / (xc @ xc)), rel=1e-12)


def test_hac_tiny_bandwidth_is_hc0(rng):
    n = 300
    lat, lon = rng.uniform(0, 10, n), rng.uniform(0, 10, n)
    r = spatial_hac_se(rng.normal(size=n), rng.normal(size=n), lat, lon, HacConfig(1e-6))
    assert r.se_hac == pytest.approx(r.se_hc0, rel=1e-12) and r.n_pairs == 0


def test_hac_subsample_approximates_exact(rng):
    n = 6000
    lat, lon = rng.uniform(38, 39, n), rng.uniform(-80, -79, n)
    x = rng.uniform(0, 100, n)
    e = rng.normal(size=n) + np.sin(lat * 20)   # spatially smooth component
    exact = spatial_hac_se(x, e, lat, lon, HacConfig(30.0))
    sub = spatial_hac_se(x, e, lat, lon, HacConfig(30.0, max_pairs_subsample=2_000_000))
    assert sub.subsample_share < 1.0
    assert sub.se_hac == pytest.approx(exact.se_hac, rel=0.25)
    assert sub.se_hc0 == exact.se_hc0


def test_hac_input_validation(rng):
    with pytest.raises(InputValidationError):
        spatial_hac_se(np.ones(3), np.ones(2), np.ones(3), np.ones(3))
    with pytest.raises(InputValidationError):
        spatial_hac_se(np.arange(3.0), np.array([1.0, np.nan, 0.0]), np.ones(3), np.ones(3))
    with pytest.raises(DegenerateInputError):
        spatial_hac_se(np.ones(3), np.ones(3), np.zeros(3), np.zeros(3))
    with pytest.raises(ConfigurationError):
        HacConfig(bandwidth_km=0)


def test_hac_for_fit_sets_field_and_uses_log_residuals():
    src = random_sources(4, (38, 40), (-81, -79), seed=1)
    spec = SyntheticSpec(EXP_DGP, 0.2, 2000, seed=0, noise="lognormal")
    s = generate_spatial(spec, src, 20.0).sample
    fit = fit_exponential(s)
    r = hac_for_fit(s, fit, HacConfig(30.0))
    assert fit.se_kappa_hac == r.se_hac
    resid = log_residuals(fit, s.distances, s.outcomes)
    assert r.se_hac == pytest.approx(hac_oracle(s.distances, resid, s.lat, s.lon, 30.0),
                                     rel=1e-9)
    assert r.se_iid == pytest.approx(fit.se_kappa_iid, rel=1e-12)
    with pytest.raises(ConfigurationError):
        hac_for_fit(DistancedSample(s.distances, s.outcomes))


def test_hac_for_fit_with_groups():
    src = random_sources(4, (38, 40), (-81, -79), seed=1)
    spec = SyntheticSpec(EXP_DGP, 0.2, 1500, seed=3, noise="lognormal")
    s0 = generate_spatial(spec, src, 20.0).sample
    g = np.where(s0.lon < -80, "A", "B")
    s = DistancedSample(s0.distances, s0.outcomes, s0.d_max, s0.lat, s0.lon, groups=g)
    fit = fit_exponential(s, True)
    r = hac_for_fit(s, fit, groups=True)
    assert r.se_iid == pytest.approx(fit.se_kappa_iid, rel=1e-10)


# ---------------------------------------------------------------- spec test

def test_statistic_matches_direct_smoothing():
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 3000, seed=4, noise="lognormal")).sample
    res = specification_test(s, h=6.0, boot=BootstrapConfig(B=20, seed=1))
    fit = fit_exponential(s)
    e = log_residuals(fit, s.distances, s.outcomes)
    grid = default_grid(100)
    g = local_poly_evaluate(s.distances, e, grid, 6.0)[:, 0]
    f = kernel_density(s.distances, grid, 6.0)
    assert res.T_n == pytest.approx(np.trapezoid(g * g * f, grid), rel=1e-9)
    assert integrated_squared_deviation(g, f, grid) == pytest.approx(res.T_n, rel=1e-9)


def test_annihilator_equals_refit_oracle():
    # the bootstrap shortcut equals rebuilding outcomes and refitting OLS
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 800, seed=5, noise="lognormal")).sample
    boot = BootstrapConfig(B=20, seed=7)
    res = specification_test(s, h=8.0, boot=boot)
    fit = fit_exponential(s)
    e = log_residuals(fit, s.distances, s.outcomes)
    grid = default_grid(100)
    f = kernel_density(s.distances, grid, 8.0)
    rng = np.random.default_rng(7)
    for b in range(3):
        e_star = e[rng.integers(0, e.size, e.size)]
        y_star = np.exp(fit.alpha - fit.kappa * s.distances + e_star)
        refit = fit_exponential((s.distances, y_star))
        r = log_residuals(refit, s.distances, y_star)
        g = local_poly_evaluate(s.distances, r, grid, 8.0)[:, 0]
        assert res.T_boot[b] == pytest.approx(np.trapezoid(g * g * f, grid), rel=1e-8)


def test_annihilator_with_groups_equals_fe_refit():
    rng = np.random.default_rng(0)
    s0 = generate(SyntheticSpec(EXP_DGP, 0.2, 600, seed=6, noise="lognormal")).sample
    g = rng.choice(np.array(["a", "b", "c"]), s0.n)
    s = DistancedSample(s0.distances, s0.outcomes, 100.0, groups=g)
    res = specification_test(s, h=8.0, boot=BootstrapConfig(B=20, seed=2), groups=True)
    fit = fit_exponential(s, True)
    e = log_residuals(fit, s.distances, s.outcomes, g)
    grid = default_grid(100)
    f = kernel_density(s.distances, grid, 8.0)
    r2 = np.random.default_rng(2)
    e_star = e[r2.integers(0, e.size, e.size)]
    y_star = np.exp(np.log(fit_pred := np.exp(np.log(s.outcomes) - e)) + e_star)
    refit = fit_exponential((s.distances, y_star), groups=g)
    r = log_residuals(refit, s.distances, y_star, g)
    gh = local_poly_evaluate(s.distances, r, grid, 8.0)[:, 0]
    assert res.T_boot[0] == pytest.approx(np.trapezoid(gh * gh * f, grid), rel=1e-8)
    assert fit_pred.shape == e.shape


def test_spec_test_exact_exponential_statistic_zero():
    d = np.linspace(0, 100, 500)
    res = specification_test(DistancedSample(d, EXP_DGP(d), 100.0), h=5.0,
                             boot=BootstrapConfig(B=20))
    assert res.T_n < 1e-25


def test_spec_test_reproducible_and_power():
    s = generate(SyntheticSpec(QUAD_DGP, 0.2, 20_000, seed=0)).sample
    a = specification_test(s, boot=BootstrapConfig(B=49, seed=3))
    b = specification_test(s, boot=BootstrapConfig(B=49, seed=3))
    assert a.p_value == b.p_value and np.array_equal(a.T_boot, b.T_boot)
    assert a.p_value == 0.0 and a.reject_at[0.01]
    assert set(a.to_dict()) >= {"T_n", "p_value", "B_used", "h", "reject_at"}


def test_spec_test_null_p_not_small():
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 5000, seed=11, noise="lognormal")).sample
    assert specification_test(s, boot=BootstrapConfig(B=99, seed=0)).p_value > 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_plug_in_width_within_factor_two_of_bootstrap(seed):
    s = generate(SyntheticSpec(EXP_DGP, 0.2, 100_000, seed=seed)).sample
    c = fit_decay_curve(s)
    b = estimate_boundary(c, 0.5)
    p = plug_in_ci(c, b)
    bb = bootstrap_boundary_ci(s, SpatialBoundaryEstimator(epsilon=0.5),
                               BootstrapConfig(B=50, seed=seed))
    assert 0.5 <= (bb.hi - bb.lo) / (p.hi - p.lo) <= 2.0


def test_noiseless_bootstrap_zero_width():
    d = np.random.default_rng(0).uniform(0, 100, 20_000)
    s = DistancedSample(d, EXP_DGP(d), 100.0)
    r = bootstrap_boundary_ci(s, SpatialBoundaryEstimator(epsilon=0.6, bandwidth=3.0),
                              BootstrapConfig(B=20, n_b=5000))
    assert r.hi - r.lo < 0.05 and r.n_failed == 0
