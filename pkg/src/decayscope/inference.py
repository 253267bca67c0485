"""Uncertainty for boundary estimates and the exponential baseline.

* subsample percentile bootstrap for the nonparametric boundary,
* asymptotic plug-in interval from the local-linear bias/variance formulas,
* Conley-type spatial HAC standard error for the log-linear decay rate,
* integrated-squared-deviation specification test of the exponential form.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.stats import norm
from sklearn.base import clone

from ._validation import check_epsilon
from .boundary import SpatialBoundaryEstimator, estimate_boundary
from .errors import ConfigurationError, DegenerateInputError, InputValidationError
from .geo import pairs_within
from .kernels import (
    _as_h,
    _resolve_grid,
    _sample_arrays,
    default_grid,
    get_kernel,
    kernel_density,
    silverman_bandwidth,
    smoother_matrix,
)
from .parametric import _demean_by_group, fit_exponential

SLOPE_FLOOR = 1e-6


def _check_alpha(alpha):
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


@dataclass(frozen=True)
class BootstrapConfig:
    """Replication settings shared by the boundary bootstrap and the specification test.

    ``B`` below ``min_B`` (20) is refused unless ``allow_small_B`` is set:
    percentile quantiles from a handful of replicates are not meaningful.
    Replicate ``b`` draws from the ``b``-th child of ``SeedSequence(seed)``.
    """

    B: int = 50
    n_b: int = 50_000
    seed: int = 0
    alpha: float = 0.05
    min_B: int = 20
    allow_small_B: bool = False

    def __post_init__(self):
        if int(self.B) != self.B or self.B < 2:
            raise ConfigurationError("B must be an integer >= 2")
        if self.B < self.min_B and not self.allow_small_B:
            raise ConfigurationError(
                f"B={self.B} is below the practical minimum {self.min_B}; "
                "set allow_small_B=True to override")
        if int(self.n_b) != self.n_b or self.n_b < 100:
            raise ConfigurationError("n_b must be an integer >= 100")
        _check_alpha(self.alpha)

    def generators(self):
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(self.B)]


@dataclass
class BootstrapResult:
    """Percentile bootstrap interval for the boundary.

    ``replicates`` holds one value per replicate in replicate order, NaN
    where the replicate curve did not cross the threshold inside the grid.
    Those replicates are excluded from the quantiles and counted in
    ``n_failed``; more than half failing marks the interval unreliable.
    """

    lo: float
    hi: float
    replicates: np.ndarray
    n_failed: int
    unreliable: bool
    alpha: float
    B: int
    n_b: int

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi, "alpha": self.alpha, "B": self.B, "n_b": self.n_b,
                "n_failed": self.n_failed, "unreliable": self.unreliable,
                "failure_policy": "no-crossing replicates excluded from quantiles",
                "replicates": [None if math.isnan(v) else v for v in self.replicates.tolist()]}


def _replicate(estimator, x, y, n_b, rng):
    idx = rng.integers(0, x.size, n_b)
    est = clone(estimator).fit(x[idx], y[idx])
    return np.nan if est.d_star_ is None else est.d_star_


def bootstrap_boundary_ci(sample, estimator=None, boot=None, n_jobs=1):
    """Subsample bootstrap interval for the nonparametric boundary.

    Each replicate resamples ``n_b`` observations with replacement, refits a
    clone of ``estimator`` (bandwidth re-selected on the replicate when the
    estimator uses a rule) and records its boundary.

    Parameters
    ----------
    sample : DistancedSample or (distances, outcomes)
    estimator : SpatialBoundaryEstimator, optional
        Defaults to ``SpatialBoundaryEstimator(epsilon=0.5)``. When it has
        neither ``grid`` nor ``d_max`` set, the sample's ``d_max`` is used so
        every replicate shares one grid.
    boot : BootstrapConfig, optional
    n_jobs : int
        Worker threads. Results do not depend on it.

    Returns
    -------
    BootstrapResult
    """
    boot = BootstrapConfig() if boot is None else boot
    estimator = SpatialBoundaryEstimator(epsilon=0.5) if estimator is None else estimator
    x, y = _sample_arrays(sample)
    est = clone(estimator).set_params(compute_variance=False)
    if est.grid is None and est.d_max is None:
        est.set_params(d_max=getattr(sample, "d_max", float(x.max())))
    rngs = boot.generators()
    if n_jobs == 1:
        reps = [_replicate(est, x, y, boot.n_b, r) for r in rngs]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            reps = list(pool.map(lambda r: _replicate(est, x, y, boot.n_b, r), rngs))
    reps = np.asarray(reps, dtype=np.float64)
    ok = reps[~np.isnan(reps)]
    n_failed = int(reps.size - ok.size)
    if ok.size:
        lo, hi = np.quantile(ok, [boot.alpha / 2, 1 - boot.alpha / 2])
        lo, hi = float(lo), float(hi)
    else:
        lo = hi = float("nan")
    return BootstrapResult(lo=lo, hi=hi, replicates=reps, n_failed=n_failed,
                           unreliable=n_failed > 0.5 * reps.size, alpha=boot.alpha,
                           B=boot.B, n_b=boot.n_b)


@dataclass(frozen=True)
class PlugInVariance:
    """Plug-in ingredients of the asymptotic law of the boundary estimator.

    ``bias = (h**2 / 2) * (m'' / m') * mu2`` and
    ``V = sigma2 * nu0 / (m'**2 * f)``, all read off the curve at d_star.
    ``V`` treats the threshold ``epsilon * m(d_1)`` as known. Estimating the
    source level adds ``V_source = epsilon**2 * sigma2(d_1) * nu0_edge /
    (m'**2 * f(d_1))``, where ``nu0_edge`` is the roughness of the one-sided
    local-linear equivalent kernel and ``f(d_1)`` undoes the half-mass of the
    uncorrected density at the support edge.
    """

    V: float
    bias: float
    sigma2: float
    m_prime: float
    m_double_prime: float
    f: float
    mu2: float
    nu0: float
    h: float
    n: int
    V_source: float = 0.0
    epsilon: float = float("nan")

    @property
    def se(self):
        """Standard error with the threshold treated as known."""
        return math.sqrt(self.V / (self.n * self.h))

    @property
    def se_total(self):
        """Standard error including source-level estimation noise."""
        return math.sqrt((self.V + self.V_source) / (self.n * self.h))


@dataclass
class PlugInResult:
    lo: float
    hi: float
    variance: PlugInVariance
    source_term: bool = True


@lru_cache(maxsize=None)
def _edge_constants(family):
    """Half mass and equivalent-kernel roughness of local linear at a support edge."""
    kern = get_kernel(family)
    up = kern.support
    mu = [integrate.quad(lambda u, j=j: u ** j * kern(u), 0.0, up)[0] for j in range(3)]
    det = mu[0] * mu[2] - mu[1] ** 2
    nu = integrate.quad(lambda u: ((mu[2] - mu[1] * u) * kern(u) / det) ** 2, 0.0, up)[0]
    return mu[0], nu


def plug_in_variance(curve, d_star, slope_floor=SLOPE_FLOOR):
    """Evaluate the bias and variance terms at ``d_star``.

    ``m''`` is the central-difference derivative of the stored slope array.
    The source-level term assumes the distance support starts at the first
    grid point and that ``d_star`` lies more than one kernel support from it,
    so the two local fits share no observations.

    Raises
    ------
    DegenerateInputError
        If ``|m'(d_star)|`` is below ``slope_floor`` (boundary weakly
        identified) or the curve has no density/variance at ``d_star``.
    """
    g = curve.grid
    m1 = float(np.interp(d_star, g, curve.m_prime_hat))
    if not abs(m1) > slope_floor:
        raise DegenerateInputError(
            f"|m'(d*)|={abs(m1):.3g} is below the slope floor {slope_floor:g}; "
            "near-flat crossing, boundary weakly identified")
    m2 = float(np.interp(d_star, g, np.gradient(curve.m_prime_hat, g)))
    s2 = float(np.interp(d_star, g, curve.sigma2_hat))
    f = float(np.interp(d_star, g, curve.f_hat))
    if not (math.isfinite(s2) and f > 0):
        raise DegenerateInputError("curve lacks a usable variance or density estimate at d*")
    kern = get_kernel(curve.kernel)
    h = _as_h(curve.h).h
    bias = 0.5 * h * h * (m2 / m1) * kern.mu2
    V = s2 * kern.nu0 / (m1 * m1 * f)
    eps = float(np.interp(d_star, g, curve.m_hat)) / float(curve.m_hat[0])
    half, nu_edge = _edge_constants(kern.family)
    s2_0, f_0 = float(curve.sigma2_hat[0]), float(curve.f_hat[0]) / half
    V_source = eps * eps * s2_0 * nu_edge / (m1 * m1 * f_0) \
        if math.isfinite(s2_0) and f_0 > 0 else float("nan")
    return PlugInVariance(V=V, bias=bias, sigma2=s2, m_prime=m1, m_double_prime=m2, f=f,
                          mu2=kern.mu2, nu0=kern.nu0, h=h, n=curve.n, V_source=V_source,
                          epsilon=eps)


def plug_in_ci(curve, boundary, alpha=0.05, slope_floor=SLOPE_FLOOR, source_term=True):
    """Asymptotic interval ``d* - bias -/+ z * se``.

    With ``source_term=False`` the standard error is ``sqrt(V / (n h))``
    exactly; by default the source-level term is added, which matters
    because the local-linear fit at the support edge is several times
    noisier than in the interior.

    Raises
    ------
    DegenerateInputError
        No boundary crossing, or a crossing flatter than ``slope_floor``.
    """
    alpha = _check_alpha(alpha)
    if boundary.d_star is None:
        raise DegenerateInputError("no boundary crossing; plug-in interval undefined")
    pv = plug_in_variance(curve, boundary.d_star, slope_floor)
    se = pv.se_total if source_term and math.isfinite(pv.V_source) else pv.se
    z = norm.ppf(1 - alpha / 2)
    centre = boundary.d_star - pv.bias
    return PlugInResult(lo=centre - z * se, hi=centre + z * se, variance=pv,
                        source_term=bool(source_term and math.isfinite(pv.V_source)))


@dataclass(frozen=True)
class HacConfig:
    """Spatial HAC settings.

    Pairs with separation below ``bandwidth_km`` get Bartlett weight
    ``1 - dist / bandwidth_km``. When the estimated number of such pairs
    exceeds ``max_pairs_subsample``, the off-diagonal part of the meat is
    computed on a random row subsample of share ``q`` and scaled by
    ``1 / q**2``; the diagonal is always exact.
    """

    bandwidth_km: float = 50.0
    max_pairs_subsample: int = 50_000_000
    seed: int = 0

    def __post_init__(self):
        if not self.bandwidth_km > 0:
            raise ConfigurationError("HAC bandwidth must be positive")
        if self.max_pairs_subsample < 1:
            raise ConfigurationError("max_pairs_subsample must be >= 1")


@dataclass
class HacResult:
    se_hac: float
    se_iid: float
    se_hc0: float
    n: int
    n_pairs: int
    subsample_share: float = 1.0

    @property
    def ratio(self):
        return self.se_hac / self.se_iid

    def to_dict(self):
        return {"se_hac": self.se_hac, "se_iid": self.se_iid, "se_hc0": self.se_hc0,
                "ratio": self.ratio, "n": self.n, "n_pairs": self.n_pairs,
                "subsample_share": self.subsample_share}


def _offdiag_meat(s, lat, lon, bw):
    total, count = 0.0, 0
    for i, j, d in pairs_within(lat, lon, bw):
        off = i != j
        w = 1.0 - d[off] / bw
        total += float(np.sum(w * s[i[off]] * s[j[off]]))
        count += int(off.sum())
    return total, count


def spatial_hac_se(regressor, residuals, lat, lon, cfg=None, n_params=2, demean=True):
    """Conley standard error of an OLS slope with a Bartlett distance taper.

    Parameters
    ----------
    regressor : array
        Slope regressor (distance). Demeaned here unless ``demean=False``,
        e.g. when already demeaned within fixed-effect groups.
    residuals : array
        OLS residuals aligned with ``regressor``.
    lat, lon : arrays
        Observation coordinates in degrees.
    cfg : HacConfig, optional
    n_params : int
        Parameters in the model, for the iid degrees-of-freedom correction.

    Returns
    -------
    HacResult
        ``se_hac``, together with the classical and HC0 standard errors.
    """
    cfg = HacConfig() if cfg is None else cfg
    x = np.asarray(regressor, dtype=np.float64)
    e = np.asarray(residuals, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if not (x.shape == e.shape == lat.shape == lon.shape) or x.ndim != 1:
        raise InputValidationError("regressor, residuals and coordinates must be aligned 1-D arrays")
    if not np.all(np.isfinite(e)):
        raise InputValidationError("residuals must be finite")
    if demean:
        x = x - x.mean()
    sxx = float(x @ x)
    if not sxx > 0:
        raise DegenerateInputError("slope regressor has no variation")
    n = x.size
    s = x * e
    diag = float(s @ s)
    bw = cfg.bandwidth_km

    q = 1.0
    pilot_n = min(n, 4000)
    if n * (n - 1) > cfg.max_pairs_subsample and pilot_n < n:
        rng = np.random.default_rng(cfg.seed)
        pilot = rng.choice(n, pilot_n, replace=False)
        _, c0 = _offdiag_meat(s[pilot], lat[pilot], lon[pilot], bw)
        est_pairs = c0 * (n / pilot_n) ** 2
        if est_pairs > cfg.max_pairs_subsample:
            q = math.sqrt(cfg.max_pairs_subsample / est_pairs)
    if q < 1.0:
        rng = np.random.default_rng([cfg.seed, 1])
        keep = np.flatnonzero(rng.random(n) < q)
        off, count = _offdiag_meat(s[keep], lat[keep], lon[keep], bw)
        off /= q * q
    else:
        off, count = _offdiag_meat(s, lat, lon, bw)
    meat = diag + off
    # a distance Bartlett taper is not guaranteed PSD in 2-D; fall back to HC0 if it goes negative
    var_hac = (meat if meat >= 0 else diag) / sxx ** 2
    dof = n - n_params
    se_iid = math.sqrt(float(e @ e) / dof / sxx) if dof > 0 else float("nan")
    return HacResult(se_hac=math.sqrt(var_hac), se_iid=se_iid, se_hc0=math.sqrt(diag) / sxx,
                     n=n, n_pairs=count, subsample_share=q)


def hac_for_fit(sample, fit=None, cfg=None, groups=None):
    """Spatial HAC for the exponential fit of a geolocated sample.

    Fits :func:`~decayscope.parametric.fit_exponential` when ``fit`` is not
    given and stores the result in ``fit.se_kappa_hac``.
    """
    if sample.lat is None or sample.lon is None:
        raise ConfigurationError("sample carries no coordinates; spatial HAC needs locations")
    groups = sample.groups if groups is True else groups
    fit = fit_exponential(sample, groups) if fit is None else fit
    pos = sample.outcomes > 0
    d = sample.distances[pos]
    e = np.log(sample.outcomes[pos])
    if groups is None:
        x = d - d.mean()
        e = e - (fit.alpha - fit.kappa * d)
        k = 2
    else:
        labels, codes = np.unique(np.asarray(groups)[pos], return_inverse=True)
        x, _ = _demean_by_group(d, codes, labels.size)
        e = e - np.array([fit.group_effects[g] for g in labels.tolist()])[codes] + fit.kappa * d
        k = labels.size + 1
    res = spatial_hac_se(x, e, sample.lat[pos], sample.lon[pos], cfg, n_params=k, demean=False)
    fit.se_kappa_hac = res.se_hac
    return res


@dataclass
class SpecTestResult:
    """Integrated squared deviation test of the exponential form.

    ``reject_at`` maps conventional levels to rejection flags.
    """

    T_n: float
    p_value: float
    B_used: int
    T_boot: np.ndarray = field(repr=False)
    h: float = float("nan")
    reject_at: dict = field(default_factory=dict)

    def to_dict(self):
        return {"T_n": self.T_n, "p_value": self.p_value, "B_used": self.B_used, "h": self.h,
                "reject_at": {str(k): v for k, v in self.reject_at.items()}}


def _annihilate(e, x_tilde, sxx, codes, n_groups):
    if codes is None:
        r = e - e.mean()
    else:
        r, _ = _demean_by_group(e, codes, n_groups)
    return r - x_tilde * (float(x_tilde @ r) / sxx)


def integrated_squared_deviation(g_hat, f_hat, grid):
    """``T = integral of g_hat**2 * f_hat`` by the trapezoid rule on ``grid``."""
    return float(np.trapezoid(np.asarray(g_hat) ** 2 * np.asarray(f_hat), np.asarray(grid)))


def specification_test(sample, grid=None, h=None, kernel="epanechnikov", order=1, boot=None,
                       groups=None):
    """Test ``H0: m(d) = A exp(-kappa d)`` against a nonparametric alternative.

    The log-linear model is fitted by OLS; its residuals are smoothed on
    distance by local polynomial regression to give ``g_hat`` and the
    statistic ``T_n`` integrates ``g_hat**2`` against the distance density.
    The null distribution comes from a residual bootstrap: residuals are
    resampled with replacement, outcomes rebuilt under the fitted
    exponential, the model refitted and ``T`` recomputed. Because OLS is
    linear, the refit residuals are the resampled residuals projected off
    the design, which is what is computed.

    Parameters
    ----------
    sample : DistancedSample or (distances, outcomes)
    grid : array or (d_min, d_max, G), optional
        Integration grid; defaults to the 1 km grid on [0, d_max].
    h : float or Bandwidth, optional
        Smoothing bandwidth; Silverman's rule on the used rows by default.
    boot : BootstrapConfig, optional
        Only ``B`` and ``seed`` are used.
    groups : array of labels or True, optional
        Fixed effects in the null model.
    """
    boot = BootstrapConfig(B=199) if boot is None else boot
    fit = fit_exponential(sample, groups)
    x_all, y_all = _sample_arrays(sample)
    if groups is True:
        groups = sample.groups
    pos = y_all > 0
    d = x_all[pos]
    ly = np.log(y_all[pos])
    d_max = getattr(sample, "d_max", float(x_all.max()))
    grid = _resolve_grid(grid, d_max) if grid is not None else default_grid(d_max)
    h = silverman_bandwidth(d).h if h is None else _as_h(h).h

    if groups is None:
        codes, n_groups = None, 0
        x_tilde = d - d.mean()
        fitted = fit.alpha - fit.kappa * d
    else:
        labels, codes = np.unique(np.asarray(groups)[pos], return_inverse=True)
        n_groups = labels.size
        x_tilde, _ = _demean_by_group(d, codes, n_groups)
        fitted = np.array([fit.group_effects[g] for g in labels.tolist()])[codes] - fit.kappa * d
    sxx = float(x_tilde @ x_tilde)
    e = ly - fitted

    L = smoother_matrix(d, grid, h, kernel, order)
    f_hat = kernel_density(d, grid, h, kernel)
    T = integrated_squared_deviation(L @ e, f_hat, grid)

    rng = np.random.default_rng(boot.seed)
    T_boot = np.empty(boot.B)
    for b in range(boot.B):
        e_star = e[rng.integers(0, e.size, e.size)]
        r = _annihilate(e_star, x_tilde, sxx, codes, n_groups)
        T_boot[b] = integrated_squared_deviation(L @ r, f_hat, grid)
    p = float(np.mean(T_boot >= T))
    return SpecTestResult(T_n=T, p_value=p, B_used=boot.B, T_boot=T_boot, h=h,
                          reject_at={a: p < a for a in (0.10, 0.05, 0.01)})


def boundary_report(curve, epsilon, alpha=0.05):
    """Point estimate plus plug-in interval when it is defined."""
    est = estimate_boundary(curve, check_epsilon(epsilon))
    if est.found:
        try:
            r = plug_in_ci(curve, est, alpha)
            est.ci, est.ci_method = (r.lo, r.hi), "plug-in"
        except DegenerateInputError:
            pass
    return est
