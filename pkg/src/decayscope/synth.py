"""Synthetic data with known ground truth.

Every estimator in the package is checked against draws from here: the
true decay function and the true boundary are available in closed form
(exponential) or by numeric root finding (everything else).
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigurationError
from .geo import EARTH_RADIUS_KM, SourceSet, destination_point, normalize_lon
from .ingest import DistancedSample


def _numeric_boundary(m, epsilon, search_max=10_000.0, n_scan=200_001):
    """First d with m(d) <= epsilon * m(0), by scan then Brent refinement."""
    tau = epsilon * float(m(0.0))
    d = np.linspace(0.0, search_max, n_scan)
    with np.errstate(over="ignore"):
        below = np.flatnonzero(m(d) <= tau)
    if below.size == 0:
        return None
    j = int(below[0])
    if j == 0:
        return 0.0
    return float(brentq(lambda t: float(m(t)) - tau, d[j - 1], d[j], xtol=1e-12, rtol=1e-14))


@dataclass(frozen=True)
class Exponential:
    A: float
    kappa: float

    def __call__(self, d):
        return self.A * np.exp(-self.kappa * np.asarray(d, dtype=np.float64))

    def boundary(self, epsilon):
        if not self.kappa > 0:
            return None
        return math.log(1.0 / epsilon) / self.kappa


@dataclass(frozen=True)
class QuadraticExponent:
    """``A * exp(-a*d + b*d**2)``."""

    A: float
    a: float
    b: float

    def __call__(self, d):
        d = np.asarray(d, dtype=np.float64)
        return self.A * np.exp(-self.a * d + self.b * d * d)

    def boundary(self, epsilon):
        return _numeric_boundary(self, epsilon)


@dataclass(frozen=True)
class TwoRegime:
    """Exponential with rate ``kappa_near`` up to ``break_km``, ``kappa_far`` after.

    A negative ``kappa_far`` gives a curve that rises past the break.
    """

    A: float
    kappa_near: float
    kappa_far: float
    break_km: float

    def __call__(self, d):
        d = np.asarray(d, dtype=np.float64)
        near = np.minimum(d, self.break_km)
        far = np.maximum(d - self.break_km, 0.0)
        return self.A * np.exp(-self.kappa_near * near - self.kappa_far * far)

    def boundary(self, epsilon):
        return _numeric_boundary(self, epsilon)


@dataclass(frozen=True)
class PiecewiseTable:
    """Linear interpolation through ``(d, m)`` knots, flat beyond the ends."""

    d: tuple
    m: tuple

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.size < 2 or np.any(np.diff(d) <= 0):
            raise ConfigurationError("table distances must be strictly increasing (>= 2 knots)")
        if len(self.m) != d.size:
            raise ConfigurationError("table needs one value per knot")

    def __call__(self, d):
        return np.interp(d, np.asarray(self.d, dtype=np.float64), np.asarray(self.m, dtype=np.float64))

    def boundary(self, epsilon):
        return _numeric_boundary(self, epsilon, search_max=float(self.d[-1]))


_NOISE = ("gaussian", "student_t", "lognormal")
_LAWS = ("uniform", "ring")


@dataclass(frozen=True)
class SyntheticSpec:
    """Data-generating process for :func:`generate`.

    Parameters
    ----------
    form : Exponential, QuadraticExponent, TwoRegime or PiecewiseTable
    noise_sd : float
        Standard deviation of the additive noise (outcome units). For
        ``noise="lognormal"`` it is the sd of the log-scale multiplier.
    n : int
    seed : int
    d_max : float
    distance_law : {"uniform", "ring"}
        ``ring`` draws distances with density proportional to d, as for a
        uniform-area field around a point source.
    noise : {"gaussian", "student_t", "lognormal"}
        ``student_t`` uses 5 degrees of freedom rescaled to ``noise_sd``.
    """

    form: object
    noise_sd: float = 0.2
    n: int = 1000
    seed: int = 0
    d_max: float = 100.0
    distance_law: str = "uniform"
    noise: str = "gaussian"

    def __post_init__(self):
        if getattr(self.form, "A", 1.0) <= 0:
            raise ConfigurationError("amplitude A must be positive")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError("n must be a positive integer")
        if not self.noise_sd >= 0:
            raise ConfigurationError("noise_sd must be non-negative")
        if not self.d_max > 0:
            raise ConfigurationError("d_max must be positive")
        if self.distance_law not in _LAWS:
            raise ConfigurationError(f"distance_law must be one of {_LAWS}")
        if self.noise not in _NOISE:
            raise ConfigurationError(f"noise must be one of {_NOISE}")


@dataclass
class SyntheticDraw:
    sample: DistancedSample
    true_m: object
    noise: np.ndarray

    def true_boundary(self, epsilon):
        return self.true_m.boundary(epsilon)


def draw_distances(spec, rng, size=None):
    size = spec.n if size is None else size
    u = rng.random(size)
    if spec.distance_law == "ring":
        return spec.d_max * np.sqrt(u)
    return spec.d_max * u


def apply_noise(spec, m, errors):
    """Outcomes from true means ``m`` and standardized errors."""
    if spec.noise == "lognormal":
        return m * np.exp(spec.noise_sd * errors)
    return m + spec.noise_sd * errors


def standard_errors(spec, rng, size):
    if spec.noise == "student_t":
        return rng.standard_t(5, size) / math.sqrt(5.0 / 3.0)
    return rng.standard_normal(size)


def generate(spec):
    """Draw an i.i.d. sample ``Y = m(D) + noise`` with the generating process's truth attached."""
    rng = np.random.default_rng(spec.seed)
    d = draw_distances(spec, rng)
    e = standard_errors(spec, rng, spec.n)
    y = apply_noise(spec, spec.form(d), e)
    return SyntheticDraw(DistancedSample(d, y, d_max=spec.d_max), spec.form, e)


def random_sources(n_sources, lat_range, lon_range, seed=0, cell_deg=1.0):
    """Sites scattered uniformly (in area) over a lat/lon box."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(math.sin(math.radians(lat_range[0])), math.sin(math.radians(lat_range[1])),
                    n_sources)
    lat = np.degrees(np.arcsin(s))
    lon = normalize_lon(rng.uniform(lon_range[0], lon_range[1], n_sources))
    return SourceSet([f"s{i}" for i in range(n_sources)], lat, lon, cell_deg)


def _exp_cov(r, range_km):
    return np.exp(-r / range_km)


def simulate_field(nx, ny, spacing_km, range_km, rng):
    """Stationary Gaussian field with covariance ``exp(-r / range)`` on a lattice.

    Circulant embedding on a doubled torus; the (rare, tiny) negative
    eigenvalues of the embedding are clipped to zero.
    """
    mx, my = 2 * nx, 2 * ny
    ix = np.minimum(np.arange(mx), mx - np.arange(mx)) * spacing_km
    iy = np.minimum(np.arange(my), my - np.arange(my)) * spacing_km
    r = np.hypot(ix[:, None], iy[None, :])
    lam = np.real(np.fft.fft2(_exp_cov(r, range_km)))
    lam = np.clip(lam, 0.0, None)
    z = rng.standard_normal((mx, my)) + 1j * rng.standard_normal((mx, my))
    f = np.fft.fft2(np.sqrt(lam / (mx * my)) * z)
    return np.real(f)[:nx, :ny]


@dataclass
class SpatialDraw:
    lat: np.ndarray
    lon: np.ndarray
    distances: np.ndarray
    outcomes: np.ndarray
    errors: np.ndarray
    true_m: object
    sample: DistancedSample
    lattice_spacing_km: float


def generate_spatial(spec, sources, correlation_range_km, max_lattice_side=512):
    """Geolocated sample with spatially correlated errors.

    Points are uniform in area within ``spec.d_max`` of the nearest source.
    Errors come from an exponential-covariance Gaussian field simulated on
    a lattice in a local equirectangular projection and bilinearly
    interpolated to the points; the interpolated values are rescaled to
    unit variance, so interpolation smooths the field below the lattice
    spacing but leaves the marginal variance exact. The lattice spacing is
    ``range / 4`` unless that would exceed ``max_lattice_side`` nodes; a
    coarser lattice mixes in independent noise with weight
    ``1 - exp(-(spacing - range/4) / range)`` so that vanishing ranges give
    independent errors.

    Raises
    ------
    ConfigurationError
        If ``correlation_range_km`` is not positive.
    """
    if not correlation_range_km > 0:
        raise ConfigurationError("correlation range must be positive")
    rng = np.random.default_rng(spec.seed)
    pad = math.degrees(spec.d_max / EARTH_RADIUS_KM)
    lat_lo = max(-89.0, float(sources.lat.min()) - pad)
    lat_hi = min(89.0, float(sources.lat.max()) + pad)
    coslat = math.cos(math.radians(max(abs(lat_lo), abs(lat_hi))))
    lon_pad = min(180.0, pad / max(coslat, 1e-6))
    lon_c = float(sources.lon.mean())
    lon_lo = float(sources.lon.min()) - lon_pad
    lon_hi = float(sources.lon.max()) + lon_pad

    lat_parts, lon_parts, d_parts = [], [], []
    have = 0
    while have < spec.n:
        m = max(1024, 2 * (spec.n - have))
        s = rng.uniform(math.sin(math.radians(lat_lo)), math.sin(math.radians(lat_hi)), m)
        la = np.degrees(np.arcsin(s))
        lo = normalize_lon(rng.uniform(lon_lo, lon_hi, m))
        d = sources.nearest(la, lo)[0]
        keep = d <= spec.d_max
        lat_parts.append(la[keep])
        lon_parts.append(lo[keep])
        d_parts.append(d[keep])
        have += int(keep.sum())
    lat = np.concatenate(lat_parts)[:spec.n]
    lon = np.concatenate(lon_parts)[:spec.n]
    dist = np.concatenate(d_parts)[:spec.n]

    lat0 = 0.5 * (lat_lo + lat_hi)
    px = EARTH_RADIUS_KM * math.cos(math.radians(lat0)) * np.radians(normalize_lon(lon - lon_c))
    py = EARTH_RADIUS_KM * np.radians(lat - lat0)
    x0, y0 = px.min(), py.min()
    extent = max(px.max() - x0, py.max() - y0, 1e-9)
    spacing = max(correlation_range_km / 4.0, extent / (max_lattice_side - 2))
    nx = int(math.floor((px.max() - x0) / spacing)) + 2
    ny = int(math.floor((py.max() - y0) / spacing)) + 2
    field = simulate_field(nx, ny, spacing, correlation_range_km, rng)

    fx = (px - x0) / spacing
    fy = (py - y0) / spacing
    i = np.minimum(np.floor(fx).astype(np.int64), nx - 2)
    j = np.minimum(np.floor(fy).astype(np.int64), ny - 2)
    tx, ty = fx - i, fy - j
    w = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty])
    vals = np.stack([field[i, j], field[i + 1, j], field[i, j + 1], field[i + 1, j + 1]])
    raw = np.sum(w * vals, axis=0)
    c1 = _exp_cov(spacing, correlation_range_km)
    c2 = _exp_cov(spacing * math.sqrt(2.0), correlation_range_km)
    # corner order (00, 10, 01, 11): adjacent pairs at c1, diagonals at c2
    C4 = np.array([[1, c1, c1, c2], [c1, 1, c2, c1], [c1, c2, 1, c1], [c2, c1, c1, 1]])
    var = np.einsum("kn,kl,ln->n", w, C4, w)
    errors = raw / np.sqrt(var)
    # a lattice capped coarser than range/4 cannot resolve the short-range
    # structure; that share of the variance becomes an independent nugget
    rho = min(1.0, math.exp(-(spacing - correlation_range_km / 4.0) / correlation_range_km))
    if rho < 1.0:
        errors = math.sqrt(rho) * errors + math.sqrt(1.0 - rho) * rng.standard_normal(errors.size)

    y = apply_noise(spec, spec.form(dist), errors)
    sample = DistancedSample(dist, y, d_max=spec.d_max, lat=lat, lon=lon)
    return SpatialDraw(lat, lon, dist, y, errors, spec.form, sample, spacing)


def place_observations(distances, sources, rng):
    """Coordinates at the given distances from randomly chosen sources.

    Each point is placed on a random bearing from one source. With several
    sources a point can end up nearer to a different site, so callers should
    recompute nearest distances from the returned coordinates.
    """
    k = rng.integers(0, len(sources), np.size(distances))
    bearing = rng.uniform(0.0, 360.0, np.size(distances))
    return destination_point(sources.lat[k], sources.lon[k], bearing, distances)


def write_observations_csv(path, lat, lon, outcomes, periods="sim", groups=""):
    """Write the observation schema consumed by :func:`~decayscope.ingest.stream_ingest`."""
    n = np.size(outcomes)
    periods = np.broadcast_to(np.asarray(periods, dtype=object), (n,))
    groups = np.broadcast_to(np.asarray(groups, dtype=object), (n,))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", "period", "group", "outcome"])
        for row in zip(np.asarray(lat).tolist(), np.asarray(lon).tolist(), periods, groups,
                       np.asarray(outcomes).tolist()):
            w.writerow([repr(row[0]), repr(row[1]), row[2], row[3], repr(row[4])])
