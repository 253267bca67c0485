"""Great-circle distances and nearest-source lookup on a spherical Earth.

Nearest-source queries and radius-pair enumeration both use a regular
latitude/longitude bucket grid. The nearest search expands rings of cells
around each query cell and stops only once a lower bound on the distance
to every unvisited cell exceeds the best distance found, so the result is
exact rather than approximate.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputValidationError, SchemaError

EARTH_RADIUS_KM = 6371.0
MAX_DISTANCE_KM = math.pi * EARTH_RADIUS_KM


def normalize_lon(lon):
    """Map longitudes into [-180, 180)."""
    lon = np.asarray(lon, dtype=np.float64)
    out = np.mod(lon + 180.0, 360.0) - 180.0
    return out if out.ndim else float(out)


def validate_coords(lat, lon):
    """Check latitudes and normalize longitudes.

    Latitude outside [-90, 90] is an error, never clamped. Returns float64
    arrays of equal shape.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if lat.shape != lon.shape:
        raise InputValidationError(
            f"lat and lon shapes differ: {lat.shape} vs {lon.shape}")
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise InputValidationError("coordinates contain NaN or infinite values")
    if np.any(np.abs(lat) > 90.0):
        raise InputValidationError("latitude outside [-90, 90]")
    return lat, normalize_lon(lon) if lon.ndim else np.asarray(normalize_lon(lon))


@dataclass(frozen=True)
class GeoPoint:
    """A location in degrees; longitude is normalized on construction."""

    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = validate_coords(self.lat, self.lon)
        object.__setattr__(self, "lat", float(lat))
        object.__setattr__(self, "lon", float(lon))


def haversine(lat1, lon1, lat2, lon2):
    """Vectorized haversine distance in km (inputs in degrees, broadcastable)."""
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2) ** 2
    # rounding can push `a` a hair past 1 for antipodal pairs
    return EARTH_RADIUS_KM * 2 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine_km(a, b):
    """Distance in km between two :class:`GeoPoint` (or ``(lat, lon)`` pairs)."""
    a = a if isinstance(a, GeoPoint) else GeoPoint(*a)
    b = b if isinstance(b, GeoPoint) else GeoPoint(*b)
    return float(haversine(a.lat, a.lon, b.lat, b.lon))


def destination_point(lat, lon, bearing_deg, distance_km):
    """Point reached by travelling ``distance_km`` from (lat, lon) on a bearing."""
    phi1 = np.radians(lat)
    lam1 = np.radians(lon)
    theta = np.radians(bearing_deg)
    delta = np.asarray(distance_km, dtype=np.float64) / EARTH_RADIUS_KM
    sin_phi2 = np.sin(phi1) * np.cos(delta) + np.cos(phi1) * np.sin(delta) * np.cos(theta)
    phi2 = np.arcsin(np.clip(sin_phi2, -1.0, 1.0))
    lam2 = lam1 + np.arctan2(np.sin(theta) * np.sin(delta) * np.cos(phi1),
                             np.cos(delta) - np.sin(phi1) * sin_phi2)
    return np.degrees(phi2), normalize_lon(np.degrees(lam2))


class _Buckets:
    """Regular lat/lon cell grid; cell sizes divide 180 and 360 exactly."""

    def __init__(self, lat, lon, cell_deg):
        if not cell_deg > 0 or cell_deg > 180:
            raise ConfigurationError(f"cell size must be in (0, 180], got {cell_deg!r}")
        self.nrows = int(math.ceil(180.0 / cell_deg - 1e-9))
        self.ncols = int(math.ceil(360.0 / cell_deg - 1e-9))
        self.c_lat = 180.0 / self.nrows
        self.c_lon = 360.0 / self.ncols
        rows, cols = self.cell_of(lat, lon)
        key = rows * self.ncols + cols
        order = np.argsort(key, kind="stable")
        uniq, start = np.unique(key[order], return_index=True)
        stop = np.append(start[1:], key.size)
        self.members = {int(k): order[s:e] for k, s, e in zip(uniq, start, stop)}

    def cell_of(self, lat, lon):
        rows = np.floor((np.asarray(lat) + 90.0) / self.c_lat).astype(np.int64)
        cols = np.floor((np.asarray(lon) + 180.0) / self.c_lon).astype(np.int64)
        return np.clip(rows, 0, self.nrows - 1), np.mod(cols, self.ncols)

    def lookup(self, cells):
        idx = [self.members.get(r * self.ncols + c) for r, c in cells]
        idx = [i for i in idx if i is not None]
        return np.concatenate(idx) if idx else np.empty(0, dtype=np.int64)


def _lon_bound_km(delta_deg, abs_lat_deg):
    """Lower bound on distance to any point at least ``delta_deg`` away in longitude."""
    if delta_deg <= 0:
        return 0.0
    if delta_deg <= 90.0:
        s = math.cos(math.radians(abs_lat_deg)) * math.sin(math.radians(delta_deg))
        return EARTH_RADIUS_KM * math.asin(min(1.0, s))
    return EARTH_RADIUS_KM * math.radians(90.0 - abs_lat_deg)


@dataclass(eq=False)
class SourceSet:
    """Read-only set of treatment sources with a bucket index for nearest queries.

    Parameters
    ----------
    ids : sequence of str
    lat, lon : array-like, degrees
    cell_deg : float, default 1.0
        Bucket size. Affects speed only, never results.
    """

    ids: list
    lat: np.ndarray
    lon: np.ndarray
    cell_deg: float = 1.0
    _buckets: _Buckets = field(init=False, repr=False)
    _occupied: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        lat, lon = validate_coords(np.atleast_1d(self.lat), np.atleast_1d(self.lon))
        if lat.ndim != 1 or lat.size == 0:
            raise ConfigurationError("source set must contain at least one site")
        if len(self.ids) != lat.size:
            raise ConfigurationError("ids and coordinates have different lengths")
        lat.setflags(write=False)
        lon.setflags(write=False)
        self.lat, self.lon = lat, lon
        self._buckets = _Buckets(lat, lon, self.cell_deg)
        keys = np.fromiter(self._buckets.members, dtype=np.int64)
        rows, cols = np.divmod(keys, self._buckets.ncols)
        self._occupied = (rows, cols, [self._buckets.members[int(k)] for k in keys])

    @classmethod
    def from_points(cls, points, ids=None, cell_deg=1.0):
        points = [p if isinstance(p, GeoPoint) else GeoPoint(*p) for p in points]
        if ids is None:
            ids = [f"s{i}" for i in range(len(points))]
        return cls(ids, [p.lat for p in points], [p.lon for p in points], cell_deg)

    def __len__(self):
        return self.lat.size

    def nearest(self, lat, lon):
        """Distance (km) and index of the nearest site for each query point."""
        lat, lon = validate_coords(np.atleast_1d(lat), np.atleast_1d(lon))
        n = lat.size
        best = np.full(n, np.inf)
        arg = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return best, arg
        bk = self._buckets
        rows, cols = bk.cell_of(lat, lon)
        key = rows * bk.ncols + cols
        order = np.argsort(key, kind="stable")
        uniq, start = np.unique(key[order], return_index=True)
        stop = np.append(start[1:], n)
        for k, s, e in zip(uniq, start, stop):
            pts = order[s:e]
            r0, c0 = divmod(int(k), bk.ncols)
            self._search_block(pts, r0, c0, lat, lon, best, arg)
        return best, arg

    def _search_block(self, pts, r0, c0, lat, lon, best, arg):
        bk = self._buckets
        occ_r, occ_c, occ_members = self._occupied
        dr = np.abs(occ_r - r0)
        dc = np.abs(occ_c - c0)
        dc = np.minimum(dc, bk.ncols - dc)
        cheb = np.maximum(dr, dc)
        levels = np.unique(cheb)
        plat = lat[pts][:, None]
        plon = lon[pts][:, None]
        max_abs_lat = float(np.max(np.abs(lat[pts])))
        b = best[pts]
        a = arg[pts]
        for li, level in enumerate(levels):
            cand = np.sort(np.concatenate([occ_members[i] for i in np.flatnonzero(cheb == level)]))
            d = haversine(plat, plon, self.lat[cand][None, :], self.lon[cand][None, :])
            j = np.argmin(d, axis=1)
            dj = d[np.arange(d.shape[0]), j]
            # ties keep the lower site index
            better = (dj < b) | ((dj == b) & (cand[j] < a))
            b = np.where(better, dj, b)
            a = np.where(better, cand[j], a)
            if li + 1 == levels.size:
                break
            # unvisited sites lie >= next_level cells away in rows or columns
            gap = int(levels[li + 1]) - 1
            bound = min(EARTH_RADIUS_KM * math.radians(gap * bk.c_lat),
                        _lon_bound_km(gap * bk.c_lon, max_abs_lat))
            if np.all(b <= bound * (1.0 - 1e-12)):
                break
        best[pts] = b
        arg[pts] = a


def nearest_source_km(lat, lon, sources):
    """Distance (km) from each point to its nearest site in ``sources``.

    ``lat``/``lon`` may also be a sequence of :class:`GeoPoint` passed as the
    first argument with ``lon=None``.
    """
    if not isinstance(sources, SourceSet) or len(sources) == 0:
        raise ConfigurationError("a non-empty SourceSet is required")
    if lon is None:
        pts = list(lat)
        lat = [p.lat for p in pts]
        lon = [p.lon for p in pts]
    return sources.nearest(lat, lon)[0]


def brute_force_nearest_km(lat, lon, sources):
    """Exhaustive O(N*S) nearest distance. Reference oracle for the index."""
    lat, lon = validate_coords(np.atleast_1d(lat), np.atleast_1d(lon))
    d = haversine(lat[:, None], lon[:, None], sources.lat[None, :], sources.lon[None, :])
    return d.min(axis=1)


def pairs_within(lat, lon, radius_km, max_block=2_000_000):
    """Enumerate ordered point pairs (i, j) with distance <= radius_km.

    Yields ``(i, j, dist)`` array blocks; i == j pairs are included. Every
    qualifying ordered pair appears exactly once across all blocks.
    """
    lat, lon = validate_coords(np.atleast_1d(lat), np.atleast_1d(lon))
    if not radius_km > 0:
        raise ConfigurationError("radius must be positive")
    cell = min(180.0, max(math.degrees(radius_km / EARTH_RADIUS_KM), 0.01))
    bk = _Buckets(lat, lon, cell)
    row_reach = int(math.floor(math.degrees(radius_km / EARTH_RADIUS_KM) / bk.c_lat)) + 1
    sin_r = math.sin(min(radius_km / EARTH_RADIUS_KM, math.pi / 2))
    for key, members in bk.members.items():
        r0, c0 = divmod(key, bk.ncols)
        r_lo, r_hi = max(0, r0 - row_reach), min(bk.nrows - 1, r0 + row_reach)
        band_lat = max(abs(-90.0 + r_lo * bk.c_lat), abs(-90.0 + (r_hi + 1) * bk.c_lat))
        cos_band = math.cos(math.radians(min(band_lat, 90.0)))
        if radius_km / EARTH_RADIUS_KM >= math.pi / 2 or cos_band <= sin_r:
            col_reach = bk.ncols
        else:
            dlam = math.degrees(math.asin(sin_r / cos_band))
            col_reach = int(math.floor(dlam / bk.c_lon)) + 1
        if 2 * col_reach + 1 >= bk.ncols:
            cols = range(bk.ncols)
        else:
            cols = {c % bk.ncols for c in range(c0 - col_reach, c0 + col_reach + 1)}
        nbr = bk.lookup([(r, c) for r in range(r_lo, r_hi + 1) for c in cols])
        if nbr.size == 0:
            continue
        step = max(1, max_block // nbr.size)
        for s in range(0, members.size, step):
            i = members[s:s + step]
            d = haversine(lat[i][:, None], lon[i][:, None], lat[nbr][None, :], lon[nbr][None, :])
            ii, jj = np.nonzero(d <= radius_km)
            yield i[ii], nbr[jj], d[ii, jj]


def read_sources_csv(path, cell_deg=1.0):
    """Load a source file with header ``id,lat,lon``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "lat", "lon"} - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"{path}: source file missing columns {sorted(missing)}")
        ids, lats, lons = [], [], []
        for row in reader:
            try:
                lats.append(float(row["lat"]))
                lons.append(float(row["lon"]))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{reader.line_num}: bad coordinate") from exc
            ids.append(row["id"])
    return SourceSet(ids, lats, lons, cell_deg)


def write_sources_csv(path, sources):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lat", "lon"])
        for sid, la, lo in zip(sources.ids, sources.lat, sources.lon):
            w.writerow([sid, repr(float(la)), repr(float(lo))])
