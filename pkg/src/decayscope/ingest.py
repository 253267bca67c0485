"""Streaming ingestion of observation files into distance/outcome samples.

Observation files are UTF-8 CSV with (at least) the columns
``lat,lon,period,group,outcome``. Rows are read in chunks, each chunk gets
its nearest-source distances, and only rows passing the filters are kept.
Malformed rows are counted and their line numbers recorded instead of
aborting the run, unless the configured reject limit is exceeded.
"""

import csv
import logging
import math
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, InputValidationError, SchemaError
from .geo import normalize_lon

logger = logging.getLogger(__name__)

OBS_COLUMNS = ("lat", "lon", "period", "group", "outcome")
SAMPLE_MAGIC = b"DSMP"
SAMPLE_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class FilterConfig:
    """Row filters applied during ingestion.

    ``allowed_groups`` / ``allowed_periods`` of ``None`` mean "keep all".
    """

    max_distance_km: float = 100.0
    allowed_groups: frozenset = None
    allowed_periods: frozenset = None
    min_outcome: float = None

    def __post_init__(self):
        if not (isinstance(self.max_distance_km, (int, float))
                and math.isfinite(self.max_distance_km) and self.max_distance_km > 0):
            raise ConfigurationError(
                f"max_distance_km must be positive, got {self.max_distance_km!r}")
        if self.allowed_groups is not None:
            self.allowed_groups = frozenset(str(g) for g in self.allowed_groups)
        if self.allowed_periods is not None:
            self.allowed_periods = frozenset(str(p) for p in self.allowed_periods)


@dataclass
class IngestAudit:
    """Row accounting: ``rows_in == rows_kept + rows_filtered + rows_rejected``."""

    rows_in: int = 0
    rows_kept: int = 0
    rows_filtered: int = 0
    rows_rejected: int = 0
    reject_lines: list = field(default_factory=list)
    max_recorded: int = 1000

    def reject(self, line, reason):
        self.rows_rejected += 1
        if len(self.reject_lines) < self.max_recorded:
            self.reject_lines.append((line, reason))

    def to_dict(self):
        return {
            "rows_in": self.rows_in,
            "rows_kept": self.rows_kept,
            "rows_filtered": self.rows_filtered,
            "rows_rejected": self.rows_rejected,
            "reject_lines": [list(x) for x in self.reject_lines],
        }


@dataclass
class DistancedSample:
    """Distances to the nearest source and outcomes, aligned by position.

    Parameters
    ----------
    distances : ndarray of float, km
    outcomes : ndarray of float
    d_max : float, optional
        Upper end of the distance support. Defaults to the largest distance.
    lat, lon, groups, periods : ndarray, optional
        Per-row metadata, carried when the producer kept it.
    """

    distances: np.ndarray
    outcomes: np.ndarray
    d_max: float = None
    lat: np.ndarray = None
    lon: np.ndarray = None
    groups: np.ndarray = None
    periods: np.ndarray = None
    audit: IngestAudit = None

    def __post_init__(self):
        self.distances = np.ascontiguousarray(self.distances, dtype=np.float64)
        self.outcomes = np.ascontiguousarray(self.outcomes, dtype=np.float64)
        if self.distances.ndim != 1 or self.distances.shape != self.outcomes.shape:
            raise InputValidationError("distances and outcomes must be 1-D arrays of equal length")
        if self.distances.size and (not np.all(np.isfinite(self.distances))
                                    or self.distances.min() < 0):
            raise InputValidationError("distances must be finite and non-negative")
        if self.d_max is None:
            self.d_max = float(self.distances.max()) if self.distances.size else 0.0
        elif self.distances.size and self.distances.max() > self.d_max:
            raise InputValidationError("distances exceed d_max")
        for name in ("lat", "lon", "groups", "periods"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val)
                if val.shape != self.distances.shape:
                    raise InputValidationError(f"{name} length does not match distances")
                setattr(self, name, val)

    @property
    def n(self):
        return int(self.distances.size)

    def __len__(self):
        return self.n

    def subset(self, idx):
        """Row subset (boolean mask or integer index), metadata included."""
        take = {name: (None if getattr(self, name) is None else getattr(self, name)[idx])
                for name in ("lat", "lon", "groups", "periods")}
        return DistancedSample(self.distances[idx], self.outcomes[idx], d_max=self.d_max, **take)

    def split_by_period(self):
        if self.periods is None:
            raise ConfigurationError("sample carries no period labels")
        return {str(p): self.subset(self.periods == p) for p in np.unique(self.periods)}


def write_sample(path, sample):
    """Write the binary sample format: 16-byte header then two f64 arrays."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, sample.n))
        fh.write(sample.distances.astype("<f8").tobytes())
        fh.write(sample.outcomes.astype("<f8").tobytes())


def read_sample(path, d_max=None):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise SchemaError(f"{path}: truncated sample header")
        magic, version, n = _HEADER.unpack(head)
        if magic != SAMPLE_MAGIC:
            raise SchemaError(f"{path}: not a sample file (bad magic {magic!r})")
        if version != SAMPLE_VERSION:
            raise SchemaError(f"{path}: unsupported sample version {version}")
        body = np.frombuffer(fh.read(16 * n), dtype="<f8")
    if body.size != 2 * n:
        raise SchemaError(f"{path}: expected {n} rows, file is truncated")
    return DistancedSample(body[:n].astype(np.float64), body[n:].astype(np.float64), d_max=d_max)


def _parse_floats(values):
    """Parse a list of strings to float64, NaN where unparseable."""
    try:
        return np.array(values, dtype=np.float64)
    except ValueError:
        out = np.empty(len(values))
        for i, v in enumerate(values):
            try:
                out[i] = float(v)
            except ValueError:
                out[i] = np.nan
        return out


@dataclass
class _Chunk:
    lines: list
    lat: list
    lon: list
    period: list
    group: list
    outcome: list


def _process_chunk(chunk, sources, flt):
    """Validate, measure distance and filter one chunk.

    Returns (kept_mask-ordered arrays, reject list, n_filtered).
    """
    lines = np.asarray(chunk.lines, dtype=np.int64)
    lat = _parse_floats(chunk.lat)
    lon = _parse_floats(chunk.lon)
    y = _parse_floats(chunk.outcome)
    period = np.asarray(chunk.period, dtype=object)
    group = np.asarray(chunk.group, dtype=object)

    rejects = []
    bad_coord = ~(np.isfinite(lat) & np.isfinite(lon)) | (np.abs(lat) > 90)
    bad_y = ~np.isfinite(y)
    bad_period = np.array([not p for p in chunk.period], dtype=bool)
    bad = bad_coord | bad_y | bad_period
    for i in np.flatnonzero(bad):
        reason = "coordinate" if bad_coord[i] else ("outcome" if bad_y[i] else "period")
        rejects.append((int(lines[i]), reason))

    ok = ~bad
    keep = ok.copy()
    if flt.allowed_groups is not None:
        keep &= np.array([g in flt.allowed_groups for g in group], dtype=bool)
    if flt.allowed_periods is not None:
        keep &= np.array([p in flt.allowed_periods for p in period], dtype=bool)
    if flt.min_outcome is not None:
        keep &= y >= flt.min_outcome
    dist = np.full(lat.shape, np.inf)
    if keep.any():
        lon_n = normalize_lon(lon[keep])
        dist[keep] = sources.nearest(lat[keep], lon_n)[0]
    keep &= dist <= flt.max_distance_km
    n_filtered = int(ok.sum() - keep.sum())
    result = {
        "distances": dist[keep],
        "outcomes": y[keep],
        "lat": lat[keep],
        "lon": normalize_lon(lon[keep]),
        "groups": group[keep].astype(str),
        "periods": period[keep].astype(str),
    }
    return result, rejects, n_filtered


def _read_chunks(path, chunk_rows, audit):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty (no header)") from None
        header = [h.strip() for h in header]
        missing = [c for c in OBS_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; expected {list(OBS_COLUMNS)}")
        pos = [header.index(c) for c in OBS_COLUMNS]
        width = len(header)
        chunk = _Chunk([], [], [], [], [], [])
        for row in reader:
            if not row:
                continue
            audit.rows_in += 1
            if len(row) != width:
                audit.reject(reader.line_num, "field count")
                continue
            chunk.lines.append(reader.line_num)
            chunk.lat.append(row[pos[0]])
            chunk.lon.append(row[pos[1]])
            chunk.period.append(row[pos[2]].strip())
            chunk.group.append(row[pos[3]].strip())
            chunk.outcome.append(row[pos[4]])
            if len(chunk.lines) >= chunk_rows:
                yield chunk
                chunk = _Chunk([], [], [], [], [], [])
        if chunk.lines:
            yield chunk


def stream_ingest(observations_path, sources, filter=None, chunk_rows=5_000_000,
                  max_rejects=None, n_workers=1):
    """Read an observation CSV in chunks and return a :class:`DistancedSample`.

    Parameters
    ----------
    observations_path : path-like
    sources : SourceSet
    filter : FilterConfig, optional
    chunk_rows : int
        Rows per chunk; peak memory scales with this, results do not.
    max_rejects : int, optional
        Abort with :class:`InputValidationError` once more rows than this have
        been rejected. ``None`` never aborts.
    n_workers : int
        Threads used for the distance/filter stage. Output order is the file
        order regardless.

    Returns
    -------
    DistancedSample
        With ``lat``, ``lon``, ``groups``, ``periods`` metadata and an
        :class:`IngestAudit` in ``.audit``.
    """
    flt = filter if filter is not None else FilterConfig()
    if int(chunk_rows) != chunk_rows or chunk_rows < 1:
        raise ConfigurationError(f"chunk_rows must be a positive integer, got {chunk_rows!r}")
    path = Path(observations_path)
    if not path.is_file():
        raise FileNotFoundError(f"observation file not found: {path}")
    audit = IngestAudit()
    parts = []

    def consume(result, rejects, n_filtered):
        for line, reason in rejects:
            audit.reject(line, reason)
        audit.rows_filtered += n_filtered
        audit.rows_kept += result["distances"].size
        parts.append(result)
        if max_rejects is not None and audit.rows_rejected > max_rejects:
            raise InputValidationError(
                f"{path}: {audit.rows_rejected} malformed rows exceed the limit of {max_rejects}"
                f" (first at line {audit.reject_lines[0][0]})")

    chunks = _read_chunks(path, int(chunk_rows), audit)
    if n_workers > 1:
        # bounded window of in-flight chunks keeps memory O(chunk_rows)
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            pending = deque()
            for c in chunks:
                pending.append(pool.submit(_process_chunk, c, sources, flt))
                if len(pending) >= 2 * n_workers:
                    consume(*pending.popleft().result())
            while pending:
                consume(*pending.popleft().result())
    else:
        for c in chunks:
            consume(*_process_chunk(c, sources, flt))
    # rows with a bad field count never reach a chunk; check after the reader finishes
    if max_rejects is not None and audit.rows_rejected > max_rejects:
        raise InputValidationError(
            f"{path}: {audit.rows_rejected} malformed rows exceed the limit of {max_rejects}")
    if audit.rows_rejected:
        logger.warning("%s: %d malformed rows rejected", path, audit.rows_rejected)
    if audit.rows_kept == 0:
        raise DegenerateInputError("no observations survived filters")
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return DistancedSample(cat["distances"], cat["outcomes"], d_max=float(flt.max_distance_km),
                           lat=cat["lat"], lon=cat["lon"], groups=cat["groups"],
                           periods=cat["periods"], audit=audit)


@dataclass(frozen=True)
class SummaryStats:
    n: int
    mean: float
    sd: float
    min_distance: float
    max_distance: float

    def to_dict(self):
        return {"n": self.n, "mean": self.mean, "sd": self.sd,
                "min_distance_km": self.min_distance, "max_distance_km": self.max_distance}


def summarize(sample):
    """Sample moments of the outcome (sd with ddof=1) and the distance range."""
    if sample.n < 1:
        raise DegenerateInputError("cannot summarize an empty sample")
    y = sample.outcomes
    mean = float(np.mean(y))
    # two-pass: subtract the mean before squaring
    sd = float(np.sqrt(np.sum((y - mean) ** 2) / (y.size - 1))) if y.size > 1 else float("nan")
    return SummaryStats(sample.n, mean, sd, float(sample.distances.min()),
                        float(sample.distances.max()))
