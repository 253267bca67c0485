"""Parametric versus nonparametric accuracy by distance bin.

Errors are absolute percentage deviations of each method's prediction at
the bin centre from the mean observed outcome in the bin. Improvement is
parametric MAE minus nonparametric MAE, so positive values favour the
nonparametric curve.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError
from .kernels import _sample_arrays
from .parametric import predict as predict_exponential

DEFAULT_BIN_CENTERS = (10.0, 25.0, 50.0, 75.0, 100.0)
DEFAULT_HALF_WIDTH = 5.0

BIN_COLUMNS = ("center_km", "half_width_km", "n_in_bin", "actual_mean", "pred_parametric",
               "pred_nonparametric", "mae_parametric_pct", "mae_nonparametric_pct",
               "improvement_pp")


@dataclass(frozen=True)
class BinComparison:
    """One distance bin. Metric fields are None when the bin is empty."""

    center_km: float
    half_width_km: float
    n_in_bin: int
    actual_mean: float = None
    pred_parametric: float = None
    pred_nonparametric: float = None
    mae_parametric_pct: float = None
    mae_nonparametric_pct: float = None
    improvement_pp: float = None


@dataclass
class ComparisonReport:
    """Per-bin table plus overall summary.

    ``overall`` holds the unweighted mean of per-bin MAE (primary) under
    ``mae_parametric``/``mae_nonparametric``/``improvement_pp``, and the
    observation-weighted variant under the ``*_weighted`` keys.
    """

    bins: list
    overall: dict
    n_uncovered: int
    n_total: int
    weighted: bool = False
    notes: dict = field(default_factory=dict)

    @property
    def improvements(self):
        return np.array([np.nan if b.improvement_pp is None else b.improvement_pp
                         for b in self.bins])

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(BIN_COLUMNS)
            for b in self.bins:
                w.writerow(["" if getattr(b, c) is None else repr(getattr(b, c))
                            for c in BIN_COLUMNS])

    def to_dict(self):
        return {"bins": [asdict(b) for b in self.bins], "overall": self.overall,
                "n_uncovered": self.n_uncovered, "n_total": self.n_total,
                "primary_overall": "weighted" if self.weighted else "unweighted bin mean"}

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _mae_pct(pred, actual):
    if actual == 0:
        return None
    return float(abs(pred - actual) / abs(actual) * 100.0)


def compare_binned(distances, outcomes, pred_parametric, pred_nonparametric,
                   bin_centers=DEFAULT_BIN_CENTERS, half_width=DEFAULT_HALF_WIDTH,
                   weighted=False, r2_parametric=None):
    """Bin comparison from callables giving each method's prediction at a distance.

    ``pred_parametric`` and ``pred_nonparametric`` map an array of
    distances to predictions.
    """
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(outcomes, dtype=np.float64)
    centers = np.asarray(bin_centers, dtype=np.float64)
    if centers.ndim != 1 or centers.size == 0:
        raise ConfigurationError("need at least one bin centre")
    if not half_width > 0:
        raise ConfigurationError("half_width must be positive")
    covered = np.zeros(d.size, dtype=bool)
    bins = []
    p_all = np.asarray(pred_parametric(centers), dtype=np.float64)
    np_all = np.asarray(pred_nonparametric(centers), dtype=np.float64)
    for c, pp, pn in zip(centers, p_all, np_all):
        inside = np.abs(d - c) <= half_width
        covered |= inside
        k = int(inside.sum())
        if k == 0:
            bins.append(BinComparison(float(c), float(half_width), 0))
            continue
        actual = float(np.mean(y[inside]))
        mp, mn = _mae_pct(pp, actual), _mae_pct(pn, actual)
        imp = None if mp is None or mn is None else mp - mn
        bins.append(BinComparison(float(c), float(half_width), k, actual, float(pp), float(pn),
                                  mp, mn, imp))
    scored = [b for b in bins if b.improvement_pp is not None]
    overall = {"r2_parametric": r2_parametric, "n_bins_scored": len(scored)}
    if scored:
        mp = np.array([b.mae_parametric_pct for b in scored])
        mn = np.array([b.mae_nonparametric_pct for b in scored])
        wt = np.array([b.n_in_bin for b in scored], dtype=np.float64)
        overall.update(
            mae_parametric_unweighted=float(mp.mean()),
            mae_nonparametric_unweighted=float(mn.mean()),
            mae_parametric_weighted=float(np.average(mp, weights=wt)),
            mae_nonparametric_weighted=float(np.average(mn, weights=wt)),
        )
        key = "weighted" if weighted else "unweighted"
        overall["mae_parametric"] = overall[f"mae_parametric_{key}"]
        overall["mae_nonparametric"] = overall[f"mae_nonparametric_{key}"]
        overall["improvement_pp"] = overall["mae_parametric"] - overall["mae_nonparametric"]
        overall["improvement_pp_weighted"] = (overall["mae_parametric_weighted"]
                                              - overall["mae_nonparametric_weighted"])
    else:
        overall.update(mae_parametric=None, mae_nonparametric=None, improvement_pp=None)
    return ComparisonReport(bins, overall, int((~covered).sum()), int(d.size), weighted)


def compare_methods(sample, exp_fit, curve, bin_centers=DEFAULT_BIN_CENTERS,
                    half_width=DEFAULT_HALF_WIDTH, weighted=False):
    """Compare the exponential fit and the nonparametric curve by distance bin.

    Parametric predictions are ``A exp(-kappa d)`` at the bin centre; the
    nonparametric prediction is the curve interpolated linearly on its grid.

    Raises
    ------
    ConfigurationError
        If a bin centre lies outside the curve grid.
    """
    centers = np.asarray(bin_centers, dtype=np.float64)
    if centers.size and (centers.min() < curve.grid[0] or centers.max() > curve.grid[-1]):
        raise ConfigurationError(
            f"bin centres must lie within the curve grid [{curve.grid[0]:g}, {curve.grid[-1]:g}]")
    d, y = _sample_arrays(sample)
    return compare_binned(d, y, lambda t: predict_exponential(exp_fit, t), curve, centers,
                          half_width, weighted, r2_parametric=exp_fit.r2)


@dataclass
class PeriodSummary:
    """Mean outcome per period and the chained percentage changes.

    ``pct_change[k]`` compares period ``k + 1`` with period ``k``; it is None
    when the earlier mean is zero.
    """

    periods: list
    n: list
    means: list
    pct_change: list

    def to_dict(self):
        return {"periods": self.periods, "n": self.n, "means": self.means,
                "pct_change": self.pct_change}


def period_summary(samples_by_period):
    """Per-period means with period-on-period percentage change.

    Parameters
    ----------
    samples_by_period : mapping or DistancedSample
        Ordered mapping from period label to a sample or an array of
        outcomes, iterated in its own order; a DistancedSample with period
        labels is split by sorted label.
    """
    if hasattr(samples_by_period, "split_by_period"):
        samples_by_period = samples_by_period.split_by_period()
    if not samples_by_period:
        raise DegenerateInputError("need at least one period")
    periods, ns, means = [], [], []
    for label, s in samples_by_period.items():
        y = np.asarray(s.outcomes if hasattr(s, "outcomes") else s, dtype=np.float64)
        if y.size == 0:
            raise DegenerateInputError(f"period {label!r} has no observations")
        periods.append(label)
        ns.append(int(y.size))
        means.append(float(np.mean(y)))
    changes = []
    for prev, cur in zip(means[:-1], means[1:]):
        changes.append(None if prev == 0 or not math.isfinite(prev)
                       else (cur - prev) / prev * 100.0)
    return PeriodSummary(periods, ns, means, changes)
