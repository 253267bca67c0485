"""Exponential-decay baseline ``m(d) = A * exp(-kappa * d)``.

Fitted by OLS of ``log Y`` on distance, optionally with group fixed effects
(within-group demeaning, equivalent to one dummy per group). Rows with
``Y <= 0`` cannot enter the log model; they are dropped and counted.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_distances, as_outcomes, check_epsilon
from .boundary import BoundaryEstimate
from .errors import ConfigurationError, DegenerateInputError, InputValidationError


@dataclass
class ExponentialFit:
    """Result of the log-linear exponential fit.

    ``r2`` is computed in log space (within groups when fixed effects are
    used); ``r2_level`` compares ``predict`` with the raw outcomes.
    """

    A: float
    kappa: float
    se_kappa_iid: float
    r2: float
    n_used: int
    n_dropped_nonpositive: int
    alpha: float
    r2_level: float = float("nan")
    group_effects: dict = field(default=None)
    se_kappa_hac: float = None

    def __post_init__(self):
        if not self.A > 0:
            raise ConfigurationError("amplitude A must be positive")
        if self.n_used < 2:
            raise ConfigurationError("fit needs at least 2 observations")

    def to_dict(self):
        out = {"A": self.A, "kappa": self.kappa, "se_iid": self.se_kappa_iid, "r2": self.r2,
               "r2_level": self.r2_level, "n_used": self.n_used,
               "n_dropped": self.n_dropped_nonpositive}
        if self.se_kappa_hac is not None:
            out["se_hac"] = self.se_kappa_hac
        if self.group_effects is not None:
            out["group_intercepts"] = {str(k): v for k, v in sorted(self.group_effects.items())}
        return out


def _demean_by_group(values, codes, n_groups):
    counts = np.bincount(codes, minlength=n_groups)
    means = np.bincount(codes, weights=values, minlength=n_groups) / counts
    return values - means[codes], means


def _log_design(sample, groups):
    if hasattr(sample, "distances"):
        d, y = sample.distances, sample.outcomes
        if groups is True:
            groups = sample.groups
            if groups is None:
                raise ConfigurationError("sample carries no group labels for fixed effects")
    else:
        d, y = sample
        d = as_distances(d)
        y = as_outcomes(y, d.size)
    if groups is not None and groups is not True:
        groups = np.asarray(groups)
        if groups.shape != d.shape:
            raise InputValidationError("group labels must align with the sample")
    pos = y > 0
    return d, y, pos, groups


def fit_exponential(sample, groups=None):
    """OLS of ``log Y`` on distance; ``kappa = -slope``, ``A = exp(intercept)``.

    Parameters
    ----------
    sample : DistancedSample or (distances, outcomes)
    groups : array of labels, True, or None
        Group fixed effects. ``True`` uses ``sample.groups``.

    Raises
    ------
    DegenerateInputError
        Fewer than two positive outcomes, or no variation in distance.
    """
    d, y, pos, groups = _log_design(sample, groups)
    n_drop = int((~pos).sum())
    if pos.sum() < 2:
        raise DegenerateInputError("need at least 2 observations with positive outcome")
    d_used = d[pos]
    ly = np.log(y[pos])
    n = d_used.size

    if groups is None:
        xc = d_used - d_used.mean()
        yc = ly - ly.mean()
        k_params = 2
        codes = None
    else:
        labels, codes = np.unique(groups[pos], return_inverse=True)
        xc, d_means = _demean_by_group(d_used, codes, labels.size)
        yc, y_means = _demean_by_group(ly, codes, labels.size)
        k_params = labels.size + 1
    sxx = float(xc @ xc)
    if not sxx > 0:
        raise DegenerateInputError("distances have no variation; decay rate undefined")
    beta = float(xc @ yc) / sxx
    resid = yc - beta * xc
    ssr = float(resid @ resid)
    sst = float(yc @ yc)
    r2 = 1.0 - ssr / sst if sst > 0 else 0.0
    dof = n - k_params
    se = math.sqrt(ssr / dof / sxx) if dof > 0 else float("nan")

    if groups is None:
        alpha = float(ly.mean() - beta * d_used.mean())
        effects = None
        fitted_log = alpha + beta * d_used
    else:
        intercepts = y_means - beta * d_means
        effects = {lab: float(a) for lab, a in zip(labels.tolist(), intercepts)}
        # headline intercept: observation-weighted average of group intercepts
        alpha = float(np.mean(intercepts[codes]))
        fitted_log = intercepts[codes] + beta * d_used

    level_resid = y[pos] - np.exp(fitted_log)
    y_dev = y[pos] - y[pos].mean()
    r2_level = 1.0 - float(level_resid @ level_resid) / float(y_dev @ y_dev) \
        if float(y_dev @ y_dev) > 0 else 0.0
    return ExponentialFit(A=math.exp(alpha), kappa=-beta, se_kappa_iid=se, r2=r2, n_used=n,
                          n_dropped_nonpositive=n_drop, alpha=alpha, r2_level=r2_level,
                          group_effects=effects)


def predict(fit, d, groups=None):
    """``A * exp(-kappa * d)``; with group effects, each row uses its group's intercept."""
    d = np.asarray(d, dtype=np.float64)
    if groups is None or fit.group_effects is None:
        return fit.A * np.exp(-fit.kappa * d)
    alpha = np.array([fit.group_effects.get(g, fit.alpha) for g in np.asarray(groups).tolist()])
    return np.exp(alpha - fit.kappa * d)


def log_residuals(fit, d, y, groups=None):
    """Residuals of the log-linear model; NaN where ``y <= 0``."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ly = np.where(y > 0, np.log(np.where(y > 0, y, 1.0)), np.nan)
    return ly - np.log(predict(fit, d, groups))


def parametric_boundary(fit, epsilon):
    """Closed-form boundary ``log(1/epsilon) / kappa``."""
    epsilon = check_epsilon(epsilon)
    kappa = fit.kappa if isinstance(fit, ExponentialFit) else float(fit)
    if not kappa > 0:
        raise DegenerateInputError(f"no decay (kappa={kappa:g}); boundary undefined")
    d_star = math.log(1.0 / epsilon) / kappa
    amp = fit.A if isinstance(fit, ExponentialFit) else float("nan")
    return BoundaryEstimate(epsilon=epsilon, d_star=d_star, d_star_lower=d_star,
                            d_star_upper=d_star, threshold_level=epsilon * amp,
                            interpolated=False, method="parametric")


class ExponentialDecayRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn wrapper around :func:`fit_exponential`.

    ``fit(X, y, groups=None)`` with ``X`` the distances. Attributes after
    fitting: ``fit_`` (ExponentialFit), ``kappa_``, ``A_``.
    """

    def __init__(self, fixed_effects=False):
        self.fixed_effects = fixed_effects

    def fit(self, X, y, groups=None):
        x = as_distances(X)
        y = as_outcomes(y, x.size)
        if self.fixed_effects and groups is None:
            raise ConfigurationError("fixed_effects=True needs group labels")
        self.fit_ = fit_exponential((x, y), groups if self.fixed_effects else None)
        self.kappa_ = self.fit_.kappa
        self.A_ = self.fit_.A
        self.n_features_in_ = 1
        return self

    def predict(self, X, groups=None):
        check_is_fitted(self, "fit_")
        return predict(self.fit_, as_distances(X), groups)

    def boundary(self, epsilon):
        check_is_fitted(self, "fit_")
        return parametric_boundary(self.fit_, epsilon)
