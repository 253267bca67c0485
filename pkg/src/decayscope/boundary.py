"""Plug-in boundary estimation from an estimated decay curve.

The boundary for threshold ``epsilon`` is the first distance at which the
curve falls to ``epsilon`` times its level at the first grid point. "No
crossing inside the grid" is a legitimate answer (the boundary lies beyond
the study area) and is reported, not raised.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_distances, as_outcomes, check_epsilon
from .errors import DegenerateInputError
from .kernels import default_grid, fit_decay_curve, resolve_bandwidth


class MonotonicityWarning(UserWarning):
    """The curve never decreases, so a crossing cannot be expected."""


@dataclass
class BoundaryEstimate:
    """Boundary estimate for one threshold.

    ``d_star`` is None when the curve does not cross the threshold inside
    the grid; ``beyond_grid`` is then True. ``d_star_lower``/``d_star_upper``
    bracket all downward threshold crossings and coincide with the grid-rule
    estimate on a monotone curve.
    """

    epsilon: float
    d_star: float = None
    d_star_lower: float = None
    d_star_upper: float = None
    threshold_level: float = float("nan")
    interpolated: bool = False
    ci: tuple = None
    method: str = "nonparametric"
    beyond_grid: bool = False
    d_star_grid: float = None
    monotone_violations: int = None
    ci_method: str = None

    def __post_init__(self):
        check_epsilon(self.epsilon)
        if (self.d_star_lower is not None and self.d_star_upper is not None
                and self.d_star_lower > self.d_star_upper):
            raise ValueError("d_star_lower exceeds d_star_upper")

    @property
    def found(self):
        return self.d_star is not None

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "d_star": self.d_star,
            "d_lo": self.d_star_lower,
            "d_hi": self.d_star_upper,
            "interpolated": self.interpolated,
            "monotone_violations": self.monotone_violations,
            "ci": list(self.ci) if self.ci is not None else None,
            "ci_method": self.ci_method,
            "method": self.method,
            "beyond_grid": self.beyond_grid,
            "threshold_level": self.threshold_level,
        }


def _threshold(curve, epsilon):
    m0 = float(curve.m_hat[0])
    if not m0 > 0:
        raise DegenerateInputError(
            f"source level m_hat(d_1)={m0:g} is not positive; relative threshold undefined")
    return epsilon * m0


def partial_id_bounds(curve, epsilon, mode="crossings"):
    """Bounds on the boundary when the curve need not be monotone.

    Parameters
    ----------
    mode : {"crossings", "set"}
        ``"crossings"`` returns the first and last grid points where the curve
        enters the sub-threshold region, which collapses to the plug-in
        estimate on a monotone curve. ``"set"`` returns the first and last
        grid points of the sub-threshold set itself.

    Returns
    -------
    (d_L, d_U) or None when the curve never reaches the threshold.
    """
    epsilon = check_epsilon(epsilon)
    tau = _threshold(curve, epsilon)
    below = curve.m_hat <= tau
    if not below.any():
        return None
    if mode == "set":
        idx = np.flatnonzero(below)
    elif mode == "crossings":
        entering = below.copy()
        entering[1:] &= ~below[:-1]
        idx = np.flatnonzero(entering)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(curve.grid[idx[0]]), float(curve.grid[idx[-1]])


@dataclass(frozen=True)
class MonotonicityDiagnostics:
    n_steps: int
    n_increasing: int
    share_increasing: float
    max_increase: float
    increasing_at: np.ndarray  # grid value at the right end of each increasing step

    @property
    def monotone(self):
        return self.n_increasing == 0


def check_monotonicity(curve):
    """Count increasing steps of ``m_hat`` along the grid."""
    steps = np.diff(curve.m_hat)
    inc = steps > 0
    n_steps = steps.size
    return MonotonicityDiagnostics(
        n_steps=n_steps,
        n_increasing=int(inc.sum()),
        share_increasing=float(inc.sum() / n_steps) if n_steps else 0.0,
        max_increase=float(steps.max()) if n_steps and inc.any() else 0.0,
        increasing_at=curve.grid[1:][inc],
    )


def estimate_boundary(curve, epsilon, interpolate=True):
    """Plug-in boundary from a :class:`~decayscope.kernels.DecayCurve`.

    The grid rule returns the first grid point with ``m_hat <= epsilon *
    m_hat[0]``; with ``interpolate`` the crossing is refined linearly between
    that point and its predecessor.

    Raises
    ------
    DegenerateInputError
        If ``m_hat`` at the first grid point is not positive.
    """
    epsilon = check_epsilon(epsilon)
    tau = _threshold(curve, epsilon)
    m = curve.m_hat
    grid = curve.grid
    diag = check_monotonicity(curve)
    below = np.flatnonzero(m <= tau)
    if below.size == 0:
        if diag.n_steps and diag.n_increasing == diag.n_steps:
            warnings.warn("decay curve is increasing everywhere; no boundary crossing",
                          MonotonicityWarning, stacklevel=2)
        return BoundaryEstimate(epsilon=epsilon, threshold_level=tau, interpolated=interpolate,
                                beyond_grid=True, monotone_violations=diag.n_increasing)
    g = int(below[0])
    d_grid = float(grid[g])
    d_star = d_grid
    if interpolate and g > 0:
        frac = (m[g - 1] - tau) / (m[g - 1] - m[g])
        d_star = float(grid[g - 1] + frac * (grid[g] - grid[g - 1]))
    lo, hi = partial_id_bounds(curve, epsilon)
    return BoundaryEstimate(epsilon=epsilon, d_star=d_star, d_star_lower=lo, d_star_upper=hi,
                            threshold_level=tau, interpolated=interpolate, d_star_grid=d_grid,
                            monotone_violations=diag.n_increasing)


class SpatialBoundaryEstimator(BaseEstimator):
    """Nonparametric boundary estimator: local polynomial curve plus plug-in crossing.

    Parameters
    ----------
    epsilon : float in (0, 1)
    kernel, bandwidth, order :
        As for :class:`~decayscope.kernels.LocalPolynomialRegressor`.
    grid : array, (d_min, d_max, G) tuple, or None
    d_max : float, optional
        Support end used for the default 1 km grid when ``grid`` is None.
    interpolate : bool
    compute_variance : bool
        Whether the stored curve carries the residual-variance estimate.

    Attributes
    ----------
    curve_ : DecayCurve
    boundary_ : BoundaryEstimate
    d_star_ : float or None
    """

    def __init__(self, epsilon=0.1, kernel="epanechnikov", bandwidth="silverman", order=1,
                 grid=None, d_max=None, interpolate=True, compute_variance=True):
        self.epsilon = epsilon
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.order = order
        self.grid = grid
        self.d_max = d_max
        self.interpolate = interpolate
        self.compute_variance = compute_variance

    def fit(self, X, y):
        x = as_distances(X)
        y = as_outcomes(y, x.size)
        grid = self.grid
        if grid is None:
            grid = default_grid(self.d_max if self.d_max is not None else float(x.max()))
        self.bandwidth_ = resolve_bandwidth(self.bandwidth, x, y, self.kernel, self.order)
        self.curve_ = fit_decay_curve((x, y), grid, self.bandwidth_, self.kernel, self.order,
                                      with_variance=self.compute_variance)
        self.boundary_ = estimate_boundary(self.curve_, self.epsilon, self.interpolate)
        self.d_star_ = self.boundary_.d_star
        self.n_features_in_ = 1
        return self

    def fit_sample(self, sample):
        """Fit from a DistancedSample, defaulting the grid end to its ``d_max``."""
        if self.grid is None and self.d_max is None:
            self.set_params(d_max=sample.d_max)
        return self.fit(sample.distances, sample.outcomes)

    def predict(self, X):
        """Curve value at ``X`` by linear interpolation on the grid."""
        check_is_fitted(self, "curve_")
        return self.curve_(as_distances(X))
