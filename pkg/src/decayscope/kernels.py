"""Kernels, bandwidth selection and local polynomial regression.

All evaluation points are fitted in one vectorized pass. For every data
point the (sorted) evaluation points inside its kernel window are found
with ``searchsorted``, the resulting (data, eval) pairs are expanded, and
the weighted moment sums of the local normal equations are accumulated
with ``np.bincount``. Local coordinates are scaled by ``h`` so the normal
matrices stay well conditioned whatever the units.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.model_selection import KFold
from sklearn.utils.validation import check_is_fitted

from ._validation import as_distances, as_outcomes, check_grid, check_positive, make_grid
from .errors import ConfigurationError, DegenerateInputError, SingularFitError

# pair arrays per data chunk; bounds temporary memory to a few hundred MB
_PAIR_BUDGET = 1 << 22
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class KernelSpec:
    """Second-order kernel with its moment constants.

    ``mu2`` is the second moment of the kernel and ``nu0`` its roughness
    (integral of K squared). ``support`` is the half-width of the support in
    units of ``h``; ``inf`` for the Gaussian, which is never truncated.
    """

    family: str
    mu2: float
    nu0: float
    support: float

    @property
    def compact(self):
        return math.isfinite(self.support)

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.family == "epanechnikov":
            return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
        if self.family == "uniform":
            return np.where(np.abs(u) <= 1.0, 0.5, 0.0)
        if self.family == "gaussian":
            return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
        raise ConfigurationError(f"unknown kernel {self.family!r}")


KERNELS = {
    "epanechnikov": KernelSpec("epanechnikov", 0.2, 0.6, 1.0),
    "uniform": KernelSpec("uniform", 1.0 / 3.0, 0.5, 1.0),
    "gaussian": KernelSpec("gaussian", 1.0, 1.0 / (2.0 * math.sqrt(math.pi)), math.inf),
}


def get_kernel(kernel):
    if isinstance(kernel, KernelSpec):
        return kernel
    try:
        return KERNELS[str(kernel).lower()]
    except KeyError:
        raise ConfigurationError(
            f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}") from None


@dataclass(frozen=True)
class Bandwidth:
    h: float
    method: str = "fixed"

    def __post_init__(self):
        check_positive(self.h, "bandwidth")
        if self.method not in ("silverman", "cross_validation", "fixed"):
            raise ConfigurationError(f"unknown bandwidth method {self.method!r}")


def _as_h(h):
    if isinstance(h, Bandwidth):
        return h
    return Bandwidth(check_positive(h, "bandwidth"), "fixed")


def _sample_arrays(sample):
    """(distances, outcomes) from a DistancedSample or an ``(x, y)`` pair."""
    if hasattr(sample, "distances"):
        return sample.distances, sample.outcomes
    x, y = sample
    x = as_distances(x)
    return x, as_outcomes(y, x.size)


def silverman_bandwidth(sample):
    """Rule-of-thumb bandwidth ``1.06 * sd(D) * n**(-1/5)``.

    ``sample`` may be a DistancedSample or a plain array of distances.
    """
    d = sample.distances if hasattr(sample, "distances") else as_distances(sample)
    n = d.size
    if n < 2:
        raise DegenerateInputError("Silverman bandwidth needs at least 2 observations")
    sd = float(np.std(d, ddof=1))
    if not sd > 0:
        raise DegenerateInputError("distances have zero variance; bandwidth undefined")
    return Bandwidth(1.06 * sd * n ** (-0.2), "silverman")


def _iter_pairs(x, points, h, kern):
    """Yield ``(i, g, u, w)`` for every (data, eval point) pair with positive weight.

    ``points`` must be non-decreasing. Data are processed in fixed-size index
    chunks that depend only on ``points``, ``h`` and ``len(x)``, so sums at a
    given evaluation point never depend on data outside its window.
    """
    n, G = x.size, points.size
    if kern.compact:
        reach = h * kern.support * (1.0 + 1e-12)
        width = np.searchsorted(points, points + 2.0 * reach, side="right") - np.arange(G)
        max_window = int(width.max()) if G else 1
    else:
        max_window = G
    step = max(1, _PAIR_BUDGET // max(1, max_window))
    for start in range(0, n, step):
        xs = x[start:start + step]
        if kern.compact:
            lo = np.searchsorted(points, xs - reach, side="left")
            hi = np.searchsorted(points, xs + reach, side="right")
        else:
            lo = np.zeros(xs.size, dtype=np.int64)
            hi = np.full(xs.size, G, dtype=np.int64)
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            continue
        i_local = np.repeat(np.arange(xs.size), counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        g = lo[i_local] + offsets
        u = (xs[i_local] - points[g]) / h
        w = kern(u)
        keep = w > 0
        if not keep.all():
            i_local, g, u, w = i_local[keep], g[keep], u[keep], w[keep]
        yield i_local + start, g, u, w


@dataclass
class _LocalSolution:
    beta: np.ndarray        # (G, p+1), original units
    s0: np.ndarray          # sum of K(u) per eval point
    eff_n: np.ndarray       # Kish effective count
    singular: np.ndarray    # bool mask
    minv: np.ndarray = None  # inverse scaled normal matrices, when requested


def _solve_local(x, y, points, h, kern, order, ridge=0.0, keep_inverse=False):
    """Weighted least squares at every evaluation point (scaled coordinates)."""
    G = points.size
    p = int(order)
    S = np.zeros((2 * p + 1, G))
    T = np.zeros((p + 1, G))
    W2 = np.zeros(G)
    for i, g, u, w in _iter_pairs(x, points, h, kern):
        yi = y[i]
        up = w.copy()
        for k in range(2 * p + 1):
            S[k] += np.bincount(g, weights=up, minlength=G)
            if k <= p:
                T[k] += np.bincount(g, weights=up * yi, minlength=G)
            if k < 2 * p:
                up *= u
        W2 += np.bincount(g, weights=w * w, minlength=G)

    idx = np.add.outer(np.arange(p + 1), np.arange(p + 1))
    M = np.moveaxis(S[idx], -1, 0)            # (G, p+1, p+1)
    rhs = T.T.copy()                           # (G, p+1)
    s0 = S[0]
    if ridge:
        M = M + ridge * s0[:, None, None] * np.eye(p + 1)
    singular = ~(s0 > 0)
    if p > 0:
        ok = ~singular
        cond = np.full(G, np.inf)
        if ok.any():
            with np.errstate(all="ignore"):
                cond[ok] = np.linalg.cond(M[ok])
        singular |= ~(cond < _COND_LIMIT)

    gamma = np.full((G, p + 1), np.nan)
    minv = None
    good = ~singular
    if good.any():
        if keep_inverse:
            minv = np.full((G, p + 1, p + 1), np.nan)
            minv[good] = np.linalg.inv(M[good])
            gamma[good] = np.einsum("gjk,gk->gj", minv[good], rhs[good])
        else:
            gamma[good] = np.linalg.solve(M[good], rhs[good][..., None])[..., 0]
    beta = gamma / h ** np.arange(p + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        eff_n = np.where(W2 > 0, s0 * s0 / W2, 0.0)
    return _LocalSolution(beta, s0, eff_n, singular, minv)


def _resolve_singular(sol, points, policy):
    """Apply the singular-point policy: raise, or interpolate across bad points."""
    if not sol.singular.any():
        return sol
    bad = np.flatnonzero(sol.singular)
    if policy == "error" or bad.size == points.size:
        j = int(bad[0])
        raise SingularFitError(points[j], j)
    if policy != "interpolate":
        raise ConfigurationError(f"unknown singular policy {policy!r}")
    good = ~sol.singular
    for c in range(sol.beta.shape[1]):
        sol.beta[~good, c] = np.interp(points[~good], points[good], sol.beta[good, c])
    return sol


def _check_order(order):
    if order not in (0, 1, 2):
        raise ConfigurationError(f"polynomial order must be 0, 1 or 2, got {order!r}")
    return int(order)


def local_poly_evaluate(x, y, points, h, kernel="epanechnikov", order=1,
                        singular="error", ridge=0.0):
    """Local polynomial coefficients at arbitrary evaluation points.

    Returns an ``(len(points), order+1)`` array; column 0 estimates the
    regression function and column 1 its first derivative.
    """
    kern = get_kernel(kernel)
    order = _check_order(order)
    h = _as_h(h).h
    pts = np.asarray(points, dtype=np.float64).ravel()
    perm = np.argsort(pts, kind="stable")
    sol = _solve_local(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64),
                       pts[perm], h, kern, order, ridge)
    sol = _resolve_singular(sol, pts[perm], singular)
    out = np.empty_like(sol.beta)
    out[perm] = sol.beta
    return out


def local_poly_fit(sample, d0, h, kernel="epanechnikov", order=1, ridge=0.0):
    """Local polynomial fit at a single point ``d0``.

    Minimizes ``sum_i (Y_i - sum_j b_j (D_i - d0)**j)**2 K_h(D_i - d0)``.

    Parameters
    ----------
    sample : DistancedSample or (distances, outcomes)
    d0 : float
        Evaluation point, km.
    h : float or Bandwidth
    kernel : str or KernelSpec
    order : {0, 1, 2}
    ridge : float
        Optional jitter added to the (weight-normalized, scaled) normal
        matrix, at most 1e-8. Zero keeps the fit exact on polynomials.

    Returns
    -------
    beta : ndarray, shape (order+1,)
        ``beta[0]`` estimates m(d0), ``beta[1]`` estimates m'(d0).
    effective_n : float
        Kish effective number of observations, ``(sum w)**2 / sum w**2``.

    Raises
    ------
    SingularFitError
        When the weighted local design is rank deficient at ``d0``.
    """
    if not 0.0 <= ridge <= 1e-8:
        raise ConfigurationError("ridge jitter must lie in [0, 1e-8]")
    x, y = _sample_arrays(sample)
    kern = get_kernel(kernel)
    order = _check_order(order)
    sol = _solve_local(x, y, np.array([float(d0)]), _as_h(h).h, kern, order, ridge)
    if sol.singular[0]:
        raise SingularFitError(d0)
    return sol.beta[0], float(sol.eff_n[0])


def smoother_matrix(x, points, h, kernel="epanechnikov", order=1, row=0):
    """Sparse linear smoother ``L`` with ``L @ y`` equal to coefficient ``row``.

    Useful when the same design is smoothed against many response vectors,
    e.g. in bootstrap loops.
    """
    kern = get_kernel(kernel)
    order = _check_order(order)
    h = _as_h(h).h
    x = np.asarray(x, dtype=np.float64)
    pts = check_grid(points)
    sol = _solve_local(x, np.zeros_like(x), pts, h, kern, order, keep_inverse=True)
    if sol.singular.any():
        j = int(np.flatnonzero(sol.singular)[0])
        raise SingularFitError(pts[j], j)
    rows, cols, vals = [], [], []
    for i, g, u, w in _iter_pairs(x, pts, h, kern):
        coef = np.zeros_like(u)
        up = np.ones_like(u)
        for j in range(order + 1):
            coef += sol.minv[g, row, j] * up
            up = up * u
        rows.append(g)
        cols.append(i)
        vals.append(coef * w / h ** row)
    if not rows:
        return sparse.csr_matrix((pts.size, x.size))
    L = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(pts.size, x.size))
    return L.tocsr()


def kernel_density(x, points, h, kernel="epanechnikov"):
    """Kernel density of ``x`` at ``points`` (no boundary correction)."""
    kern = get_kernel(kernel)
    h = _as_h(h).h
    pts = np.asarray(points, dtype=np.float64)
    perm = np.argsort(pts, kind="stable")
    sp = pts[perm]
    acc = np.zeros(pts.size)
    for _, g, _, w in _iter_pairs(np.asarray(x, dtype=np.float64), sp, h, kern):
        acc += np.bincount(g, weights=w, minlength=pts.size)
    out = np.empty_like(acc)
    out[perm] = acc / (x.size * h)
    return out


@dataclass
class DecayCurve:
    """Estimated decay function on a distance grid.

    Attributes
    ----------
    grid : ndarray
        Strictly increasing distances, km.
    m_hat, m_prime_hat : ndarray
        Local intercepts and slopes.
    f_hat : ndarray
        Kernel density of distance.
    sigma2_hat : ndarray
        Locally weighted mean squared residual.
    """

    grid: np.ndarray
    m_hat: np.ndarray
    m_prime_hat: np.ndarray
    f_hat: np.ndarray
    sigma2_hat: np.ndarray
    h: Bandwidth
    kernel: KernelSpec
    order: int
    n: int
    effective_n: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.grid = check_grid(self.grid)
        G = self.grid.size
        for name in ("m_hat", "m_prime_hat", "f_hat", "sigma2_hat"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (G,):
                raise ConfigurationError(f"{name} must have the grid's length {G}")
            setattr(self, name, arr)
        if np.any(self.f_hat < 0):
            raise ConfigurationError("density estimate must be non-negative")

    def __len__(self):
        return self.grid.size

    def __call__(self, d):
        """Linear interpolation of ``m_hat``."""
        return np.interp(d, self.grid, self.m_hat)

    def scaled(self, c):
        """Copy with the outcome scale multiplied by ``c``."""
        return DecayCurve(self.grid, c * self.m_hat, c * self.m_prime_hat, self.f_hat,
                          c * c * self.sigma2_hat, self.h, self.kernel, self.order, self.n,
                          self.effective_n)

    def metadata(self):
        return {"h": self.h.h, "bandwidth_method": self.h.method,
                "kernel": self.kernel.family, "p": self.order, "n": self.n}

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d_km", "m_hat", "m_prime_hat", "f_hat", "sigma2_hat"])
            for row in zip(self.grid, self.m_hat, self.m_prime_hat, self.f_hat, self.sigma2_hat):
                w.writerow([repr(float(v)) for v in row])

    def write(self, csv_path, json_path):
        self.to_csv(csv_path)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, csv_path, json_path):
        cols = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        with open(json_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], cols[:, 4],
                   Bandwidth(meta["h"], meta.get("bandwidth_method", "fixed")),
                   get_kernel(meta["kernel"]), int(meta["p"]), int(meta["n"]))


def default_grid(d_max):
    """1 km grid from 0 to ``d_max`` (inclusive when ``d_max`` is integral)."""
    return np.arange(0.0, math.floor(d_max + 1e-9) + 1.0)


def _resolve_grid(grid, sample_dmax):
    if grid is None:
        return default_grid(sample_dmax)
    if isinstance(grid, tuple) and len(grid) == 3:
        return make_grid(*grid)
    return check_grid(grid)


def fit_decay_curve(sample, grid=None, h=None, kernel="epanechnikov", order=1,
                    singular="error", ridge=0.0, with_variance=True):
    """Fit the local polynomial decay curve on a grid.

    Parameters
    ----------
    sample : DistancedSample or (distances, outcomes)
    grid : array, ``(d_min, d_max, G)`` tuple, or None
        None means a 1 km grid from 0 to the sample's ``d_max``.
    h : float, Bandwidth or None
        None applies Silverman's rule.
    singular : {"error", "interpolate"}
        What to do at grid points whose local design is singular.
    with_variance : bool
        Also compute the residual-variance curve (a second pass over the data).
    """
    x, y = _sample_arrays(sample)
    if x.size == 0:
        raise DegenerateInputError("cannot fit a curve to an empty sample")
    d_max = getattr(sample, "d_max", None)
    d_max = float(x.max()) if d_max is None else d_max
    pts = _resolve_grid(grid, d_max)
    bw = silverman_bandwidth(x) if h is None else _as_h(h)
    kern = get_kernel(kernel)
    order = _check_order(order)
    sol = _resolve_singular(_solve_local(x, y, pts, bw.h, kern, order, ridge), pts, singular)
    m_hat = sol.beta[:, 0]
    if order >= 1:
        m_prime = sol.beta[:, 1]
    else:
        m_prime = np.gradient(m_hat, pts) if pts.size > 1 else np.zeros(1)
    f_hat = sol.s0 / (x.size * bw.h)
    if with_variance:
        resid2 = (y - np.interp(x, pts, m_hat)) ** 2
        acc = np.zeros(pts.size)
        for i, g, _, w in _iter_pairs(x, pts, bw.h, kern):
            acc += np.bincount(g, weights=w * resid2[i], minlength=pts.size)
        with np.errstate(invalid="ignore", divide="ignore"):
            sigma2 = np.where(sol.s0 > 0, acc / sol.s0, np.nan)
    else:
        sigma2 = np.full(pts.size, np.nan)
    return DecayCurve(pts, m_hat, m_prime, f_hat, sigma2, bw, kern, order, int(x.size),
                      sol.eff_n)


def cv_bandwidth(sample, candidate_hs, kernel="epanechnikov", order=1, folds=5,
                 random_state=0, return_scores=False):
    """K-fold cross-validated bandwidth.

    The criterion is the out-of-fold mean squared prediction error of the
    regression function, evaluated exactly at the held-out distances.
    Candidates whose fit is singular on any fold score ``inf``; ties go to
    the larger bandwidth.
    """
    x, y = _sample_arrays(sample)
    hs = np.asarray([_as_h(h).h for h in np.atleast_1d(candidate_hs)], dtype=np.float64)
    if hs.size == 0:
        raise ConfigurationError("at least one candidate bandwidth is required")
    if folds < 2:
        raise ConfigurationError("cross-validation needs at least 2 folds")
    if hs.size == 1:
        return (Bandwidth(hs[0], "cross_validation"), np.array([np.nan])) if return_scores \
            else Bandwidth(hs[0], "cross_validation")
    splits = list(KFold(n_splits=folds, shuffle=True, random_state=random_state).split(x))
    scores = np.zeros(hs.size)
    for c, h in enumerate(hs):
        sse = 0.0
        for train, test in splits:
            try:
                pred = local_poly_evaluate(x[train], y[train], x[test], h, kernel, order)
            except SingularFitError:
                sse = np.inf
                break
            sse += float(np.sum((y[test] - pred[:, 0]) ** 2))
        scores[c] = sse / x.size
    if not np.isfinite(scores).any():
        raise SingularFitError(float("nan"), message="every candidate bandwidth gave a singular fit")
    best = np.min(scores)
    # absolute floor on the scale of the outcome variance: exact fits tie at round-off
    tol = 1e-12 * max(best, float(np.var(y)))
    tied = np.flatnonzero(scores <= best + tol)
    chosen = Bandwidth(float(hs[tied].max()), "cross_validation")
    return (chosen, scores) if return_scores else chosen


def resolve_bandwidth(bandwidth, x, y, kernel="epanechnikov", order=1, cv_candidates=None,
                      cv_folds=5, random_state=0):
    """Turn a bandwidth setting ("silverman", "cv", number) into a Bandwidth."""
    if isinstance(bandwidth, Bandwidth):
        return bandwidth
    if isinstance(bandwidth, str):
        if bandwidth == "silverman":
            return silverman_bandwidth(x)
        if bandwidth in ("cv", "cross_validation"):
            if cv_candidates is None:
                base = silverman_bandwidth(x).h
                cv_candidates = base * np.array([0.5, 1.0, 2.0, 4.0])
            return cv_bandwidth((x, y), cv_candidates, kernel, order, cv_folds, random_state)
        raise ConfigurationError(f"unknown bandwidth rule {bandwidth!r}")
    return _as_h(bandwidth)


class LocalPolynomialRegressor(RegressorMixin, BaseEstimator):
    """Local polynomial regression of an outcome on distance.

    Parameters
    ----------
    kernel : {"epanechnikov", "gaussian", "uniform"}
    bandwidth : "silverman", "cv" or float
    order : {0, 1, 2}
    grid : array, (d_min, d_max, G) tuple, or None
        Grid for the stored ``curve_``; None uses 1 km steps up to max(X).
    cv_candidates : array, optional
        Candidate bandwidths when ``bandwidth="cv"``.
    cv_folds : int
    singular : {"error", "interpolate"}
    random_state : int

    Attributes
    ----------
    curve_ : DecayCurve
    bandwidth_ : Bandwidth
    """

    def __init__(self, kernel="epanechnikov", bandwidth="silverman", order=1, grid=None,
                 cv_candidates=None, cv_folds=5, singular="error", random_state=0):
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.order = order
        self.grid = grid
        self.cv_candidates = cv_candidates
        self.cv_folds = cv_folds
        self.singular = singular
        self.random_state = random_state

    def fit(self, X, y):
        x = as_distances(X)
        y = as_outcomes(y, x.size)
        self.bandwidth_ = resolve_bandwidth(self.bandwidth, x, y, self.kernel, self.order,
                                            self.cv_candidates, self.cv_folds, self.random_state)
        self.curve_ = fit_decay_curve((x, y), self.grid, self.bandwidth_, self.kernel,
                                      self.order, self.singular)
        self._x = x
        self._y = y
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "curve_")
        pts = as_distances(X)
        return local_poly_evaluate(self._x, self._y, pts, self.bandwidth_, self.kernel,
                                   self.order, self.singular)[:, 0]

    def derivative(self, X):
        """Estimated slope m'(d) at ``X`` (order >= 1)."""
        check_is_fitted(self, "curve_")
        if self.order < 1:
            raise ConfigurationError("derivative needs order >= 1")
        pts = as_distances(X)
        return local_poly_evaluate(self._x, self._y, pts, self.bandwidth_, self.kernel,
                                   self.order, self.singular)[:, 1]
