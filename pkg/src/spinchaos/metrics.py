"""Wasserstein distances, quenched-observable concentration statistics, rate fits."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .disorder import sample_disorder
from .model import ModelParams, check_params
from .rng import child_seed, substream
from .simulate import simulate_quenched

TAIL_THRESHOLDS = (0.05, 0.1, 0.2)
KD_MAX_N = 4096


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray  # (n, d)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.shape[0] == 0:
            raise ValueError("empty sample set")
        if not np.all(np.isfinite(p)):
            raise ValueError("sample set has non-finite coordinates")
        object.__setattr__(self, "points", p)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, SampleSet) else SampleSet(x).points


def _common_size(a: np.ndarray, b: np.ndarray, seed: int):
    """Subsample the larger set without replacement so both have equal size."""
    if a.shape[0] == b.shape[0]:
        return a, b, False
    rng = substream(seed, "w1-subsample")
    if a.shape[0] > b.shape[0]:
        a = a[np.sort(rng.choice(a.shape[0], b.shape[0], replace=False))]
    else:
        b = b[np.sort(rng.choice(b.shape[0], a.shape[0], replace=False))]
    return a, b, True


def wasserstein1_1d(a, b, seed: int = 0, return_flag: bool = False):
    """W1 between equal-weight empirical measures on the line (sorted matching).

    Sets of different size are first brought to a common size by seeded
    subsampling of the larger one; ``return_flag`` reports whether that happened.
    """
    pa, pb = _points(a), _points(b)
    if pa.shape[1] != 1 or pb.shape[1] != 1:
        raise ValueError("wasserstein1_1d needs one-dimensional samples")
    pa, pb, flag = _common_size(pa[:, 0], pb[:, 0], seed)
    w = float(np.mean(np.abs(np.sort(pa) - np.sort(pb))))
    return (w, flag) if return_flag else w


def wasserstein1_kd(a, b, max_n: int = KD_MAX_N, seed: int = 0) -> float:
    """Exact W1 (Euclidean ground cost) between equal-size point clouds by optimal assignment."""
    pa, pb = _points(a), _points(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError("dimension mismatch")
    pa, pb, _ = _common_size(pa, pb, seed)
    if pa.shape[0] > max_n:
        raise ValueError(f"assignment size {pa.shape[0]} exceeds cap {max_n}")
    cost = cdist(pa, pb)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def gaussian_w1(sigma1: float, sigma2: float) -> float:
    """W1 between N(0, sigma1^2) and N(0, sigma2^2)."""
    if sigma1 < 0 or sigma2 < 0:
        raise ValueError("standard deviations must be nonnegative")
    return math.sqrt(2 / math.pi) * abs(sigma1 - sigma2)


# --- observables of a path ensemble of one particle -------------------------

def _obs_marginal(paths, grid, big_a):
    return paths[:, -1]


def _obs_path_average(paths, grid, big_a):
    w = grid.trapezoid_weights()
    return paths @ w / math.sqrt(grid.horizon)


def _obs_clipped_abs(paths, grid, big_a):
    return np.minimum(np.abs(paths[:, -1]), 0.5 * big_a)


OBSERVABLES = {
    "marginal": _obs_marginal,
    "path_average": _obs_path_average,
    "clipped_abs": _obs_clipped_abs,
}


@dataclass
class ConcentrationReport:
    observable: str
    n_particles: int
    n_disorder: int
    n_inner: int
    conditional_means: np.ndarray
    inner_variances: np.ndarray
    mean: float
    variance: float  # raw across-disorder variance of the estimated E[f | J]
    noise_floor: float  # mean inner variance / n_inner
    between_variance: float  # variance minus noise floor
    tails: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "observable": self.observable,
            "N": self.n_particles,
            "n_disorder": self.n_disorder,
            "n_inner": self.n_inner,
            "mean": self.mean,
            "variance": self.variance,
            "noise_floor": self.noise_floor,
            "between_variance": self.between_variance,
            "tails": {str(k): v for k, v in self.tails.items()},
        }


def quenched_observable_stats(params: ModelParams, observable, n_disorder: int, n_inner: int, seed: int,
                              threads: int = 1, thresholds=TAIL_THRESHOLDS):
    """Across-disorder statistics of E[f(X^1) | J] estimated with ``n_inner`` replicas per J.

    ``observable`` is a registry name or a list of names; with a list, every
    observable is evaluated on the same paths and a dict of reports is
    returned.  Disorder draw d uses matrix substream (seed, d) and Brownian
    streams keyed by a child seed of (seed, "inner", d).
    """
    check_params(params)
    names = [observable] if isinstance(observable, str) else list(observable)
    for name in names:
        if name not in OBSERVABLES:
            raise ValueError(f"observable must be one of {sorted(OBSERVABLES)}")
    n = params.n_particles

    def one(d: int):
        mat = sample_disorder(params.disorder, n, seed, d)
        ens = simulate_quenched(params, mat, n_inner, child_seed(seed, "inner", d), keep_particles=[0])
        out = []
        for name in names:
            vals = OBSERVABLES[name](ens.values[:, 0, :], params.grid, params.big_a)
            out.append((float(vals.mean()), float(vals.var(ddof=1)) if n_inner > 1 else 0.0))
        return out

    if threads == 1:
        res = [one(d) for d in range(n_disorder)]
    else:
        with ThreadPoolExecutor(max_workers=threads or None) as ex:
            res = list(ex.map(one, range(n_disorder)))
    reports = {}
    for i, name in enumerate(names):
        means = np.array([r[i][0] for r in res])
        inner = np.array([r[i][1] for r in res])
        mu = float(means.mean())
        var = float(means.var(ddof=1)) if n_disorder > 1 else 0.0
        floor = float(inner.mean() / n_inner)
        dev = np.abs(means - mu)
        tails = {r: float(np.mean(dev >= r)) for r in thresholds}
        reports[name] = ConcentrationReport(name, n, n_disorder, n_inner, means, inner, mu, var, floor,
                                            var - floor, tails)
    return reports[names[0]] if isinstance(observable, str) else reports


def fit_tail_constant(reports) -> tuple[float, float]:
    """Fit log P(|dev| >= r) = log c0 - c1 r^2 N over all positive tail frequencies.

    Returns (c0, c1); c1 is NaN when fewer than two positive frequencies exist.
    """
    xs, ys = [], []
    for rep in reports:
        for r, p in rep.tails.items():
            if p > 0:
                xs.append(float(r) ** 2 * rep.n_particles)
                ys.append(math.log(p))
    if len(set(xs)) < 2:
        return math.nan, math.nan
    slope, icpt = np.polyfit(xs, ys, 1)
    return float(math.exp(icpt)), float(-slope)


# --- rate fits --------------------------------------------------------------

@dataclass
class RateFit:
    xs: np.ndarray
    ys: np.ndarray
    slope: float
    intercept: float
    r_squared: float
    ci: tuple

    def summary(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "ci": list(self.ci), "xs": self.xs.tolist(), "ys": self.ys.tolist()}


def _ols(lx, ly):
    xm, ym = lx.mean(), ly.mean()
    sxx = np.sum((lx - xm) ** 2)
    slope = np.sum((lx - xm) * (ly - ym)) / sxx
    icpt = ym - slope * xm
    ss_tot = np.sum((ly - ym) ** 2)
    ss_res = np.sum((ly - icpt - slope * lx) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), float(r2)


def fit_rate(xs, ys, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> RateFit:
    """Least squares of log y on log x, with a bootstrap interval over resampled points."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 4:
        raise ValueError("fit_rate needs at least 4 points")
    if np.any(ys <= 0):
        raise ValueError("distances must be positive for a log-log fit")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("sizes must be strictly increasing")
    lx, ly = np.log(xs), np.log(ys)
    slope, icpt, r2 = _ols(lx, ly)
    rng = substream(seed, "fit-rate")
    boot = []
    for _ in range(n_boot):
        idx = rng.integers(0, xs.size, xs.size)
        if np.unique(idx).size < 2:
            continue
        boot.append(_ols(lx[idx], ly[idx])[0])
    a = (1 - level) / 2
    ci = (float(np.quantile(boot, a)), float(np.quantile(boot, 1 - a))) if boot else (math.nan, math.nan)
    return RateFit(xs, ys, slope, icpt, r2, ci)


# --- bootstrap helpers ------------------------------------------------------

def bootstrap_ci(values, stat=np.mean, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval of ``stat`` over resampled ``values``."""
    v = np.asarray(values)
    rng = substream(seed, "bootstrap")
    stats = np.array([stat(v[rng.integers(0, v.shape[0], v.shape[0])]) for _ in range(n_boot)])
    a = (1 - level) / 2
    return float(np.quantile(stats, a)), float(np.quantile(stats, 1 - a))


def bootstrap_w1_ci(a, b, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval of the 1-D W1 estimate, resampling both sets."""
    pa, pb = _points(a)[:, 0], _points(b)[:, 0]
    pa, pb, _ = _common_size(pa, pb, seed)
    rng = substream(seed, "bootstrap-w1")
    n = pa.size
    stats = np.empty(n_boot)
    for i in range(n_boot):
        xa = np.sort(pa[rng.integers(0, n, n)])
        xb = np.sort(pb[rng.integers(0, n, n)])
        stats[i] = np.mean(np.abs(xa - xb))
    q = (1 - level) / 2
    return float(np.quantile(stats, q)), float(np.quantile(stats, 1 - q))
