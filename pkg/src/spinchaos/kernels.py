"""Two-time kernels on the time grid: covariance K, Fredholm kernel H, resolvent R.

Discrete operator convention: an integral operator with kernel k acts on grid
functions as ``k @ diag(w) @ f`` with trapezoidal weights ``w``.  Every
function here returns pointwise kernel values, never the weighted operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import TimeGrid

PSD_CLIP = 1e-8


@dataclass(frozen=True)
class Kernel:
    values: np.ndarray
    grid: TimeGrid
    shape: str = "Symmetric"  # or "LowerTriangular"

    @property
    def weights(self) -> np.ndarray:
        return self.grid.trapezoid_weights()

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def restrict(self, t_index: int) -> "Kernel":
        """The kernel on [0, t_{t_index}]^2."""
        return Kernel(self.values[: t_index + 1, : t_index + 1].copy(), _sub_grid(self.grid, t_index), self.shape)


def _sub_grid(grid: TimeGrid, t_index: int) -> TimeGrid:
    return _PointGrid(grid.dt) if t_index == 0 else TimeGrid(t_index, t_index * grid.dt)


class _PointGrid(TimeGrid):
    """The single-point grid {0}; trapezoidal weight zero."""

    def __init__(self, dt: float):
        object.__setattr__(self, "n_steps", 0)
        object.__setattr__(self, "horizon", 0.0)
        object.__setattr__(self, "_dt", dt)

    @property
    def dt(self) -> float:
        return self._dt

    def trapezoid_weights(self, t_index=None) -> np.ndarray:
        return np.zeros(1)


def _as_samples(paths, particle, pooled):
    values = getattr(paths, "values", paths)
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        return values
    if pooled:
        return values.reshape(-1, values.shape[-1])
    return values[:, particle, :]


def estimate_covariance(paths, particle: int = 0, pooled: bool = False, grid: TimeGrid | None = None) -> Kernel:
    """K(t_i, t_j) = sample mean of x_{t_i} x_{t_j}.

    ``paths`` is a PathEnsemble or an array shaped (replica, particle, time) or
    (sample, time).  With ``pooled`` all particles count as samples, which is
    the covariance of the empirical measure of the particle system.
    """
    x = _as_samples(paths, particle, pooled)
    if x.shape[0] == 0:
        raise ValueError("empty ensemble")
    grid = grid or getattr(paths, "grid", None) or TimeGrid(x.shape[1] - 1, float(x.shape[1] - 1))
    if grid.n_steps + 1 != x.shape[1]:
        raise ValueError(f"paths have {x.shape[1]} times but the grid has {grid.n_steps + 1}")
    k = x.T @ x / x.shape[0]
    k = 0.5 * (k + k.T)
    return Kernel(k, grid, "Symmetric")


def covariance_bootstrap(paths, t_index: int, n_boot: int = 1000, seed: int = 0, particle: int = 0,
                         level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for K(t, t) = E[x_t^2]."""
    x = _as_samples(paths, particle, False)[:, t_index]
    rng = np.random.default_rng(seed)
    sq = x * x
    stats = np.empty(n_boot)
    for b in range(n_boot):
        stats[b] = sq[rng.integers(0, sq.size, sq.size)].mean()
    a = (1 - level) / 2
    return float(np.quantile(stats, a)), float(np.quantile(stats, 1 - a))


def psd_repair(values: np.ndarray) -> np.ndarray:
    """Clip eigenvalues below -1e-8 * trace to zero; untouched if none are."""
    tr = float(np.trace(values))
    evals, evecs = np.linalg.eigh(0.5 * (values + values.T))
    bad = evals < -PSD_CLIP * abs(tr)
    if not np.any(bad):
        return values
    evals = np.where(bad, 0.0, evals)
    return (evecs * evals) @ evecs.T


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.solve(a, b, check_finite=True)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"Fredholm system beta^2 K W + I is singular: {exc}") from exc


def fredholm_kernel(cov: Kernel, beta: float, t_index: int | None = None) -> Kernel:
    """H^t = K^t (beta^2 K^t + I)^{-1} on [0, t], by Nystrom discretization.

    Solves (beta^2 K W + I) H = K, which makes K - H = beta^2 K W H exact.
    """
    m = cov.size - 1 if t_index is None else t_index
    sub = cov.restrict(m) if m < cov.size - 1 else cov
    k = psd_repair(sub.values) if cov.shape == "Symmetric" else sub.values
    w = sub.weights
    a = beta * beta * k * w[None, :] + np.eye(m + 1)
    return Kernel(_solve(a, k), sub.grid, "Symmetric")


def causal_fredholm_kernel(cov: Kernel, beta: float) -> Kernel:
    """Lower-triangular G(t_i, s_j) = H^{t_i}(t_i, s_j): the last row of each H^{t_i}.

    Each H^{t_i} is symmetric, so its last row is the solution of
    (beta^2 K_i W_i + I) x = K_i[:, i]; one solve per grid time.
    """
    k = psd_repair(cov.values)
    dt = cov.grid.dt
    m1 = cov.size
    g = np.zeros((m1, m1))
    g[0, 0] = k[0, 0]
    b2 = beta * beta
    for i in range(1, m1):
        w = np.full(i + 1, dt)
        w[0] = w[-1] = dt / 2
        ki = k[: i + 1, : i + 1]
        g[i, : i + 1] = _solve(b2 * ki * w[None, :] + np.eye(i + 1), ki[:, i])
    return Kernel(g, cov.grid, "LowerTriangular")


def volterra_resolvent(g: Kernel, beta: float) -> Kernel:
    """Solve R(t_i, s_j) = G(t_i, s_j) + beta^2 sum_{s_j <= u < t_i} w_u G(t_i, u) R(u, s_j).

    Weights are the trapezoidal weights of [s_j, t_i] with the endpoint u = t_i
    dropped, so the scheme is explicit (forward substitution in t_i).
    """
    gv = g.values
    dt = g.grid.dt
    b2 = beta * beta
    m1 = gv.shape[0]
    r = np.zeros((m1, m1))
    r[0, 0] = gv[0, 0]
    diag = np.zeros(m1)
    diag[0] = r[0, 0]
    for i in range(1, m1):
        gi = gv[i, :i]
        s = dt * (gi @ r[:i, :i]) - 0.5 * dt * gi * diag[:i]
        r[i, :i] = gi + b2 * s
        r[i, i] = gv[i, i]
        diag[i] = r[i, i]
    return Kernel(r, g.grid, "LowerTriangular")


def resolvent_kernel(cov: Kernel, beta: float) -> Kernel:
    """Volterra resolvent R of the causal Fredholm kernel of ``cov``."""
    return volterra_resolvent(causal_fredholm_kernel(cov, beta), beta)


def resolvent_and_causal(cov: Kernel, beta: float) -> tuple[Kernel, Kernel]:
    g = causal_fredholm_kernel(cov, beta)
    return volterra_resolvent(g, beta), g


def _trap_products(a: np.ndarray, b: np.ndarray, dt: float) -> np.ndarray:
    """sum_{u=s}^{t} w_u a(t, u) b(u, s) with trapezoidal weights of [s, t], lower-triangular a, b."""
    full = dt * (a @ b)
    return np.tril(full - 0.5 * dt * (a * np.diag(b)[None, :] + np.diag(a)[:, None] * b))


def identity_residuals(cov: Kernel, h: Kernel, r: Kernel, beta: float, causal: Kernel | None = None) -> dict:
    """Max-norm residuals of the Fredholm and resolvent identities.

    ``h`` is the Fredholm kernel H^T on the whole grid; ``causal`` (computed
    from ``cov`` when omitted) holds H^t(t, s).  Integrals use trapezoidal
    quadrature throughout.
    """
    b2 = beta * beta
    k = cov.values
    hv = h.values
    w = cov.weights[: hv.shape[0]]
    kk = k[: hv.shape[0], : hv.shape[0]]
    fred_kh = float(np.max(np.abs(kk - hv - b2 * (kk * w[None, :]) @ hv)))
    fred_hk = float(np.max(np.abs(kk - hv - b2 * (hv * w[None, :]) @ kk)))

    g = causal if causal is not None else causal_fredholm_kernel(cov, beta)
    gv, rv = g.values, r.values
    dt = cov.grid.dt
    # the same identity on the causal rows, for every t on the grid
    m1 = gv.shape[0]
    row_res = 0.0
    for i in range(1, m1):
        wi = np.full(i + 1, dt)
        wi[0] = wi[-1] = dt / 2
        ki = k[: i + 1, : i + 1]
        row_res = max(row_res, float(np.max(np.abs(ki[i] - gv[i, : i + 1] - b2 * (gv[i, : i + 1] * wi) @ ki))))
    low = np.tril(np.ones_like(rv, dtype=bool))
    res_hr = float(np.max(np.abs((rv - gv - b2 * _trap_products(gv, rv, dt))[low])))
    res_rh = float(np.max(np.abs((rv - gv - b2 * _trap_products(rv, gv, dt))[low])))
    return {
        "fredholm_kh": max(fred_kh, row_res),
        "fredholm_hk": max(fred_hk, row_res),
        "resolvent_hr": res_hr,
        "resolvent_rh": res_rh,
    }


def kernel_distance(a: Kernel, b: Kernel) -> float:
    """Weighted L^2 distance (int int |a - b|^2)^{1/2}, trapezoidal in both times."""
    if a.values.shape != b.values.shape:
        raise ValueError("kernels live on different grids")
    w = a.weights
    d = a.values - b.values
    return float(np.sqrt(max(0.0, w @ (d * d) @ w)))


def relative_distance(a: Kernel, b: Kernel) -> float:
    base = kernel_distance(b, Kernel(np.zeros_like(b.values), b.grid, b.shape))
    d = kernel_distance(a, b)
    return d / base if base > 0 else (0.0 if d == 0 else np.inf)


def constant_kernel(c: float, grid: TimeGrid) -> Kernel:
    n = grid.n_steps + 1
    return Kernel(np.full((n, n), float(c)), grid, "Symmetric")


def brownian_kernel(grid: TimeGrid) -> Kernel:
    t = grid.times
    return Kernel(np.minimum.outer(t, t), grid, "Symmetric")


def interpolate_kernel(kern: Kernel, factor: int = 2) -> Kernel:
    """Piecewise-linear refinement P K P^T onto a grid ``factor`` times finer (keeps PSD)."""
    fine = kern.grid.refine(factor)
    p = _interp_matrix(kern.grid.times, fine.times)
    v = p @ kern.values @ p.T
    if kern.shape == "LowerTriangular":
        v = np.tril(v)
    return Kernel(v, fine, kern.shape)


def _interp_matrix(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    eye = np.eye(coarse.size)
    return np.stack([np.interp(fine, coarse, eye[:, j]) for j in range(coarse.size)], axis=1)
