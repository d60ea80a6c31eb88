"""The exactly solvable model without confinement.

With U = 0 and X_0 = 0 the quenched system is linear, so the single-spin
law given J is centered Gaussian with variance

    q_t^2(J) = int_0^t || e_1^T exp(s J / sqrt(N)) ||^2 ds,

and its disorder average converges to the series
sum_k t^{2k+1} / ((2k+1) (k!)^2).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .disorder import DisorderMatrix, operator_norm, sample_disorder
from .metrics import gaussian_w1
from .model import DisorderSpec
from .rng import substream

PADE_DEGREE = 6
PADE_THETA = 0.5
# largest t ||J||_op / sqrt(N) for which exp stays far from overflow
GROWTH_CAP = 300.0
WICK_MAX_DEGREE = 8


def _pade_coefficients(m: int) -> list[float]:
    f = math.factorial
    return [f(2 * m - k) * f(m) / (f(2 * m) * f(k) * f(m - k)) for k in range(m + 1)]


_PADE_C = _pade_coefficients(PADE_DEGREE)


def expm(a: np.ndarray) -> np.ndarray:
    """exp(a) by scaling and squaring with a diagonal Pade(6, 6) approximant."""
    a = np.asarray(a, dtype=float)
    norm = float(np.abs(a).sum(axis=0).max()) if a.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / PADE_THETA)))) if norm > PADE_THETA else 0
    x = a / (2.0 ** s)
    n = a.shape[0]
    ident = np.eye(n)
    x2 = x @ x
    x4 = x2 @ x2
    x6 = x4 @ x2
    c = _PADE_C
    even = c[0] * ident + c[2] * x2 + c[4] * x4 + c[6] * x6
    odd = x @ (c[1] * ident + c[3] * x2 + c[5] * x4)
    r = np.linalg.solve(even - odd, even + odd)
    for _ in range(s):
        r = r @ r
    return r


@dataclass(frozen=True)
class QuenchedGaussian:
    variance: float
    t: float
    n: int
    seed: int | None = None


def _scaled(mat, beta: float = 1.0) -> np.ndarray:
    j = mat.entries if isinstance(mat, DisorderMatrix) else np.asarray(mat, dtype=float)
    return beta * j / math.sqrt(j.shape[0])


def quenched_covariance(mat, t: float, n_sub: int = 256, k: int = 1, beta: float = 1.0) -> np.ndarray:
    """Top-left k x k block of int_0^t exp(sA) exp(sA^T) ds, A = beta J / sqrt(N).

    This is the covariance of (X_t^1, ..., X_t^k) given J.  The integrand
    V(s)^T V(s) with V(s) = exp(s A^T) E_k (E_k the first k unit vectors) is
    propagated by one matrix exponential of the panel width and integrated by
    the trapezoidal rule on ``n_sub`` panels.  The Euler-Maclaurin term
    -h^2/12 (F'(t) - F'(0)), with F' = V^T (A + A^T) V exact, lifts the rule to
    fourth order.  Returns inf entries (with a warning) when t ||A||_op is
    beyond the overflow cap.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if n_sub < 16:
        raise ValueError("n_sub must be at least 16")
    a = _scaled(mat, beta)
    n = a.shape[0]
    if not 1 <= k <= n:
        raise ValueError("k must lie in [1, N]")
    growth = t * float(np.linalg.norm(a))
    if growth > GROWTH_CAP:
        growth = t * operator_norm(a)
        if growth > GROWTH_CAP:
            warnings.warn(f"t ||J||/sqrt(N) = {growth:.1f} exceeds the overflow cap {GROWTH_CAP}", RuntimeWarning)
            return np.full((k, k), math.inf)
    h = t / n_sub
    step = expm(h * a.T)
    sym = a + a.T
    v = np.eye(n, k)
    d0 = v.T @ sym @ v
    acc = 0.5 * (v.T @ v)
    for i in range(1, n_sub + 1):
        v = step @ v
        acc += (0.5 if i == n_sub else 1.0) * (v.T @ v)
    d1 = v.T @ sym @ v
    out = h * acc - h * h / 12.0 * (d1 - d0)
    return 0.5 * (out + out.T)


def quenched_variance(mat, t: float, n_sub: int = 256, beta: float = 1.0) -> float:
    """q_t^2(J), the variance of X_t^1 given J (see quenched_covariance)."""
    return float(quenched_covariance(mat, t, n_sub, 1, beta)[0, 0])


def quenched_variance_eigen(mat, t: float, beta: float = 1.0) -> float:
    """Closed-form q_t^2(J) through an eigendecomposition (small diagonalizable J only)."""
    a = _scaled(mat, beta)
    lam, p = np.linalg.eig(a)
    pinv = np.linalg.inv(p)
    # row 1 of exp(sA) = sum_k p[0, k] exp(s lam_k) pinv[k, :]
    c = p[0, :][:, None] * pinv  # (k, :)
    gram = c @ c.conj().T  # <c_k, c_l>
    mu = lam[:, None] + lam.conj()[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        integ = np.where(np.abs(mu) > 1e-14, np.expm1(t * mu) / mu, t)
    return float(np.real(np.sum(gram * integ)))


def limit_variance_series(t: float, tol: float = 1e-16, beta: float = 1.0) -> float:
    """sum_k beta^{2k} t^{2k+1} / ((2k+1) (k!)^2), stopped once the next term < tol * partial sum."""
    return series_with_bound(t, tol, beta)[0]


def series_with_bound(t: float, tol: float = 1e-16, beta: float = 1.0) -> tuple[float, float, int]:
    """(partial sum, bound on the omitted tail, number of terms)."""
    if not t > 0:
        raise ValueError("t must be positive")
    t2 = beta * beta * t * t
    term = t  # k = 0: t / (1 * 1)
    total = 0.0
    k = 0
    while True:
        total += term
        # term_{k+1} / term_k = beta^2 t^2 (2k+1) / ((2k+3) (k+1)^2)
        nxt = term * t2 * (2 * k + 1) / ((2 * k + 3) * (k + 1) ** 2)
        k += 1
        if nxt <= tol * total:
            break
        term = nxt
    # tail from term k on: ratios are at most beta^2 t^2 / (k+1)^2
    rho = t2 / (k + 1) ** 2
    bound = nxt / (1 - rho) if rho < 1 else math.inf
    return total, bound, k


def series_remainder_bound(t: float, n_terms: int) -> float:
    """Bound on sum_{k >= n_terms} of the series terms: first omitted term times a geometric factor."""
    k = n_terms
    first = t ** (2 * k + 1) / ((2 * k + 1) * math.factorial(k) ** 2)
    rho = t * t / (k + 1) ** 2
    return first / (1 - rho) if rho < 1 else math.inf


# --- Wick moments ----------------------------------------------------------

def _factor_entries(k: int, l: int):
    """Index-variable positions (row, col) of the factors of (J^k (J^T)^l)_{11}.

    The summation indices are i_0, ..., i_{k+l} with i_0 = i_{k+l} = 1.
    J^k contributes J[i_{w-1}, i_w]; (J^T)^l contributes J[i_w, i_{w-1}].
    """
    return [(w - 1, w) for w in range(1, k + 1)] + [(w, w - 1) for w in range(k + 1, k + l + 1)]


def _pairings(items):
    if not items:
        yield []
        return
    first = items[0]
    for i in range(1, len(items)):
        rest = items[1:i] + items[i + 1 :]
        for p in _pairings(rest):
            yield [(first, items[i])] + p


def _free_components(k: int, l: int, pairing, entries) -> int:
    parent = list(range(k + l + 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        parent[find(x)] = find(y)

    union(0, k + l)  # both ends are pinned to index 1
    for a, b in pairing:
        union(entries[a][0], entries[b][0])
        union(entries[a][1], entries[b][1])
    roots = {find(x) for x in range(k + l + 1)}
    return len(roots) - 1


def wick_pairing_counts(k: int, l: int) -> dict[int, int]:
    """Histogram {free components: number of pairings} over all Wick pairings."""
    if k + l > WICK_MAX_DEGREE:
        raise ValueError(f"k + l must be at most {WICK_MAX_DEGREE}")
    entries = _factor_entries(k, l)
    hist: dict[int, int] = {}
    if (k + l) % 2:
        return hist
    for p in _pairings(list(range(k + l))):
        c = _free_components(k, l, p, entries)
        hist[c] = hist.get(c, 0) + 1
    return hist


def wick_pairing_oracle(k: int, l: int) -> int:
    """N -> infinity limit of E[(J^k (J^T)^l)_{11}] / N^{(k+l)/2}, by pairing enumeration.

    Each pairing contributes N^{c} with c the number of free index classes; the
    limit counts pairings reaching c = (k+l)/2 (larger c never occurs).
    """
    hist = wick_pairing_counts(k, l)
    if not hist:
        return 0
    top = (k + l) // 2
    if max(hist) > top:
        raise AssertionError("pairing with more free indices than the normalization allows")
    return hist.get(top, 0)


def wick_moment_exact(k: int, l: int, n: int) -> float:
    """Exact E[(J^k (J^T)^l)_{11}] / N^{(k+l)/2} for standard Gaussian J."""
    hist = wick_pairing_counts(k, l)
    return float(sum(cnt * float(n) ** (c - (k + l) / 2) for c, cnt in hist.items()))


def wick_moment_mc(k: int, l: int, n: int, n_samples: int, seed: int, level: float = 0.95) -> dict:
    """Monte Carlo estimate of E[(J^k (J^T)^l)_{11}] / N^{(k+l)/2}.

    The (1,1) entry is replaced by trace / N, which has the same expectation
    because the Gaussian law of J is invariant under simultaneous permutation
    of rows and columns; the CI is the normal interval of the sample mean.
    """
    if k + l > WICK_MAX_DEGREE:
        raise ValueError(f"k + l must be at most {WICK_MAX_DEGREE}")
    spec = DisorderSpec("Gaussian")
    vals = np.empty(n_samples)
    for d in range(n_samples):
        j = sample_disorder(spec, n, seed, d).entries
        m = np.linalg.matrix_power(j, k) @ np.linalg.matrix_power(j.T, l)
        vals[d] = np.trace(m) / n ** ((k + l) / 2 + 1)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else math.inf
    z = _z(level)
    return {"estimate": est, "se": se, "ci": (est - z * se, est + z * se), "n": n, "k": k, "l": l}


def _z(level: float) -> float:
    from scipy.stats import norm

    return float(norm.ppf(0.5 + level / 2))


# --- lower bound experiment ------------------------------------------------

def disorder_variances(n: int, t: float, n_disorder: int, seed: int, n_sub: int = 256, beta: float = 1.0,
                       threads: int = 1) -> np.ndarray:
    """q_t^2(J) for Gaussian J drawn from substreams (seed, d), d < n_disorder."""
    spec = DisorderSpec("Gaussian")

    def one(d):
        return quenched_variance(sample_disorder(spec, n, seed, d), t, n_sub, beta)

    if threads == 1:
        return np.array([one(d) for d in range(n_disorder)])
    with ThreadPoolExecutor(max_workers=threads or None) as ex:
        return np.array(list(ex.map(one, range(n_disorder))))


def lower_bound_experiment(n_grid, t: float, q: float, n_disorder: int, seed: int, n_boot: int = 1000,
                           threads: int = 1, beta: float = 1.0) -> dict:
    """N E[W1^2] between the quenched single-spin law and N(0, q^2), per N.

    W1 between centered Gaussians is sqrt(2/pi) |q_t(J) - q|.  Passes when
    the minimum over the grid is at least half the median.
    """
    if not (t > 0 and q > 0):
        raise ValueError("t and q must be positive")
    rows = []
    for n in n_grid:
        q2 = disorder_variances(n, t, n_disorder, seed, beta=beta, threads=threads)
        w1sq = np.array([gaussian_w1(math.sqrt(v), q) ** 2 for v in q2])
        rng = substream(seed, "lower-bound-boot", n)
        boot = np.array([w1sq[rng.integers(0, w1sq.size, w1sq.size)].mean() for _ in range(n_boot)])
        rows.append({
            "N": int(n),
            "mean_q2": float(q2.mean()),
            "var_q2": float(q2.var(ddof=1)),
            "N_times_EW1sq": float(n * w1sq.mean()),
            "ci_lo": float(n * np.quantile(boot, 0.025)),
            "ci_hi": float(n * np.quantile(boot, 0.975)),
        })
    vals = np.array([r["N_times_EW1sq"] for r in rows])
    med = float(np.median(vals)) if vals.size else math.nan
    return {"rows": rows, "t": t, "q": q, "min": float(vals.min()) if vals.size else math.nan,
            "median": med, "pass": bool(vals.size and vals.min() >= 0.5 * med)}
