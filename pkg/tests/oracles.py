"""Independent reference computations used as test oracles.

Each oracle avoids the code path it checks: brute-force enumeration, closed
forms, or a different library routine.
"""

import itertools
import math

import numpy as np
from scipy import integrate, linalg, special


def w1_bruteforce(a, b):
    """Min over all permutations of the mean Euclidean matching cost."""
    a = np.atleast_2d(np.asarray(a, dtype=float).T).T
    b = np.atleast_2d(np.asarray(b, dtype=float).T).T
    n = a.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = np.mean(np.linalg.norm(a - b[list(perm)], axis=1))
        best = min(best, cost)
    return best


def gaussian_moment(m: int) -> float:
    """E[g^m] for standard normal g."""
    if m % 2:
        return 0.0
    return float(np.prod(np.arange(m - 1, 0, -2))) if m else 1.0


def wick_moment_enumerated(k: int, l: int, n: int) -> float:
    """E[(J^k (J^T)^l)_{11}] / n^{(k+l)/2} by summing over every index path.

    The expectation of each monomial is the product of Gaussian moments of
    the distinct entries appearing in it.
    """
    deg = k + l
    if deg == 0:
        return 1.0
    total = 0.0
    for mid in itertools.product(range(n), repeat=deg - 1):
        idx = (0, *mid, 0)
        counts = {}
        for step in range(deg):
            i, j = idx[step], idx[step + 1]
            entry = (i, j) if step < k else (j, i)
            counts[entry] = counts.get(entry, 0) + 1
        term = 1.0
        for m in counts.values():
            term *= gaussian_moment(m)
            if term == 0:
                break
        total += term
    return total / n ** (deg / 2)


def limit_variance_bessel(t: float, beta: float = 1.0) -> float:
    """int_0^t I_0(2 beta s) ds, which equals the limit series."""
    val, _ = integrate.quad(lambda s: special.i0(2 * beta * s), 0.0, t, epsabs=1e-14, epsrel=1e-13)
    return val


def quenched_variance_quad(j, t: float, beta: float = 1.0) -> float:
    """int_0^t |exp(s A^T) e_1|^2 ds with A = beta J / sqrt(N), by adaptive quadrature and scipy expm."""
    j = np.asarray(j, dtype=float)
    a = beta * j / math.sqrt(j.shape[0])

    def f(s):
        v = linalg.expm(s * a.T)[:, 0]
        return float(v @ v)

    val, _ = integrate.quad(f, 0.0, t, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def ou_variance(a: float, t: float) -> float:
    """Variance at time t of dX = a X dt + dW, X_0 = 0."""
    if a == 0:
        return t
    return (math.exp(2 * a * t) - 1) / (2 * a)


def constant_kernel_fredholm(c: float, beta: float, t: float) -> float:
    """H^t for K = c on [0, t]^2: the constant c / (1 + beta^2 c t)."""
    return c / (1 + beta * beta * c * t)


def constant_kernel_resolvent(c: float, beta: float, s: float) -> float:
    """R(t, s) for K = c: the constant-in-t value c / (1 + beta^2 c s)."""
    return c / (1 + beta * beta * c * s)


def central_difference(f, x: float, h: float = 1e-6) -> float:
    return (f(x + h) - f(x - h)) / (2 * h)
