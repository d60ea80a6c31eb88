"""Picard iteration for the self-consistent limit law.

The map K -> R(K) -> law of Y driven by R -> covariance of Y is evaluated with
common random numbers (the same initial values and Brownian increments at
every iteration), so at finite sample size it is a deterministic map and the
stopping rule on successive covariances is meaningful.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .kernels import Kernel, kernel_distance, resolvent_kernel
from .model import ModelParams, check_params
from .simulate import PathEnsemble, limit_inputs, simulate_limit

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-2
DEFAULT_MAX_ITER = 20
DEFAULT_DAMPING = 0.5
DEFAULT_N_PATHS = 10_000
MIN_DAMPING = 1 / 16
# paths simulated per call; bounds memory for large n_paths
PATH_CHUNK = 20_000
# common random numbers are cached when they fit in this many floats
CACHE_FLOATS = 25_000_000


@dataclass
class LimitLaw:
    covariance: Kernel
    resolvent: Kernel
    sample: PathEnsemble
    iterations: int
    final_residual: float
    converged: bool
    tol: float
    history: list = field(default_factory=list)
    damping_history: list = field(default_factory=list)
    terminal: np.ndarray | None = None  # Y_T for every path
    kTT_ci: tuple = (np.nan, np.nan)

    def diagnostics(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "tol": self.tol,
            "final_residual": self.final_residual,
            "residual_history": list(self.history),
            "damping_history": list(self.damping_history),
            "K_TT": float(self.covariance.values[-1, -1]),
            "K_TT_ci": list(self.kTT_ci),
        }

    def dump(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        t = self.covariance.grid.times
        io.write_kernel_csv(d / "covariance.csv", self.covariance.values, t)
        io.write_kernel_csv(d / "resolvent.csv", self.resolvent.values, t, lower_only=True)
        (d / "diagnostics.json").write_text(json.dumps(self.diagnostics(), indent=2))


def limit_covariance(params: ModelParams, resolvent, n_paths: int, seed: int, threads: int = 1, cache=None):
    """Covariance of the limit dynamics driven by ``resolvent``; also returns Y_T and a path sample.

    ``cache`` (a dict) keeps the random inputs between calls with the same seed.
    """
    m1 = params.grid.n_steps + 1
    acc = np.zeros((m1, m1))
    terminal = []
    sample = None
    use_cache = cache is not None and n_paths * m1 <= CACHE_FLOATS
    for start in range(0, n_paths, PATH_CHUNK):
        count = min(PATH_CHUNK, n_paths - start)
        inputs = None
        if use_cache:
            inputs = cache.get(start)
            if inputs is None:
                inputs = cache[start] = limit_inputs(params, count, seed, first_replica=start)
        ens = simulate_limit(params, resolvent, count, seed, threads=threads, first_replica=start, inputs=inputs)
        y = ens.values[:, 0, :]
        acc += y.T @ y
        terminal.append(y[:, -1].copy())
        if sample is None:
            sample = ens
    k = acc / n_paths
    return Kernel(0.5 * (k + k.T), params.grid, "Symmetric"), np.concatenate(terminal), sample


def _bootstrap_second_moment(y: np.ndarray, n_boot: int, seed: int, level: float = 0.95):
    rng = np.random.default_rng(seed)
    sq = y * y
    stats = np.array([sq[rng.integers(0, sq.size, sq.size)].mean() for _ in range(n_boot)])
    a = (1 - level) / 2
    return float(np.quantile(stats, a)), float(np.quantile(stats, 1 - a))


def solve_limit(params: ModelParams, n_paths: int = DEFAULT_N_PATHS, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER, damping: float = DEFAULT_DAMPING, seed: int = 0,
                threads: int = 1, n_boot: int = 1000) -> LimitLaw:
    """Damped Picard iteration K^{m+1} = (1 - a) K^m + a Cov(Y[R(K^m)]).

    Starts from the covariance of the beta = 0 dynamics.  Stops when the
    relative kernel distance between successive iterates drops below ``tol``.
    If the residual fails to decrease three times in a row the damping is
    halved, down to 1/16.  A run that hits ``max_iter`` is returned with
    ``converged=False``.
    """
    check_params(params)
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    zero = np.zeros((params.grid.n_steps + 1,) * 2)
    cache: dict = {}
    k, terminal, sample = limit_covariance(params.replace(beta=0.0), zero, n_paths, seed, threads, cache)
    history, alphas = [], []
    alpha = damping
    stalls = 0
    r = resolvent_kernel(k, params.beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        k_new, terminal, sample = limit_covariance(params, r, n_paths, seed, threads, cache)
        mixed = Kernel((1 - alpha) * k.values + alpha * k_new.values, k.grid, "Symmetric")
        norm = kernel_distance(k, Kernel(np.zeros_like(k.values), k.grid))
        res = kernel_distance(mixed, k) / norm if norm > 0 else kernel_distance(mixed, k)
        stalls = stalls + 1 if history and res >= history[-1] else 0
        history.append(res)
        alphas.append(alpha)
        log.debug("iteration %d residual %.3e alpha %.4f", it, res, alpha)
        k = mixed
        r = resolvent_kernel(k, params.beta)
        if res < tol:
            converged = True
            break
        if stalls >= 3 and alpha > MIN_DAMPING:
            alpha = max(MIN_DAMPING, alpha / 2)
            stalls = 0
    if not converged:
        log.warning("fixed point not converged after %d iterations (residual %.3e)", it, history[-1])
    ci = _bootstrap_second_moment(terminal, n_boot, seed)
    return LimitLaw(k, r, sample, it, history[-1], converged, tol, history, alphas, terminal, ci)
