"""Disorder matrices: sampling, operator norm by power iteration, the good event."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import DisorderSpec
from .rng import substream

DEFAULT_C_S = 3.0


class PowerIterationError(RuntimeError):
    def __init__(self, message: str, last_estimate: float):
        super().__init__(message)
        self.last_estimate = last_estimate


@dataclass(frozen=True)
class DisorderMatrix:
    entries: np.ndarray
    kind: str = "Gaussian"
    seed: int | None = None
    index: int = 0

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def draw_entries(spec: DisorderSpec, shape, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. mean-0, variance-1 entries of the declared law."""
    kind = spec.kind
    if kind == "Gaussian":
        return rng.standard_normal(shape)
    if kind == "Rademacher":
        return 2.0 * rng.integers(0, 2, size=shape) - 1.0
    if kind == "UniformUnitVar":
        s3 = math.sqrt(3.0)
        return rng.uniform(-s3, s3, size=shape)
    if kind == "CenteredBeta":
        a = spec.beta_shape
        # Var Beta(a, a) = 1 / (4 (2a + 1))
        return (rng.beta(a, a, size=shape) - 0.5) * 2.0 * math.sqrt(2.0 * a + 1.0)
    raise ValueError(f"unknown disorder kind {kind!r}")


def sample_disorder(spec: DisorderSpec, n: int, seed: int, index: int = 0) -> DisorderMatrix:
    """Deterministic in ``(spec, n, seed, index)``; index selects the replica substream."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = substream(seed, index, "disorder")
    return DisorderMatrix(draw_entries(spec, (n, n), rng), spec.kind, seed, index)


def _entries(mat) -> np.ndarray:
    return mat.entries if isinstance(mat, DisorderMatrix) else np.asarray(mat, dtype=float)


def operator_norm(mat, tol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Largest singular value, by power iteration on J^T J.

    Starts from the all-ones vector.  Convergence is judged on an
    Aitken-extrapolated error estimate of the Rayleigh quotient, so slow
    geometric convergence does not stop the iteration early.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    j = _entries(mat)
    n = j.shape[1]
    if not np.any(j):
        return 0.0
    v = np.ones(n) / math.sqrt(n)
    restarted = False
    lam_prev = delta_prev = None
    lam = 0.0
    for _ in range(max_iter):
        jv = j @ v
        lam = float(jv @ jv)
        w = j.T @ jv
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            if restarted:
                return 0.0
            # stagnation: restart on the heaviest column direction
            restarted = True
            v = np.zeros(n)
            v[int(np.argmax(np.einsum("ij,ij->j", j, j)))] = 1.0
            lam_prev = delta_prev = None
            continue
        v = w / wn
        if lam_prev is not None:
            delta = lam - lam_prev
            err = abs(delta)
            if delta_prev is not None and delta_prev != 0:
                r = delta / delta_prev
                if 0 < r < 1:
                    err = abs(delta) * r / (1 - r)
            if err <= 0.5 * tol * lam:
                # refine with the latest direction, which is at least as good
                jv = j @ v
                return math.sqrt(max(lam, float(jv @ jv)))
            delta_prev = delta
        lam_prev = lam
    raise PowerIterationError(f"power iteration did not converge in {max_iter} steps", math.sqrt(lam))


def in_good_event(mat, c_s: float = DEFAULT_C_S, tol: float = 1e-6) -> bool:
    """True iff ||J||_op <= c_s sqrt(N)."""
    if c_s <= 0:
        raise ValueError("c_s must be positive")
    j = _entries(mat)
    return operator_norm(j, tol) <= c_s * math.sqrt(j.shape[0])
