"""Euler-Maruyama integration of the quenched, averaged and limit dynamics.

All three integrators share the same random-number layout, so that couplings
between them are exact: replica ``r`` draws its initial values from the
substream ``(seed, r, "initial")``, its Brownian increments from
``(seed, r, "brownian")`` (row-major over (step, particle), in time chunks) and
any Brownian-bridge refinement noise from ``(seed, r, "bridge")``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import io
from .disorder import DisorderMatrix
from .model import ModelParams, TimeGrid, check_params, potential_grad, sample_initial
from .rng import substream

MAX_HALVINGS = 20
BARRIER_EPS = 1e-6
TIME_CHUNK = 50
# replicas per work unit is chosen so a block holds about this many floats
BLOCK_FLOATS = 1 << 21
DENSE_Q_MAX_N = 64
Q_REFRESH_EVERY = 5


class BlowUpError(RuntimeError):
    """The state left the domain or overflowed and could not be recovered."""


class QUpdateError(np.linalg.LinAlgError):
    """I + S lost positive definiteness while refreshing Q."""


@dataclass(frozen=True)
class AveragedState:
    x: np.ndarray
    z: np.ndarray
    q: np.ndarray


@dataclass
class AveragedTrace:
    """Per-replica diagnostics of the averaged dynamics.

    ``q_norm[r, n]`` is ||Q_{t_n}||_op (NaN at steps where Q was only
    corrected, not refreshed, for large N) and ``qx_max[r, n]`` is
    max_i |(Q_{t_n} X_{t_n})^i|.
    """

    q_norm: np.ndarray
    qx_max: np.ndarray
    final: list = field(default_factory=list)
    q_snapshots: dict = field(default_factory=dict)


@dataclass
class PathEnsemble:
    values: np.ndarray  # (replica, particle, time)
    grid: TimeGrid
    meta: dict = field(default_factory=dict)
    flagged: np.ndarray | None = None
    trace: AveragedTrace | None = None
    particles: np.ndarray | None = None
    time_index: np.ndarray | None = None

    @property
    def n_replicas(self) -> int:
        return self.values.shape[0]

    def at(self, t: float) -> np.ndarray:
        """Values at grid time ``t``, shape (replica, particle)."""
        i = self.grid.index_of(t)
        if self.time_index is not None:
            i = int(np.nonzero(self.time_index == i)[0][0])
        return self.values[:, :, i]

    def save(self, path, fmt: str = "binary") -> None:
        if fmt == "csv":
            io.write_ensemble_csv(path, self.values)
        else:
            io.write_array(path, self.values)


def _blocks(n_replicas: int, per_replica_floats: int, first: int = 0):
    size = max(1, min(n_replicas, BLOCK_FLOATS // max(1, per_replica_floats)))
    end = first + n_replicas
    return [range(s, min(end, s + size)) for s in range(first, end, size)]


def _map_blocks(fn, blocks, threads: int):
    if threads == 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads or None) as ex:
        return list(ex.map(fn, blocks))


def _scalar_grad(params: ModelParams):
    pot, a = params.potential, params.big_a
    if pot.kind == "LogBarrier":
        a2 = a * a
        return lambda y: 2.0 * y / (a2 - y * y)
    return lambda y: float(potential_grad(pot, np.array(y), a))


class _Stepper:
    """Barrier-aware Euler step shared by all dynamics."""

    def __init__(self, params: ModelParams, replicas: range, seed: int, sign: float):
        self.params = params
        self.dt = params.grid.dt
        self.sign = sign
        self.confined = params.confined
        a = params.big_a
        self.lim = a - BARRIER_EPS * a
        self.grad1 = _scalar_grad(params)
        self.seed = seed
        self.replicas = replicas
        self._bridges: dict[int, np.random.Generator] = {}
        self.flagged = np.zeros(len(replicas), dtype=bool)
        self.substeps = 0

    def bridge(self, b: int) -> np.random.Generator:
        g = self._bridges.get(b)
        if g is None:
            g = self._bridges[b] = substream(self.seed, self.replicas[b], "bridge")
        return g

    def step(self, x: np.ndarray, drive: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """x + (drive - U'(x)) dt + dw, with ``drive`` frozen over the step."""
        p = self.params
        if not self.confined:
            x_new = x + drive * self.dt + dw
            if not np.all(np.isfinite(x_new)):
                raise BlowUpError("state overflowed; reduce the horizon or beta")
            return x_new
        x_new = x + (drive - potential_grad(p.potential, x, p.big_a)) * self.dt + dw
        bad = ~(np.abs(x_new) < self.lim)
        if bad.any():
            for idx in zip(*np.nonzero(bad)):
                x_new[idx] = self._refine(idx[0], float(x[idx]), float(drive[idx]), float(dw[idx]), float(x_new[idx]))
        return x_new

    def _refine(self, b: int, x0: float, f: float, dw: float, proposal: float) -> float:
        rng = self.bridge(b)
        grad = self.grad1
        for k in range(1, MAX_HALVINGS + 1):
            n = 1 << k
            h = self.dt / n
            xi = self.sign * rng.standard_normal(n) * math.sqrt(h)
            inc = xi - (xi.sum() - dw) / n
            y = x0
            ok = True
            for d in inc:
                y = y + (f - grad(y)) * h + d
                if not abs(y) < self.lim:
                    ok = False
                    break
            self.substeps += 1
            if ok:
                return y
        self.flagged[b] = True
        return float(np.clip(proposal if np.isfinite(proposal) else np.sign(dw) * self.lim, -self.lim, self.lim))


class _Noise:
    """Per-replica Brownian increments, drawn in chunks of TIME_CHUNK steps."""

    def __init__(self, seed: int, replicas: range, n: int, dt: float, sign: float, chunk: int = TIME_CHUNK):
        self.gens = [substream(seed, r, "brownian") for r in replicas]
        self.n = n
        self.scale = sign * math.sqrt(dt)
        self.chunk = chunk
        self._buf = None
        self._start = 0

    def get(self, step: int) -> np.ndarray:
        """Increments of step ``step``, shape (replica, particle); steps in order."""
        if self._buf is None or step >= self._start + self._buf.shape[1]:
            self._start = step
            self._buf = np.stack([g.standard_normal((self.chunk, self.n)) for g in self.gens]) * self.scale
        return self._buf[:, step - self._start, :]


class _Given:
    """Increments supplied by the caller, shape (replica, step, particle)."""

    def __init__(self, increments: np.ndarray, lo: int, hi: int, sign: float):
        self.inc = increments[lo:hi]
        self.sign = sign

    def get(self, step: int) -> np.ndarray:
        d = self.inc[:, step, :]
        return -d if self.sign < 0 else d


def brownian_increments(params: ModelParams, n_replicas: int, seed: int, first_replica: int = 0) -> np.ndarray:
    """The increments the simulators draw, shape (replica, step, particle)."""
    n, m = params.n_particles, params.grid.n_steps
    reps = range(first_replica, first_replica + n_replicas)
    scale = math.sqrt(params.grid.dt)
    return np.stack([substream(seed, r, "brownian").standard_normal((m, n)) for r in reps]) * scale


def coarsen_increments(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` steps: the same Brownian path on a coarser grid."""
    r, m, n = increments.shape
    if m % factor:
        raise ValueError("step count is not divisible by the coarsening factor")
    return increments.reshape(r, m // factor, factor, n).sum(axis=2)


def _initial(params: ModelParams, seed: int, replicas: range, n: int, sign: float) -> np.ndarray:
    if params.initial.kind == "PointMassZero":
        return np.zeros((len(replicas), n))
    x = np.stack([sample_initial(params.initial, params.big_a, n, substream(seed, r, "initial")) for r in replicas])
    return sign * x if sign < 0 else x


def _noise_factory(seed, sign, increments, first_replica, m, n):
    if increments is None:
        return lambda block, n_, dt: _Noise(seed, block, n_, dt, sign)
    increments = np.asarray(increments, dtype=float)
    if increments.shape[1:] != (m, n):
        raise ValueError(f"increments have shape {increments.shape[1:]} per replica, expected {(m, n)}")
    return lambda block, n_, dt: _Given(increments, block.start - first_replica, block.stop - first_replica, sign)


def _selection(n, n_steps, keep_particles, keep_times):
    parts = np.arange(n) if keep_particles is None else np.asarray(keep_particles, dtype=int)
    times = np.arange(n_steps + 1) if keep_times is None else np.asarray(keep_times, dtype=int)
    return parts, times


def _assemble(results, params, meta, parts, times, keep_all_times):
    values = np.concatenate([r[0] for r in results])
    flagged = np.concatenate([r[1] for r in results])
    meta = dict(meta, flagged_replicas=int(flagged.sum()))
    return PathEnsemble(values, params.grid, meta, flagged, None, parts, None if keep_all_times else times)


def _store(out, x, n, times_pos, parts):
    j = times_pos.get(n)
    if j is not None:
        out[:, :, j] = x[:, parts]


def simulate_quenched(params: ModelParams, mat, n_replicas: int, seed: int, *, antithetic: bool = False,
                      keep_particles=None, keep_times=None, threads: int = 1, first_replica: int = 0,
                      increments=None) -> PathEnsemble:
    """Paths of the particle system for one fixed disorder matrix ``mat``.

    Replicas are numbered from ``first_replica``; an ensemble can be extended
    by a later call that starts where the previous one ended.  ``increments``
    (replica, step, particle) replaces the Brownian draws.
    """
    check_params(params)
    j = mat.entries if isinstance(mat, DisorderMatrix) else np.asarray(mat, dtype=float)
    n = params.n_particles
    if j.shape != (n, n):
        raise ValueError(f"disorder matrix is {j.shape}, expected {(n, n)}")
    m = params.grid.n_steps
    sign = -1.0 if antithetic else 1.0
    coup = params.beta / math.sqrt(n)
    jt = j.T.copy()
    _noise = _noise_factory(seed, sign, increments, first_replica, m, n)
    parts, times = _selection(n, m, keep_particles, keep_times)
    tpos = {int(t): k for k, t in enumerate(times)}

    def run(block: range):
        st = _Stepper(params, block, seed, sign)
        noise = _noise(block, n, params.grid.dt)
        x = _initial(params, seed, block, n, sign)
        out = np.empty((len(block), parts.size, times.size))
        _store(out, x, 0, tpos, parts)
        for k in range(m):
            x = st.step(x, coup * (x @ jt), noise.get(k))
            _store(out, x, k + 1, tpos, parts)
        return out, st.flagged

    blocks = _blocks(n_replicas, n * (TIME_CHUNK + 4), first_replica)
    res = _map_blocks(run, blocks, threads)
    meta = {"dynamics": "quenched", "seed": seed, "n_replicas": n_replicas, "antithetic": antithetic,
            "disorder": getattr(mat, "kind", "array")}
    return _assemble(res, params, meta, parts, times, keep_times is None)


def simulate_averaged(params: ModelParams, n_replicas: int, seed: int, *, antithetic: bool = False,
                      keep_particles=None, keep_times=None, keep_final: bool = False, q_times=(),
                      threads: int = 1, first_replica: int = 0, increments=None) -> PathEnsemble:
    """Paths of the Gaussian-disorder-averaged system in its Markovian (X, Z, Q) form.

    Q_t = (I + S_t)^{-1} with S_t = (beta^2/N) int_0^t X_s X_s^T ds accumulated
    by the trapezoidal rule.  For N <= 64 Q is refreshed from S every step;
    otherwise every 5 steps, with the first-order update Q <- Q - Q dS Q in
    between.  ``q_times`` lists grid indices at which Q is kept; ``increments``
    replaces the Brownian draws as in simulate_quenched.
    """
    check_params(params)
    n = params.n_particles
    m = params.grid.n_steps
    dt = params.grid.dt
    sign = -1.0 if antithetic else 1.0
    beta = params.beta
    coup = beta / math.sqrt(n)
    c_s = beta * beta / n * dt / 2
    dense = n <= DENSE_Q_MAX_N
    parts, times = _selection(n, m, keep_particles, keep_times)
    tpos = {int(t): k for k, t in enumerate(times)}
    q_times = {int(t) for t in q_times}
    eye = np.eye(n)
    _noise = _noise_factory(seed, sign, increments, first_replica, m, n)

    def refresh(s):
        a = eye + s
        try:
            np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise QUpdateError("I + S is not positive definite") from exc
        q = np.linalg.inv(a)
        return 0.5 * (q + np.swapaxes(q, 1, 2))

    def run(block: range):
        b = len(block)
        st = _Stepper(params, block, seed, sign)
        noise = _noise(block, n, dt)
        x = _initial(params, seed, block, n, sign)
        z = np.zeros((b, n, n))
        s = np.zeros((b, n, n))
        q = np.broadcast_to(eye, (b, n, n)).copy()
        out = np.empty((b, parts.size, times.size))
        q_norm = np.full((b, m + 1), np.nan)
        qx_max = np.empty((b, m + 1))
        snaps = {}
        q_norm[:, 0] = 1.0
        _store(out, x, 0, tpos, parts)
        xxt = x[:, :, None] * x[:, None, :]
        for k in range(m):
            if k in q_times:
                snaps[k] = q.copy()
            qx = np.einsum("bij,bj->bi", q, x)
            qx_max[:, k] = np.abs(qx).max(axis=1)
            dw = noise.get(k)
            drive = coup * np.einsum("bij,bj->bi", z, x)
            x_new = st.step(x, drive, dw)
            z += coup * dw[:, :, None] * qx[:, None, :]
            xxt_new = x_new[:, :, None] * x_new[:, None, :]
            ds = c_s * (xxt + xxt_new)
            s += ds
            if dense or (k + 1) % Q_REFRESH_EVERY == 0 or k + 1 == m:
                q = refresh(s)
                q_norm[:, k + 1] = np.linalg.eigvalsh(q)[:, -1]
            else:
                q = q - q @ ds @ q
                q = 0.5 * (q + np.swapaxes(q, 1, 2))
            x, xxt = x_new, xxt_new
            _store(out, x, k + 1, tpos, parts)
        qx_max[:, m] = np.abs(np.einsum("bij,bj->bi", q, x)).max(axis=1)
        if m in q_times:
            snaps[m] = q.copy()
        final = [AveragedState(x[i].copy(), z[i].copy(), q[i].copy()) for i in range(b)] if keep_final else []
        return out, st.flagged, q_norm, qx_max, final, snaps

    blocks = _blocks(n_replicas, 4 * n * n + n * (TIME_CHUNK + 4), first_replica)
    res = _map_blocks(run, blocks, threads)
    meta = {"dynamics": "averaged", "seed": seed, "n_replicas": n_replicas, "antithetic": antithetic,
            "q_refresh": "every step" if dense else f"every {Q_REFRESH_EVERY} steps"}
    ens = _assemble([(r[0], r[1]) for r in res], params, meta, parts, times, keep_times is None)
    snaps = {t: np.concatenate([r[5][t] for r in res]) for t in sorted(q_times) if t <= m}
    ens.trace = AveragedTrace(
        np.concatenate([r[2] for r in res]),
        np.concatenate([r[3] for r in res]),
        [s for r in res for s in r[4]],
        snaps,
    )
    return ens


def limit_inputs(params: ModelParams, n_replicas: int, seed: int, *, antithetic: bool = False,
                 first_replica: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Initial values (replica,) and Brownian increments (replica, step) of the limit dynamics.

    Exactly the draws simulate_limit makes; precomputing them lets repeated
    runs with common random numbers skip stream setup.
    """
    m = params.grid.n_steps
    sign = -1.0 if antithetic else 1.0
    reps = range(first_replica, first_replica + n_replicas)
    noise = _Noise(seed, reps, 1, params.grid.dt, sign, chunk=m)
    dws = noise.get(0)[:, None, 0] if m == 1 else np.stack([noise.get(k)[:, 0] for k in range(m)], axis=1)
    return _initial(params, seed, reps, 1, sign)[:, 0], dws


def simulate_limit(params: ModelParams, resolvent, n_replicas: int, seed: int, *, antithetic: bool = False,
                   keep_times=None, threads: int = 1, first_replica: int = 0, inputs=None) -> PathEnsemble:
    """Paths of the one-dimensional limit dynamics driven by the resolvent kernel.

    The memory drift at step i is beta^2 sum_{j<i} R(t_i, t_j) dW_j, built from
    the increments of the same Brownian path (left-point quadrature).
    ``inputs`` may carry the output of limit_inputs for the same arguments.
    """
    check_params(params)
    rv = getattr(resolvent, "values", resolvent)
    rv = np.asarray(rv, dtype=float)
    m = params.grid.n_steps
    if rv.shape != (m + 1, m + 1):
        raise ValueError(f"resolvent is {rv.shape}, expected {(m + 1, m + 1)} on the model grid")
    sign = -1.0 if antithetic else 1.0
    b2 = params.beta ** 2
    strict = np.tril(rv, -1)[:m, :m]  # row i: R(t_i, t_j), j < i
    parts, times = _selection(1, m, None, keep_times)
    tpos = {int(t): k for k, t in enumerate(times)}

    def run(block: range):
        st = _Stepper(params, block, seed, sign)
        if inputs is None:
            x0, dws = limit_inputs(params, len(block), seed, antithetic=antithetic, first_replica=block.start)
        else:
            lo, hi = block.start - first_replica, block.stop - first_replica
            x0, dws = inputs[0][lo:hi], inputs[1][lo:hi]
        memory = b2 * (dws @ strict.T)
        x = x0[:, None].copy()
        out = np.empty((len(block), 1, times.size))
        _store(out, x, 0, tpos, parts)
        for k in range(m):
            x = st.step(x, memory[:, k : k + 1], dws[:, k : k + 1])
            _store(out, x, k + 1, tpos, parts)
        return out, st.flagged

    blocks = _blocks(n_replicas, 3 * m + 8, first_replica)
    res = _map_blocks(run, blocks, threads)
    meta = {"dynamics": "limit", "seed": seed, "n_replicas": n_replicas, "antithetic": antithetic}
    return _assemble(res, params, meta, parts, times, keep_times is None)
