"""Model parameters, confining potentials, disorder laws and initial laws."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POTENTIAL_KINDS = ("LogBarrier", "Zero", "Custom")
DISORDER_KINDS = ("Gaussian", "Rademacher", "UniformUnitVar", "CenteredBeta")
INITIAL_KINDS = ("PointMassZero", "UniformSymmetric", "IidCustom")

# Experiments whose theory needs a confining potential, and those that only
# make sense for the explicitly solvable unconfined model.
CONFINED_ONLY_EXPERIMENTS = frozenset({"concentration", "universality"})
ZERO_ONLY_EXPERIMENTS = frozenset({"u0-exact"})
# Disorder kinds usable with U = 0: the exactly solvable model is Gaussian.
ZERO_POTENTIAL_DISORDER = frozenset({"Gaussian"})


class DomainError(ValueError):
    """A state value left the open interval (-A, A) where the potential lives."""


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int = 200
    horizon: float = 1.0

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; ``t`` must be a grid point (up to 1e-9 dt)."""
        i = int(round(t / self.dt))
        if i < 0 or i > self.n_steps or abs(i * self.dt - t) > 1e-9 * self.dt:
            raise ValueError(f"time {t} is not on the grid (dt={self.dt})")
        return i

    def trapezoid_weights(self, t_index: int | None = None) -> np.ndarray:
        """Trapezoidal weights on ``t_0 .. t_{t_index}``."""
        m = self.n_steps if t_index is None else t_index
        w = np.full(m + 1, self.dt)
        w[0] = w[-1] = self.dt / 2
        if m == 0:
            w[0] = 0.0
        return w

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.n_steps * factor, self.horizon)


@dataclass(frozen=True)
class PotentialSpec:
    """Confining potential U = U_c + U_l.

    ``Custom`` potentials are given by tabulated derivatives on nonnegative
    knots ``0 = k_0 < ... < k_m``; they are extended to negative x by oddness
    and interpolated linearly.
    """

    kind: str = "LogBarrier"
    knots: tuple[float, ...] = ()
    convex_grad: tuple[float, ...] = ()
    lipschitz_grad: tuple[float, ...] = ()
    c_lip: float = 0.0


@dataclass(frozen=True)
class DisorderSpec:
    kind: str = "Gaussian"
    t2_constant: float = 1.0
    # shape a of the symmetric Beta(a, a) law behind CenteredBeta
    beta_shape: float = 2.0


@dataclass(frozen=True)
class InitialLawSpec:
    """Law of the i.i.d. initial spins.

    ``half_width`` defaults to A/2 for ``UniformSymmetric``.  ``IidCustom`` is a
    symmetric law whose density on [0, A) is tabulated at ``knots``.
    """

    kind: str = "UniformSymmetric"
    half_width: float | None = None
    knots: tuple[float, ...] = ()
    density: tuple[float, ...] = ()
    chaotic_constant: float = 0.0
    poincare_constant: float = 1.0


@dataclass(frozen=True)
class ModelParams:
    beta: float = 1.0
    big_a: float = 1.0
    horizon: float = 1.0
    n_particles: int = 100
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    disorder: DisorderSpec = field(default_factory=DisorderSpec)
    initial: InitialLawSpec = field(default_factory=InitialLawSpec)
    grid: TimeGrid | None = None

    def __post_init__(self):
        if self.grid is None:
            object.__setattr__(self, "grid", TimeGrid(200, self.horizon))

    @property
    def confined(self) -> bool:
        return self.potential.kind != "Zero"

    def replace(self, **changes) -> "ModelParams":
        """Copy with changes; a new horizon without a new grid rescales the grid."""
        from dataclasses import replace

        if "horizon" in changes and "grid" not in changes:
            changes["grid"] = TimeGrid(self.grid.n_steps, changes["horizon"])
        return replace(self, **changes)


def default_params(potential: str = "LogBarrier", **overrides) -> ModelParams:
    """Parameters with the documented defaults for the given potential kind.

    U = 0 runs start from X_0 = 0 with Gaussian disorder; confined runs start
    from the uniform law on [-A/2, A/2].
    """
    if potential == "Zero":
        base = ModelParams(
            potential=PotentialSpec("Zero"),
            initial=InitialLawSpec("PointMassZero"),
            disorder=DisorderSpec("Gaussian"),
        )
    else:
        base = ModelParams(potential=PotentialSpec(potential))
    return base.replace(**overrides) if overrides else base


def potential_grad(spec: PotentialSpec, x, big_a: float):
    """U'(x), vectorized over ``x``.  Odd in ``x``."""
    x = np.asarray(x, dtype=float)
    if spec.kind == "Zero":
        return np.zeros_like(x)
    if np.any(np.abs(x) >= big_a):
        raise DomainError(f"|x| >= A = {big_a} for potential {spec.kind}")
    if spec.kind == "LogBarrier":
        return 2.0 * x / (big_a * big_a - x * x)
    if spec.kind == "Custom":
        knots = np.asarray(spec.knots)
        g = np.asarray(spec.convex_grad) + np.asarray(spec.lipschitz_grad)
        ax = np.abs(x)
        return np.copysign(np.interp(ax, knots, g), x) * (ax > 0)
    raise ValueError(f"unknown potential kind {spec.kind!r}")


def potential_value(spec: PotentialSpec, x, big_a: float):
    """U(x) for the closed-form potentials (used by convexity checks)."""
    x = np.asarray(x, dtype=float)
    if spec.kind == "Zero":
        return np.zeros_like(x)
    if spec.kind == "LogBarrier":
        if np.any(np.abs(x) >= big_a):
            raise DomainError(f"|x| >= A = {big_a}")
        return -np.log(big_a * big_a - x * x)
    raise ValueError(f"no closed-form value for potential {spec.kind!r}")


def sample_initial(spec: InitialLawSpec, big_a: float, shape, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "PointMassZero":
        return np.zeros(shape)
    if spec.kind == "UniformSymmetric":
        h = big_a / 2 if spec.half_width is None else spec.half_width
        return rng.uniform(-h, h, size=shape)
    if spec.kind == "IidCustom":
        knots = np.asarray(spec.knots, dtype=float)
        dens = np.asarray(spec.density, dtype=float)
        mass = np.diff(knots) * 0.5 * (dens[1:] + dens[:-1])
        cdf = np.concatenate([[0.0], np.cumsum(mass)])
        cdf /= cdf[-1]
        u = rng.random(size=shape)
        sign = np.where(rng.random(size=shape) < 0.5, -1.0, 1.0)
        return sign * np.interp(u, cdf, knots)
    raise ValueError(f"unknown initial law {spec.kind!r}")


def validate_params(params: ModelParams, experiment: str | None = None) -> list[str]:
    """List of violated invariants; empty means the parameters are usable."""
    issues: list[str] = []
    a = params.big_a
    if not params.beta >= 0:
        issues.append("beta ≥ 0")
    if not a > 0:
        issues.append("big_a > 0")
    if not params.horizon > 0:
        issues.append("horizon > 0")
    if params.n_particles < 1:
        issues.append("n_particles ≥ 1")

    g = params.grid
    if g.n_steps < 1:
        issues.append("grid n_steps ≥ 1")
    elif abs(g.horizon - params.horizon) > 1e-12 * max(1.0, params.horizon):
        issues.append("grid covers [0, horizon] exactly")

    pot = params.potential
    if pot.kind not in POTENTIAL_KINDS:
        issues.append(f"potential kind in {POTENTIAL_KINDS}")
    elif pot.kind == "Custom":
        k = np.asarray(pot.knots, dtype=float)
        cg = np.asarray(pot.convex_grad, dtype=float)
        lg = np.asarray(pot.lipschitz_grad, dtype=float)
        if k.size < 2 or cg.shape != k.shape or lg.shape != k.shape:
            issues.append("Custom potential declares U = U_c + U_l on a common knot table")
        else:
            if k[0] != 0 or np.any(np.diff(k) <= 0) or k[-1] >= a:
                issues.append("Custom knots increase from 0 and stay inside (-A, A)")
            if cg[0] != 0 or lg[0] != 0:
                issues.append("Custom potential is even (derivatives vanish at 0)")
            if np.any(np.diff(cg) < 0):
                issues.append("U_c convex (U_c' nondecreasing)")
            if not pot.c_lip > 0:
                issues.append("C_Lip > 0 declared")
            elif np.any(np.abs(np.diff(lg)) > pot.c_lip * np.diff(k) * (1 + 1e-12)):
                issues.append("U_l' is C_Lip-Lipschitz")

    if params.disorder.kind not in DISORDER_KINDS:
        issues.append(f"disorder kind in {DISORDER_KINDS}")
    if params.disorder.kind == "CenteredBeta" and not params.disorder.beta_shape > 0:
        issues.append("CenteredBeta shape > 0")

    init = params.initial
    if init.kind not in INITIAL_KINDS:
        issues.append(f"initial kind in {INITIAL_KINDS}")
    elif init.kind == "UniformSymmetric":
        h = a / 2 if init.half_width is None else init.half_width
        if not 0 < h < a:
            issues.append("initial law supported in (−A, A)")
    elif init.kind == "IidCustom":
        k = np.asarray(init.knots, dtype=float)
        d = np.asarray(init.density, dtype=float)
        if k.size < 2 or d.shape != k.shape or k[0] != 0 or np.any(np.diff(k) <= 0):
            issues.append("IidCustom density tabulated on increasing knots from 0")
        elif k[-1] >= a or np.any(d < 0) or not np.any(d > 0):
            issues.append("initial law supported in (−A, A)")

    if pot.kind == "Zero" and params.disorder.kind not in ZERO_POTENTIAL_DISORDER:
        issues.append("Zero potential requires Gaussian disorder")
    if experiment is not None:
        if pot.kind == "Zero" and experiment in CONFINED_ONLY_EXPERIMENTS:
            issues.append(f"experiment {experiment} needs a confining potential")
        if pot.kind != "Zero" and experiment in ZERO_ONLY_EXPERIMENTS:
            issues.append(f"experiment {experiment} needs the Zero potential")
    return issues


def check_params(params: ModelParams, experiment: str | None = None) -> ModelParams:
    issues = validate_params(params, experiment)
    if issues:
        raise ValueError("invalid model parameters: " + "; ".join(issues))
    return params
