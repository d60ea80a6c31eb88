import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference
from spinchaos.model import (
    DomainError,
    InitialLawSpec,
    ModelParams,
    PotentialSpec,
    TimeGrid,
    default_params,
    potential_grad,
    potential_value,
    sample_initial,
    validate_params,
)

LOG = PotentialSpec("LogBarrier")


def test_log_barrier_grad_at_origin():
    assert potential_grad(LOG, 0.0, 1.0) == 0.0


def test_log_barrier_grad_matches_finite_difference():
    fd = central_difference(lambda x: float(potential_value(LOG, x, 1.0)), 0.5)
    assert abs(fd - 4 / 3) < 1e-6
    assert float(potential_grad(LOG, 0.5, 1.0)) == pytest.approx(fd, abs=1e-6)


def test_zero_potential_grad():
    x = np.linspace(-5, 5, 11)
    assert np.all(potential_grad(PotentialSpec("Zero"), x, 1.0) == 0)


def test_log_barrier_rejects_boundary():
    with pytest.raises(DomainError):
        potential_grad(LOG, 1.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.999, 0.999), st.floats(0.5, 3.0))
def test_grad_is_odd(x, a):
    x = x * a
    assert potential_grad(LOG, x, a) == -potential_grad(LOG, -x, a)


def test_custom_grad_is_odd():
    spec = PotentialSpec("Custom", knots=(0.0, 0.5, 0.9), convex_grad=(0.0, 1.0, 3.0),
                         lipschitz_grad=(0.0, 0.2, 0.1), c_lip=1.0)
    x = np.linspace(-0.89, 0.89, 41)
    assert np.array_equal(potential_grad(spec, x, 1.0), -potential_grad(spec, -x, 1.0))
    assert validate_params(ModelParams(potential=spec)) == []


def test_log_barrier_convex():
    eps = 1e-3
    x = np.linspace(-1 + eps, 1 - eps, 2001)
    u = potential_value(LOG, x, 1.0)
    assert np.all(u[:-2] - 2 * u[1:-1] + u[2:] >= 0)


def test_valid_config_has_no_issues():
    assert validate_params(default_params("LogBarrier")) == []
    assert validate_params(default_params("Zero")) == []


def test_negative_beta_reported():
    assert "beta ≥ 0" in validate_params(ModelParams(beta=-1.0))


def test_initial_support_must_be_open():
    p = ModelParams(initial=InitialLawSpec("UniformSymmetric", half_width=1.0))
    assert any("supported in (−A, A)" in s for s in validate_params(p))


def test_zero_potential_needs_gaussian_disorder():
    p = default_params("Zero")
    p = p.replace(disorder=type(p.disorder)("Rademacher"))
    assert validate_params(p)


def test_experiment_domain_checks():
    assert validate_params(default_params("Zero"), "concentration")
    assert validate_params(default_params("LogBarrier"), "u0-exact")


def test_defaults():
    z = default_params("Zero")
    assert z.initial.kind == "PointMassZero" and z.disorder.kind == "Gaussian"
    lb = default_params("LogBarrier")
    assert lb.initial.kind == "UniformSymmetric" and lb.initial.half_width is None
    assert lb.grid == TimeGrid(200, 1.0)


def test_grid():
    g = TimeGrid(200, 1.0)
    assert g.index_of(0.25) == 50
    assert g.trapezoid_weights().sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        g.index_of(0.001)
    assert ModelParams().replace(horizon=2.0).grid == TimeGrid(200, 2.0)


def test_initial_laws():
    rng = np.random.default_rng(0)
    x = sample_initial(InitialLawSpec("UniformSymmetric"), 1.0, 10_000, rng)
    assert np.abs(x).max() <= 0.5
    spec = InitialLawSpec("IidCustom", knots=(0.0, 0.4, 0.8), density=(1.0, 1.0, 0.0))
    y = sample_initial(spec, 1.0, 20_000, rng)
    assert np.abs(y).max() <= 0.8 and abs(y.mean()) < 0.02
