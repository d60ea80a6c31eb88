import logging
import math

import numpy as np
import pytest

from spinchaos import io
from spinchaos.exactu0 import limit_variance_series
from spinchaos.fixedpoint import solve_limit
from spinchaos.kernels import kernel_distance
from spinchaos.model import TimeGrid, default_params
from spinchaos.simulate import simulate_limit

QBAR2 = 1.3875009527141264


@pytest.fixture(scope="module")
def zero_law():
    return solve_limit(default_params("Zero"), n_paths=50_000, tol=1e-3, seed=1)


@pytest.fixture(scope="module")
def barrier_laws():
    p = default_params("LogBarrier")
    return [solve_limit(p, n_paths=10_000, seed=s) for s in (2, 3)]


def test_beta_zero_converges_immediately():
    law = solve_limit(default_params("LogBarrier", beta=0.0), n_paths=4000, seed=0)
    assert law.converged and law.iterations == 1
    assert law.final_residual == 0.0


def test_u0_fixed_point_matches_series(zero_law):
    assert zero_law.converged
    assert abs(zero_law.covariance.values[-1, -1] - QBAR2) <= 0.02 * QBAR2
    assert QBAR2 == pytest.approx(limit_variance_series(1.0), abs=1e-15)


def test_u0_limit_variance_with_fresh_noise(zero_law):
    p = default_params("Zero", n_particles=1)
    y = simulate_limit(p, zero_law.resolvent, 50_000, 99).at(1.0)[:, 0]
    assert abs(y.var() - QBAR2) <= 0.02 * QBAR2


def test_path_budget_refinement():
    p = default_params("LogBarrier")
    small = solve_limit(p, n_paths=10_000, seed=5)
    large = solve_limit(p, n_paths=20_000, seed=5)
    width = small.kTT_ci[1] - small.kTT_ci[0]
    assert abs(large.covariance.values[-1, -1] - small.covariance.values[-1, -1]) < width


def test_centered_and_bounded(barrier_laws):
    law = barrier_laws[0]
    y = law.sample.values[:, 0, :]
    se = y.std(axis=0, ddof=1) / math.sqrt(y.shape[0])
    assert np.all(np.abs(y.mean(axis=0)) <= 3 * se + 1e-15)
    assert np.diag(law.covariance.values).max() <= 1.0


def test_seed_stability(barrier_laws):
    a, b = barrier_laws
    widths = sum(l.kTT_ci[1] - l.kTT_ci[0] for l in barrier_laws)
    assert kernel_distance(a.covariance, b.covariance) <= widths


def test_unconverged_run_is_reported(caplog):
    p = default_params("LogBarrier", grid=TimeGrid(40, 1.0))
    with caplog.at_level(logging.WARNING):
        law = solve_limit(p, n_paths=2000, tol=1e-12, max_iter=2, seed=0)
    assert not law.converged and law.iterations == 2
    assert "not converged" in caplog.text


def test_damping_is_validated():
    with pytest.raises(ValueError):
        solve_limit(default_params("LogBarrier"), damping=0.0)


def test_dump_round_trip(tmp_path):
    p = default_params("LogBarrier", grid=TimeGrid(20, 1.0))
    law = solve_limit(p, n_paths=2000, seed=0)
    law.dump(tmp_path)
    k = io.read_kernel_csv(tmp_path / "covariance.csv", 21)
    r = io.read_kernel_csv(tmp_path / "resolvent.csv", 21)
    assert np.allclose(k, law.covariance.values)
    assert np.allclose(r, law.resolvent.values)
    assert (tmp_path / "diagnostics.json").exists()
