import math

import numpy as np
import pytest

from oracles import ou_variance
from spinchaos.disorder import sample_disorder
from spinchaos.model import TimeGrid, default_params
from spinchaos.simulate import (
    BlowUpError,
    brownian_increments,
    coarsen_increments,
    simulate_averaged,
    simulate_limit,
    simulate_quenched,
)

LB = default_params("LogBarrier")
ZERO = default_params("Zero")


def _var_se(x):
    v = x.var(ddof=1)
    return v, v * math.sqrt(2 / (x.size - 1))


def test_brownian_variance_at_beta_zero():
    p = ZERO.replace(beta=0.0, n_particles=1)
    ens = simulate_quenched(p, np.zeros((1, 1)), 4000, 1)
    for t in (0.25, 1.0):
        v, se = _var_se(ens.at(t)[:, 0])
        assert abs(v - t) <= 3 * se


def test_symmetric_mean_at_beta_zero():
    p = LB.replace(beta=0.0, n_particles=1)
    x = simulate_quenched(p, np.zeros((1, 1)), 4000, 2).at(1.0)[:, 0]
    assert abs(x.mean()) <= 3 * x.std(ddof=1) / math.sqrt(x.size)


def test_scalar_ou_variance():
    p = ZERO.replace(n_particles=1)
    x = simulate_quenched(p, np.array([[1.0]]), 4000, 3).at(1.0)[:, 0]
    v, se = _var_se(x)
    assert abs(v - ou_variance(1.0, 1.0)) <= 3 * se
    assert ou_variance(1.0, 1.0) == pytest.approx(3.1945, abs=1e-4)


def test_confinement():
    p = LB.replace(n_particles=16, beta=2.0)
    mat = sample_disorder(p.disorder, 16, 4)
    ens = simulate_quenched(p, mat, 20, 4)
    assert np.abs(ens.values).max() <= p.big_a * (1 - 1e-6)
    avg = simulate_averaged(p, 5, 4)
    assert np.abs(avg.values).max() <= p.big_a * (1 - 1e-6)


@pytest.mark.filterwarnings("ignore:overflow")
def test_blow_up_raises():
    p = ZERO.replace(n_particles=1)
    with pytest.raises(BlowUpError):
        simulate_quenched(p, np.array([[2e4]]), 2, 0)


@pytest.mark.parametrize("threads", [2, 3])
def test_thread_count_does_not_change_paths(threads):
    p = LB.replace(n_particles=6, grid=TimeGrid(40, 1.0))
    mat = sample_disorder(p.disorder, 6, 9)
    a = simulate_quenched(p, mat, 300, 9).values
    b = simulate_quenched(p, mat, 300, 9, threads=threads).values
    assert np.array_equal(a, b)
    assert np.array_equal(simulate_averaged(p, 30, 9).values, simulate_averaged(p, 30, 9, threads=threads).values)
    r = np.tril(np.full((41, 41), 0.3))
    assert np.array_equal(simulate_limit(p, r, 500, 9).values, simulate_limit(p, r, 500, 9, threads=threads).values)


def test_replica_ranges_extend_ensembles():
    p = LB.replace(n_particles=4, grid=TimeGrid(20, 1.0))
    mat = sample_disorder(p.disorder, 4, 1)
    whole = simulate_quenched(p, mat, 10, 5).values
    head = simulate_quenched(p, mat, 4, 5).values
    tail = simulate_quenched(p, mat, 6, 5, first_replica=4).values
    assert np.array_equal(whole, np.concatenate([head, tail]))


@pytest.mark.parametrize("pot", ["LogBarrier", "Zero"])
def test_pathwise_sign_flip(pot):
    p = default_params(pot, n_particles=5, grid=TimeGrid(50, 1.0))
    mat = sample_disorder(p.disorder, 5, 2)
    assert np.array_equal(simulate_quenched(p, mat, 8, 2).values,
                          -simulate_quenched(p, mat, 8, 2, antithetic=True).values)
    assert np.array_equal(simulate_averaged(p, 8, 2).values, -simulate_averaged(p, 8, 2, antithetic=True).values)
    r = np.tril(np.full((51, 51), 0.5))
    assert np.array_equal(simulate_limit(p, r, 8, 2).values, -simulate_limit(p, r, 8, 2, antithetic=True).values)


def test_averaged_equals_quenched_at_beta_zero():
    p = LB.replace(beta=0.0, n_particles=5)
    q = simulate_quenched(p, sample_disorder(p.disorder, 5, 0), 6, 3).values
    assert np.array_equal(q, simulate_averaged(p, 6, 3).values)


def test_limit_with_zero_resolvent_is_single_particle():
    p = LB.replace(beta=0.0, n_particles=1)
    q = simulate_quenched(p, np.zeros((1, 1)), 20, 6).values
    y = simulate_limit(LB.replace(n_particles=1), np.zeros((201, 201)), 20, 6).values
    assert np.array_equal(q, y)


def test_limit_brownian_variance():
    p = ZERO.replace(n_particles=1)
    y = simulate_limit(p, np.zeros((201, 201)), 4000, 7).at(1.0)[:, 0]
    v, se = _var_se(y)
    assert abs(v - 1.0) <= 3 * se


@pytest.mark.parametrize("n", [6, 80])
def test_q_is_a_contraction(n):
    p = LB.replace(n_particles=n, beta=1.5)
    ens = simulate_averaged(p, 3, 8, q_times=[0, 100, 200])
    assert np.nanmax(ens.trace.q_norm) <= 1 + 1e-8
    for q in ens.trace.q_snapshots.values():
        assert np.allclose(q, np.swapaxes(q, 1, 2))
        assert np.linalg.eigvalsh(q).min() > 0


def test_q_matches_closed_form_inverse():
    """Q at the end is (I + beta^2/N int X X^T)^{-1} with the trapezoid integral."""
    p = LB.replace(n_particles=6, grid=TimeGrid(50, 1.0))
    ens = simulate_averaged(p, 2, 3, q_times=[50])
    w = p.grid.trapezoid_weights()
    for r in range(2):
        x = ens.values[r]
        s = (x * w) @ x.T * p.beta ** 2 / 6
        assert np.allclose(ens.trace.q_snapshots[50][r], np.linalg.inv(np.eye(6) + s), atol=1e-12)


def test_qx_literal_bound_fails_at_time_zero():
    """Q_0 = I, so (Q_0 X_0)^i = X_0^i, which exceeds A^3 * 0 for any nonzero start."""
    ens = simulate_averaged(LB.replace(n_particles=4), 2, 0)
    assert ens.trace.qx_max[:, 0].max() > 1e-6
    assert ens.trace.qx_max.max() <= LB.big_a


def test_supplied_increments_reproduce_draws():
    p = LB.replace(n_particles=3, grid=TimeGrid(60, 1.0))
    mat = sample_disorder(p.disorder, 3, 1)
    inc = brownian_increments(p, 4, 11)
    assert np.array_equal(simulate_quenched(p, mat, 4, 11).values,
                          simulate_quenched(p, mat, 4, 11, increments=inc).values)
    assert np.array_equal(simulate_averaged(p, 4, 11).values, simulate_averaged(p, 4, 11, increments=inc).values)


def test_coarsened_increments_follow_the_same_path():
    p = ZERO.replace(beta=0.0, n_particles=2, grid=TimeGrid(40, 1.0))
    inc = brownian_increments(p, 3, 2)
    coarse = ZERO.replace(beta=0.0, n_particles=2, grid=TimeGrid(20, 1.0))
    a = simulate_quenched(p, np.zeros((2, 2)), 3, 2, increments=inc).values[:, :, ::2]
    b = simulate_quenched(coarse, np.zeros((2, 2)), 3, 2, increments=coarsen_increments(inc, 2)).values
    assert np.allclose(a, b, atol=1e-12)


def test_keep_selection():
    p = LB.replace(n_particles=5)
    ens = simulate_quenched(p, sample_disorder(p.disorder, 5, 0), 3, 0, keep_particles=[0, 2], keep_times=[0, 100, 200])
    assert ens.values.shape == (3, 2, 3)
    full = simulate_quenched(p, sample_disorder(p.disorder, 5, 0), 3, 0)
    assert np.array_equal(ens.at(0.5), full.values[:, [0, 2], 100])
