import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from oracles import limit_variance_bessel, ou_variance, quenched_variance_quad, wick_moment_enumerated
from spinchaos import exactu0
from spinchaos.exactu0 import (
    expm,
    limit_variance_series,
    lower_bound_experiment,
    quenched_covariance,
    quenched_variance,
    quenched_variance_eigen,
    series_remainder_bound,
    series_with_bound,
    wick_moment_exact,
    wick_moment_mc,
    wick_pairing_counts,
    wick_pairing_oracle,
)
from spinchaos.rng import substream

QBAR2 = 1.3875009527141264


@pytest.fixture(scope="module")
def variances_by_n():
    return {n: exactu0.disorder_variances(n, 1.0, 300, seed=21) for n in (50, 100, 200, 400)}


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.01, 30.0), st.integers(0, 10_000))
def test_expm_against_scipy(n, scale, seed):
    a = substream(seed, "expm").standard_normal((n, n)) * scale / math.sqrt(n)
    ref = linalg.expm(a)
    assert np.max(np.abs(expm(a) - ref)) <= 1e-12 * np.max(np.abs(ref)) + 1e-14


def test_driftless_and_scalar_cases():
    assert quenched_variance(np.zeros((1, 1)), 0.7) == pytest.approx(0.7, abs=1e-14)
    assert quenched_variance(np.array([[1.0]]), 1.0) == pytest.approx(ou_variance(1.0, 1.0), abs=1e-10)
    assert ou_variance(1.0, 1.0) == pytest.approx(3.19453, abs=1e-5)


@pytest.mark.parametrize("n", [1, 5, 50])
def test_small_time_limit(n):
    j = substream(n, "small-t").standard_normal((n, n))
    assert quenched_variance(j, 1e-3) / 1e-3 == pytest.approx(1.0, abs=1e-2)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_against_eigen_and_quadrature(n):
    for seed in range(5):
        j = substream(seed, "eig", n).standard_normal((n, n))
        v = quenched_variance(j, 1.0)
        assert v == pytest.approx(quenched_variance_eigen(j, 1.0), abs=1e-8)
        assert v == pytest.approx(quenched_variance_quad(j, 1.0), abs=1e-8)


def test_covariance_block():
    j = substream(0, "block").standard_normal((6, 6))
    c = quenched_covariance(j, 0.8, k=3)
    assert c.shape == (3, 3) and np.allclose(c, c.T)
    assert np.linalg.eigvalsh(c).min() > 0
    assert c[0, 0] == pytest.approx(quenched_variance(j, 0.8), abs=1e-14)


def test_growth_cap():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        v = quenched_variance(np.array([[1e4]]), 1.0)
    assert math.isinf(v) and rec


def test_series_value():
    total, tail, _ = series_with_bound(1.0)
    assert abs(total - 1.387501) <= 1e-6
    assert tail <= 1e-15
    assert total == pytest.approx(limit_variance_bessel(1.0), abs=1e-13)
    assert total == QBAR2


@pytest.mark.parametrize("n_terms", [1, 2, 3, 5, 8])
def test_remainder_bound_holds(n_terms):
    partial = sum(1.0 / ((2 * k + 1) * math.factorial(k) ** 2) for k in range(n_terms))
    assert partial <= QBAR2 <= partial + series_remainder_bound(1.0, n_terms)


def test_series_small_t_and_monotone():
    assert limit_variance_series(1e-4) == pytest.approx(1e-4, rel=1e-8)
    ts = np.linspace(0.05, 3.0, 60)
    vals = [limit_variance_series(t) for t in ts]
    assert np.all(np.diff(vals) > 0)
    assert limit_variance_series(0.7, beta=1.3) == pytest.approx(limit_variance_bessel(0.7, 1.3), rel=1e-12)


def test_pairing_oracle_is_kronecker_delta():
    for k in range(9):
        for l in range(9 - k):
            if k + l:
                assert wick_pairing_oracle(k, l) == int(k == l), (k, l)


def test_pairing_examples():
    assert wick_pairing_oracle(1, 1) == 1
    assert wick_pairing_oracle(2, 1) == 0
    assert wick_pairing_oracle(2, 2) == 1
    assert wick_pairing_oracle(3, 1) == 0
    assert wick_pairing_counts(2, 2) == {0: 2, 2: 1}
    assert wick_pairing_counts(2, 1) == {}


@pytest.mark.parametrize("k,l", [(1, 1), (2, 0), (2, 2), (3, 1), (1, 3), (2, 1), (4, 0)])
@pytest.mark.parametrize("n", [1, 2, 3])
def test_exact_moment_against_enumeration(k, l, n):
    assert wick_moment_exact(k, l, n) == pytest.approx(wick_moment_enumerated(k, l, n), abs=1e-12)


def test_exact_moment_values():
    assert wick_moment_exact(2, 2, 50) == pytest.approx(1 + 2 / 50 ** 2)
    assert wick_moment_exact(1, 1, 7) == 1.0


def test_mc_moments():
    level = 1 - 0.05 / 6  # six intervals, 95% family coverage
    for n in (50, 200):
        r = wick_moment_mc(1, 1, n, 1000, seed=3, level=level)
        assert r["ci"][0] <= 1.0 <= r["ci"][1]
        r = wick_moment_mc(1, 0, n, 1000, seed=4, level=level)
        assert r["ci"][0] <= 0.0 <= r["ci"][1]
        r = wick_moment_mc(2, 2, n, 1000, seed=5, level=level)
        assert r["ci"][0] <= wick_moment_exact(2, 2, n) <= r["ci"][1]


def test_mc_intervals_are_calibrated():
    z = []
    for s in range(100):
        r = wick_moment_mc(1, 1, 20, 200, seed=500 + s)
        z.append((r["estimate"] - 1.0) / r["se"])
    z = np.array(z)
    assert abs(z.mean()) <= 0.4 and 0.75 <= z.std() <= 1.3


def test_mean_variance_converges(variances_by_n):
    gaps, widths = [], []
    for n, q2 in variances_by_n.items():
        gaps.append(abs(q2.mean() - QBAR2))
        widths.append(2 * 1.96 * q2.std(ddof=1) / math.sqrt(q2.size))
    assert all(b <= a + w for a, b, w in zip(gaps, gaps[1:], widths[1:]))
    assert gaps[-1] <= 0.02 * QBAR2 + 3 * widths[-1]


def test_variance_of_variance_decays(variances_by_n):
    assert variances_by_n[400].var(ddof=1) <= 0.5 * variances_by_n[100].var(ddof=1)


def test_lower_bound_grows_when_q_is_wrong():
    res = lower_bound_experiment((50, 100, 200), 1.0, 10 * math.sqrt(QBAR2), 40, seed=1, n_boot=50)
    vals = [r["N_times_EW1sq"] for r in res["rows"]]
    per_n = [v / r["N"] for v, r in zip(vals, res["rows"])]
    target = 2 / math.pi * (9 * math.sqrt(QBAR2)) ** 2
    assert np.allclose(per_n, target, rtol=0.05)
    assert vals[2] / vals[0] == pytest.approx(4.0, rel=0.05)


def test_lower_bound_ci_shrinks_with_draws():
    q = math.sqrt(QBAR2)
    a = lower_bound_experiment((100,), 1.0, q, 200, seed=2, n_boot=1000)["rows"][0]
    b = lower_bound_experiment((100,), 1.0, q, 800, seed=2, n_boot=1000)["rows"][0]
    ratio = (b["ci_hi"] - b["ci_lo"]) / (a["ci_hi"] - a["ci_lo"])
    assert 0.35 <= ratio <= 0.65
