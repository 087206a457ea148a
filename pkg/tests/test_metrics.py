from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localmps import mps as M
from localmps.metrics import (
    correlation,
    correlation_from_rdm,
    fidelity,
    local_purified_distance,
    local_trace_distance,
    purified_distance,
    pure_state_distance,
    trace_distance,
    witness_value,
)
from localmps.numerics import DomainError, ShapeError

import oracles


def pure(v):
    v = np.asarray(v, dtype=complex)
    return np.outer(v, v.conj())


def ghz_mps(n: int, sign: float = 1.0) -> M.Mps:
    v = np.zeros(2**n, dtype=complex)
    v[0], v[-1] = 1 / np.sqrt(2), sign / np.sqrt(2)
    return M.from_dense(v, 2, n)


def test_fidelity_examples(rng):
    rho = oracles.random_density(3, rng)
    assert np.isclose(fidelity(rho, rho), 1.0, atol=1e-9)
    assert np.isclose(fidelity(pure([1, 0]), pure([0, 1])), 0.0)
    psi = oracles.random_pure(4, rng)
    sigma = oracles.random_density(4, rng, 2)
    expected = np.sqrt(np.vdot(psi, sigma @ psi).real)
    assert np.isclose(fidelity(pure(psi), sigma), expected, atol=1e-9)


def test_fidelity_shape_error():
    with pytest.raises(ShapeError):
        fidelity(np.eye(2) / 2, np.eye(3) / 3)


@given(st.integers(0, 2**31 - 1), st.integers(2, 16))
@settings(max_examples=60, deadline=None)
def test_fidelity_matches_sqrtm_oracle_and_is_symmetric(seed, dim):
    rng = np.random.default_rng(seed)
    a = oracles.random_density(dim, rng)
    b = oracles.random_density(dim, rng)
    assert np.isclose(fidelity(a, b), oracles.fidelity(a, b), atol=1e-8)
    assert np.isclose(fidelity(a, b), fidelity(b, a), atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.integers(2, 16), st.integers(1, 16), st.integers(1, 16))
@settings(max_examples=80, deadline=None)
def test_lemma1_sandwich(seed, dim, ra, rb):
    rng = np.random.default_rng(seed)
    a = oracles.random_density(dim, rng, min(ra, dim))
    b = oracles.random_density(dim, rng, min(rb, dim))
    d1, d = trace_distance(a, b), purified_distance(a, b)
    assert d1 <= d + 1e-9
    assert d <= np.sqrt(2 * d1) + 1e-9
    assert np.isclose(d1, oracles.trace_distance(a, b), atol=1e-10)


def test_purified_distance_examples(rng):
    rho = oracles.random_density(4, rng)
    assert purified_distance(rho, rho) <= 1e-6
    assert np.isclose(purified_distance(pure([1, 0]), pure([0, 1])), 1.0)


def test_trace_distance_examples(rng):
    rho = oracles.random_density(3, rng)
    assert np.isclose(trace_distance(rho, rho), 0.0)
    assert np.isclose(trace_distance(np.diag([1.0, 0.0]), np.eye(2) / 2), 0.5)


@given(st.integers(0, 2**31 - 1), st.integers(2, 16))
@settings(max_examples=40, deadline=None)
def test_pure_states_equal_distances(seed, dim):
    rng = np.random.default_rng(seed)
    u, v = oracles.random_pure(dim, rng), oracles.random_pure(dim, rng)
    d1 = trace_distance(pure(u), pure(v))
    assert np.isclose(d1, purified_distance(pure(u), pure(v)), atol=1e-9)
    assert np.isclose(d1, pure_state_distance(u, v), atol=1e-9)


def test_local_distance_identical_states(rng):
    s = M.random_mps(6, 2, 3, rng)
    rep = local_trace_distance(s, s, 2)
    assert rep.max_value <= 1e-12 and len(rep.per_window) == 5


def test_ghz_plus_minus_locally_identical():
    plus, minus = ghz_mps(3, 1.0), ghz_mps(3, -1.0)
    assert abs(M.inner(plus, minus)) <= 1e-12
    assert local_trace_distance(plus, minus, 2).max_value <= 1e-10
    assert np.isclose(local_trace_distance(plus, minus, 3).max_value, 1.0)


def test_single_site_flip(rng):
    s = M.random_mps(5, 2, 3, rng)
    x = np.array([[0, 1], [1, 0]], dtype=complex)
    t = M.apply_local_operator(s, x, (0, 1))
    rep = local_trace_distance(s, t, 1)
    v, w = M.to_dense(s), M.to_dense(t)
    expected = oracles.trace_distance(oracles.rdm(v, 2, 5, [0]), oracles.rdm(w, 2, 5, [0]))
    assert np.isclose(rep.per_window[0][1], expected, atol=1e-10)
    assert np.isclose(rep.max_value, max(val for _, val in rep.per_window))
    assert all(val <= 1e-10 for _, val in rep.per_window[1:])


def test_full_window_recovers_global_distance(rng):
    a, b = M.random_mps(5, 2, 3, rng), M.random_mps(5, 2, 3, rng)
    va, vb = M.to_dense(a), M.to_dense(b)
    assert np.isclose(local_trace_distance(a, b, 5).max_value, pure_state_distance(va, vb), atol=1e-9)
    assert np.isclose(local_purified_distance(a, b, 5).max_value, pure_state_distance(va, vb), atol=1e-6)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
@settings(max_examples=15, deadline=None)
def test_local_distance_triangle(seed, k):
    rng = np.random.default_rng(seed)
    a, b, c = (M.random_mps(5, 2, 3, rng) for _ in range(3))
    ab = local_trace_distance(a, b, k).max_value
    bc = local_trace_distance(b, c, k).max_value
    ac = local_trace_distance(a, c, k).max_value
    assert ac <= ab + bc + 1e-10


def test_correlation_product_state():
    s = M.product_state([np.array([1, 1]) / np.sqrt(2)] * 4)
    est = correlation(s, (0, 1), (3, 1))
    assert est.lower <= 1e-9 and est.upper <= 1e-9


def test_correlation_ghz_ends():
    est = correlation(ghz_mps(5), (0, 1), (4, 1))
    assert est.lower >= 1 - 1e-9
    assert est.lower <= est.upper + 1e-9
    m, n = est.witness_ops
    assert np.linalg.norm(m, 2) <= 1 + 1e-12 and np.linalg.norm(n, 2) <= 1 + 1e-12
    z = np.diag([1.0, -1.0])
    rho = M.rdm_sites(ghz_mps(5), [0, 4])
    assert np.isclose(witness_value(rho, 2, 2, z, z), 1.0)


def test_correlation_overlap_rejected():
    with pytest.raises(DomainError):
        correlation(ghz_mps(4), (0, 2), (1, 2))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_correlation_lower_below_upper(seed):
    rng = np.random.default_rng(seed)
    rho = oracles.random_density(6, rng)
    est = correlation_from_rdm(rho, 2, 3, seed=seed)
    assert 0 <= est.lower <= est.upper + 1e-9
