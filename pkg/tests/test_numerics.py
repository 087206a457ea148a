from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localmps.numerics import (
    ContractViolation,
    ShapeError,
    eigh_psd,
    numerical_rank,
    partial_trace,
    polar_unitary,
    random_unitary,
    svd,
)

import oracles


@pytest.mark.parametrize(
    "a, expected",
    [(np.eye(2), [1.0, 1.0]), (np.diag([3.0, 4.0]), [4.0, 3.0])],
)
def test_svd_small_cases(a, expected):
    assert np.allclose(svd(a).s, expected)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_svd_reconstructs_and_is_isometric(m, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))
    r = svd(a)
    assert np.all(np.diff(r.s) <= 1e-12)
    assert np.linalg.norm(r.u * r.s @ r.vdag - a, 2) <= 1e-10 * max(1.0, np.linalg.norm(a, 2))
    assert np.allclose(r.u.conj().T @ r.u, np.eye(r.s.size), atol=1e-10)
    assert np.allclose(r.vdag @ r.vdag.conj().T, np.eye(r.s.size), atol=1e-10)


def test_svd_large_reconstruction(rng):
    a = rng.standard_normal((256, 256)) + 1j * rng.standard_normal((256, 256))
    r = svd(a)
    assert np.linalg.norm(r.u * r.s @ r.vdag - a, 2) / np.linalg.norm(a, 2) <= 1e-10


def test_eigh_psd_examples():
    w, _ = eigh_psd(np.diag([0.5, 0.5]))
    assert np.allclose(w, [0.5, 0.5])
    plus = np.full((2, 2), 0.5)
    w, _ = eigh_psd(plus)
    assert np.allclose(w, [0.0, 1.0])


def test_eigh_psd_rebuilds_random_psd(rng):
    m = oracles.random_density(6, rng, 3)
    w, v = eigh_psd(m)
    assert np.all(w >= 0) and np.all(np.diff(w) >= 0)
    assert np.allclose((v * w) @ v.conj().T, m, atol=1e-9)
    assert np.allclose(m @ v, v * w, atol=1e-9)


def test_eigh_psd_rejects_non_hermitian():
    with pytest.raises(ContractViolation):
        eigh_psd(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_polar_examples(rng):
    u = random_unitary(3, rng)
    assert np.allclose(polar_unitary(u), u.conj().T, atol=1e-10)
    assert np.allclose(polar_unitary(np.diag([2.0, 3.0])), np.eye(2))


def test_polar_maximizes_real_trace(rng):
    a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    u = polar_unitary(a)
    assert np.allclose(u @ u.conj().T, np.eye(4), atol=1e-10)
    best = np.trace(u @ a).real
    for _ in range(1000):
        v = random_unitary(4, rng)
        assert best >= np.trace(v @ a).real - 1e-12


def test_partial_trace_examples():
    bell = np.zeros(4, dtype=complex)
    bell[[0, 3]] = 1 / np.sqrt(2)
    assert np.allclose(partial_trace(np.outer(bell, bell.conj()), [2, 2], [0]), np.eye(2) / 2)
    rho, sigma = np.diag([0.3, 0.7]), np.diag([0.1, 0.2, 0.7])
    assert np.allclose(partial_trace(np.kron(rho, sigma), [2, 3], [0]), rho)
    ghz = np.zeros(8, dtype=complex)
    ghz[[0, 7]] = 1 / np.sqrt(2)
    assert np.allclose(partial_trace(np.outer(ghz, ghz.conj()), [2, 2, 2], [1, 2]), np.diag([0.5, 0, 0, 0.5]))


def test_partial_trace_shape_error():
    with pytest.raises(ShapeError):
        partial_trace(np.eye(4), [2, 3], [0])


@given(st.lists(st.integers(2, 3), min_size=2, max_size=4), st.integers(0, 2**31 - 1), st.data())
@settings(max_examples=30, deadline=None)
def test_partial_trace_matches_dense_oracle(dims, seed, data):
    rng = np.random.default_rng(seed)
    n = len(dims)
    keep = sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1, max_size=n)))
    rho = oracles.random_density(int(np.prod(dims)), rng)
    red = partial_trace(rho, dims, keep)
    assert np.isclose(np.trace(red).real, 1.0, atol=1e-12)
    assert np.allclose(red, red.conj().T, atol=1e-12)
    assert np.linalg.eigvalsh(red)[0] >= -1e-10
    # reference: trace out one traced factor at a time with explicit loops
    t = rho.reshape(dims + dims)
    cur = list(range(n))
    for s in sorted(set(range(n)) - set(keep), reverse=True):
        ax = cur.index(s)
        t = np.trace(t, axis1=ax, axis2=ax + len(cur))
        cur.pop(ax)
    dk = int(np.prod([dims[s] for s in keep]))
    assert np.allclose(red, t.reshape(dk, dk), atol=1e-12)


def test_numerical_rank_threshold():
    assert numerical_rank(np.array([1.0, 1e-13])) == 1
    assert numerical_rank(np.array([1.0, 1e-11])) == 2
    assert numerical_rank(np.zeros(3)) == 0
