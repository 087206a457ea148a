from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localmps import mps as M
from localmps.circuit_approx import (
    LocalCircuit,
    LocalGate,
    build_disentangled,
    compress_by_disentangling,
    factor_blocks,
    markov_violation,
    markov_violation_dense,
    plan_segments,
    replay_overlap,
    uhlmann_unitary,
)
from localmps.hamiltonian import build_tfim, ed_ground_state
from localmps.numerics import ContractViolation, DomainError, random_unitary

import oracles


def ghz(n: int) -> np.ndarray:
    v = np.zeros(2**n, dtype=complex)
    v[[0, -1]] = 1 / np.sqrt(2)
    return v


def uhlmann_reference(vec: np.ndarray, d: int, n: int, start: int, l: int) -> float:
    """F(rho_LR, rho'_L (x) rho'_R) with the outer marginals cut to rank d^(l/2)."""
    keep = d ** (l // 2)

    def top(rho):
        w, v = np.linalg.eigh(rho)
        w, v = w[::-1][:keep], v[:, ::-1][:, :keep]
        w = np.clip(w, 0, None)
        return (v * (w / w.sum())) @ v.conj().T

    left, right = list(range(start)), list(range(start + l, n))
    rho_lr = oracles.rdm(vec, d, n, left + right)
    sigma = np.kron(top(oracles.rdm(vec, d, n, left)), top(oracles.rdm(vec, d, n, right)))
    return oracles.fidelity_factored(rho_lr, sigma)


@pytest.fixture(scope="module")
def tfim12():
    v = ed_ground_state(build_tfim(12, 1.0, 2.0)).ground_state
    return M.from_dense(v, 2, 12)


@pytest.fixture(scope="module")
def tfim12_runs(tfim12):
    return {l: build_disentangled(tfim12, l, 2) for l in (2, 4, 6)}


@pytest.mark.parametrize(
    "n, l, interior, factors",
    [
        (8, 2, 2, [(0, 3), (3, 5), (5, 8)]),
        (12, 4, 1, [(0, 6), (6, 12)]),
        (12, 6, 0, [(0, 12)]),
        (13, 4, 2, [(0, 6), (6, 10), (10, 13)]),
    ],
)
def test_plan_segments(n, l, interior, factors):
    lay = plan_segments(n, l)
    assert lay.n_interior == interior
    assert lay.factors == factors
    assert lay.segments[0][0] == 0 and lay.segments[-1][1] == n


@pytest.mark.parametrize("n, l", [(8, 3), (8, 0), (4, 4)])
def test_plan_segments_rejects(n, l):
    with pytest.raises(DomainError):
        plan_segments(n, l)


@pytest.mark.parametrize("seed", range(10))
def test_uhlmann_overlap_matches_fidelity(seed):
    rng = np.random.default_rng(seed)
    v = oracles.random_pure(2**8, rng)
    psi = M.from_dense(v, 2, 8)
    for start, l in [(1 + seed % 5, 2), (2, 4)]:
        step = uhlmann_unitary(psi, (start, l))
        assert np.isclose(step.overlap, uhlmann_reference(v, 2, 8, start, l), atol=1e-8)
        u = step.unitary
        assert np.allclose(u @ u.conj().T, np.eye(u.shape[0]), atol=1e-10)


def test_uhlmann_ghz_block():
    v = ghz(6)
    step = uhlmann_unitary(M.from_dense(v, 2, 6), (2, 2))
    assert np.isclose(step.overlap, 1 / np.sqrt(2), atol=1e-10)
    assert np.isclose(step.overlap, uhlmann_reference(v, 2, 6, 2, 2), atol=1e-8)


def test_uhlmann_rejects_edge_block(rng):
    psi = M.random_mps(6, 2, 2, rng)
    with pytest.raises(DomainError):
        uhlmann_unitary(psi, (0, 2))
    with pytest.raises(DomainError):
        uhlmann_unitary(psi, (1, 3))


@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.sampled_from([2, 4]))
@settings(max_examples=20, deadline=None)
def test_markov_violation_matches_dense(seed, start, l):
    n = 8
    if start + l > n - 1:
        start = n - 1 - l
    rng = np.random.default_rng(seed)
    psi = M.normalize(M.random_mps(n, 2, 4, rng))
    v = M.to_dense(psi)
    assert np.isclose(markov_violation(psi, (start, l)), markov_violation_dense(v, 2, n, (start, l)), atol=1e-8)


def test_product_state_is_returned_unchanged(rng):
    vecs = [oracles.random_pure(2, rng) for _ in range(10)]
    psi = M.product_state(vecs)
    res = build_disentangled(psi, 2, 2)
    assert np.isclose(abs(M.inner(psi, res.state)), 1.0, atol=1e-10)
    assert res.report.measured_local_error.max_value <= 1e-7
    assert max(res.report.details["defects"]) <= 1e-7


def test_defects_equal_markov_violation_for_small_bond():
    # translation-invariant bond-2 qubit chain, coarse-grained to d=4
    rng = np.random.default_rng(3)
    a = rng.standard_normal((2, 2, 2)) + 1j * rng.standard_normal((2, 2, 2))
    psi = M.normalize(M.Mps(2, [a[:1]] + [a] * 14 + [a[:, :, :1]]))
    cg = M.normalize(M.coarse_grain(psi, 2))
    res = build_disentangled(cg, 2, 2)
    mv = [markov_violation(cg, res.layout.block(i)) for i in range(1, res.layout.n_interior + 1)]
    defects = res.report.details["defects"]
    assert np.allclose(defects, mv, atol=1e-8)
    assert res.report.measured_local_error.max_value <= np.sqrt(np.sum(np.square(defects))) + 1e-7
    assert res.report.details["claim2_max_excess"] <= 1e-7


def test_ghz_input_gives_large_error():
    res = build_disentangled(M.from_dense(ghz(8), 2, 8), 2, 2)
    assert np.allclose(res.report.details["defects"], 1 / np.sqrt(2), atol=1e-10)
    assert res.report.measured_local_error.max_value >= 0.25


@pytest.mark.parametrize("l", [2, 4, 6])
def test_tfim_run_properties(tfim12_runs, l):
    res = tfim12_runs[l]
    assert np.isclose(res.state.norm(), 1.0, atol=1e-8)
    assert max(M.bond_profile(res.state)) <= 2**l
    assert oracles.bond_ratio_ok(res.state)
    prof = M.bond_profile(res.projected)
    for a, b in res.layout.factors[:-1]:
        assert prof[b - 1] == 1
    assert res.report.details["claim2_max_excess"] <= 1e-7
    assert replay_overlap(res.circuit, res.state) >= 1 - 1e-7
    assert res.circuit.max_unitarity_error() <= 1e-10
    assert res.circuit.depth == 2


def test_tfim_error_decreases_with_block_length(tfim12_runs):
    ls = np.array([2, 4, 6])
    errs = np.array([tfim12_runs[l].report.measured_local_error.max_value for l in ls])
    slope = np.polyfit(ls, np.log(np.maximum(errs, 1e-16)), 1)[0]
    assert slope < 0
    assert errs[0] > errs[1]


def test_circuit_layers_are_disjoint(tfim12_runs):
    for res in tfim12_runs.values():
        for layer in res.circuit.layers:
            used = [s for g in layer for s in range(g.start, g.stop)]
            assert len(used) == len(set(used))


def test_overlapping_gates_rejected():
    u = np.eye(4)
    with pytest.raises(ContractViolation):
        LocalCircuit([[LocalGate(0, 2, unitary=u), LocalGate(1, 2, unitary=u)]])


def test_circuit_json_round_trip(tfim12_runs):
    circ = tfim12_runs[2].circuit
    back = LocalCircuit.from_json(circ.to_json())
    zero = M.basis_state([0] * 12)
    assert np.isclose(abs(M.inner(circ.apply(zero), back.apply(zero))), 1.0, atol=1e-10)


def brickwork_state(n: int, rng: np.random.Generator) -> M.Mps:
    """Depth-2 brickwork of random two-qubit gates on |0...0>: bond <= 4."""
    state = M.basis_state([0] * n)
    for offset in (0, 1):
        for s in range(offset, n - 1, 2):
            state = M.apply_local_operator(state, random_unitary(4, rng), (s, 2))
    return M.compress(state, chi=16)


@pytest.mark.parametrize("seed", range(3))
def test_compress_finite_range_state_is_kept(seed):
    # bond <= 4 = d^(l/2) and light cones of radius 2 make every block exactly Markov
    rng = np.random.default_rng(seed)
    psi = brickwork_state(12, rng)
    assert max(M.bond_profile(psi)) <= 4
    out, rep = compress_by_disentangling(psi, 4)
    assert abs(M.inner(psi, out)) >= 1 - 1e-6
    assert max(M.bond_profile(out)) <= 2**4


def test_compress_generic_low_bond_obeys_defect_bound(rng):
    # a generic bond-2 state is not Markov across a 2-site block, so the
    # output differs from the input; the loss is governed by the defects
    psi = M.normalize(M.random_mps(10, 2, 2, rng))
    res = build_disentangled(psi, 2, 2)
    assert max(res.report.details["defects"]) > 1e-3
    assert res.report.details["claim2_max_excess"] <= 1e-7


def test_factor_blocks_cover_neighbours():
    lay = plan_segments(12, 2)
    assert factor_blocks(lay, (0, 2)) == [1]
    assert factor_blocks(lay, (4, 2)) == [1, 2, 3]
