from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localmps import hamiltonian as H
from localmps import mps as M
from localmps.numerics import ContractViolation, DomainError, ResourceError, ShapeError

import oracles

# lowest eigenvalue and gap of -sum ZZ - 2 sum X from the Kronecker-product oracle
TFIM_J1_H2 = {6: (-12.630964276492975, 2.2932784733207576), 8: (-16.885141493208128, 2.1902471398840397)}


def zz() -> np.ndarray:
    z = np.diag([1.0, -1.0])
    return np.kron(z, z).astype(complex)


def test_normalize_leaves_normalized_terms_alone():
    h = H.build_hz(0.3, 4)
    out = H.normalize_terms(h)
    assert out.energy_map == (1.0, 0.0)
    assert all(np.allclose(a, b) for a, b in zip(out.terms, h.terms))


def test_normalize_minus_zz():
    h = H.NnHamiltonian(3, 2, [-zz(), -zz()])
    out = H.normalize_terms(h)
    for t in out.terms:
        w = np.linalg.eigvalsh(t)
        assert w[0] >= -1e-12 and np.isclose(w[-1], 1.0)
    e_orig = np.linalg.eigvalsh(H.dense_matrix(h))[0]
    e_new = H.ed_ground_state(out).ground_energy
    assert np.isclose(out.to_original_energy(e_new), e_orig, atol=1e-9)


@pytest.mark.parametrize("n", [6, 8])
def test_tfim_matches_kron_oracle(n):
    h = H.build_tfim(n, 1.0, 2.0)
    info = H.ed_ground_state(h)
    e0, gap = TFIM_J1_H2[n]
    assert not info.degenerate
    assert np.isclose(h.to_original_energy(info.ground_energy), e0, atol=1e-10)
    scale = h.energy_map[0]
    assert np.isclose(info.gap / scale, gap, atol=1e-9)


def test_tfim_pure_field_ground_state_is_plus():
    h = H.build_tfim(2, 0.0, 2.0)
    v = H.ed_ground_state(h).ground_state
    plus = np.full(4, 0.5)
    assert np.isclose(abs(np.vdot(plus, v)), 1.0)


def test_tfim_ten_sites_sparse_path():
    h = H.build_tfim(10, 1.0, 2.0)
    info = H.ed_ground_state(h)
    ref = np.linalg.eigvalsh(oracles.tfim_matrix(10, 1.0, 2.0))[0]
    assert np.isclose(h.to_original_energy(info.ground_energy), ref, atol=1e-9)


def test_tfim_uniform_boundary_is_translation_invariant():
    assert H.build_tfim(6, 1.0, 2.0, boundary="uniform").translation_invariant
    assert not H.build_tfim(6, 1.0, 2.0).translation_invariant


@pytest.mark.parametrize("t, n, energy, gap", [(0.3, 5, 1.2, 0.7), (0.0, 4, 0.0, 1.0), (0.3, 4, 0.9, 0.7)])
def test_hz_energy_and_gap(t, n, energy, gap):
    info = H.ed_ground_state(H.build_hz(t, n))
    assert np.isclose(info.ground_energy, energy, atol=1e-10)
    assert np.isclose(info.gap, gap, atol=1e-10)


def test_hz_ground_vector_is_all_zero():
    info = H.ed_ground_state(H.build_hz(0.25, 6))
    assert np.isclose(info.ground_energy, 1.25, atol=1e-10)
    assert np.isclose(abs(info.ground_state[0]), 1.0, atol=1e-10)


def test_hz_domain():
    with pytest.raises(DomainError):
        H.build_hz(0.6, 4)


def test_single_term_spectrum():
    h = H.NnHamiltonian(2, 2, [np.diag([0.0, 0.5, 1.0, 1.0])], True)
    info = H.ed_ground_state(h)
    assert np.isclose(info.ground_energy, 0.0) and np.isclose(info.gap, 0.5)


def test_term_validation():
    with pytest.raises(ShapeError):
        H.NnHamiltonian(3, 2, [np.eye(4)])
    with pytest.raises(ContractViolation):
        H.NnHamiltonian(2, 2, [2 * np.eye(4)], True)


def test_ed_cap():
    with pytest.raises(ResourceError):
        H.ed_ground_state(H.build_hz(0.2, 12), cap=2**10)


def test_combine_k_ground_energy_and_ancillas():
    k = H.combine_k(H.build_hz(0.2, 4), H.build_hz(0.4, 4))
    assert k.site_dim == 4
    assert all(np.linalg.norm(t, 2) <= 1 + 1e-12 for t in k.terms)
    info = H.ed_ground_state(k)
    assert np.isclose(info.ground_energy, 0.2, atol=1e-10)
    probs = np.abs(info.ground_state.reshape([2, 2] * 4)) ** 2
    anc0 = probs[(0, slice(None)) * 4].sum()
    assert np.isclose(anc0, 1.0, atol=1e-10)


def test_combine_k_same_input_is_degenerate():
    h = H.build_hz(0.3, 3)
    info = H.ed_ground_state(H.combine_k(h, h))
    assert info.degenerate
    assert np.isclose(info.ground_energy, 0.3 * 2 / 3, atol=1e-10)


def test_combine_k_shape_mismatch():
    with pytest.raises(ShapeError):
        H.combine_k(H.build_hz(0.2, 3), H.build_hz(0.2, 4))


def test_mpo_matches_dense(rng):
    h = H.build_tfim(5, 1.0, 1.3)
    s = M.random_mps(5, 2, 4, rng)
    v = M.to_dense(s)
    ref = np.vdot(v, H.dense_matrix(h) @ v).real
    assert np.isclose(H.energy_of_mpo(H.to_mpo(h), s), ref, atol=1e-10)
    assert np.isclose(H.energy_of(h, s), ref, atol=1e-10)


def test_dmrg_hz_product_ground_state():
    state, e = H.dmrg_ground_state(H.build_hz(0.3, 20), 2, 3)
    assert np.isclose(e, 0.3 * 19, atol=1e-8)
    assert np.isclose(abs(M.inner(state, M.basis_state([0] * 20))), 1.0, atol=1e-8)


def test_dmrg_tfim_matches_ed_and_is_monotone():
    h = H.build_tfim(12, 1.0, 2.0)
    res = H.dmrg_run(h, 16, 4)
    e_ed = H.ed_ground_state(h).ground_energy
    assert abs(res.energy - e_ed) <= 1e-6
    assert all(b <= a + 1e-10 for a, b in zip(res.history, res.history[1:]))
    one = H.dmrg_run(h, 16, 1)
    assert one.energy >= res.energy - 1e-10


def test_dmrg_rejects_zero_sweeps():
    with pytest.raises(ContractViolation):
        H.dmrg_run(H.build_hz(0.2, 4), 2, 0)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["hz", "tfim"]))
@settings(max_examples=10, deadline=None)
def test_window_energy_lower_bound(seed, model):
    # every window carries at least its share of E0 minus one
    rng = np.random.default_rng(seed)
    n = 6
    h = H.build_hz(0.35, n) if model == "hz" else H.build_tfim(n, 1.0, 2.0, boundary="uniform")
    e0 = H.ed_ground_state(h).ground_energy
    from localmps.reduction import claim3_margin

    for state in (oracles.random_pure(2**n, rng), H.ed_ground_state(h).ground_state):
        assert claim3_margin(h, state, e0) >= -1e-9


def test_json_round_trip():
    h = H.build_tfim(4, 1.0, 2.0)
    back = H.from_json(H.to_json(h))
    assert back.n_sites == 4 and all(np.allclose(a, b) for a, b in zip(back.terms, h.terms))
