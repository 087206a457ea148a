from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localmps import mps as M
from localmps.local_approx import (
    BlockLayout,
    build_part1,
    build_part2,
    chi_p_for,
    marker_separation,
    minimum_sites_part1,
    part2_parameters,
    plan_layout_part1,
    witness_lower_bound,
)
from localmps.metrics import local_trace_distance, trace_distance
from localmps.numerics import ContractViolation, DomainError, ResourceError

import oracles


def random_state(n: int, d: int, chi: int, seed: int) -> M.Mps:
    return M.normalize(M.random_mps(n, d, chi, np.random.default_rng(seed)))


def coarse_random(n_qubits: int, chi: int, seed: int) -> M.Mps:
    return M.normalize(M.coarse_grain(random_state(n_qubits, 2, chi, seed), 2))


def cross_excess(state: M.Mps, sup, k: int) -> float:
    """Largest amount by which the true window RDMs leave the certified slack."""
    worst = 0.0
    for s in range(state.n_sites - k + 1):
        x = list(range(s, s + k))
        a = M.rdm_sites(state, x)
        worst = max(worst, trace_distance(a / np.trace(a).real, sup.rdm(x)) - sup.cross_slack(x))
    return worst


@pytest.fixture(scope="module")
def part2_small():
    psi = coarse_random(16, 3, 0)
    return psi, {route: build_part2(psi, 2, chi_p=1, l=4, route=route) for route in ("chains", "units")}


@pytest.fixture(scope="module")
def part2_medium():
    psi = coarse_random(32, 3, 0)
    return psi, build_part2(psi, 2, chi_p=2, l=8)


# ---------------------------------------------------------------------------
# layouts


def test_block_layout_wraps_block_zero():
    lay = BlockLayout(10, 3, offset=1)
    assert lay.n_blocks == 3
    assert lay.block(1) == (1, 2, 3)
    assert lay.block(0) == (7, 8, 9, 0)
    assert sorted(s for b in lay.blocks for s in b) == list(range(10))
    assert [lay.block_of(s) for s in (0, 1, 6, 7, 9)] == [0, 1, 2, 0, 0]


@given(st.integers(2, 6), st.integers(2, 5), st.data())
@settings(max_examples=40, deadline=None)
def test_block_layout_partitions_chain(l, n_blocks, data):
    n = l * n_blocks + data.draw(st.integers(0, l - 1))
    lay = BlockLayout(n, l, offset=data.draw(st.integers(0, l - 1)))
    seen = [s for b in lay.blocks for s in b]
    assert sorted(seen) == list(range(n))
    for i, b in enumerate(lay.blocks):
        assert all(lay.block_of(s) == i for s in b)


def test_block_layout_split():
    lay = BlockLayout(12, 4, offset=2, split_length=2)
    assert lay.split(1) == ((2, 3), (4, 5))
    assert lay.split(0) == ((10, 11), (0, 1))
    with pytest.raises(ContractViolation):
        BlockLayout(12, 4).split(1)


def test_block_layout_rejects():
    with pytest.raises(ResourceError):
        BlockLayout(5, 3)
    with pytest.raises(DomainError):
        BlockLayout(12, 4, offset=4)


@pytest.mark.parametrize("l, sites", [(2, 12), (3, 27), (4, 56)])
def test_minimum_sites_part1(l, sites):
    assert minimum_sites_part1(l) == sites


def test_plan_layout_part1_markers_avoid_purifiers():
    lay = plan_layout_part1(56, 2, l=4)
    assert lay.placement == "compact"
    assert len(lay.part1_markers) == 4 * 3
    assert marker_separation(lay) >= 1
    for (a, b), s in lay.part1_markers.items():
        assert lay.markers_of(a)[s] == 0 and lay.markers_of(b)[s] == 1
        for j in (a, b):
            assert lay.with_offset(j).block_of(s) not in (j % lay.n_blocks, (j + 1) % lay.n_blocks)


def test_plan_layout_part1_from_eps():
    assert plan_layout_part1(56, 1, eps=1.0).block_length == 4


@pytest.mark.parametrize(
    "kwargs, err",
    [
        (dict(n_sites=20, k=2, l=4), ResourceError),
        (dict(n_sites=56, k=4, l=4), ContractViolation),
        (dict(n_sites=56, k=0, l=4), DomainError),
        (dict(n_sites=56, k=2, eps=0.0), DomainError),
    ],
)
def test_plan_layout_part1_errors(kwargs, err):
    with pytest.raises(err):
        plan_layout_part1(**kwargs)


@pytest.mark.parametrize(
    "chi_p, eps, expected",
    [
        (1, 1.0, dict(t=2, l=8, h=2)),
        (2, 1.0, dict(t=4, l=12, h=2)),
        (4, 1.0, dict(t=6, l=16, h=2)),
        (8, 1.0, dict(t=8, l=20, h=2)),
        (2, 0.5, dict(t=4, l=24, h=2)),
    ],
)
def test_part2_parameters(chi_p, eps, expected):
    pars = part2_parameters(64, 4, 2, eps, chi_p)
    assert {key: pars[key] for key in expected} == expected
    assert pars["h"] ** pars["t"] >= 2 * chi_p**2


@pytest.mark.parametrize(
    "args, err",
    [
        ((64, 2, 2, 1.0, 2), DomainError),
        ((64, 4, 2, 1.0, 0), DomainError),
        ((16, 4, 2, 1.0, 2), ResourceError),
        ((64, 4, 2, None, 2), DomainError),
    ],
)
def test_part2_parameters_errors(args, err):
    with pytest.raises(err):
        part2_parameters(*args)


def test_part2_parameters_explicit_t_checked():
    with pytest.raises(DomainError):
        part2_parameters(64, 4, 2, None, 2, l=8, t=2)
    with pytest.raises(DomainError):
        part2_parameters(64, 4, 2, None, 2, l=8, t=3)


# ---------------------------------------------------------------------------
# Part 1


@pytest.mark.parametrize("n, l, k, seed", [(12, 2, 1, 0), (27, 3, 2, 1), (27, 3, 1, 2)])
def test_part1_dual_route(n, l, k, seed):
    psi = random_state(n, 2, 2, seed)
    sup, rep = build_part1(psi, k, l=l)
    assert rep.orthogonality_residual <= 1e-8
    assert rep.details["interior_max_error"] <= 1e-8
    state = sup.to_mps()
    assert np.isclose(state.norm(), 1.0, atol=1e-8)
    assert cross_excess(state, sup, k) <= 1e-9
    true = local_trace_distance(psi, M.normalize(state), k).max_value
    assert true <= rep.measured_local_error.max_value + 1e-9
    assert rep.measured_local_error.max_value <= (k + 3) / l + 1e-9
    assert all(a <= b for a, b in zip(M.bond_profile(state), rep.bond_profile))
    assert oracles.bond_ratio_ok(state)


def test_part1_report_round_trips_json():
    psi = random_state(12, 2, 2, 3)
    _, rep = build_part1(psi, 1, l=2)
    data = json.loads(rep.to_json())
    assert data["method"] == "part1"
    assert data["parameters"]["l"] == 2
    assert data["measured_local_error"]["k"] == 1
    assert list(data) == sorted(data)


def test_part1_input_checks():
    psi = random_state(12, 2, 2, 4)
    with pytest.raises(ContractViolation):
        build_part1(psi.with_log_norm(0.5), 1, l=2)
    with pytest.raises(DomainError):
        build_part1(psi, 0, l=2)


# ---------------------------------------------------------------------------
# Part 2


def test_part2_routes_agree(part2_small):
    psi, runs = part2_small
    (sa, ra), (sb, rb) = runs["chains"], runs["units"]
    assert ra.bond_profile == rb.bond_profile
    assert np.isclose(ra.measured_local_error.max_value, rb.measured_local_error.max_value, atol=1e-10)
    for ta, tb in zip(sa.terms, sb.terms):
        for sites in ([0, 1], [3, 4], [7, 0], [2, 5, 6]):
            assert np.allclose(ta.rdm(sites), tb.rdm(sites), atol=1e-10)


def test_part2_projector_weights_agree(part2_small, rng):
    _, runs = part2_small
    (sa, _), (sb, _) = runs["chains"], runs["units"]
    basis = np.linalg.qr(rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2)))[0]
    iso = np.eye(4)[:, :2]
    for ta, tb in zip(sa.terms, sb.terms):
        for sites in ([2, 3], [6, 7]):
            wa = ta.projector_weight(sites, basis, {s: iso for s in sites})
            wb = tb.projector_weight(sites, basis, {s: iso for s in sites})
            assert np.isclose(wa, wb, atol=1e-10)


@pytest.mark.parametrize("which", ["small", "medium"])
def test_part2_dual_route(which, part2_small, part2_medium):
    if which == "small":
        psi, (sup, rep) = part2_small[0], part2_small[1]["chains"]
    else:
        psi, (sup, rep) = part2_medium
    assert rep.orthogonality_residual <= 1e-8
    assert rep.details["interior_max_error"] <= 1e-8
    state = sup.to_mps()
    assert np.isclose(state.norm(), 1.0, atol=1e-8)
    assert cross_excess(state, sup, 2) <= 1e-9
    true = local_trace_distance(psi, M.normalize(state), 2).max_value
    assert true <= rep.measured_local_error.max_value + 1e-9
    assert rep.measured_local_error.max_value <= rep.error_bound + 1e-6
    assert rep.max_bond <= rep.bond_bound
    assert all(a <= b for a, b in zip(M.bond_profile(state), rep.bond_profile))
    assert oracles.bond_ratio_ok(state)


def test_part2_lossless_when_bond_fits():
    # product input with chi_p = 2: truncation keeps everything; w = sqrt(1 - ov^2)
    # turns rounding in the overlap into ~1e-8
    psi = coarse_random(32, 1, 5)
    sup, rep = build_part2(psi, 2, chi_p=2, l=8)
    assert rep.details["w_max"] <= 1e-7
    assert rep.details["interior_max_error"] <= 1e-10
    assert rep.measured_local_error.max_value <= (2 + 4) / 8 + 1e-9


def test_part2_unconstrained_loses_certificates():
    psi = coarse_random(32, 3, 0)
    _, rep = build_part2(psi, 2, chi_p=2, l=8, constrain=False)
    assert rep.orthogonality_residual > 0.5
    assert not rep.details["constrained"]


def test_part2_input_checks():
    with pytest.raises(DomainError):
        build_part2(random_state(16, 2, 2, 0), 1, chi_p=1, l=4)
    psi = coarse_random(16, 2, 0)
    with pytest.raises(DomainError):
        build_part2(psi, 2, chi_p=1, l=4, route="dense")
    with pytest.raises(DomainError):
        build_part2(psi, 2, chi_p="auto")


def test_chi_p_for_meets_budget():
    psi = coarse_random(32, 2, 7)
    chi = chi_p_for(psi, 2, 1.0, l=8, t=4)
    assert chi >= 1
    _, rep = build_part2(psi, 2, chi_p=chi, l=8, t=4)
    assert np.sqrt(2 * 8) * rep.details["w_max"] <= 0.5


# ---------------------------------------------------------------------------
# correlation witness


@pytest.mark.parametrize("l", [2, 4, 8])
def test_witness_reaches_target_for_exclusive_terms(l):
    q = [1.0] + [0.0] * (l - 1)
    out = witness_lower_bound(q, q, 1.0)
    assert np.isclose(out["lower"], 1 / l - 1 / l**2, atol=1e-12)
    assert np.isclose(out["target"], 1 / l - 1 / l**2)


def test_witness_degrades_with_overlap():
    good = witness_lower_bound([1, 0, 0, 0], [1, 0, 0, 0], 1.0)["lower"]
    bad = witness_lower_bound([1, 0.2, 0, 0], [1, 0.3, 0, 0], 1.0)["lower"]
    assert bad < good


def test_part2_witness_fields(part2_medium):
    _, (_, rep) = part2_medium
    w = rep.details["correlation_witness"]
    assert w["lower"] <= w["upper_1"] + 1e-12
    assert w["separation"] == 4 and w["feasible"] is False
