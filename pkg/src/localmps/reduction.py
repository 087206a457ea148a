"""Energy density by binary search over combined probe Hamiltonians.

For a probe density s, the chain h/2 is combined with H^Z(s/2) through an
ancilla qubit per site. The ground state of the combination carries
ancillas |0> when u < s and |1> when u > s, where u = E / (N - 1), so a
single-site Z measurement on one ancilla answers one comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .hamiltonian import (
    NnHamiltonian,
    build_hz,
    combine_k,
    dense_matrix,
    ed_ground_state,
    sparse_matrix,
)
from .numerics import ContractViolation, DomainError, LocalMpsError, ShapeError

DEAD_ZONE = 0.1


class LocalOracle(Protocol):
    def __call__(self, h: NnHamiltonian, obs: np.ndarray, site: int) -> float: ...


def site_operator(op: np.ndarray, site: int, n: int) -> np.ndarray:
    d = op.shape[0]
    return np.kron(np.kron(np.eye(d**site), op), np.eye(d ** (n - site - 1)))


def ed_local_oracle(h: NnHamiltonian, obs: np.ndarray, site: int) -> float:
    """<O>/||O|| in the exact ground state; a degenerate ground state breaks the promise."""
    obs = np.asarray(obs, dtype=complex)
    d, n = h.site_dim, h.n_sites
    if obs.shape != (d, d):
        raise ShapeError(f"observable must be {d}x{d}, got {obs.shape}")
    if not 0 <= site < n:
        raise IndexError(f"site {site} out of range")
    info = ed_ground_state(h)
    if info.degenerate:
        raise DomainError("ground state is degenerate; the oracle promise does not hold")
    v = info.ground_state.reshape(d**site, d, d ** (n - site - 1))
    rho = np.einsum("aib,ajb->ij", v, v.conj())
    val = float(np.real(np.trace(rho @ obs)))
    return val / float(np.linalg.norm(obs, 2))


def ancilla_z(d: int) -> np.ndarray:
    """+1 on ancilla |0>, -1 on ancilla |1>; the ancilla is the high-order factor."""
    return np.kron(np.diag([1.0, -1.0]), np.eye(d)).astype(complex)


@dataclass(frozen=True)
class ProbeRecord:
    s: float
    value: float
    decision: str  # "above": s > u, "below": s < u
    inconclusive: bool = False


@dataclass(frozen=True)
class ReductionTrace:
    iterations: tuple[ProbeRecord, ...]
    estimate: float
    widths: tuple[float, ...]
    windows: tuple[tuple[float, float], ...] = field(repr=False, default=())

    @property
    def calls(self) -> int:
        return len(self.iterations)

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "calls": self.calls,
            "iterations": [
                {"s": r.s, "value": r.value, "decision": r.decision, "inconclusive": r.inconclusive}
                for r in self.iterations
            ],
            "widths": list(self.widths),
            "windows": [list(w) for w in self.windows],
        }


def max_calls(eps: float) -> int:
    return math.ceil(math.log2(1.0 / eps)) + 2


def probe_hamiltonian(h: NnHamiltonian, s: float) -> NnHamiltonian:
    return combine_k(h.scaled(0.5), build_hz(s / 2.0, h.n_sites))


def estimate_energy_density(
    h: NnHamiltonian,
    eps: float,
    oracle: LocalOracle = ed_local_oracle,
    site: int = 0,
    perturb: Callable[[int, float, float], float] | None = None,
) -> tuple[float, ReductionTrace]:
    """Binary search for u = E/(N-1) on [0, 1] to precision eps.

    ``perturb(iteration, s, value)`` may replace the oracle answer; tests use
    it to inject wrong answers near ties.
    """
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    if not h.translation_invariant:
        raise DomainError("the probe construction needs a translation-invariant Hamiltonian")
    if not h.normalized:
        raise ContractViolation("the Hamiltonian must have PSD terms of norm <= 1")
    lo, hi = 0.0, 1.0
    obs = ancilla_z(h.site_dim)
    records: list[ProbeRecord] = []
    widths = [hi - lo]
    windows = [(lo, hi)]
    it = 0
    while hi - lo > eps:
        s = 0.5 * (lo + hi)
        k = probe_hamiltonian(h, s)
        try:
            value = float(oracle(k, obs, site))
        except LocalMpsError:
            value = 0.0
        if perturb is not None:
            value = float(perturb(it, s, value))
        inconclusive = abs(value) <= DEAD_ZONE
        # an inconclusive answer is handled like a possibly wrong one: pick "above"
        above = value > 0 if not inconclusive else True
        if above:
            hi = s
        else:
            lo = s
        records.append(ProbeRecord(s, value, "above" if above else "below", inconclusive))
        widths.append(hi - lo)
        windows.append((lo, hi))
        it += 1
    est = 0.5 * (lo + hi)
    return est, ReductionTrace(tuple(records), est, tuple(widths), tuple(windows))


# ---------------------------------------------------------------------------
# spectral checks for the combined Hamiltonian


def sector_energies(h0: NnHamiltonian, h1: NnHamiltonian) -> dict[tuple[int, ...], float]:
    """Lowest energy of the combined Hamiltonian in every ancilla configuration.

    The combination is block diagonal in the ancilla basis; in configuration
    x its system part is sum_i of h0_i/3, h1_i/3 or I depending on x_i, x_{i+1}.
    """
    n, d = h0.n_sites, h0.site_dim
    out = {}
    for code in range(2**n):
        x = tuple((code >> (n - 1 - i)) & 1 for i in range(n))
        terms = []
        for i in range(n - 1):
            if x[i] == x[i + 1]:
                terms.append((h0 if x[i] == 0 else h1).terms[i] / 3.0)
            else:
                terms.append(np.eye(d * d))
        hx = NnHamiltonian(n, d, terms)
        mat = dense_matrix(hx) if hx.dim <= 2**10 else sparse_matrix(hx).toarray()
        out[x] = float(np.linalg.eigvalsh(mat)[0])
    return out


def full_spectrum_check(k: NnHamiltonian) -> tuple[np.ndarray, np.ndarray]:
    """All eigenvalues of a combined Hamiltonian and each eigenvector's mixed-ancilla weight."""
    n, dd = k.n_sites, k.site_dim
    d = dd // 2
    w, v = np.linalg.eigh(dense_matrix(k))
    probs = np.abs(v.reshape([2, d] * n + [-1])) ** 2
    # sum over system indices, leaving ancilla configuration x eigenvector index
    axes = tuple(2 * i + 1 for i in range(n))
    anc = probs.sum(axis=axes).reshape(2**n, -1)
    pure = anc[0] + anc[-1]
    return w, 1.0 - pure


def claim3_margin(h: NnHamiltonian, state: np.ndarray, e0: float) -> float:
    """min over windows [a, b) of window energy - ((b - a)/(N - 1) E0 - 1)."""
    from .hamiltonian import partial_chain_energy

    n = h.n_sites
    worst = np.inf
    for a in range(n):
        for b in range(a + 1, n + 1):
            lhs = partial_chain_energy(h, state, a, b)
            rhs = (b - a) / (n - 1) * e0 - 1.0
            worst = min(worst, lhs - rhs)
    return float(worst)
