"""Nearest-neighbor chain Hamiltonians with exact and DMRG ground-state solvers."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mps as mpslib
from .mps import Mps
from .numerics import (
    ContractViolation,
    DecompositionError,
    DomainError,
    ResourceError,
    ShapeError,
    check_hermitian,
    svd,
)

DENSE_ED_MAX = 2**12
DENSE_SOLVE_MAX = 2**8
ED_CAP = 2**16
DEGENERACY_TOL = 1e-10
RESIDUAL_TOL = 1e-8

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY2 = np.eye(2, dtype=complex)


@dataclass(frozen=True)
class NnHamiltonian:
    """H = sum_i terms[i] acting on sites (i, i+1).

    ``energy_map = (scale, offset)`` relates energies of this Hamiltonian to
    the one it was normalized from: E_this = scale * E_orig + offset.
    """

    n_sites: int
    site_dim: int
    terms: tuple
    normalized: bool = False
    energy_map: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        ts = []
        d2 = self.site_dim**2
        for i, t in enumerate(self.terms):
            m = np.array(t, dtype=complex)
            if m.shape != (d2, d2):
                raise ShapeError(f"term {i} has shape {m.shape}, expected ({d2}, {d2})")
            check_hermitian(m)
            m.setflags(write=False)
            ts.append(m)
        if self.n_sites < 2:
            raise ShapeError("a chain needs at least two sites")
        if len(ts) != self.n_sites - 1:
            raise ShapeError(f"{self.n_sites} sites need {self.n_sites - 1} terms, got {len(ts)}")
        object.__setattr__(self, "terms", tuple(ts))
        if self.normalized:
            for i, m in enumerate(ts):
                w = np.linalg.eigvalsh(m)
                if w[0] < -1e-10 or w[-1] > 1 + 1e-10:
                    raise ContractViolation(f"term {i} is not PSD with norm <= 1")

    @property
    def translation_invariant(self) -> bool:
        first = self.terms[0]
        return all(np.allclose(t, first, atol=1e-12) for t in self.terms[1:])

    @property
    def dim(self) -> int:
        return self.site_dim**self.n_sites

    def to_original_energy(self, energy: float) -> float:
        scale, offset = self.energy_map
        return (energy - offset) / scale

    def scaled(self, factor: float) -> "NnHamiltonian":
        """Multiply every term by ``factor`` (0 <= factor <= 1 keeps normalization)."""
        scale, offset = self.energy_map
        norm_ok = self.normalized and 0 <= factor <= 1
        return NnHamiltonian(self.n_sites, self.site_dim, [factor * t for t in self.terms],
                             norm_ok, (scale * factor, offset * factor))


@dataclass(frozen=True)
class SpectrumInfo:
    ground_energy: float
    gap: float
    ground_state: np.ndarray = field(repr=False)
    degenerate: bool
    excited_energy: float = float("nan")


# ---------------------------------------------------------------------------
# construction


def normalize_terms(h: NnHamiltonian) -> NnHamiltonian:
    """Shift non-PSD terms by their lowest eigenvalue and rescale to norm <= 1.

    A single common scale is used so the map back to the original energy is
    affine. Terms that are already PSD with norm <= 1 are left untouched.
    """
    shifted = []
    offset = 0.0
    for t in h.terms:
        w = np.linalg.eigvalsh(t)
        if w[0] < -1e-12:
            shifted.append(t - w[0] * np.eye(t.shape[0]))
            offset -= w[0]
        else:
            shifted.append(np.array(t))
    top = max(float(np.linalg.norm(t, 2)) for t in shifted)
    scale = 1.0 / top if top > 1.0 + 1e-12 else 1.0
    terms = [scale * t for t in shifted]
    old_scale, old_offset = h.energy_map
    # E_new = scale * (E_h + offset) and E_h = old_scale * E_orig + old_offset
    new_map = (float(scale * old_scale), float(scale * (old_offset + offset)))
    return NnHamiltonian(h.n_sites, h.site_dim, terms, True, new_map)


def build_tfim(n: int, j_coupling: float, h_field: float, boundary: str = "absorbed") -> NnHamiltonian:
    """Transverse-field Ising chain -J ZZ - h X, normalized.

    ``boundary="absorbed"`` gives the end sites their full field inside the
    first and last bond terms. ``boundary="uniform"`` keeps every bond term
    equal (translation invariant) so the end sites see half the field.
    """
    if n < 2:
        raise ShapeError("TFIM needs at least two sites")
    if boundary not in ("absorbed", "uniform"):
        raise DomainError(f"unknown boundary mode {boundary!r}")
    zz = np.kron(PAULI_Z, PAULI_Z)
    xi = np.kron(PAULI_X, IDENTITY2)
    ix = np.kron(IDENTITY2, PAULI_X)
    terms = []
    for i in range(n - 1):
        left = h_field if (boundary == "absorbed" and i == 0) else h_field / 2
        right = h_field if (boundary == "absorbed" and i == n - 2) else h_field / 2
        terms.append(-j_coupling * zz - left * xi - right * ix)
    return normalize_terms(NnHamiltonian(n, 2, terms))


def hz_term(t: float) -> np.ndarray:
    proj = np.zeros((4, 4), dtype=complex)
    proj[0, 0] = 1.0
    return np.eye(4, dtype=complex) - (1.0 - t) * proj


def build_hz(t: float, n: int) -> NnHamiltonian:
    """Sum of I - (1-t)|00><00| over bonds: ground state |0...0>, energy t(n-1), gap 1-t."""
    if not 0.0 <= t <= 0.5:
        raise DomainError(f"t must lie in [0, 1/2], got {t}")
    term = hz_term(t)
    return NnHamiltonian(n, 2, [term] * (n - 1), True)


def combine_k(h0: NnHamiltonian, h1: NnHamiltonian) -> NnHamiltonian:
    """Attach an ancilla qubit per site selecting h0 (ancillas 00), h1 (11) or I (mixed).

    The ancilla is the high-order factor of each site: index = a * d + s.
    """
    if h0.n_sites != h1.n_sites or h0.site_dim != h1.site_dim:
        raise ShapeError("combine_k needs Hamiltonians with equal N and d")
    if not (h0.normalized and h1.normalized):
        raise ContractViolation("combine_k needs normalized inputs")
    d = h0.site_dim
    eye = np.eye(d * d, dtype=complex)
    terms = []
    for t0, t1 in zip(h0.terms, h1.terms):
        blocks = {(0, 0): t0 / 3.0, (1, 1): t1 / 3.0, (0, 1): eye, (1, 0): eye}
        big = np.zeros((2, d, 2, d, 2, d, 2, d), dtype=complex)
        for (a1, a2), b in blocks.items():
            big[a1, :, a2, :, a1, :, a2, :] = b.reshape(d, d, d, d)
        terms.append(big.reshape(4 * d * d, 4 * d * d))
    return NnHamiltonian(h0.n_sites, 2 * d, terms, True)


# ---------------------------------------------------------------------------
# exact diagonalization


def sparse_matrix(h: NnHamiltonian) -> sp.csr_matrix:
    d, n = h.site_dim, h.n_sites
    total = sp.csr_matrix((d**n, d**n), dtype=complex)
    for i, t in enumerate(h.terms):
        left = sp.identity(d**i, dtype=complex, format="csr")
        right = sp.identity(d ** (n - i - 2), dtype=complex, format="csr")
        total = total + sp.kron(sp.kron(left, sp.csr_matrix(t)), right, format="csr")
    return total.tocsr()


def dense_matrix(h: NnHamiltonian) -> np.ndarray:
    if h.dim > DENSE_ED_MAX:
        raise ResourceError(f"dense Hamiltonian of dimension {h.dim} exceeds {DENSE_ED_MAX}")
    return sparse_matrix(h).toarray()


def _first_distinct_gap(w: np.ndarray) -> tuple[float, bool]:
    e0 = w[0]
    deg = bool(len(w) > 1 and w[1] - e0 < DEGENERACY_TOL)
    above = w[w - e0 >= DEGENERACY_TOL]
    gap = float(above[0] - e0) if above.size else float("nan")
    return gap, deg


def ed_ground_state(h: NnHamiltonian, cap: int = ED_CAP) -> SpectrumInfo:
    """Lowest eigenpair and gap by dense or Lanczos diagonalization."""
    dim = h.dim
    if dim > cap:
        raise ResourceError(f"Hilbert space dimension {dim} exceeds ED cap {cap}")
    if dim <= DENSE_SOLVE_MAX:
        mat = dense_matrix(h)
        w, v = np.linalg.eigh(mat)
        vec = v[:, 0]
        gap, deg = _first_distinct_gap(w)
        res = np.linalg.norm(mat @ vec - w[0] * vec)
    else:
        mat = sparse_matrix(h)
        k = 4
        rng = np.random.default_rng(7)
        v0 = rng.standard_normal(dim) + 0j
        while True:
            w, v = spla.eigsh(mat, k=k, which="SA", tol=1e-12, v0=v0, maxiter=20 * dim)
            order = np.argsort(w)
            w, v = w[order], v[:, order]
            gap, deg = _first_distinct_gap(w)
            if np.isfinite(gap) or k >= 32:
                break
            k *= 2
        vec = v[:, 0]
        res = np.linalg.norm(mat @ vec - w[0] * vec)
    if res > RESIDUAL_TOL:
        raise DecompositionError(f"ED residual {res:.2e} above {RESIDUAL_TOL} at dimension {dim}")
    # fix the global phase so the largest amplitude is real positive
    top = vec[np.argmax(np.abs(vec))]
    vec = vec * (abs(top) / top)
    return SpectrumInfo(float(w[0]), gap, vec, deg, float(w[0] + gap))


def energy_of(h: NnHamiltonian, state) -> float:
    """<psi|H|psi> / <psi|psi> for a dense vector or an Mps."""
    if isinstance(state, Mps):
        total = 0.0
        for i, t in enumerate(h.terms):
            rho = mpslib.rdm(state, (i, 2)).matrix
            total += float(np.real(np.trace(rho @ t)))
        return total
    v = np.asarray(state, dtype=complex)
    return float(np.real(np.vdot(v, sparse_matrix(h) @ v)) / np.real(np.vdot(v, v)))


def partial_chain_energy(h: NnHamiltonian, state: np.ndarray, a: int, b: int) -> float:
    """Energy of the bond terms fully inside sites a..b-1 (0-based, half open)."""
    d, n = h.site_dim, h.n_sites
    v = np.asarray(state, dtype=complex).reshape([d] * n)
    total = 0.0
    for i in range(a, b - 1):
        rho = np.tensordot(v, v.conj(), axes=([k for k in range(n) if k not in (i, i + 1)],) * 2)
        total += float(np.real(np.trace(rho.reshape(d * d, d * d) @ h.terms[i])))
    return total / float(np.real(np.vdot(v, v)))


# ---------------------------------------------------------------------------
# DMRG


def to_mpo(h: NnHamiltonian) -> list[np.ndarray]:
    """MPO tensors with index order (left, right, out, in)."""
    d, n = h.site_dim, h.n_sites
    splits = []
    for t in h.terms:
        # operator Schmidt decomposition t = sum_k A_k (x) B_k
        m = t.reshape(d, d, d, d).transpose(0, 2, 1, 3).reshape(d * d, d * d)
        r = svd(m)
        k = max(1, int(np.count_nonzero(r.s > 1e-13 * max(r.s[0], 1e-300))))
        a = (r.u[:, :k] * r.s[:k]).T.reshape(k, d, d)
        b = r.vdag[:k].reshape(k, d, d)
        splits.append((a, b))
    eye = np.eye(d, dtype=complex)
    ws = []
    for i in range(n):
        rl = splits[i - 1][0].shape[0] if i > 0 else 0
        rr = splits[i][0].shape[0] if i < n - 1 else 0
        wl, wr = rl + 2, rr + 2
        w = np.zeros((wl, wr, d, d), dtype=complex)
        w[0, 0] = eye
        w[wl - 1, wr - 1] = eye
        if i < n - 1:
            for k in range(rr):
                w[0, 1 + k] = splits[i][0][k]
        if i > 0:
            for k in range(rl):
                w[1 + k, wr - 1] = splits[i - 1][1][k]
        if i == 0:
            w = w[:1]
        if i == n - 1:
            w = w[:, -1:]
        ws.append(w)
    return ws


def _left_env(env, a, w):
    # env (bra, mpo, ket); a (l, d, r)
    t = np.tensordot(env, a, axes=(2, 0))  # bra, mpo, d, r
    t = np.tensordot(t, w, axes=([1, 2], [0, 3]))  # bra, r, wr, out
    t = np.tensordot(a.conj(), t, axes=([0, 1], [0, 3]))  # r*, r, wr
    return t.transpose(0, 2, 1)


def _right_env(env, b, w):
    t = np.tensordot(b, env, axes=(2, 2))  # l, d, bra, mpo
    t = np.tensordot(t, w, axes=([1, 3], [3, 1]))  # l, bra, wl, out
    t = np.tensordot(b.conj(), t, axes=([1, 2], [3, 1]))  # l*, l, wl
    return t.transpose(0, 2, 1)


@dataclass(frozen=True)
class DmrgResult:
    state: Mps
    energy: float
    history: tuple[float, ...]
    converged: bool


def dmrg_run(h: NnHamiltonian, chi: int, sweeps: int, seed: int = 0,
             tol: float = 1e-10, initial: Mps | None = None) -> DmrgResult:
    """Two-site DMRG; ``history`` holds the energy after each full sweep."""
    if chi < 1:
        raise ContractViolation("chi must be at least 1")
    if sweeps < 1:
        raise ContractViolation("sweeps must be at least 1")
    n, d = h.n_sites, h.site_dim
    ws = to_mpo(h)
    if initial is None:
        initial = mpslib.random_mps(n, d, min(chi, 4), np.random.default_rng(seed))
    ts, _ = mpslib.chain_right_orthonormalize(initial.tensors, 0)
    ts[0] = ts[0] / np.linalg.norm(ts[0])
    left = [None] * (n + 1)
    right = [None] * (n + 1)
    left[0] = np.ones((1, 1, 1), dtype=complex)
    right[n] = np.ones((1, 1, 1), dtype=complex)
    for i in range(n - 1, 0, -1):
        right[i] = _right_env(right[i + 1], ts[i], ws[i])
    history: list[float] = []
    energy = np.inf

    def solve(i: int) -> tuple[float, np.ndarray]:
        theta = np.tensordot(ts[i], ts[i + 1], axes=(2, 0))  # l, d, d, r
        shape = theta.shape
        le, re_ = left[i], right[i + 2]
        w1, w2 = ws[i], ws[i + 1]

        def matvec(x):
            x = x.reshape(shape)
            t = np.tensordot(le, x, axes=(2, 0))  # bra, wl, d1, d2, r
            t = np.tensordot(t, w1, axes=([1, 2], [0, 3]))  # bra, d2, r, wm, o1
            t = np.tensordot(t, w2, axes=([3, 1], [0, 3]))  # bra, r, o1, wr, o2
            t = np.tensordot(t, re_, axes=([1, 3], [2, 1]))  # bra, o1, o2, rbra
            return t.reshape(-1)

        size = int(np.prod(shape))
        if size <= 64:
            mat = np.column_stack([matvec(e) for e in np.eye(size, dtype=complex)])
            mat = 0.5 * (mat + mat.conj().T)
            w, v = np.linalg.eigh(mat)
            return float(w[0]), v[:, 0].reshape(shape)
        op = spla.LinearOperator((size, size), matvec=matvec, dtype=complex)
        v0 = theta.reshape(-1)
        w, v = spla.eigsh(op, k=1, which="SA", v0=v0, tol=1e-12, ncv=min(size, 24), maxiter=2000)
        return float(w[0]), v[:, 0].reshape(shape)

    def split(theta, move_right: bool):
        l, d1, d2, r = theta.shape
        res = svd(theta.reshape(l * d1, d2 * r))
        keep = max(1, min(chi, int(np.count_nonzero(res.s > 1e-14 * res.s[0]))))
        s = res.s[:keep] / np.linalg.norm(res.s[:keep])
        u = res.u[:, :keep].reshape(l, d1, keep)
        vh = res.vdag[:keep].reshape(keep, d2, r)
        if move_right:
            return u, s[:, None, None] * vh
        return u * s[None, None, :], vh

    converged = False
    for _ in range(sweeps):
        for i in range(n - 1):
            e, theta = solve(i)
            ts[i], ts[i + 1] = split(theta, move_right=True)
            left[i + 1] = _left_env(left[i], ts[i], ws[i])
        for i in range(n - 2, -1, -1):
            e, theta = solve(i)
            ts[i], ts[i + 1] = split(theta, move_right=False)
            right[i + 1] = _right_env(right[i + 2], ts[i + 1], ws[i + 1])
        state = Mps(d, ts, 0.0, "right", 0)
        e_now = energy_of_mpo(ws, state)
        history.append(e_now)
        if abs(energy - e_now) < tol:
            converged = True
            energy = min(energy, e_now)
            break
        energy = min(energy, e_now) if np.isfinite(energy) else e_now
    state = Mps(d, ts, 0.0, "right", 0)
    if not converged:
        warnings.warn("DMRG stopped before the energy change fell below tolerance", RuntimeWarning)
    return DmrgResult(state, history[-1], tuple(history), converged)


def energy_of_mpo(ws: Sequence[np.ndarray], state: Mps) -> float:
    env = np.ones((1, 1, 1), dtype=complex)
    for a, w in zip(state.tensors, ws):
        env = _left_env(env, a, w)
    nrm = mpslib.chain_inner(state.tensors, state.tensors).real
    return float(env[0, 0, 0].real / nrm)


def dmrg_ground_state(h: NnHamiltonian, chi: int, sweeps: int, seed: int = 0) -> tuple[Mps, float]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = dmrg_run(h, chi, sweeps, seed=seed)
    return res.state, res.energy


# ---------------------------------------------------------------------------
# serialization


def to_json(h: NnHamiltonian) -> str:
    payload = {
        "N": h.n_sites,
        "d": h.site_dim,
        "translation_invariant": h.translation_invariant,
        "normalized": h.normalized,
        "energy_map": list(h.energy_map),
        "terms": [mpslib.complex_to_pairs(t) for t in h.terms],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def from_json(text: str) -> NnHamiltonian:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"invalid Hamiltonian JSON: {exc}") from exc
    for key in ("N", "d", "terms"):
        if key not in data:
            raise ContractViolation(f"Hamiltonian JSON is missing key {key!r}")
    terms = []
    for i, raw in enumerate(data["terms"]):
        arr = np.asarray(raw, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ShapeError(f"term {i} must be a matrix of [re, im] pairs")
        terms.append(arr[..., 0] + 1j * arr[..., 1])
    h = NnHamiltonian(int(data["N"]), int(data["d"]), terms,
                      bool(data.get("normalized", False)),
                      tuple(data.get("energy_map", (1.0, 0.0))))
    if data.get("translation_invariant") and not h.translation_invariant:
        raise ContractViolation("terms are not all equal but translation_invariant is set")
    return h
