"""Distances between states and correlation functionals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from . import mps as mpslib
from .mps import DensityMatrix, Mps
from .numerics import DomainError, ShapeError, eigh_psd, numerical_rank, partial_trace, svd


class WindowSource(Protocol):
    """Anything that can list the reduced states of all k-site windows."""

    n_sites: int
    site_dim: int

    def window_rdms(self, k: int) -> Iterable[tuple[int, np.ndarray]]: ...


def _mat(x) -> np.ndarray:
    return x.matrix if isinstance(x, DensityMatrix) else np.asarray(x, dtype=complex)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    ma, mb = _mat(a), _mat(b)
    if ma.shape != mb.shape:
        raise ShapeError(f"density matrices differ in shape: {ma.shape} vs {mb.shape}")
    return ma, mb


def fidelity(a, b) -> float:
    """|| sqrt(a) sqrt(b) ||_1, clamped to [0, 1].

    The trace norm avoids square roots of the eigenvalues of sqrt(a) b sqrt(a),
    which would turn rounding noise into errors near 1e-8.
    """
    ma, mb = _pair(a, b)
    f = float(np.sum(svd(_cut_sqrt(ma) @ _cut_sqrt(mb)).s))
    return min(max(f, 0.0), 1.0)


def _cut_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = eigh_psd(m)
    floor = m.shape[0] * np.finfo(float).eps * max(w.max(initial=0.0), 0.0)
    w = np.where(w > floor, w, 0.0)
    return (v * np.sqrt(w)) @ v.conj().T


def purified_distance(a, b) -> float:
    f = fidelity(a, b)
    return float(np.sqrt(max(0.0, 1.0 - f * f)))


def trace_distance(a, b) -> float:
    ma, mb = _pair(a, b)
    diff = ma - mb
    w = np.linalg.eigvalsh(0.5 * (diff + diff.conj().T))
    return float(min(1.0, 0.5 * np.sum(np.abs(w))))


def pure_state_distance(u: np.ndarray, v: np.ndarray) -> float:
    """Trace distance of two normalized pure states, sqrt(1 - |<u|v>|^2)."""
    ov = abs(np.vdot(u, v)) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.sqrt(max(0.0, 1.0 - ov * ov)))


@dataclass(frozen=True)
class LocalDistanceReport:
    k: int
    per_window: tuple[tuple[int, float], ...]
    max_value: float
    argmax_window: int

    def rows(self) -> list[dict]:
        return [{"start": s, "value": v} for s, v in self.per_window]


def _windows(x, k: int):
    if isinstance(x, Mps):
        return mpslib.window_rdms(x, k)
    return x.window_rdms(k)


def local_trace_distance(a, b, k: int) -> LocalDistanceReport:
    """Max over contiguous k-site windows of the trace distance between marginals."""
    if a.n_sites != b.n_sites or a.site_dim != b.site_dim:
        raise ShapeError("local_trace_distance needs states with equal N and d")
    rows = []
    for (sa, ra), (sb, rb) in zip(_windows(a, k), _windows(b, k)):
        assert sa == sb
        rows.append((sa, trace_distance(ra, rb)))
    vals = [v for _, v in rows]
    arg = int(np.argmax(vals))
    return LocalDistanceReport(k, tuple(rows), float(vals[arg]), rows[arg][0])


def local_purified_distance(a, b, k: int) -> LocalDistanceReport:
    if a.n_sites != b.n_sites or a.site_dim != b.site_dim:
        raise ShapeError("local_purified_distance needs states with equal N and d")
    rows = [(sa, purified_distance(ra, rb)) for (sa, ra), (_, rb) in zip(_windows(a, k), _windows(b, k))]
    vals = [v for _, v in rows]
    arg = int(np.argmax(vals))
    return LocalDistanceReport(k, tuple(rows), float(vals[arg]), rows[arg][0])


# ---------------------------------------------------------------------------
# correlations


@dataclass(frozen=True)
class CorrelationEstimate:
    lower: float
    upper: float
    witness_ops: tuple[np.ndarray, np.ndarray]


def _sign(h: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    s = np.where(w >= 0, 1.0, -1.0)
    return (v * s) @ v.conj().T


def correlation_from_rdm(rho_ac: np.ndarray, dim_a: int, dim_c: int, iters: int = 20,
                         seed: int = 0, restarts: int = 3) -> CorrelationEstimate:
    """Bracket max Tr((M x N)(rho_AC - rho_A x rho_C)) over ||M||, ||N|| <= 1."""
    rho_a = partial_trace(rho_ac, [dim_a, dim_c], [0])
    rho_c = partial_trace(rho_ac, [dim_a, dim_c], [1])
    x = rho_ac - np.kron(rho_a, rho_c)
    x = 0.5 * (x + x.conj().T)
    upper = float(np.sum(np.abs(np.linalg.eigvalsh(x))))
    x4 = x.reshape(dim_a, dim_c, dim_a, dim_c)

    def value(m, n) -> float:
        return float(np.real(np.einsum("ij,kl,jlik->", m, n, x4)))

    # with one operator fixed the value is Tr(other @ y) for a Hermitian y
    def best_n(m):
        return _sign(np.einsum("ij,jlik->lk", m, x4))

    def best_m(n):
        return _sign(np.einsum("kl,jlik->ji", n, x4))

    # operator-Schmidt realignment of x; its leading A factor seeds the search
    realigned = x4.transpose(0, 2, 1, 3).reshape(dim_a * dim_a, dim_c * dim_c)
    u, _, _ = np.linalg.svd(realigned)
    f = u[:, 0].reshape(dim_a, dim_a)
    herm = 0.5 * (f + f.conj().T)
    if np.linalg.norm(herm) < 1e-12:
        herm = 0.5j * (f - f.conj().T)
    starts = [_sign(herm)]
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        g = rng.standard_normal((dim_a, dim_a)) + 1j * rng.standard_normal((dim_a, dim_a))
        starts.append(_sign(g + g.conj().T))
    best = (-np.inf, None, None)
    for m in starts:
        n = best_n(m)
        for _ in range(iters):
            m = best_m(n)
            n = best_n(m)
        v = value(m, n)
        if v > best[0]:
            best = (v, m, n)
    lower = max(0.0, best[0])
    return CorrelationEstimate(lower, max(upper, lower), (best[1], best[2]))


def correlation(state: Mps, region_a: tuple[int, int], region_c: tuple[int, int],
                iters: int = 20, seed: int = 0) -> CorrelationEstimate:
    a0, la = region_a
    c0, lc = region_c
    sa = set(range(a0, a0 + la))
    sc = set(range(c0, c0 + lc))
    if sa & sc:
        raise DomainError("correlation regions must be disjoint")
    if la < 1 or lc < 1 or min(a0, c0) < 0 or max(a0 + la, c0 + lc) > state.n_sites:
        raise IndexError("correlation region out of range")
    sites = sorted(sa | sc)
    rho = mpslib.rdm_sites(state, sites)
    d = state.site_dim
    # reorder factors so A comes first even when C lies to the left
    order = [sites.index(s) for s in sorted(sa)] + [sites.index(s) for s in sorted(sc)]
    n = len(sites)
    rho = rho.reshape([d] * (2 * n)).transpose(order + [n + o for o in order]).reshape(d**n, d**n)
    return correlation_from_rdm(rho, d**la, d**lc, iters=iters, seed=seed)


def witness_value(rho_ac: np.ndarray, dim_a: int, dim_c: int, m: np.ndarray, n: np.ndarray) -> float:
    """Tr((M x N)(rho_AC - rho_A x rho_C))."""
    rho_a = partial_trace(rho_ac, [dim_a, dim_c], [0])
    rho_c = partial_trace(rho_ac, [dim_a, dim_c], [1])
    x = rho_ac - np.kron(rho_a, rho_c)
    return float(np.real(np.trace(np.kron(m, n) @ x)))


def rank_of(rho: np.ndarray) -> int:
    w, _ = eigh_psd(rho)
    return numerical_rank(w)
