"""States stored as a chain of embedded units, and superpositions of them.

A unit owns a set of physical sites and an embedding r -> vector on those
sites, given either densely or as a small MPS segment whose last bond is r.
The chain tensors T[a, r, b] glue the units' r indices into one pure state.
Sites may carry local isometries (d, p) so that embeddings live in a reduced
local space of dimension p.

Reduced density matrices of arbitrary site sets are obtained by contracting
only the units that touch the set, with precomputed left and right Gram
environments for everything else. Nothing here assumes the unit order
matches the physical order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import mps as mpslib
from .mps import Mps
from .numerics import (
    RANK_RTOL,
    ContractViolation,
    ResourceError,
    ShapeError,
    numerical_rank,
    svd,
)

DENSE_UNIT_CAP = 2**24


@dataclass(frozen=True)
class Unit:
    """Embedding of an r-dimensional index into the state space of ``sites``."""

    sites: tuple[int, ...]
    dims: tuple[int, ...]
    dense: np.ndarray | None = field(default=None, repr=False)
    segment: tuple | None = field(default=None, repr=False)
    isometries: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))
        object.__setattr__(self, "dims", tuple(int(p) for p in self.dims))
        if len(self.sites) != len(self.dims) or not self.sites:
            raise ShapeError("a unit needs one local dimension per site")
        if len(set(self.sites)) != len(self.sites):
            raise ShapeError("unit sites must be distinct")
        if (self.dense is None) == (self.segment is None):
            raise ContractViolation("give exactly one of dense or segment")
        if self.dense is not None:
            m = np.asarray(self.dense, dtype=complex)
            if m.ndim != 2 or m.shape[0] != int(np.prod(self.dims)):
                raise ShapeError(f"dense embedding has shape {m.shape}, dims {self.dims}")
            if m.size > DENSE_UNIT_CAP:
                raise ResourceError(f"dense unit with {m.size} entries exceeds cap {DENSE_UNIT_CAP}")
            object.__setattr__(self, "dense", m)
        else:
            seg = tuple(np.asarray(t, dtype=complex) for t in self.segment)
            if len(seg) != len(self.sites):
                raise ShapeError("segment needs one tensor per site")
            if seg[0].shape[0] != 1:
                raise ShapeError("segment must start with a trivial bond")
            for q, (t, p) in enumerate(zip(seg, self.dims)):
                if t.ndim != 3 or t.shape[1] != p:
                    raise ShapeError(f"segment tensor {q} has shape {t.shape}, local dim {p}")
                if q and seg[q - 1].shape[2] != t.shape[0]:
                    raise ShapeError(f"segment bond mismatch at position {q}")
            object.__setattr__(self, "segment", seg)
        if self.isometries is not None:
            isos = tuple(None if v is None else np.asarray(v, dtype=complex) for v in self.isometries)
            if len(isos) != len(self.sites):
                raise ShapeError("isometries need one entry per site")
            for v, p in zip(isos, self.dims):
                if v is not None and v.shape[1] != p:
                    raise ShapeError(f"isometry shape {v.shape} does not match local dim {p}")
            object.__setattr__(self, "isometries", isos)

    @property
    def r(self) -> int:
        return self.dense.shape[1] if self.dense is not None else self.segment[-1].shape[2]

    def local_iso(self, q: int) -> np.ndarray | None:
        return None if self.isometries is None else self.isometries[q]

    def physical_dim(self, q: int, site_dim: int) -> int:
        return site_dim if self.local_iso(q) is not None else self.dims[q]


def product_unit(sites: Sequence[int], vectors: Sequence[np.ndarray]) -> Unit:
    """Unit with r = 1 holding a fixed product of local vectors."""
    seg = [np.asarray(v, dtype=complex).reshape(1, -1, 1) for v in vectors]
    return Unit(tuple(sites), tuple(t.shape[1] for t in seg), segment=tuple(seg))


def passthrough(dim: int) -> np.ndarray:
    """Chain tensor for an r = 1 unit that leaves the bond untouched."""
    return np.eye(dim, dtype=complex).reshape(dim, 1, dim)


def segment_from_dense(coeff: np.ndarray, dims: Sequence[int]) -> list[np.ndarray]:
    """Exact MPS segment (first bond 1, last bond r) of a dense embedding."""
    coeff = np.asarray(coeff, dtype=complex)
    r = coeff.shape[1]
    ts = mpslib.chain_from_dense(coeff.reshape(-1), list(dims) + [r])
    last = ts.pop()
    ts[-1] = np.tensordot(ts[-1], last[:, :, 0], axes=(2, 0))
    return ts


def _apply_local(t: np.ndarray, m: np.ndarray | None) -> np.ndarray:
    if m is None:
        return t
    return np.tensordot(m, t, axes=(1, 1)).transpose(1, 0, 2)


def unit_emap(unit: Unit, open_pos: Sequence[int], maps: Sequence[np.ndarray | None]) -> np.ndarray:
    """E[r, r', o, o'] = sum over traced sites of c[o, ., r] c*[o', ., r'].

    ``maps`` gives, per open position, a matrix applied to that site's local
    index (None keeps it as is).
    """
    open_pos = list(open_pos)
    if unit.dense is not None:
        ns = len(unit.dims)
        r = unit.r
        c = unit.dense.reshape(*unit.dims, r)
        for q, m in zip(open_pos, maps):
            if m is not None:
                c = np.moveaxis(np.tensordot(m, c, axes=(1, q)), 0, q)
        traced = [q for q in range(ns) if q not in open_pos]
        c = c.transpose(open_pos + traced + [ns])
        do = int(np.prod([c.shape[i] for i in range(len(open_pos))]))
        c = c.reshape(do, -1, r)
        return np.einsum("otr,pts->rsop", c, c.conj())
    lookup = dict(zip(open_pos, maps))
    env = np.ones((1, 1, 1, 1), dtype=complex)
    for q, a in enumerate(unit.segment):
        if q in lookup:
            a = _apply_local(a, lookup[q])
            pk, pb = env.shape[0], env.shape[1]
            p, r = a.shape[1], a.shape[2]
            t = np.tensordot(env, a, axes=(2, 0))
            t = np.tensordot(t, a.conj(), axes=(2, 0))
            env = t.transpose(0, 2, 1, 4, 3, 5).reshape(pk * p, pb * p, r, r)
        else:
            t = np.tensordot(env, a, axes=(2, 0))
            env = np.tensordot(t, a.conj(), axes=([2, 3], [0, 1]))
    return env.transpose(2, 3, 0, 1)


def _step(env: np.ndarray, t: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Push env[k, l, a, a'] through chain tensor t with unit map e[r, r', o, o']."""
    k, l, a, _ = env.shape
    r, b = t.shape[1], t.shape[2]
    o = e.shape[2]
    kl, oo = k * l, o * o
    # env first pays for k*l early; map first pays for a*a' late
    cost_env = kl * a * a * r * b + kl * a * b * r * r * oo + kl * b * oo * a * r * b
    cost_map = a * r * b * r * oo + a * b * r * oo * a * b + kl * a * a * b * oo * b
    if cost_env <= cost_map:
        x = np.tensordot(env, t, axes=(2, 0))  # k l A r b
        x = np.tensordot(x, e, axes=(3, 0))  # k l A b R o O
        x = np.tensordot(x, t.conj(), axes=([2, 4], [0, 1]))  # k l b o O B
    else:
        x = np.tensordot(t, e, axes=(1, 0))  # a b R o O
        x = np.tensordot(x, t.conj(), axes=(2, 1))  # a b o O A B
        x = np.tensordot(env, x, axes=([2, 3], [0, 4]))  # k l b o O B
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(k * o, l * o, b, b)


class FactoredState:
    """Pure state given by units and chain tensors; see the module docstring."""

    def __init__(self, n_sites: int, site_dim: int, units: Sequence[Unit], tensors: Sequence[np.ndarray]):
        if len(units) != len(tensors) or not units:
            raise ShapeError("need one chain tensor per unit")
        self.n_sites = int(n_sites)
        self.site_dim = int(site_dim)
        self.units = list(units)
        self.tensors = [np.asarray(t, dtype=complex) for t in tensors]
        if self.tensors[0].shape[0] != 1 or self.tensors[-1].shape[2] != 1:
            raise ShapeError("chain boundary bonds must be 1")
        self.where: dict[int, tuple[int, int]] = {}
        for u, (unit, t) in enumerate(zip(self.units, self.tensors)):
            if t.ndim != 3 or t.shape[1] != unit.r:
                raise ShapeError(f"chain tensor {u} has shape {t.shape}, unit r = {unit.r}")
            if u and self.tensors[u - 1].shape[2] != t.shape[0]:
                raise ShapeError(f"chain bond mismatch before unit {u}")
            for q, s in enumerate(unit.sites):
                if s in self.where:
                    raise ShapeError(f"site {s} belongs to two units")
                if not 0 <= s < self.n_sites:
                    raise ShapeError(f"site {s} out of range")
                self.where[s] = (u, q)
        if len(self.where) != self.n_sites:
            raise ShapeError("units must cover every site exactly once")
        self.grams = [unit_emap(un, [], [])[:, :, 0, 0] for un in self.units]
        self.left = [np.ones((1, 1), dtype=complex)]
        for t, g in zip(self.tensors, self.grams):
            self.left.append(_step(self.left[-1][None, None], t, g[:, :, None, None])[0, 0])
        self.right = [np.ones((1, 1), dtype=complex)]
        for t, g in zip(reversed(self.tensors), reversed(self.grams)):
            nxt = self.right[-1]
            x = np.tensordot(t, nxt, axes=(2, 0))  # a, r, b'
            x = np.tensordot(x, t.conj(), axes=(2, 2))  # a, r, a', r'
            self.right.append(np.einsum("arAR,rR->aA", x, g))
        self.right.reverse()  # right[u] = environment right of unit u - 1

    @property
    def norm_sq(self) -> float:
        return float(np.real(self.left[-1][0, 0]))

    def unit_density(self, u: int) -> np.ndarray:
        """M[r, r'] such that the state on unit u is sum c_r M[r, r'] c_r'^dagger."""
        t = self.tensors[u]
        x = np.tensordot(self.left[u], t, axes=(0, 0))  # a', r, b
        x = np.tensordot(x, self.right[u + 1], axes=(2, 0))  # a', r, b'
        return np.tensordot(x, t.conj(), axes=([0, 2], [0, 2]))

    def rdm(self, sites: Iterable[int], out_isometries: dict | None = None) -> np.ndarray:
        """Unnormalized RDM on ``sites`` with factors in increasing site order.

        ``out_isometries`` maps a site to a (d, q) isometry; that factor is
        then reported in the q-dimensional coordinates (V^dagger rho V).
        """
        sites = sorted(set(int(s) for s in sites))
        per_unit: dict[int, list[int]] = {}
        for s in sites:
            if s not in self.where:
                raise IndexError(f"site {s} out of range")
            u, q = self.where[s]
            per_unit.setdefault(u, []).append(q)
        us = sorted(per_unit)
        u0, u1 = us[0], us[-1]
        env = self.left[u0][None, None]
        labels: list[int] = []
        out_dims: list[int] = []
        for u in range(u0, u1 + 1):
            unit = self.units[u]
            if u not in per_unit:
                env = _step(env, self.tensors[u], self.grams[u][:, :, None, None])
                continue
            qs = sorted(per_unit[u])
            maps = []
            for q in qs:
                s = unit.sites[q]
                own = unit.local_iso(q)
                ask = None if out_isometries is None else out_isometries.get(s)
                if ask is not None and own is not None:
                    m = ask.conj().T @ own
                elif ask is not None:
                    m = ask.conj().T
                else:
                    m = own
                maps.append(m)
                labels.append(s)
                out_dims.append(unit.dims[q] if m is None else m.shape[0])
            env = _step(env, self.tensors[u], unit_emap(unit, qs, maps))
        rho = np.einsum("klbB,bB->kl", env, self.right[u1 + 1])
        order = sorted(range(len(labels)), key=lambda i: labels[i])
        if order != list(range(len(labels))):
            n = len(labels)
            rho = rho.reshape(out_dims + out_dims).transpose(order + [n + i for i in order])
            dim = int(np.prod(out_dims))
            rho = rho.reshape(dim, dim)
        return 0.5 * (rho + rho.conj().T)

    def projector_weight(self, sites: Sequence[int], basis: np.ndarray,
                         out_isometries: dict | None = None) -> float:
        """<P> for the projector onto the columns of ``basis`` (orthonormal) on ``sites``."""
        rho = self.rdm(sites, out_isometries)
        return float(max(0.0, np.real(np.trace(basis.conj().T @ rho @ basis))))

    # ------------------------------------------------------------------
    # conversion to an ordinary MPS (small cases only)

    def chain_pieces(self) -> tuple[list[np.ndarray], list[int]]:
        """Site tensors in unit order with physical local dims, plus their site labels."""
        return units_to_pieces(self.units, self.tensors)

    def to_mps(self) -> Mps:
        ts, labels = self.chain_pieces()
        ts = sort_sites(ts, labels)
        return Mps(self.site_dim, ts)


def units_to_pieces(units: Sequence[Unit], tensors: Sequence[np.ndarray]) -> tuple[list[np.ndarray], list[int]]:
    """Expand units into one site tensor each, carrying the chain bond through."""
    ts: list[np.ndarray] = []
    labels: list[int] = []
    for unit, t in zip(units, tensors):
        if unit.segment is not None:
            seg = list(unit.segment)
        else:
            seg = segment_from_dense(unit.dense, unit.dims)
        seg = [_apply_local(x, unit.local_iso(q)) for q, x in enumerate(seg)]
        a = t.shape[0]
        eye = np.eye(a, dtype=complex)
        for q, x in enumerate(seg):
            l, p, r = x.shape
            y = np.einsum("ab,lpr->alpbr", eye, x).reshape(a * l, p, a * r)
            if q == len(seg) - 1:
                y = np.tensordot(y.reshape(a * l, p, a, r), t, axes=([2, 3], [0, 1]))
            ts.append(y)
        labels.extend(unit.sites)
    return ts, labels


def sort_sites(ts: list[np.ndarray], labels: Sequence[int], rtol: float = RANK_RTOL) -> list[np.ndarray]:
    """Reorder an MPS whose sites carry ``labels`` into increasing label order.

    Adjacent sites are exchanged by an SVD of the swapped two-site tensor,
    discarding only numerically zero singular values.
    """
    ts = list(ts)
    labels = list(labels)
    n = len(ts)
    for sweep in range(n):
        moved = False
        for i in range(n - 1):
            if labels[i] > labels[i + 1]:
                a, b = ts[i], ts[i + 1]
                l, p1, _ = a.shape
                _, p2, r = b.shape
                th = np.tensordot(a, b, axes=(2, 0)).transpose(0, 2, 1, 3).reshape(l * p2, p1 * r)
                res = svd(th)
                k = max(1, numerical_rank(res.s, rtol))
                ts[i] = res.u[:, :k].reshape(l, p2, k)
                ts[i + 1] = (res.s[:k, None] * res.vdag[:k]).reshape(k, p1, r)
                labels[i], labels[i + 1] = labels[i + 1], labels[i]
                moved = True
        if not moved:
            break
    return ts


class BlockProductState:
    """Tensor product of independent chains, one per block of sites.

    A block's sites need not be contiguous (a block may wrap around the
    chain end); its chain lists them in increasing order. Reduced density
    matrices factor over blocks, so each block is handled on its own.
    """

    def __init__(self, n_sites: int, site_dim: int, blocks: Sequence[tuple[Sequence[int], Sequence[np.ndarray]]]):
        self.n_sites = int(n_sites)
        self.site_dim = int(site_dim)
        self.where: dict[int, tuple[int, int]] = {}
        self.sites: list[tuple[int, ...]] = []
        self.chains: list[list[np.ndarray]] = []
        self.scales: list[float] = []
        self.right: list[list[np.ndarray]] = []
        for b, (sites, ts) in enumerate(blocks):
            sites = tuple(int(s) for s in sites)
            if list(sites) != sorted(sites) or len(sites) != len(ts):
                raise ShapeError("block sites must be increasing with one tensor each")
            mpslib._check_chain(ts)
            for q, s in enumerate(sites):
                if s in self.where or not 0 <= s < self.n_sites:
                    raise ShapeError(f"site {s} repeated or out of range")
                self.where[s] = (b, q)
            work, lg = mpslib.chain_left_orthonormalize([np.asarray(t, dtype=complex) for t in ts], len(ts) - 1)
            env = [np.ones((1, 1), dtype=complex)]
            for t in reversed(work):
                x = np.tensordot(t, env[-1], axes=(2, 0))
                env.append(np.tensordot(x, t.conj(), axes=([1, 2], [1, 2])))
            env.reverse()
            self.sites.append(sites)
            self.chains.append(work)
            self.scales.append(float(np.exp(2 * lg)))
            self.right.append(env)
        if len(self.where) != self.n_sites:
            raise ShapeError("blocks must cover every site exactly once")
        self.block_norms = [sc * float(np.real(r[0][0, 0])) for sc, r in zip(self.scales, self.right)]

    @property
    def norm_sq(self) -> float:
        return float(np.prod(self.block_norms))

    def _block_rdm(self, b: int, qs: list[int], maps: list[np.ndarray | None]) -> np.ndarray:
        work, env_r = self.chains[b], self.right[b]
        lo, hi = qs[0], qs[-1]
        chi = work[lo].shape[0]
        env = np.eye(chi, dtype=complex).reshape(1, 1, chi, chi)
        m_at = dict(zip(qs, maps))
        for q in range(lo, hi + 1):
            a = work[q]
            if q in m_at:
                a = _apply_local(a, m_at[q])
                pk, pb = env.shape[0], env.shape[1]
                p = a.shape[1]
                t = np.tensordot(env, a, axes=(2, 0))
                t = np.tensordot(t, a.conj(), axes=(2, 0))  # pk, pb, p, r, p', r'
                env = t.transpose(0, 2, 1, 4, 3, 5).reshape(pk * p, pb * p, a.shape[2], a.shape[2])
            else:
                t = np.tensordot(env, a, axes=(2, 0))
                env = np.tensordot(t, a.conj(), axes=([2, 3], [0, 1]))
        rho = np.einsum("klrR,rR->kl", env, env_r[hi + 1])
        return rho * self.scales[b]

    def rdm(self, sites: Iterable[int], out_isometries: dict | None = None) -> np.ndarray:
        """Unnormalized RDM on ``sites`` in increasing site order; see ``FactoredState.rdm``."""
        sites = sorted(set(int(s) for s in sites))
        groups: dict[int, list[int]] = {}
        for s in sites:
            if s not in self.where:
                raise IndexError(f"site {s} out of range")
            groups.setdefault(self.where[s][0], []).append(s)
        rho = np.ones((1, 1), dtype=complex)
        labels: list[int] = []
        dims: list[int] = []
        for b, grp in groups.items():
            qs = [self.where[s][1] for s in grp]
            maps = []
            for s in grp:
                v = None if out_isometries is None else out_isometries.get(s)
                maps.append(None if v is None else v.conj().T)
                dims.append(self.site_dim if v is None else v.shape[1])
            rho = np.kron(rho, self._block_rdm(b, qs, maps))
            labels += grp
        for b in range(len(self.chains)):
            if b not in groups:
                rho = rho * self.block_norms[b]
        order = sorted(range(len(labels)), key=lambda i: labels[i])
        if order != list(range(len(labels))):
            n = len(labels)
            dim = rho.shape[0]
            rho = rho.reshape(dims + dims).transpose(order + [n + i for i in order]).reshape(dim, dim)
        return 0.5 * (rho + rho.conj().T)

    def projector_weight(self, sites: Sequence[int], basis: np.ndarray,
                         out_isometries: dict | None = None) -> float:
        rho = self.rdm(sites, out_isometries)
        return float(max(0.0, np.real(np.trace(basis.conj().T @ rho @ basis))))

    def to_mps(self) -> Mps:
        ts: list[np.ndarray] = []
        labels: list[int] = []
        for sites, work, sc in zip(self.sites, self.chains, self.scales):
            chain = list(work)
            chain[-1] = chain[-1] * np.sqrt(sc)
            ts += chain
            labels += list(sites)
        return Mps(self.site_dim, sort_sites(ts, labels))


# ---------------------------------------------------------------------------
# superpositions with certified cross terms


@dataclass(frozen=True)
class Certificate:
    """||P phi_other|| where P projects on the exact support of phi_owner on ``region``."""

    owner: int
    other: int
    region: tuple[int, ...]
    residual: float


class Superposition:
    """(1/sqrt(l)) sum_j |phi_j> with cross terms bounded by certificates.

    Local marginals are reported as (1/l) sum_j rho_X(phi_j). Every cross
    term Tr_{X^c}|phi_j><phi_j'| is bounded in trace norm by
    ||phi_j|| * residual for any certificate of (j, j') whose region avoids X;
    ``cross_slack`` turns that into a trace-distance allowance.
    """

    def __init__(self, terms: Sequence[FactoredState], certificates: Sequence[Certificate]):
        if not terms:
            raise ContractViolation("a superposition needs at least one term")
        self.terms = list(terms)
        self.n_sites = terms[0].n_sites
        self.site_dim = terms[0].site_dim
        self.term_norms = np.array([np.sqrt(max(t.norm_sq, 0.0)) for t in self.terms])
        self.certificates: dict[tuple[int, int], list[Certificate]] = {}
        for c in certificates:
            self.certificates.setdefault((c.owner, c.other), []).append(c)

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def pair_bound(self, j: int, jp: int, avoid: set[int] | None = None) -> float:
        """Smallest certified bound on ||Tr_{X^c}|phi_j><phi_j'| ||_1 with X = ``avoid``."""
        best = 1.0
        nj = float(self.term_norms[j])
        for c in self.certificates.get((j, jp), []):
            if avoid and avoid.intersection(c.region):
                continue
            best = min(best, nj * c.residual)
        return best

    def orthogonality_residual(self) -> float:
        worst = float(np.max(np.abs(self.term_norms**2 - 1.0)))
        l = self.n_terms
        for j in range(l):
            for jp in range(l):
                if j != jp:
                    worst = max(worst, self.pair_bound(j, jp))
        return worst

    def cross_slack(self, window: Sequence[int]) -> float:
        """Trace-distance allowance for the cross terms on a window."""
        avoid = set(int(s) for s in window)
        l = self.n_terms
        tot = 0.0
        for j in range(l):
            for jp in range(l):
                if j != jp:
                    tot += self.pair_bound(j, jp, avoid)
        return 0.5 * tot / l

    def term_rdms(self, sites: Sequence[int]) -> list[np.ndarray]:
        return [t.rdm(sites) for t in self.terms]

    def rdm(self, sites: Sequence[int]) -> np.ndarray:
        return sum(self.term_rdms(sites)) / self.n_terms

    def window_rdms(self, k: int):
        for start in range(self.n_sites - k + 1):
            yield start, self.rdm(range(start, start + k))

    def to_mps(self) -> Mps:
        coeff = 1.0 / np.sqrt(self.n_terms)
        states = [t.to_mps() for t in self.terms]
        return mpslib.add_many(states, [coeff] * len(states))
