"""Superposition constructions of locally accurate MPS approximations."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import mps as mpslib
from .absorb import absorb_factored
from .factored import (
    BlockProductState,
    Certificate,
    FactoredState,
    Superposition,
    Unit,
    passthrough,
    product_unit,
    sort_sites,
    unit_emap,
    units_to_pieces,
)
from .metrics import LocalDistanceReport, trace_distance
from .mps import Mps, chain_region_frames
from .numerics import (
    RANK_RTOL,
    ConstructionError,
    ContractViolation,
    DomainError,
    ResourceError,
    numerical_rank,
    orth_complement,
    svd,
)


@dataclass(frozen=True)
class ApproxReport:
    """Parameters, measured errors and certificates of an approximation run."""

    method: str
    parameters: dict
    measured_local_error: LocalDistanceReport | None
    bond_profile: tuple[int, ...]
    orthogonality_residual: float = 0.0
    error_bound: float = float("nan")
    bond_bound: float = float("nan")
    details: dict = field(default_factory=dict)

    @property
    def max_bond(self) -> int:
        return max(self.bond_profile) if self.bond_profile else 1

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "parameters": _plain(self.parameters),
            "bond_profile": list(self.bond_profile),
            "max_bond": self.max_bond,
            "orthogonality_residual": float(self.orthogonality_residual),
            "error_bound": _plain(self.error_bound),
            "bond_bound": _plain(self.bond_bound),
            "details": _plain(self.details),
        }
        if self.measured_local_error is not None:
            rep = self.measured_local_error
            out["measured_local_error"] = {
                "k": rep.k,
                "max_value": rep.max_value,
                "argmax_window": rep.argmax_window,
                "per_window": [[s, v] for s, v in rep.per_window],
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _plain(x):
    """Convert numpy scalars/arrays and tuples to JSON-friendly values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else None
    if hasattr(x, "__dataclass_fields__"):
        return _plain(asdict(x))
    return x


# ---------------------------------------------------------------------------
# block layouts


def _ceil(x: float) -> int:
    """Ceiling that ignores floating error just above an integer (5/(5/6) -> 6)."""
    return int(math.ceil(x - 1e-9))


@dataclass(frozen=True)
class BlockLayout:
    """Blocks of length l shifted by ``offset``; block 0 wraps around the chain end.

    Block i >= 1 holds sites [offset + l(i-1), offset + li - 1]. Block 0 is
    listed in wrap order: the tail [offset + l(n-1), N-1] then the head
    [0, offset - 1].
    """

    n_sites: int
    block_length: int
    offset: int = 0
    part1_markers: dict = field(default_factory=dict)
    split_length: int | None = None
    placement: str = "none"

    def __post_init__(self):
        if self.block_length < 1 or self.n_sites // self.block_length < 2:
            raise ResourceError(
                f"{self.n_sites} sites hold fewer than two blocks of length {self.block_length}"
            )
        if not 0 <= self.offset < self.block_length:
            raise DomainError(f"offset {self.offset} must lie in [0, {self.block_length})")

    @property
    def n_blocks(self) -> int:
        return self.n_sites // self.block_length

    def with_offset(self, j: int) -> "BlockLayout":
        return replace(self, offset=int(j) % self.block_length)

    def block(self, i: int) -> tuple[int, ...]:
        l, n, j = self.block_length, self.n_blocks, self.offset
        i %= n
        if i == 0:
            return tuple(range(j + l * (n - 1), self.n_sites)) + tuple(range(0, j))
        return tuple(range(j + l * (i - 1), j + l * i))

    @property
    def blocks(self) -> list[tuple[int, ...]]:
        return [self.block(i) for i in range(self.n_blocks)]

    def block_of(self, site: int) -> int:
        l, n, j = self.block_length, self.n_blocks, self.offset
        if site < j:
            return 0
        i = (site - j) // l + 1
        return 0 if i >= n else i

    def split(self, i: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """(A, B) of block i: B is the last ``split_length`` sites in wrap order."""
        if self.split_length is None:
            raise ContractViolation("this layout has no A/B split")
        b = self.block(i)
        t = self.split_length
        return b[: len(b) - t], b[len(b) - t :]

    @property
    def part2_split(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [self.split(i) for i in range(self.n_blocks)]

    def markers_of(self, j: int) -> dict[int, int]:
        """Fixed marker sites of term j mapped to their basis state (0 or 1)."""
        out = {}
        for (a, b), s in self.part1_markers.items():
            if a == j:
                out[s] = 0
            elif b == j:
                out[s] = 1
        return out


def _paper_marker(a: int, b: int, l: int) -> int:
    return 3 * l * l * (a + b) + l * (a - b) + 2 * l * l


def _pairs(l: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(l) for b in range(l) if a != b]


def _purifier_blocks(j: int, n: int) -> tuple[int, int]:
    return j % n, (j + 1) % n


def _marker_ok(site: int, pair: tuple[int, int], base: BlockLayout) -> bool:
    n = base.n_blocks
    for member in pair:
        if base.with_offset(member).block_of(site) in _purifier_blocks(member, n):
            return False
    return True


def _compact_markers(n_sites: int, l: int) -> dict | None:
    base = BlockLayout(n_sites, l)
    n = base.n_blocks
    todo = _pairs(l)
    placed = {}
    for q in range(1, n - 1):
        if not todo:
            break
        site = q * l
        for pair in todo:
            if _marker_ok(site, pair, base):
                placed[pair] = site
                todo.remove(pair)
                break
    return None if todo else placed


def _paper_markers(n_sites: int, l: int) -> dict | None:
    placed = {p: _paper_marker(p[0], p[1], l) for p in _pairs(l)}
    if max(placed.values()) >= n_sites:
        return None
    base = BlockLayout(n_sites, l)
    if not all(_marker_ok(s, p, base) for p, s in placed.items()):
        return None
    return placed


def minimum_sites_part1(l: int) -> int:
    """Smallest multiple of l for which the compacted marker packing succeeds."""
    n = l + 2
    while _compact_markers(n * l, l) is None:
        n += 1
    return n * l


def plan_layout_part1(n_sites: int, k: int, eps: float | None = None, l: int | None = None) -> BlockLayout:
    """Blocks and marker sites for the general-state construction.

    l = ceil((k + 3) / eps) unless given. The closed-form marker positions
    are used when they fit; otherwise markers are packed at multiples of l,
    each kept out of the two purifying blocks of both terms it separates.
    """
    if k < 1:
        raise DomainError("k must be at least 1")
    if l is None:
        if eps is None or not eps > 0:
            raise DomainError(f"eps must be positive, got {eps}")
        l = _ceil((k + 3) / eps)
    if l <= k:
        raise ContractViolation(f"block length l={l} must exceed k={k}")
    if l < 2:
        raise ContractViolation("block length must be at least 2")
    n = n_sites // l
    if n >= l + 2:
        markers = _paper_markers(n_sites, l)
        if markers is not None:
            return BlockLayout(n_sites, l, 0, markers, None, "paper")
        markers = _compact_markers(n_sites, l)
        if markers is not None:
            return BlockLayout(n_sites, l, 0, markers, None, "compact")
    need = minimum_sites_part1(l)
    raise ResourceError(f"l={l} needs at least {need} sites for the marker layout, got {n_sites}")


def marker_separation(layout: BlockLayout) -> int:
    sites = sorted(layout.part1_markers.values())
    return min((b - a for a, b in zip(sites, sites[1:])), default=layout.n_sites)


# ---------------------------------------------------------------------------
# Part 1: absorption chains purified into two blocks


def _spectral(frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal support vectors and square-root eigenvalues of W W^dagger."""
    r = svd(frame)
    k = max(1, numerical_rank(r.s))
    return r.u[:, :k], r.s[:k]


def _absorb_step(lam: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint state of diag(lam) and diag(s^2); returns (Y[(acc, x), new], new eigenvalues)."""
    comps, _ = absorb_factored(np.diag(np.sqrt(lam)), np.diag(s))
    u = np.column_stack(comps)
    r = svd(u)
    k = max(1, numerical_rank(r.s**2))
    return r.u[:, :k], r.s[:k] ** 2


def _phi_part1(psi: Mps, layout: BlockLayout, j: int) -> tuple[FactoredState, dict]:
    d, n_sites = psi.site_dim, psi.n_sites
    lay = layout.with_offset(j)
    l, n = lay.block_length, lay.n_blocks
    fixed = layout.markers_of(j)

    def free(sites):
        return [s for s in sites if s not in fixed]

    tail = free(range(j + l * (n - 1), n_sites))
    head = free(range(0, j))
    if j >= 1:
        left = ([head] if head else []) + [free(lay.block(i)) for i in range(1, j)]
        right = [free(lay.block(i)) for i in range(j + 2, n)] + [tail]
        pur = list(lay.block(j)) + list(lay.block(j + 1))
    else:
        left = []
        right = [free(lay.block(i)) for i in range(2, n)]
        pur = list(lay.block(1)) + list(lay.block(0))
    left = [r for r in left if r]
    right = [r for r in right if r]
    frames = chain_region_frames(psi.tensors, left + right) if left or right else []
    spec = [_spectral(w) for w in frames]
    lspec, rspec = spec[: len(left)], spec[len(left) :]

    # left chain, folded left to right
    lunits, lts = [], []
    lam_l = np.ones(1)
    for q, (sites, (v, s)) in enumerate(zip(left, lspec)):
        lunits.append(Unit(sites, (d,) * len(sites), dense=v))
        if q == 0:
            lts.append(np.eye(s.size, dtype=complex).reshape(1, s.size, s.size))
            lam_l = s**2
        else:
            acc = lts[-1].shape[2]
            y, lam_l = _absorb_step(lam_l, s)
            lts.append(y.reshape(acc, s.size, y.shape[1]))
    # right chain, folded right to left
    runits, rts = [], []
    lam_r = np.ones(1)
    for q, (sites, (v, s)) in enumerate(zip(reversed(right), reversed(rspec))):
        runits.append(Unit(sites, (d,) * len(sites), dense=v))
        if q == 0:
            rts.append(np.eye(s.size, dtype=complex).reshape(s.size, s.size, 1))
            lam_r = s**2
        else:
            acc = rts[-1].shape[0]
            y, lam_r = _absorb_step(lam_r, s)
            rts.append(y.reshape(acc, s.size, y.shape[1]).transpose(2, 1, 0))
    runits.reverse()
    rts.reverse()

    # purification register: joint state of both chains
    if lunits:
        comps, rounds = absorb_factored(np.diag(np.sqrt(lam_l)), np.diag(np.sqrt(lam_r)))
        a, b = lam_l.size, lam_r.size
        reg_t = np.stack([c.reshape(a, b) for c in comps], axis=1)
    else:
        b = lam_r.size
        reg_t = np.diag(np.sqrt(lam_r)).astype(complex).reshape(1, b, b)
    n_rounds = reg_t.shape[1]
    m = max(1, _ceil(math.log(n_rounds) / math.log(d))) if n_rounds > 1 else 1
    reg_room = lay.block(1) if j == 0 else tuple(range(j + l * (j - 1), j + l * (j + 1)))
    if m > len(reg_room):
        raise ResourceError(f"purifier needs {m} sites but only {len(reg_room)} are available")
    reg_sites = reg_room[len(reg_room) - m :]
    reg_coeff = np.eye(d**m, dtype=complex)[:, :n_rounds]
    reg_unit = Unit(reg_sites, (d,) * m, dense=reg_coeff)
    zero_sites = [s for s in pur if s not in set(reg_sites)]
    zero = np.zeros(d, dtype=complex)
    zero[0] = 1.0
    bond = lts[-1].shape[2] if lts else 1
    units = lunits + [product_unit(zero_sites, [zero] * len(zero_sites)), reg_unit] + runits
    tensors = lts + [passthrough(bond), reg_t] + rts
    units, tensors = _insert_markers(units, tensors, fixed, d)
    info = {
        "left_regions": len(left),
        "right_regions": len(right),
        "register_sites": list(reg_sites),
        "register_rank": n_rounds,
        "exact_regions": [tuple(r) for r in left + right],
    }
    return FactoredState(n_sites, d, units, tensors), info


def _insert_markers(units, tensors, fixed: dict[int, int], d: int):
    """Place each fixed single-site unit right after the unit physically before it."""
    units, tensors = list(units), list(tensors)
    for site in sorted(fixed):
        vec = np.zeros(d, dtype=complex)
        vec[fixed[site]] = 1.0
        pos = 0
        for u, unit in enumerate(units):
            if min(unit.sites) < site:
                pos = u + 1
        bond = tensors[pos - 1].shape[2] if pos > 0 else 1
        units.insert(pos, product_unit([site], [vec]))
        tensors.insert(pos, passthrough(bond))
    return units, tensors


def _part1_certificates(terms: Sequence[FactoredState], layout: BlockLayout) -> list[Certificate]:
    d = terms[0].site_dim
    out = []
    for (a, b), site in sorted(layout.part1_markers.items()):
        for owner, other, level in ((a, b, 0), (b, a, 1)):
            basis = np.zeros((d, 1), dtype=complex)
            basis[level, 0] = 1.0
            w = terms[other].projector_weight([site], basis)
            out.append(Certificate(owner, other, (site,), float(np.sqrt(w))))
    return out


def _part1_bond_profile(term: FactoredState, d: int) -> list[int]:
    """Upper bound on one term's Schmidt rank at every cut, from its unit structure.

    Units with r = 1 are fixed product factors and never raise a rank, so
    only the remaining units (contiguous and in site order) are inspected.
    Inside a unit with chain bonds a, b the rank is at most
    min(a d^left, b d^right).
    """
    kept = [(unit, t) for unit, t in zip(term.units, term.tensors) if unit.r > 1 or t.shape[0] != t.shape[2]]
    kept.sort(key=lambda x: min(x[0].sites))
    prof = []
    for c in range(term.n_sites - 1):
        val = 1
        for unit, t in kept:
            lo, hi = min(unit.sites), max(unit.sites)
            if hi <= c:
                val = t.shape[2]
            elif lo <= c:
                nl = sum(1 for s in unit.sites if s <= c)
                nr = len(unit.sites) - nl
                val = min(t.shape[0] * d**nl, t.shape[2] * d**nr)
                break
            else:
                break
        prof.append(int(val))
    return prof


def _window_pass(psi: Mps, sup: Superposition, k: int, exact: Sequence[Sequence[tuple]]):
    """Per-window trace distance with cross-term allowance, plus interior exactness."""
    rows = []
    interior = 0.0
    region_sets = [[set(r) for r in regs] for regs in exact]
    for start, rho in mpslib.window_rdms(psi, k):
        x = list(range(start, start + k))
        parts = sup.term_rdms(x)
        mix = sum(parts) / sup.n_terms
        rows.append((start, trace_distance(rho, mix) + sup.cross_slack(x)))
        xs = set(x)
        for j, regs in enumerate(region_sets):
            if any(xs <= r for r in regs):
                interior = max(interior, float(np.max(np.abs(parts[j] - rho))))
    vals = [v for _, v in rows]
    arg = int(np.argmax(vals))
    return LocalDistanceReport(k, tuple(rows), float(vals[arg]), rows[arg][0]), interior


def _check_input(psi: Mps, k: int) -> None:
    if psi.site_dim < 2:
        raise DomainError("local dimension must be at least 2")
    if abs(psi.norm() - 1.0) > 1e-8:
        raise ContractViolation(f"input state must be normalized, norm = {psi.norm():.12g}")
    if not 1 <= k < psi.n_sites:
        raise DomainError(f"window length k={k} out of range")
    if psi.site_dim**k > mpslib.RDM_CAP:
        raise ResourceError(f"window RDMs of dimension {psi.site_dim}^{k} exceed the cap")


def build_part1(psi: Mps, k: int, eps: float | None = None, l: int | None = None,
                layout: BlockLayout | None = None) -> tuple[Superposition, ApproxReport]:
    """General-state construction: absorption chains, purifier blocks and markers.

    Returns the superposition (its ``to_mps`` gives an ordinary MPS for small
    chains) and a report with the measured local error.
    """
    _check_input(psi, k)
    if layout is None:
        layout = plan_layout_part1(psi.n_sites, k, eps, l)
    l = layout.block_length
    if l <= k:
        raise ContractViolation(f"block length l={l} must exceed k={k}")
    d = psi.site_dim
    terms, infos = [], []
    for j in range(l):
        phi, info = _phi_part1(psi, layout, j)
        terms.append(phi)
        infos.append(info)
    sup = Superposition(terms, _part1_certificates(terms, layout))
    measured, interior = _window_pass(psi, sup, k, [inf["exact_regions"] for inf in infos])
    per_term = [_part1_bond_profile(t, d) for t in terms]
    profile = tuple(int(sum(col)) for col in zip(*per_term))
    report = ApproxReport(
        method="part1",
        parameters={"k": k, "eps": eps, "l": l, "t": None, "chi_p": None,
                    "n_sites": psi.n_sites, "site_dim": d},
        measured_local_error=measured,
        bond_profile=profile,
        orthogonality_residual=sup.orthogonality_residual(),
        error_bound=(k + 3) / l,
        bond_bound=float(l) * float(d) ** (6 * l),
        details={
            "placement": layout.placement,
            "marker_separation": marker_separation(layout),
            "n_markers": len(layout.part1_markers),
            "interior_max_error": interior,
            "register_ranks": [inf["register_rank"] for inf in infos],
            "norms": sup.term_norms.tolist(),
        },
    )
    return sup, report


# ---------------------------------------------------------------------------
# Part 2: truncated blocks purified into their last t sites


def part2_parameters(n_sites: int, site_dim: int, k: int, eps: float | None, chi_p: int,
                     l: int | None = None, t: int | None = None) -> dict:
    """Block length l, purifier length t and half-dimension h for a chain with d >= 4.

    t is the smallest even integer with floor(d/2)^t >= 2 chi_p^2 unless
    given; l = max(ceil(2(k + t)/eps), 2t, 2k) unless given.
    """
    if site_dim < 4:
        raise DomainError(f"local dimension must be at least 4, got {site_dim}; coarse-grain first")
    if chi_p < 1:
        raise DomainError("chi_p must be at least 1")
    h = site_dim // 2
    if t is None:
        t = max(2, _ceil(math.log(2 * chi_p**2) / math.log(h)))
        t += t % 2
    if l is None:
        if eps is None or not eps > 0:
            raise DomainError(f"eps must be positive, got {eps}")
        l = max(_ceil(2 * (k + t) / eps), 2 * t, 2 * k)
    if t < 2 or t % 2:
        raise DomainError(f"purifier length t={t} must be even and positive")
    if l < 2 * t or l < 2 * k:
        raise DomainError(f"block length l={l} must be at least 2t={2 * t} and 2k={2 * k}")
    if h**t < 2 * chi_p**2:
        raise DomainError(f"purifier too small: {h}^{t} < 2 * {chi_p}^2")
    if n_sites // l < 2:
        raise ResourceError(f"{n_sites} sites hold fewer than two blocks of length {l}")
    return {"l": int(l), "t": int(t), "h": int(h), "chi_p": int(chi_p), "n_blocks": n_sites // l}


def _runs(sites: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal runs of consecutive integers in sorted order."""
    s = sorted(sites)
    out = []
    start = prev = s[0]
    for x in s[1:]:
        if x != prev + 1:
            out.append((start, prev))
            start = x
        prev = x
    out.append((start, prev))
    return out


def _truncation_cuts(a_sites: Sequence[int], n_sites: int) -> list[int]:
    cuts = set()
    for x0, x1 in _runs(a_sites):
        cuts.update(c for c in range(x0 - 1, x1 + 1) if 0 <= c <= n_sites - 2)
    return sorted(cuts)


def _kron_bond(alpha: int, t: np.ndarray) -> np.ndarray:
    """identity(alpha) x t on both bonds of a site tensor."""
    l, p, r = t.shape
    eye = np.eye(alpha, dtype=complex)
    return np.einsum("ab,lpr->alpbr", eye, t).reshape(alpha * l, p, alpha * r)


def _a_segment(trunc: Mps, a_sites: Sequence[int]):
    """Vectors Theta_e on A with sum_e Theta_e Theta_e^dagger = rho_A of the truncated state.

    A contiguous A gives a segment whose last bond is e = (left bond, right
    bond). An A made of the chain head and tail gives the head tensors and
    F[(gamma, delta), e], with Theta_e = sum F[(gamma, delta), e] head_gamma x tail_delta
    where the tail tensors are those of the state, right-canonical.
    """
    runs = _runs(a_sites)
    if len(runs) == 1:
        a0, a1 = runs[0]
        work, _ = mpslib.chain_mixed(trunc.tensors, a0)
        t0 = work[a0]
        alpha, p, r = t0.shape
        seg = [t0.transpose(1, 0, 2).reshape(1, p, alpha * r)]
        seg += [_kron_bond(alpha, work[s]) for s in range(a0 + 1, a1 + 1)]
        return seg, None, None
    if len(runs) != 2 or runs[0][0] != 0 or runs[1][1] != trunc.n_sites - 1:
        raise ConstructionError(f"unexpected A region {list(a_sites)}")
    (_, h1), (p0, _) = runs
    work, _ = mpslib.chain_mixed(trunc.tensors, h1 + 1)
    g = work[h1 + 1].shape[0]
    # transfer map of the traced middle, K[(gamma, delta), (gamma', delta')]
    env = np.einsum("ac,bd->abcd", np.eye(g), np.eye(g)).astype(complex)
    for s in range(h1 + 1, p0):
        m = work[s]
        env = np.tensordot(env, m, axes=(2, 0))  # g, g', a', p, b
        env = np.tensordot(env, m.conj(), axes=([2, 3], [0, 1]))  # g, g', b, b'
    dl = env.shape[2]
    kmat = env.transpose(0, 2, 1, 3).reshape(g * dl, g * dl)
    kmat = 0.5 * (kmat + kmat.conj().T)
    w, v = np.linalg.eigh(kmat)
    keep = w > RANK_RTOL * max(w.max(), 0.0)
    f = v[:, keep] * np.sqrt(w[keep])
    return [work[s] for s in range(0, h1 + 1)], f, [work[s] for s in range(p0, trunc.n_sites)]


def _class_isometries(b_rolled: Sequence[int], d: int, h: int) -> dict[int, np.ndarray]:
    eye = np.eye(d, dtype=complex)
    half = len(b_rolled) // 2
    return {s: (eye[:, :h] if q < half else eye[:, h : 2 * h]) for q, s in enumerate(b_rolled)}


@dataclass
class _Block:
    j: int
    i: int
    a_sites: tuple[int, ...]
    b_rolled: tuple[int, ...]
    trunc: Mps
    weight: float
    seg: list = field(repr=False, default_factory=list)
    emb: np.ndarray | None = field(repr=False, default=None)
    core: np.ndarray | None = field(repr=False, default=None)
    tail: list | None = field(repr=False, default=None)
    chain: list | None = field(repr=False, default=None)
    probs: np.ndarray | None = None
    basis: np.ndarray | None = field(repr=False, default=None)

    @property
    def b_sites(self) -> tuple[int, ...]:
        return tuple(sorted(self.b_rolled))


def _purifier_basis(blk: _Block, blocks: dict, layouts: list[BlockLayout], isos: dict,
                    h: int, n_comp: int, constrained: bool) -> tuple[np.ndarray, list[int]]:
    """Orthonormal columns in the reduced B space, avoiding far terms' supports on B."""
    dim = h ** len(blk.b_rolled)
    bset = set(blk.b_sites)
    far = []
    cols = []
    if constrained:
        for jp, lay in enumerate(layouts):
            if jp == blk.j:
                continue
            ip = lay.block_of(blk.b_sites[0])
            a_p, b_p = lay.split(ip)
            if not bset <= set(a_p):
                continue
            other = blocks[(jp, ip)]
            frame = chain_region_frames(other.trunc.tensors, [blk.b_sites], isos)[0]
            if frame.size:
                cols.append(frame)
            far.append(jp)
    if cols:
        c = np.hstack(cols)
        r = svd(c)
        kept = numerical_rank(r.s) if r.s.size else 0
        span = r.u[:, :kept]
    else:
        span = np.zeros((dim, 0), dtype=complex)
    if span.shape[1] + n_comp > dim:
        raise ConstructionError(
            f"purifier of term {blk.j} block {blk.i} has dimension {dim}; "
            f"{span.shape[1]} directions are excluded and {n_comp} are needed"
        )
    return _low_entanglement_basis(span, _near_first_order(blk.b_rolled, h), n_comp), far


def _near_first_order(b_rolled: Sequence[int], h: int) -> np.ndarray:
    """Reduced B basis indices (sorted-site order) enumerated with the sites next to A varying fastest."""
    nb = len(b_rolled)
    pos = {s: q for q, s in enumerate(sorted(b_rolled))}
    weights = np.array([h ** (nb - 1 - pos[s]) for s in b_rolled])
    digits = (np.arange(h**nb)[:, None] // h ** np.arange(nb)[None, :]) % h
    return digits @ weights


def _low_entanglement_basis(span: np.ndarray, order: np.ndarray, n_comp: int) -> np.ndarray:
    """n_comp orthonormal vectors orthogonal to ``span`` built from few computational states.

    The vectors live in the span of the first m states of ``order`` with m as
    small as possible, so sites late in the order stay close to product form.
    Without constraints they are the first n_comp states themselves.
    """
    dim = order.size
    if span.shape[1] == 0:
        return np.eye(dim, dtype=complex)[:, order[:n_comp]]
    rows = span.conj().T[:, order]
    for m in range(n_comp, dim + 1):
        _, s, vh = np.linalg.svd(rows[:, :m])
        rank = int(np.sum(s > 1e-8))
        if m - rank >= n_comp:
            break
    else:
        raise ConstructionError("purifier complement is numerically too small")
    out = np.zeros((dim, n_comp), dtype=complex)
    out[order[:m]] = vh[rank : rank + n_comp].conj().T
    # remove the rounding-level overlap with the excluded span
    out = out - span @ (span.conj().T @ out)
    u, _, vh = np.linalg.svd(out, full_matrices=False)
    return u @ vh


def chi_p_for(psi: Mps, k: int, eps: float, l: int | None = None, t: int | None = None,
              max_chi: int = 64) -> int:
    """Smallest chi_p whose measured truncation cost satisfies sqrt(2l) w_max <= eps/2."""
    chi = 1
    while chi <= max_chi:
        try:
            pars = part2_parameters(psi.n_sites, psi.site_dim, k, eps, chi, l, t)
        except DomainError:
            chi += 1
            continue
        w = _max_truncation_weight(psi, pars)
        if math.sqrt(2 * pars["l"]) * w <= eps / 2:
            return chi
        chi += 1
    raise ConstructionError(f"no chi_p <= {max_chi} meets the truncation budget eps/2 = {eps / 2}")


def _max_truncation_weight(psi: Mps, pars: dict) -> float:
    base = BlockLayout(psi.n_sites, pars["l"], 0, {}, pars["t"])
    worst = 0.0
    for j in range(pars["l"]):
        lay = base.with_offset(j)
        for i in range(lay.n_blocks):
            a, _ = lay.split(i)
            tr, _ = mpslib.truncate_at_cuts(psi, _truncation_cuts(a, psi.n_sites), pars["chi_p"])
            ov = abs(mpslib.inner(psi, tr))
            worst = max(worst, math.sqrt(max(0.0, 1.0 - ov * ov)))
    return worst


def _term_from_blocks(n_sites: int, d: int, h: int, blocks: list[_Block]) -> FactoredState:
    units, tensors = [], []
    for blk in blocks:
        isos = _class_isometries(blk.b_rolled, d, h)
        bs = blk.b_sites
        b_isos = tuple(isos[s] for s in bs)
        if blk.core is None:
            e = blk.emb.shape[1]
            units.append(Unit(blk.a_sites, (d,) * len(blk.a_sites), segment=tuple(blk.seg)))
            tensors.append(np.eye(e, dtype=complex).reshape(1, e, e))
            units.append(Unit(bs, (h,) * len(bs), dense=blk.emb, isometries=b_isos))
            tensors.append(np.eye(e, dtype=complex).reshape(e, e, 1))
            continue
        # head segment, tail segment listed from the chain end, then B
        g, dl = blk.seg[-1].shape[2], blk.tail[0].shape[0]
        head_sites = tuple(s for s in blk.a_sites if s < bs[0])
        tail_sites = tuple(s for s in reversed(blk.a_sites) if s > bs[-1])
        units.append(Unit(head_sites, (d,) * len(head_sites), segment=tuple(blk.seg)))
        tensors.append(np.eye(g, dtype=complex).reshape(1, g, g))
        rev = tuple(t.transpose(2, 1, 0) for t in reversed(blk.tail))
        units.append(Unit(tail_sites, (d,) * len(tail_sites), segment=rev))
        tensors.append(np.eye(g * dl, dtype=complex).reshape(g, dl, g * dl))
        units.append(Unit(bs, (h,) * len(bs), dense=blk.emb @ blk.core.T, isometries=b_isos))
        tensors.append(np.eye(g * dl, dtype=complex).reshape(g * dl, g * dl, 1))
    return FactoredState(n_sites, d, units, tensors)


def _thread(p_left: np.ndarray, chain: list[np.ndarray], p_right: np.ndarray) -> list[np.ndarray]:
    """Insert ``chain`` (open bonds a ... b) between P_left[x, a, y] and P_right[y, b, z].

    The bond y between the two pseudo-sites is carried alongside the chain.
    """
    if len(chain) == 1:
        return [np.einsum("xay,apb,ybz->xpz", p_left, chain[0], p_right)]
    x, _, y = p_left.shape
    first = np.einsum("xay,apr->xpry", p_left, chain[0])
    out = [first.reshape(x, first.shape[1], -1)]
    eye = np.eye(y, dtype=complex)
    for t in chain[1:-1]:
        l, p, r = t.shape
        out.append(np.einsum("lpr,yz->lyprz", t, eye).reshape(l * y, p, r * y))
    last = np.einsum("lpb,ybz->lypz", chain[-1], p_right)
    l, _, p, z = last.shape
    out.append(last.reshape(l * y, p, z))
    return out


def _block_chain(blk: _Block, d: int, h: int) -> list[np.ndarray]:
    """Site tensors of one purified block in increasing site order, with minimal bonds."""
    ts = _block_chain_raw(blk, d, h)
    norm = mpslib.chain_norm(ts)
    out = list(mpslib.compress(Mps(d, ts), 2**62).tensors)
    out[0] = out[0] * norm
    return out


def _block_chain_raw(blk: _Block, d: int, h: int) -> list[np.ndarray]:
    isos = _class_isometries(blk.b_rolled, d, h)
    bs = blk.b_sites
    nb = len(bs)
    runs = _runs(blk.a_sites)
    lift = lambda s, t: np.tensordot(isos[s], t, axes=(1, 1)).transpose(1, 0, 2)  # noqa: E731
    if len(runs) == 1:
        a0, a1 = runs[0]
        work, _ = mpslib.chain_mixed(blk.trunc.tensors, a0)
        chain = work[a0 : a1 + 1]
        alpha, beta = chain[0].shape[0], chain[-1].shape[2]
        before = sum(1 for s in bs if s < a0)
        dense = blk.emb.reshape([h] * nb + [alpha, beta])
        axes = list(range(before)) + [nb, nb + 1] + list(range(before, nb))
        dims = [h] * before + [alpha, beta] + [h] * (nb - before)
        pieces = mpslib.chain_from_dense(dense.transpose(axes).reshape(-1), dims)
        left = [lift(s, t) for s, t in zip(bs[:before], pieces[:before])]
        right = [lift(s, t) for s, t in zip(bs[before:], pieces[before + 2 :])]
        return left + _thread(pieces[before], chain, pieces[before + 1]) + right
    (_, h1), (p0, _) = runs
    work, _ = mpslib.chain_mixed(blk.trunc.tensors, h1 + 1)
    f = blk.core
    g, dl = work[h1].shape[2], work[p0].shape[0]
    # G[gamma, b, delta] = sum_e F[(gamma, delta), e] emb[b, e]
    core = np.einsum("gde,be->gbd", f.reshape(g, dl, -1), blk.emb)
    pieces = mpslib.chain_from_dense(core.reshape(-1), [g] + [h] * nb + [dl])
    head = list(work[: h1 + 1])
    head[-1] = np.tensordot(head[-1], pieces[0][0], axes=(2, 0))
    tail = list(work[p0:])
    tail[0] = np.tensordot(pieces[-1][:, :, 0], tail[0], axes=(1, 0))
    mid = [lift(s, t) for s, t in zip(bs, pieces[1:-1])]
    return head + mid + tail


def _block_schmidt_ranks(blk: _Block, d: int, h: int) -> tuple[list[int], list[int]]:
    """Sorted sites of one block and its exact Schmidt rank after each of them."""
    ts = blk.chain if blk.chain is not None else _block_chain(blk, d, h)
    ranks = [numerical_rank(s) if s.size else 1 for s in mpslib.chain_schmidt_values(ts)]
    return sorted(blk.a_sites + blk.b_sites), ranks


def _part2_bond_profile(n_sites: int, d: int, h: int, term_blocks: list[list[_Block]]) -> tuple[int, ...]:
    total = np.zeros(n_sites - 1, dtype=np.int64)
    for blocks in term_blocks:
        prof = np.ones(n_sites - 1, dtype=np.int64)
        for blk in blocks:
            sites, ranks = _block_schmidt_ranks(blk, d, h)
            pos = np.searchsorted(np.array(sites), np.arange(n_sites - 1), side="right")
            # pos = number of block sites at or left of the cut
            for c in range(n_sites - 1):
                m = pos[c]
                if 0 < m < len(sites):
                    prof[c] *= ranks[m - 1]
        total += prof
    return tuple(int(x) for x in total)


def build_part2(psi: Mps, k: int, eps: float | None = None, chi_p: int | str = "auto",
                l: int | None = None, t: int | None = None,
                constrain: bool = True, route: str = "chains") -> tuple[Superposition, ApproxReport]:
    """Truncate each block of every shifted blocking, purify its first l - t sites into the last t.

    ``psi`` must already have d >= 4 (see ``mps.coarse_grain``). With
    ``constrain`` the purifier of every block avoids the supports of all far
    terms on it, which is what makes the terms mutually orthogonal.
    ``route`` picks how terms are stored: "chains" keeps one exact MPS per
    block, "units" the embedded-unit form (slower, used as a cross-check).
    """
    _check_input(psi, k)
    d, n_sites = psi.site_dim, psi.n_sites
    if chi_p == "auto":
        if eps is None:
            raise DomainError("chi_p='auto' needs eps")
        chi_p = chi_p_for(psi, k, eps, l, t)
    pars = part2_parameters(n_sites, d, k, eps, int(chi_p), l, t)
    l, t, h = pars["l"], pars["t"], pars["h"]
    if k > l // 2:
        raise DomainError(f"k={k} exceeds l/2={l // 2}")
    base = BlockLayout(n_sites, l, 0, {}, t, "part2")
    layouts = [base.with_offset(j) for j in range(l)]

    blocks: dict[tuple[int, int], _Block] = {}
    for j, lay in enumerate(layouts):
        for i in range(lay.n_blocks):
            a, b = lay.split(i)
            tr, _ = mpslib.truncate_at_cuts(psi, _truncation_cuts(a, n_sites), pars["chi_p"])
            ov = abs(mpslib.inner(psi, tr))
            blk = _Block(j, i, tuple(sorted(a)), tuple(b), tr, math.sqrt(max(0.0, 1.0 - ov * ov)))
            blk.seg, blk.core, blk.tail = _a_segment(tr, blk.a_sites)
            blocks[(j, i)] = blk

    far_pairs: dict[tuple[int, int], list[int]] = {}
    for (j, i), blk in blocks.items():
        if blk.core is None:
            e = blk.seg[-1].shape[2]
            tmp = Unit(blk.a_sites, (d,) * len(blk.a_sites), segment=tuple(blk.seg))
            gram = unit_emap(tmp, [], [])[:, :, 0, 0].T
        else:
            # head and tail factors are orthonormal, so the Gram matrix is F^dagger F
            e = blk.core.shape[1]
            gram = blk.core.conj().T @ blk.core
        gram = 0.5 * (gram + gram.conj().T)
        z, w = np.linalg.eigh(gram)
        keep = z > RANK_RTOL * max(z.max(), 0.0)
        z, w = z[keep], w[:, keep]
        isos = _class_isometries(blk.b_rolled, d, h)
        basis, far = _purifier_basis(blk, blocks, layouts, isos, h, z.size, constrain)
        blk.basis, blk.probs = basis, z
        blk.emb = basis @ w.T  # rows: reduced B space, columns: e
        assert blk.emb.shape[1] == e
        far_pairs[(j, i)] = far
    for blk in blocks.values():
        blk.chain = _block_chain(blk, d, h)

    order = lambda lay: list(range(1, lay.n_blocks)) + [0]  # noqa: E731
    term_blocks = [[blocks[(j, i)] for i in order(lay)] for j, lay in enumerate(layouts)]
    if route == "units":
        terms = [_term_from_blocks(n_sites, d, h, tb) for tb in term_blocks]
    elif route == "chains":
        terms = [BlockProductState(n_sites, d, [(sorted(b.a_sites + b.b_sites), b.chain) for b in tb])
                 for tb in term_blocks]
    else:
        raise DomainError(f"unknown route {route!r}")
    certs = _part2_certificates(terms, blocks, layouts, far_pairs, d, h)
    sup = Superposition(terms, certs)
    measured, _ = _window_pass(psi, sup, k, [[blk.a_sites for blk in tb] for tb in term_blocks])
    interior = _part2_interior(psi, sup, k, term_blocks)
    profile = _part2_bond_profile(n_sites, d, h, term_blocks)
    w_max = max(blk.weight for blk in blocks.values())
    report = ApproxReport(
        method="part2",
        parameters={"k": k, "eps": eps, "l": l, "t": t, "chi_p": pars["chi_p"],
                    "n_sites": n_sites, "site_dim": d},
        measured_local_error=measured,
        bond_profile=profile,
        orthogonality_residual=sup.orthogonality_residual(),
        error_bound=math.sqrt(2 * l) * w_max + (k + t) / l,
        bond_bound=float(4 * l * pars["chi_p"] ** 2),
        details={
            "w_max": w_max,
            "n_blocks": base.n_blocks,
            "interior_max_error": interior,
            "purifier_dim": h**t,
            "max_components": int(max(blk.probs.size for blk in blocks.values())),
            "constrained": bool(constrain),
            "correlation_witness": _part2_witness(sup, blocks, layouts, d, h),
        },
    )
    return sup, report


def _part2_interior(psi: Mps, sup: Superposition, k: int, term_blocks) -> float:
    """Largest deviation of a term's window RDM from the truncated state's, inside A regions."""
    worst = 0.0
    for j, tb in enumerate(term_blocks):
        for blk in tb:
            for x0, x1 in _runs(blk.a_sites):
                for s in range(x0, x1 - k + 2):
                    x = list(range(s, s + k))
                    ref = mpslib.rdm_sites(blk.trunc, x)
                    worst = max(worst, float(np.max(np.abs(sup.terms[j].rdm(x) - ref))))
    return worst


def _term_frame(blocks: dict, layout: BlockLayout, sites: Sequence[int], isos: dict) -> np.ndarray:
    """Frame W of one term on ``sites`` (reduced coordinates), W W^dagger = V^dagger rho V.

    The term is a product over its blocks, so the frame is the Kronecker
    product of per-block frames, each read off that block's own chain.
    """
    sites = sorted(int(s) for s in sites)
    groups: dict[int, list[int]] = {}
    for s in sites:
        groups.setdefault(layout.block_of(s), []).append(s)
    frames, order, dims = [], [], []
    for i, grp in groups.items():
        blk = blocks[(layout.offset, i)]
        pos = {s: q for q, s in enumerate(sorted(blk.a_sites + blk.b_sites))}
        iso_pos = {pos[s]: isos[s] for s in grp if s in isos}
        w = chain_region_frames(blk.chain, [[pos[s] for s in grp]], iso_pos or None)[0]
        frames.append(w)
        order += grp
        dims += [isos[s].shape[1] if s in isos else blk.chain[0].shape[1] for s in grp]
    w = frames[0]
    for f in frames[1:]:
        w = np.kron(w, f)
    if order != sites:
        n = len(order)
        perm = [order.index(s) for s in sites]
        w = w.reshape(dims + [-1]).transpose(perm + [n]).reshape(w.shape[0], -1)
    return w


def _frame_weight(frame: np.ndarray, basis: np.ndarray) -> float:
    return float(np.linalg.norm(basis.conj().T @ frame) ** 2)


def _part2_certificates(terms, blocks, layouts, far_pairs, d: int, h: int) -> list[Certificate]:
    eye = np.eye(d, dtype=complex)
    classes = []
    for lay in layouts:
        cls = {}
        for i in range(lay.n_blocks):
            _, b = lay.split(i)
            for q, s in enumerate(b):
                cls[s] = 0 if q < len(b) // 2 else 1
        classes.append(cls)
    out = []
    l = len(terms)
    for j in range(l):
        for jp in range(l):
            if jp == j:
                continue
            for s, c in classes[j].items():
                cp = classes[jp].get(s)
                if cp is None or cp == c:
                    continue
                cols = eye[:, :h] if c == 0 else eye[:, h : 2 * h]
                w = terms[jp].projector_weight([s], cols)
                out.append(Certificate(j, jp, (s,), math.sqrt(w)))
    for (j, i), far in far_pairs.items():
        blk = blocks[(j, i)]
        isos = _class_isometries(blk.b_rolled, d, h)
        for jp in far:
            w = _frame_weight(_term_frame(blocks, layouts[jp], blk.b_sites, isos), blk.basis)
            out.append(Certificate(j, jp, blk.b_sites, math.sqrt(w)))
    return out


# ---------------------------------------------------------------------------
# long-range correlation witness


def witness_lower_bound(q1: Sequence[float], q2: Sequence[float], ref_norm_sq: float, ref: int = 0) -> dict:
    """Certified lower bound on Tr((Q1 x Q2)(rho_12 - rho_1 x rho_2)) for (1/sqrt l) sum_j phi_j.

    ``q1[j]``, ``q2[j]`` are <phi_j|Q|phi_j> for projectors Q1, Q2 on two
    disjoint regions. The joint expectation is at least
    (1/l) (sqrt(q2_ref) - sqrt(|phi_ref|^2 - q1_ref) - sum_{j != ref} min(sqrt q1_j, sqrt q2_j))^2
    and each single expectation is at most (sum_j sqrt q_j)^2 / l.
    """
    q1 = np.clip(np.asarray(q1, dtype=float), 0.0, None)
    q2 = np.clip(np.asarray(q2, dtype=float), 0.0, None)
    l = q1.size
    others = sum(min(math.sqrt(q1[j]), math.sqrt(q2[j])) for j in range(l) if j != ref)
    amp = math.sqrt(q2[ref]) - math.sqrt(max(0.0, ref_norm_sq - q1[ref])) - others
    joint = max(0.0, amp) ** 2 / l
    up1 = float(np.sum(np.sqrt(q1))) ** 2 / l
    up2 = float(np.sum(np.sqrt(q2))) ** 2 / l
    return {"lower": joint - up1 * up2, "joint_lower": joint, "upper_1": up1, "upper_2": up2,
            "target": 1.0 / l - 1.0 / l**2, "q1": q1.tolist(), "q2": q2.tolist()}


def _part2_witness(sup: Superposition, blocks: dict, layouts: list[BlockLayout], d: int, h: int) -> dict:
    """Witness between B_{0,1} and the purifier of term 0 farthest from it."""
    r1 = blocks[(0, 1)]
    end1 = max(r1.b_sites)
    best, gap = None, -1
    layout = layouts[0]
    for i in range(layout.n_blocks):
        if i == 1:
            continue
        blk = blocks[(0, i)]
        g = min(blk.b_sites) - end1 - 1
        if g > gap:
            best, gap = blk, g
    out = {"region1": list(r1.b_sites), "region2": None, "separation": gap,
           "feasible": best is not None and gap >= layout.block_length}
    if best is None:
        out["lower"] = float("nan")
        return out
    isos = _class_isometries(r1.b_rolled, d, h)
    isos.update(_class_isometries(best.b_rolled, d, h))
    out["region2"] = list(best.b_sites)
    q1 = [_frame_weight(_term_frame(blocks, lay, r1.b_sites, isos), r1.basis) for lay in layouts]
    q2 = [_frame_weight(_term_frame(blocks, lay, best.b_sites, isos), best.basis) for lay in layouts]
    out.update(witness_lower_bound(q1, q2, float(sup.term_norms[0]) ** 2))
    return out
