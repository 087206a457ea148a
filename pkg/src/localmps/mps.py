"""Open-boundary matrix product states.

Tensors use the index order (left bond, physical, right bond). The stored
tensors are scaled by ``exp(log_norm)`` to give the physical state, which
lets projection sweeps shrink norms without underflow.

The ``chain_*`` helpers work on bare tensor lists and tolerate non-uniform
physical dimensions; they back both :class:`Mps` and the block states used
by the approximation constructions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .numerics import (
    RANK_RTOL,
    ContractViolation,
    ResourceError,
    ShapeError,
    numerical_rank,
    svd,
)

DENSE_CAP = 2**24
RDM_CAP = 4096
DEFAULT_OP_CAP_BYTES = 16 * 1024**2

CANONICAL_FORMS = ("none", "left", "right", "mixed")

Tensors = Sequence[np.ndarray]
LocalOp = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def op_cap_bytes() -> int:
    """Byte budget for dense local operators, overridable via LOCALMPS_CAP_BYTES."""
    raw = os.environ.get("LOCALMPS_CAP_BYTES")
    if raw is None:
        return DEFAULT_OP_CAP_BYTES
    try:
        return int(raw)
    except ValueError as exc:
        raise ContractViolation(f"LOCALMPS_CAP_BYTES must be an integer, got {raw!r}") from exc


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mps:
    site_dim: int
    tensors: tuple
    log_norm: float = 0.0
    canonical_form: str = "none"
    center: int | None = None

    def __post_init__(self):
        ts = tuple(_frozen(t) for t in self.tensors)
        object.__setattr__(self, "tensors", ts)
        if not ts:
            raise ShapeError("an MPS needs at least one site")
        if self.canonical_form not in CANONICAL_FORMS:
            raise ContractViolation(f"unknown canonical form {self.canonical_form!r}")
        _check_chain(ts)
        for i, t in enumerate(ts):
            if t.shape[1] != self.site_dim:
                raise ShapeError(f"site {i} has physical dim {t.shape[1]}, expected {self.site_dim}")
        if not np.isfinite(self.log_norm):
            raise ContractViolation("log_norm must be finite")

    @property
    def n_sites(self) -> int:
        return len(self.tensors)

    @property
    def bond_dims(self) -> list[int]:
        """Stored bond dimensions (no rank reduction)."""
        return [t.shape[2] for t in self.tensors[:-1]]

    def norm(self) -> float:
        return float(np.exp(self.log_norm) * chain_norm(self.tensors))

    def with_log_norm(self, value: float) -> "Mps":
        return Mps(self.site_dim, self.tensors, value, self.canonical_form, self.center)


def _check_chain(ts: Tensors) -> None:
    for i, t in enumerate(ts):
        if t.ndim != 3:
            raise ShapeError(f"site {i} tensor must be rank 3, got shape {t.shape}")
    if ts[0].shape[0] != 1 or ts[-1].shape[2] != 1:
        raise ShapeError("boundary bonds must have dimension 1")
    for i in range(len(ts) - 1):
        if ts[i].shape[2] != ts[i + 1].shape[0]:
            raise ShapeError(
                f"bond mismatch between sites {i} and {i + 1}: "
                f"{ts[i].shape[2]} != {ts[i + 1].shape[0]}"
            )


# ---------------------------------------------------------------------------
# bare tensor-list kernels


def chain_left_orthonormalize(ts: Tensors, upto: int) -> tuple[list[np.ndarray], float]:
    """QR-sweep sites 0..upto-1 to left isometries; returns (tensors, log of pulled norm)."""
    ts = [np.asarray(t) for t in ts]
    log_scale = 0.0
    for i in range(upto):
        l, d, r = ts[i].shape
        q, rr = np.linalg.qr(ts[i].reshape(l * d, r))
        ts[i] = q.reshape(l, d, q.shape[1])
        ts[i + 1] = np.tensordot(rr, ts[i + 1], axes=(1, 0))
        nrm = np.linalg.norm(ts[i + 1])
        if nrm > 0:
            ts[i + 1] = ts[i + 1] / nrm
            log_scale += np.log(nrm)
    return ts, log_scale


def chain_right_orthonormalize(ts: Tensors, downto: int) -> tuple[list[np.ndarray], float]:
    """QR-sweep sites N-1..downto+1 to right isometries."""
    ts = [np.asarray(t) for t in ts]
    log_scale = 0.0
    for i in range(len(ts) - 1, downto, -1):
        l, d, r = ts[i].shape
        q, rr = np.linalg.qr(ts[i].reshape(l, d * r).T)
        ts[i] = q.T.reshape(q.shape[1], d, r)
        ts[i - 1] = np.tensordot(ts[i - 1], rr.T, axes=(2, 0))
        nrm = np.linalg.norm(ts[i - 1])
        if nrm > 0:
            ts[i - 1] = ts[i - 1] / nrm
            log_scale += np.log(nrm)
    return ts, log_scale


def chain_mixed(ts: Tensors, center: int) -> tuple[list[np.ndarray], float]:
    """Mixed-canonical form with a unit-norm center tensor; returns log of the norm."""
    ts, a = chain_left_orthonormalize(ts, center)
    ts, b = chain_right_orthonormalize(ts, center)
    nrm = np.linalg.norm(ts[center])
    if nrm == 0:
        return ts, -np.inf
    ts[center] = ts[center] / nrm
    return ts, a + b + np.log(nrm)


def chain_norm(ts: Tensors) -> float:
    _, lg = chain_mixed(ts, 0)
    return float(np.exp(lg))


def chain_inner(ta: Tensors, tb: Tensors) -> complex:
    """<a|b> for bare tensor lists (conjugate-linear in a)."""
    if len(ta) != len(tb):
        raise ShapeError(f"site counts differ: {len(ta)} vs {len(tb)}")
    env = np.ones((1, 1), dtype=complex)
    log_scale = 0.0
    for i, (x, y) in enumerate(zip(ta, tb)):
        if x.shape[1] != y.shape[1]:
            raise ShapeError(f"physical dims differ at site {i}")
        env = np.tensordot(env, y, axes=(1, 0))
        env = np.tensordot(x.conj(), env, axes=([0, 1], [0, 1]))
        nrm = np.max(np.abs(env))
        if nrm == 0:
            return 0j
        env = env / nrm
        log_scale += np.log(nrm)
    return complex(env[0, 0] * np.exp(log_scale))


def chain_to_dense(ts: Tensors) -> np.ndarray:
    v = ts[0].reshape(ts[0].shape[1], ts[0].shape[2])
    for t in ts[1:]:
        v = np.tensordot(v, t, axes=(1, 0)).reshape(-1, t.shape[2])
    return v.reshape(-1)


def chain_from_dense(vec: np.ndarray, dims: Sequence[int], rtol: float = RANK_RTOL) -> list[np.ndarray]:
    """Exact left-canonical decomposition dropping numerically zero Schmidt values."""
    vec = np.asarray(vec, dtype=complex).reshape(-1)
    if vec.size != int(np.prod(dims)):
        raise ShapeError(f"vector length {vec.size} != product of dims {int(np.prod(dims))}")
    ts = []
    rest = vec.reshape(1, -1)
    left = 1
    for d in dims[:-1]:
        m = rest.reshape(left * d, -1)
        r = svd(m)
        k = max(1, numerical_rank(r.s, rtol))
        ts.append(r.u[:, :k].reshape(left, d, k))
        rest = r.s[:k, None] * r.vdag[:k]
        left = k
    ts.append(rest.reshape(left, dims[-1], 1))
    return ts


def chain_window_tensor(ts: Tensors, start: int, stop: int) -> np.ndarray:
    """Contract sites start..stop-1 into a (left, prod phys, right) tensor."""
    th = ts[start]
    for t in ts[start + 1 : stop]:
        l = th.shape[0]
        th = np.tensordot(th, t, axes=(2, 0)).reshape(l, -1, t.shape[2])
    return th


def chain_rdm(ts: Tensors, start: int, stop: int) -> np.ndarray:
    """Normalized reduced density matrix of sites start..stop-1."""
    mixed, _ = chain_mixed(ts, start)
    th = chain_window_tensor(mixed, start, stop)
    l, p, r = th.shape
    m = th.transpose(1, 0, 2).reshape(p, l * r)
    rho = m @ m.conj().T
    tr = np.trace(rho).real
    if tr <= 0:
        raise ContractViolation("reduced density matrix of a zero state")
    rho = rho / tr
    return 0.5 * (rho + rho.conj().T)


def chain_window_rdms(ts: Tensors, k: int):
    """Yield (start, rdm) for every window of k sites, moving the center once."""
    n = len(ts)
    work, _ = chain_right_orthonormalize(ts, 0)
    work[0] = work[0] / np.linalg.norm(work[0])
    for start in range(n - k + 1):
        th = chain_window_tensor(work, start, start + k)
        l, p, r = th.shape
        m = th.transpose(1, 0, 2).reshape(p, l * r)
        rho = m @ m.conj().T
        rho = rho / np.trace(rho).real
        yield start, 0.5 * (rho + rho.conj().T)
        if start + k < n:
            l, d, r = work[start].shape
            q, rr = np.linalg.qr(work[start].reshape(l * d, r))
            work[start] = q.reshape(l, d, q.shape[1])
            nxt = np.tensordot(rr, work[start + 1], axes=(1, 0))
            work[start + 1] = nxt / np.linalg.norm(nxt)


def chain_rdm_sites(ts: Tensors, sites: Sequence[int], max_entries: int = 2**26) -> np.ndarray:
    """Normalized RDM of an arbitrary ordered set of sites (gaps traced out)."""
    keep = sorted(set(int(x) for x in sites))
    lo, hi = keep[0], keep[-1]
    work, _ = chain_mixed(ts, lo)
    chi = work[lo].shape[0]
    # left of lo is isometric, so the environment starts as the identity
    env = np.eye(chi, dtype=complex).reshape(1, 1, chi, chi)  # ket open, bra open, ket bond, bra bond
    for i in range(lo, hi + 1):
        a = work[i]
        l, d, r = a.shape
        if i in keep:
            pk, pb = env.shape[0], env.shape[1]
            if pk * d * pb * d * r * r > max_entries:
                raise ResourceError("open-site RDM contraction exceeds the size budget")
            t = np.tensordot(env, a, axes=(2, 0))  # pk, pb, l', d, r
            t = np.tensordot(t, a.conj(), axes=(2, 0))  # pk, pb, d, r, d', r'
            env = t.transpose(0, 2, 1, 4, 3, 5).reshape(pk * d, pb * d, r, r)
        else:
            t = np.tensordot(env, a, axes=(2, 0))  # pk, pb, l', d, r
            env = np.tensordot(t, a.conj(), axes=([2, 3], [0, 1]))  # pk, pb, r, r'
    rho = np.einsum("abrr->ab", env)
    rho = rho / np.trace(rho).real
    return 0.5 * (rho + rho.conj().T)


def _compress_env(w: np.ndarray) -> np.ndarray:
    """Shrink the env axis of w[x, env, b] to its numerical rank."""
    x, e, b = w.shape
    if e <= x * b:
        return w
    m = w.transpose(0, 2, 1).reshape(x * b, e)
    r = svd(m)
    k = max(1, numerical_rank(r.s))
    return (r.u[:, :k] * r.s[:k]).reshape(x, b, k).transpose(0, 2, 1)


def _frame_sweep(work: Tensors, sites: Sequence[int], isometries: dict | None) -> np.ndarray:
    """Frame of ``sites`` on a chain that is mixed-canonical at ``sites[0]``."""
    keep = sorted(set(int(s) for s in sites))
    lo, hi = keep[0], keep[-1]
    inside = set(keep)
    chi = work[lo].shape[0]
    w = np.eye(chi, dtype=complex).reshape(1, chi, chi)  # x, env, bond
    i = lo
    while i <= hi:
        if i in inside:
            a = work[i]
            if isometries and i in isometries:
                a = np.tensordot(isometries[i].conj(), a, axes=(0, 1)).transpose(1, 0, 2)
            x, e, _ = w.shape
            t = np.tensordot(w, a, axes=(2, 0))  # x, env, p, r
            w = t.transpose(0, 2, 1, 3).reshape(x * a.shape[1], e, a.shape[2])
            i += 1
            continue
        # a run of traced sites: carry only the bond-sized factor through it
        j = i
        while j <= hi and j not in inside:
            j += 1
        x, e, b = w.shape
        q, rr = np.linalg.qr(w.reshape(x * e, b))
        c = q.shape[1]
        k = rr.reshape(c, 1, b)  # c, gap env, bond
        for s in range(i, j):
            a = work[s]
            t = np.tensordot(k, a, axes=(2, 0))  # c, g, p, r
            k = t.reshape(c, -1, a.shape[2])
            k = _compress_env(k)
        w = np.tensordot(q.reshape(x, e, c), k, axes=(2, 0))  # x, e, g, r
        w = _compress_env(w.reshape(x, e * k.shape[1], k.shape[2]))
        i = j
    x, e, b = w.shape
    m = w.reshape(x, e * b)
    r = svd(m)
    k = max(1, numerical_rank(r.s))
    return r.u[:, :k] * r.s[:k]


def chain_region_frames(ts: Tensors, regions: Sequence[Sequence[int]],
                        isometries: dict | None = None) -> list[np.ndarray]:
    """Frames W with rho_S = W W^dagger (trace one) for each site set S.

    Rows of W follow the increasing site order of S. Traced gaps inside a
    region are handled through a bond-sized factor, so a region made of the
    two chain ends is as cheap as a contiguous one. ``isometries`` maps a
    site to a (d, d_eff) isometry whose adjoint is applied to that site's
    row index, giving the frame in reduced local coordinates.
    """
    order = sorted(range(len(regions)), key=lambda q: min(regions[q]))
    out: list[np.ndarray | None] = [None] * len(regions)
    work, _ = chain_right_orthonormalize(ts, 0)
    work[0] = work[0] / np.linalg.norm(work[0])
    center = 0
    for q in order:
        lo = min(int(s) for s in regions[q])
        while center < lo:
            l, d, r = work[center].shape
            qq, rr = np.linalg.qr(work[center].reshape(l * d, r))
            work[center] = qq.reshape(l, d, qq.shape[1])
            nxt = np.tensordot(rr, work[center + 1], axes=(1, 0))
            work[center + 1] = nxt / np.linalg.norm(nxt)
            center += 1
        w = _frame_sweep(work, regions[q], isometries)
        if isometries is None:
            w = w / np.linalg.norm(w)
        out[q] = w
    return out  # type: ignore[return-value]


def chain_schmidt_values(ts: Tensors) -> list[np.ndarray]:
    """Normalized Schmidt coefficients at every cut, computed in one sweep."""
    n = len(ts)
    if n == 1:
        return []
    work, _ = chain_right_orthonormalize(ts, 0)
    nrm = np.linalg.norm(work[0])
    work[0] = work[0] / nrm
    out = []
    for i in range(n - 1):
        l, d, r = work[i].shape
        res = svd(work[i].reshape(l * d, r))
        s = res.s / np.linalg.norm(res.s)
        out.append(s)
        work[i] = res.u.reshape(l, d, -1)
        work[i + 1] = np.tensordot(res.s[:, None] * res.vdag, work[i + 1], axes=(1, 0))
    return out


def chain_apply(ts: Tensors, op: LocalOp, start: int, width: int,
                max_bond: int | None = None, rtol: float = RANK_RTOL) -> list[np.ndarray]:
    """Apply an operator on a contiguous window and re-split exactly.

    ``op`` is either a dense matrix or a callable acting on the column
    vectors of a (phys, columns) array.
    """
    stop = start + width
    ts = list(ts)
    th = chain_window_tensor(ts, start, stop)
    l, p, r = th.shape
    cols = th.transpose(1, 0, 2).reshape(p, l * r)
    if callable(op) and not isinstance(op, np.ndarray):
        new = op(cols)
    else:
        new = np.asarray(op) @ cols
    th = new.reshape(p, l, r).transpose(1, 0, 2)
    dims = [t.shape[1] for t in ts[start:stop]]
    pieces = split_window(th, dims, max_bond=max_bond, rtol=rtol)
    ts[start:stop] = pieces
    return ts


def split_window(th: np.ndarray, dims: Sequence[int], max_bond: int | None = None,
                 rtol: float = RANK_RTOL) -> list[np.ndarray]:
    """Split a (left, prod dims, right) tensor into sites by successive SVDs."""
    l, _, r = th.shape
    pieces = []
    rest = th.reshape(l, -1)
    left = l
    for d in dims[:-1]:
        m = rest.reshape(left * d, -1)
        res = svd(m)
        k = max(1, numerical_rank(res.s, rtol))
        if max_bond is not None:
            k = min(k, max_bond)
        pieces.append(res.u[:, :k].reshape(left, d, k))
        rest = res.s[:k, None] * res.vdag[:k]
        left = k
    pieces.append(rest.reshape(left, dims[-1], r))
    return pieces


# ---------------------------------------------------------------------------
# public operations


@dataclass(frozen=True)
class DensityMatrix:
    window: tuple[int, int]
    matrix: np.ndarray
    site_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))
        start, k = self.window
        if self.matrix.shape != (self.site_dim**k, self.site_dim**k):
            raise ShapeError(f"matrix shape {self.matrix.shape} does not fit window {self.window}")

    @property
    def start(self) -> int:
        return self.window[0]

    @property
    def length(self) -> int:
        return self.window[1]


@dataclass(frozen=True)
class SchmidtSpectrum:
    cut: int
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "coefficients", np.array(self.coefficients, dtype=float))

    @property
    def rank(self) -> int:
        return numerical_rank(self.coefficients)


def product_state(local_states: Sequence[np.ndarray]) -> Mps:
    """Bond-one MPS from a list of single-site vectors (each normalized)."""
    vecs = [np.asarray(v, dtype=complex).reshape(-1) for v in local_states]
    d = vecs[0].size
    ts = [v.reshape(1, d, 1) for v in vecs]
    return Mps(d, ts)


def basis_state(digits: Sequence[int], d: int = 2) -> Mps:
    vecs = []
    for x in digits:
        v = np.zeros(d, dtype=complex)
        v[int(x)] = 1.0
        vecs.append(v)
    return product_state(vecs)


def random_mps(n: int, d: int, chi: int, rng: np.random.Generator) -> Mps:
    """Random normalized MPS with bond dimensions min(chi, d^m, d^(n-m))."""
    bonds = [1] + [min(chi, d**m, d ** (n - m)) for m in range(1, n)] + [1]
    ts = []
    for i in range(n):
        shape = (bonds[i], d, bonds[i + 1])
        ts.append(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return canonicalize(Mps(d, ts), 0).with_log_norm(0.0)


def normalize(state: Mps) -> Mps:
    return canonicalize(state, 0).with_log_norm(0.0)


def from_dense(amplitudes, d: int, n: int) -> Mps:
    vec = np.asarray(amplitudes, dtype=complex).reshape(-1)
    if vec.size != d**n:
        raise ShapeError(f"vector length {vec.size} != {d}^{n}")
    nrm = np.linalg.norm(vec)
    if nrm == 0:
        raise ContractViolation("cannot build an MPS from the zero vector")
    ts = chain_from_dense(vec / nrm, [d] * n)
    return Mps(d, ts, float(np.log(nrm)), "mixed", n - 1)


def to_dense(state: Mps, cap: int = DENSE_CAP) -> np.ndarray:
    size = state.site_dim**state.n_sites
    if size > cap:
        raise ResourceError(f"dense vector of {size} entries exceeds cap {cap}")
    return chain_to_dense(state.tensors) * np.exp(state.log_norm)


def canonicalize(state: Mps, center: int) -> Mps:
    n = state.n_sites
    if not 0 <= center < n:
        raise IndexError(f"center {center} out of range for {n} sites")
    ts, lg = chain_mixed(state.tensors, center)
    if not np.isfinite(lg):
        raise ContractViolation("cannot canonicalize the zero state")
    form = "right" if center == 0 else ("left" if center == n - 1 else "mixed")
    return Mps(state.site_dim, ts, state.log_norm + lg, form, center)


def is_left_isometry(t: np.ndarray, tol: float = 1e-10) -> bool:
    l, d, r = t.shape
    m = t.reshape(l * d, r)
    return bool(np.allclose(m.conj().T @ m, np.eye(r), atol=tol))


def is_right_isometry(t: np.ndarray, tol: float = 1e-10) -> bool:
    l, d, r = t.shape
    m = t.reshape(l, d * r)
    return bool(np.allclose(m @ m.conj().T, np.eye(l), atol=tol))


def schmidt_spectrum(state: Mps, cut: int) -> SchmidtSpectrum:
    n = state.n_sites
    if not 0 <= cut < n - 1:
        raise IndexError(f"cut {cut} out of range for {n} sites")
    ts, _ = chain_mixed(state.tensors, cut)
    l, d, r = ts[cut].shape
    s = svd(ts[cut].reshape(l * d, r)).s
    return SchmidtSpectrum(cut, s / np.linalg.norm(s))


def all_schmidt_spectra(state: Mps) -> list[SchmidtSpectrum]:
    return [SchmidtSpectrum(i, s) for i, s in enumerate(chain_schmidt_values(state.tensors))]


def truncate_at_cuts(state: Mps, cuts: Sequence[int], chi_p: int) -> tuple[Mps, list[float]]:
    """Keep the largest ``chi_p`` Schmidt values at each listed cut, left to right.

    Returns the normalized result and, per cut in the given order, the
    discarded squared weight measured on the state at that stage.
    """
    if chi_p < 1:
        raise ContractViolation("chi_p must be at least 1")
    n = state.n_sites
    order = sorted(set(int(c) for c in cuts))
    for c in order:
        if not 0 <= c < n - 1:
            raise IndexError(f"cut {c} out of range for {n} sites")
    if not order:
        return normalize(state), []
    ts, _ = chain_mixed(state.tensors, order[0])
    weights: dict[int, float] = {}
    targets = set(order)
    for i in range(order[0], order[-1] + 1):
        l, d, r = ts[i].shape
        res = svd(ts[i].reshape(l * d, r))
        s = res.s
        keep = max(1, numerical_rank(s))
        if i in targets:
            tot = float(np.sum(s**2))
            k = min(keep, chi_p)
            weights[i] = float(np.sum(s[k:] ** 2) / tot) if tot > 0 else 0.0
            keep = k
        s_k = s[:keep] / np.linalg.norm(s[:keep])
        ts[i] = res.u[:, :keep].reshape(l, d, keep)
        ts[i + 1] = np.tensordot(s_k[:, None] * res.vdag[:keep], ts[i + 1], axes=(1, 0))
    out = Mps(state.site_dim, ts, 0.0, "mixed", order[-1] + 1)
    return out, [weights[int(c)] for c in cuts]


def compress(state: Mps, chi: int, rtol: float = RANK_RTOL) -> Mps:
    """Normalized SVD compression of every bond to at most ``chi``."""
    ts, lg = chain_right_orthonormalize(state.tensors, 0)
    ts[0] = ts[0] / np.linalg.norm(ts[0])
    for i in range(len(ts) - 1):
        l, d, r = ts[i].shape
        res = svd(ts[i].reshape(l * d, r))
        k = min(chi, max(1, numerical_rank(res.s, rtol)))
        s = res.s[:k] / np.linalg.norm(res.s[:k])
        ts[i] = res.u[:, :k].reshape(l, d, k)
        ts[i + 1] = np.tensordot(s[:, None] * res.vdag[:k], ts[i + 1], axes=(1, 0))
    return Mps(state.site_dim, ts, 0.0, "left", len(ts) - 1)


def add(a: Mps, b: Mps, ca: complex = 1.0, cb: complex = 1.0) -> Mps:
    """Direct-sum superposition ca|a> + cb|b> without compression."""
    if a.n_sites != b.n_sites or a.site_dim != b.site_dim:
        raise ShapeError("add needs states with equal N and d")
    top = max(a.log_norm, b.log_norm)
    fa = ca * np.exp(a.log_norm - top)
    fb = cb * np.exp(b.log_norm - top)
    n = a.n_sites
    if n == 1:
        return Mps(a.site_dim, [fa * a.tensors[0] + fb * b.tensors[0]], top)
    ts = []
    for i, (x, y) in enumerate(zip(a.tensors, b.tensors)):
        if i == 0:
            t = np.concatenate([fa * x, fb * y], axis=2)
        elif i == n - 1:
            t = np.concatenate([x, y], axis=0)
        else:
            lx, d, rx = x.shape
            ly, _, ry = y.shape
            t = np.zeros((lx + ly, d, rx + ry), dtype=complex)
            t[:lx, :, :rx] = x
            t[lx:, :, rx:] = y
        ts.append(t)
    return Mps(a.site_dim, ts, top)


def add_many(states: Sequence[Mps], coeffs: Sequence[complex]) -> Mps:
    """Direct sum of several states with the given coefficients."""
    acc = _scaled(states[0], coeffs[0])
    for s, c in zip(states[1:], coeffs[1:]):
        acc = add(acc, s, 1.0, c)
    return acc


def _scaled(s: Mps, c: complex) -> Mps:
    ts = list(s.tensors)
    ts[0] = ts[0] * c
    return Mps(s.site_dim, ts, s.log_norm)


def inner(a: Mps, b: Mps) -> complex:
    if a.n_sites != b.n_sites or a.site_dim != b.site_dim:
        raise ShapeError("inner needs states with equal N and d")
    return chain_inner(a.tensors, b.tensors) * np.exp(a.log_norm + b.log_norm)


def rdm(state: Mps, window: tuple[int, int], cap: int = RDM_CAP) -> DensityMatrix:
    start, k = int(window[0]), int(window[1])
    n = state.n_sites
    if k < 1 or start < 0 or start + k > n:
        raise IndexError(f"window {window} out of range for {n} sites")
    if state.site_dim**k > cap:
        raise ResourceError(f"RDM dimension {state.site_dim}^{k} exceeds cap {cap}")
    return DensityMatrix((start, k), chain_rdm(state.tensors, start, start + k), state.site_dim)


def apply_local_operator(state: Mps, op: LocalOp, window: tuple[int, int],
                         cap_bytes: int | None = None) -> Mps:
    """Apply ``op`` on sites start..start+width-1.

    Dense operators are limited by a byte budget; callables are matrix-free
    and only bounded by the contracted window tensor.
    """
    start, width = int(window[0]), int(window[1])
    n = state.n_sites
    if width < 1 or start < 0 or start + width > n:
        raise IndexError(f"window {window} out of range for {n} sites")
    dim = state.site_dim**width
    cap = op_cap_bytes() if cap_bytes is None else cap_bytes
    if isinstance(op, np.ndarray) or not callable(op):
        m = np.asarray(op, dtype=complex)
        if m.shape != (dim, dim):
            raise ShapeError(f"operator shape {m.shape} does not match {state.site_dim}^{width}")
        if m.nbytes > cap:
            raise ResourceError(f"dense {dim}x{dim} operator exceeds byte cap {cap}")
        op = m
    ts = chain_apply(state.tensors, op, start, width)
    return Mps(state.site_dim, ts, state.log_norm)


def window_rdms(state: Mps, k: int, cap: int = RDM_CAP):
    """Iterate (start, rdm matrix) over all windows of length k."""
    if state.site_dim**k > cap:
        raise ResourceError(f"RDM dimension {state.site_dim}^{k} exceeds cap {cap}")
    if not 1 <= k <= state.n_sites:
        raise IndexError(f"window length {k} out of range")
    yield from chain_window_rdms(state.tensors, k)


def rdm_sites(state: Mps, sites: Sequence[int], cap: int = RDM_CAP) -> np.ndarray:
    """RDM of a possibly non-contiguous site set, factors in increasing site order."""
    if state.site_dim ** len(set(sites)) > cap:
        raise ResourceError(f"RDM on {len(set(sites))} sites exceeds cap {cap}")
    return chain_rdm_sites(state.tensors, sites)


def bond_profile(state: Mps) -> list[int]:
    return [numerical_rank(s) for s in chain_schmidt_values(state.tensors)]


def expectation(state: Mps, op: np.ndarray, window: tuple[int, int]) -> complex:
    rho = rdm(state, window).matrix
    return complex(np.trace(rho @ op))


def coarse_grain(state: Mps, factor: int) -> Mps:
    """Merge each run of ``factor`` adjacent sites into one site of dim d^factor."""
    n = state.n_sites
    if factor < 1 or n % factor:
        raise ShapeError(f"cannot group {n} sites in blocks of {factor}")
    ts = [chain_window_tensor(state.tensors, i, i + factor) for i in range(0, n, factor)]
    return Mps(state.site_dim**factor, ts, state.log_norm)


def complex_to_pairs(arr: np.ndarray) -> list:
    """Nested lists with each complex entry written as [re, im]."""
    a = np.asarray(arr, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def to_json(state: Mps) -> str:
    payload = {
        "d": state.site_dim,
        "N": state.n_sites,
        "log_norm": float(state.log_norm),
        "tensors": [complex_to_pairs(t) for t in state.tensors],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def from_json(text: str) -> Mps:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"invalid MPS JSON: {exc}") from exc
    for key in ("d", "N", "log_norm", "tensors"):
        if key not in data:
            raise ContractViolation(f"MPS JSON is missing key {key!r}")
    d, n = int(data["d"]), int(data["N"])
    if len(data["tensors"]) != n:
        raise ShapeError(f"N={n} but {len(data['tensors'])} tensors given")
    ts = []
    for i, raw in enumerate(data["tensors"]):
        try:
            arr = np.asarray(raw, dtype=float)
        except ValueError as exc:
            raise ShapeError(f"ragged tensor at site {i}") from exc
        if arr.ndim != 4 or arr.shape[3] != 2:
            raise ShapeError(f"site {i} must be a [left][phys][right][re,im] array")
        ts.append(arr[..., 0] + 1j * arr[..., 1])
    return Mps(d, ts, float(data["log_norm"]))
