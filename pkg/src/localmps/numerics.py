"""Dense complex linear algebra kernel shared by the rest of the package.

All routines are pure functions on numpy arrays. Ranks are always judged
relative to the largest singular/eigen value with ``RANK_RTOL``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

RANK_RTOL = 1e-12
HERMITIAN_TOL = 1e-10
PSD_CLAMP = 1e-10


class LocalMpsError(Exception):
    """Base class for all package errors."""


class ShapeError(LocalMpsError, ValueError):
    """Dimensions of the inputs do not fit together."""


class ContractViolation(LocalMpsError, ValueError):
    """An input violated a documented precondition."""


class DomainError(LocalMpsError, ValueError):
    """A parameter lies outside the supported range."""


class ResourceError(LocalMpsError, MemoryError):
    """A configured size cap would be exceeded."""


class DecompositionError(LocalMpsError, ArithmeticError):
    """A matrix factorization failed to converge."""


class ConstructionError(LocalMpsError, RuntimeError):
    """A constructive procedure could not be completed."""


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vdag: np.ndarray

    def rank(self, rtol: float = RANK_RTOL) -> int:
        return numerical_rank(self.s, rtol)


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=complex)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractViolation("matrix has non-finite entries")
    return m


def numerical_rank(values: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Count values above ``rtol`` times the largest absolute value."""
    v = np.abs(np.asarray(values, dtype=float))
    if v.size == 0:
        return 0
    top = v.max()
    if top == 0.0:
        return 0
    return int(np.count_nonzero(v > rtol * top))


def svd(a) -> SvdResult:
    """Thin SVD with singular values in nonincreasing order."""
    m = as_matrix(a)
    try:
        u, s, vh = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd")
    except (np.linalg.LinAlgError, ValueError):
        try:
            u, s, vh = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise DecompositionError(
                f"SVD did not converge for a {m.shape[0]}x{m.shape[1]} matrix"
            ) from exc
    return SvdResult(u, s, vh)


def check_hermitian(a: np.ndarray, tol: float = HERMITIAN_TOL) -> None:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.conj().T)) > tol * scale:
        raise ContractViolation("matrix is not Hermitian within tolerance")


def eigh_psd(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian PSD matrix, eigenvalues ascending.

    Tiny negative eigenvalues (above ``-PSD_CLAMP``) are set to zero.
    """
    m = as_matrix(a)
    check_hermitian(m)
    h = 0.5 * (m + m.conj().T)
    try:
        w, v = scipy.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(
            f"eigendecomposition did not converge for a {m.shape[0]}x{m.shape[1]} matrix"
        ) from exc
    w = np.where((w < 0) & (w > -PSD_CLAMP), 0.0, w)
    return w, v


def polar_unitary(a) -> np.ndarray:
    """Unitary U maximizing Re Tr(U a), namely W V^dagger for a = V S W^dagger."""
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"polar_unitary needs a square matrix, got {m.shape}")
    r = svd(m)
    return r.vdag.conj().T @ r.u.conj().T


def partial_trace(rho, dims: Sequence[int], keep: Iterable[int]) -> np.ndarray:
    """Trace out every tensor factor not listed in ``keep``.

    The kept factors appear in the output in increasing order.
    """
    m = as_matrix(rho)
    dims = [int(x) for x in dims]
    total = int(np.prod(dims)) if dims else 1
    if m.shape != (total, total):
        raise ShapeError(f"dims {dims} imply size {total}, matrix is {m.shape}")
    keep = sorted(set(int(k) for k in keep))
    n = len(dims)
    if any(k < 0 or k >= n for k in keep):
        raise ShapeError(f"keep indices {keep} out of range for {n} factors")
    t = m.reshape(dims + dims)
    traced = [i for i in range(n) if i not in keep]
    # einsum over matched ket/bra indices of traced factors
    letters = [chr(ord("a") + i) for i in range(2 * n)]
    ket = letters[:n]
    bra = letters[n:]
    for i in traced:
        bra[i] = ket[i]
    out = "".join(ket[i] for i in keep) + "".join(bra[i] for i in keep)
    res = np.einsum("".join(ket) + "".join(bra) + "->" + out, t)
    dk = int(np.prod([dims[i] for i in keep])) if keep else 1
    return res.reshape(dk, dk)


def psd_sqrt(a) -> np.ndarray:
    w, v = eigh_psd(a)
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w) @ v.conj().T


def orth_complement(basis: np.ndarray, dim: int) -> np.ndarray:
    """Orthonormal basis of the complement of the column span of ``basis``."""
    if basis.size == 0:
        return np.eye(dim, dtype=complex)
    u, s, _ = np.linalg.svd(basis, full_matrices=True)
    return u[:, numerical_rank(s):]


class Householder:
    """Unitary phase * (I - 2 w w^dagger) whose first column is a given unit vector.

    Kept in factored form so large instances can be applied without ever
    building the dense matrix.
    """

    def __init__(self, vec: np.ndarray):
        v = np.asarray(vec, dtype=complex).ravel()
        nrm = np.linalg.norm(v)
        if nrm == 0:
            raise ContractViolation("cannot complete a zero vector to a unitary")
        v = v / nrm
        self.column = v
        self.dim = v.size
        self.phase = v[0] / abs(v[0]) if abs(v[0]) > 0 else 1.0 + 0j
        w = v.copy()
        w[0] -= self.phase
        wn = np.linalg.norm(w)
        # w = 0 means v = phase * e0; then U = diag(phase, 1, ..., 1)
        self.w = w / wn if wn > 1e-14 else None

    def apply(self, cols: np.ndarray) -> np.ndarray:
        if self.w is None:
            out = np.array(cols, dtype=complex, copy=True)
            out[0] *= self.phase
            return out
        return self.phase * (cols - 2.0 * np.outer(self.w, self.w.conj() @ cols))

    def apply_adjoint(self, cols: np.ndarray) -> np.ndarray:
        if self.w is None:
            out = np.array(cols, dtype=complex, copy=True)
            out[0] *= np.conj(self.phase)
            return out
        return np.conj(self.phase) * (cols - 2.0 * np.outer(self.w, self.w.conj() @ cols))

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.dim, dtype=complex))


def unitary_with_first_column(vec: np.ndarray) -> np.ndarray:
    """Dense unitary whose first column is the normalized ``vec``."""
    return Householder(vec).matrix()


def random_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_state(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return v / np.linalg.norm(v)
