"""Joint states with prescribed marginals and small rank ("entropy absorption").

Given tau_A and tau_B of equal trace, the rounds below pair the smallest
eigenvalues of the residual marginals, emit one unnormalized pure vector per
round, and subtract its marginals. The result

    sigma_AB = sum_j |u_j><u_j|

has marginals tau_A and tau_B and rank at most max(rank tau_A, rank tau_B).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mps import DensityMatrix
from .numerics import (
    ConstructionError,
    ContractViolation,
    DomainError,
    as_matrix,
    check_hermitian,
    svd,
)

ZERO_TOL = 1e-12
TRACE_TOL = 1e-10


@dataclass(frozen=True)
class AbsorbResult:
    """Joint state as a sum of outer products of ``pure_components``."""

    joint: np.ndarray = field(repr=False)
    rounds: int
    pure_components: tuple = field(repr=False)
    dims: tuple[int, ...] = ()

    @property
    def factor(self) -> np.ndarray:
        """Matrix whose columns are the pure components (joint = F F^dagger)."""
        if not self.pure_components:
            return np.zeros((self.joint.shape[0], 0), dtype=complex)
        return np.column_stack(self.pure_components)


def _spectrum(factor: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero eigenpairs of F F^dagger, eigenvalues ascending."""
    if factor.shape[1] == 0:
        return np.zeros(0), np.zeros((factor.shape[0], 0), dtype=complex)
    r = svd(factor)
    lam = r.s**2
    keep = lam > tol
    lam, vec = lam[keep], r.u[:, keep]
    order = np.argsort(lam, kind="stable")
    return lam[order], vec[:, order]


def _psd_factor(m: np.ndarray) -> np.ndarray:
    check_hermitian(m)
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w[0] < -1e-10 * scale:
        raise ContractViolation(f"marginal is not PSD (min eigenvalue {w[0]:.3e})")
    w = np.clip(w, 0.0, None)
    return v * np.sqrt(w)


def absorb_factored(fa: np.ndarray, fb: np.ndarray) -> tuple[list[np.ndarray], int]:
    """Core rounds on factor matrices (tau = F F^dagger); returns (components, rounds)."""
    tr_a = float(np.sum(np.abs(fa) ** 2))
    tr_b = float(np.sum(np.abs(fb) ** 2))
    if abs(tr_a - tr_b) > TRACE_TOL * max(1.0, tr_a, tr_b):
        raise DomainError(f"marginal traces differ: {tr_a:.12g} vs {tr_b:.12g}")
    tol = ZERO_TOL * max(tr_a, tr_b, 1e-300)
    lam, s_vecs = _spectrum(fa, tol)
    mu, r_vecs = _spectrum(fb, tol)
    cap = max(lam.size, mu.size) + 2
    components: list[np.ndarray] = []
    rounds = 0
    while lam.size or mu.size:
        if rounds >= cap:
            raise ConstructionError(
                f"absorption did not terminate within {cap} rounds "
                f"(residual ranks {lam.size}, {mu.size})"
            )
        a, b = lam.size, mu.size
        m = min(a, b)
        if m == 0:
            raise ConstructionError("one residual marginal vanished before the other")
        c2 = np.minimum(lam[:m], mu[:m])
        u = np.zeros(s_vecs.shape[0] * r_vecs.shape[0], dtype=complex)
        for i in range(m):
            u += np.sqrt(c2[i]) * np.kron(s_vecs[:, i], r_vecs[:, i])
        components.append(u)
        rounds += 1
        # the residuals stay diagonal in the current eigenbases
        lam = np.concatenate([lam[:m] - c2, lam[m:]])
        mu = np.concatenate([mu[:m] - c2, mu[m:]])
        ka, kb = lam > tol, mu > tol
        lam, s_vecs = lam[ka], s_vecs[:, ka]
        mu, r_vecs = mu[kb], r_vecs[:, kb]
        oa, ob = np.argsort(lam, kind="stable"), np.argsort(mu, kind="stable")
        lam, s_vecs = lam[oa], s_vecs[:, oa]
        mu, r_vecs = mu[ob], r_vecs[:, ob]
        if lam.size + mu.size > max(a, b):
            raise ConstructionError("combined residual rank failed to decrease")
        if abs(lam.sum() - mu.sum()) > TRACE_TOL * max(1.0, tr_a):
            raise ConstructionError("residual traces drifted apart")
    return components, rounds


def _as_matrix(x) -> np.ndarray:
    return as_matrix(x.matrix if isinstance(x, DensityMatrix) else x)


def absorb_entropy(tau_a, tau_b) -> AbsorbResult:
    ma, mb = _as_matrix(tau_a), _as_matrix(tau_b)
    comps, rounds = absorb_factored(_psd_factor(ma), _psd_factor(mb))
    dim = ma.shape[0] * mb.shape[0]
    joint = np.zeros((dim, dim), dtype=complex)
    for u in comps:
        joint += np.outer(u, u.conj())
    return AbsorbResult(joint, rounds, tuple(comps), (ma.shape[0], mb.shape[0]))


def absorb_chain(states: Sequence) -> AbsorbResult:
    """Left fold of absorb_entropy over the inputs, in order."""
    if not states:
        raise ContractViolation("absorb_chain needs at least one state")
    first = _as_matrix(states[0])
    factor = _psd_factor(first)
    dims = [first.shape[0]]
    rounds = 0
    comps: list[np.ndarray] = [factor[:, i] for i in range(factor.shape[1])]
    for s in states[1:]:
        m = _as_matrix(s)
        comps, rounds = absorb_factored(np.column_stack(comps) if comps else factor[:, :0],
                                        _psd_factor(m))
        dims.append(m.shape[0])
    dim = int(np.prod(dims))
    joint = np.zeros((dim, dim), dtype=complex)
    for u in comps:
        joint += np.outer(u, u.conj())
    return AbsorbResult(joint, rounds, tuple(comps), tuple(dims))
