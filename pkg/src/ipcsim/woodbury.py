"""Low-rank corrections of the level-0 subdomain inverses.

Between preconditioner rebuilds, new or stiffening contacts add rank-one
terms u u^T to the model Hessian.  Rather than re-inverting subdomain
blocks, each subdomain solves through the capacitance system: with base
inverse B and local update columns U,

    (M + U U^T)^{-1} g = B g - W lam,   W = B U,
    (I + U^T W) lam = U^T B g.

Updates are restricted to each owning subdomain's rows; the coupling
between subdomains introduced by a shared update is dropped, which only
affects preconditioner quality, never correctness of the outer solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NotSpdError


@dataclass
class SubdomainUpdate:
    """Update columns for one subdomain plus the factorized capacitance."""

    U: np.ndarray  # (m, k) local update columns
    W: np.ndarray  # (m, k) = B U
    cap: np.ndarray  # (k, k) = I + U^T W
    cap_chol: tuple = field(repr=False, default=None)


@dataclass
class WoodburyState:
    per_subdomain: dict  # subdomain id -> SubdomainUpdate
    K: int

    @classmethod
    def empty(cls, K):
        return cls(per_subdomain={}, K=K)


def _local_columns(candidates, dof_index, m):
    """Stack each candidate's u restricted to this subdomain's dofs."""
    U = np.zeros((m, len(candidates)))
    for col, cand in enumerate(candidates):
        gdofs = (3 * cand.verts[:, None] + np.arange(3)).reshape(-1)
        pos = np.searchsorted(dof_index, gdofs)
        inside = (pos < m) & (dof_index[np.minimum(pos, m - 1)] == gdofs)
        U[pos[inside], col] = cand.u.reshape(-1)[inside]
    return U


def build_update(hier, candidates_by_subdomain, K=8) -> WoodburyState:
    """Capacitance factorizations for every subdomain holding candidates.

    candidates_by_subdomain maps subdomain id -> ranked candidate list;
    lists longer than K are truncated to the leading K entries.
    """
    state = {}
    for d, cands in sorted(candidates_by_subdomain.items()):
        cands = cands[:K]
        if not cands:
            continue
        idx = hier.dofs[d]
        U = _local_columns(cands, idx, len(idx))
        W = hier.B[d] @ U
        cap = np.eye(U.shape[1]) + U.T @ W
        cap = 0.5 * (cap + cap.T)
        try:
            chol = scipy.linalg.cho_factor(cap)
        except scipy.linalg.LinAlgError as e:
            raise NotSpdError("capacitance-not-spd", str(e)) from e
        state[d] = SubdomainUpdate(U=U, W=W, cap=cap, cap_chol=chol)
    return WoodburyState(per_subdomain=state, K=K)


def apply_subdomain(B_d, wb_d: SubdomainUpdate, g_d):
    """(M_d + U U^T)^{-1} g_d through the base inverse B_d = M_d^{-1}."""
    z = B_d @ g_d
    if wb_d is None or wb_d.U.shape[1] == 0:
        return z
    lam = scipy.linalg.cho_solve(wb_d.cap_chol, wb_d.U.T @ z)
    return z - wb_d.W @ lam
