"""Multilevel additive Schwarz preconditioner.

The domain is split into small non-overlapping subdomains by Morton order
of the rest positions.  Level 0 stores a dense inverse of each subdomain
block of the frozen Hessian; coarse levels restrict the Hessian through
rigid-translation aggregation (per-coordinate averaging over groups of
subdomains) and cache dense inverses of the restricted systems.  Applying
the preconditioner sums the level-0 local solves and every coarse-level
correction:

    z = sum_d S_d^T Btilde_d S_d g + sum_l C_l^T M_l^{-1} C_l g

Btilde_d is the base inverse possibly corrected by per-subdomain low-rank
contact updates (see the woodbury module).  Everything here is a frozen
snapshot: it is rebuilt only on solver restarts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import NotSpdError


def _part1by2(v):
    # spread the low 21 bits of v so they occupy every third bit
    v = v.astype(np.uint64)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_codes(points, bits=10):
    """Interleaved-bit codes of points quantized over their bounding box."""
    points = np.asarray(points, dtype=float)
    lo = points.min(axis=0)
    extent = points.max(axis=0) - lo
    extent[extent == 0.0] = 1.0
    q = ((points - lo) / extent * (2**bits - 1)).astype(np.uint64)
    return _part1by2(q[:, 0]) | (_part1by2(q[:, 1]) << np.uint64(1)) | (
        _part1by2(q[:, 2]) << np.uint64(2)
    )


@dataclass
class Partition:
    """Non-overlapping vertex subdomains, each at most block_size large."""

    subdomain_of: np.ndarray  # (N,) vertex -> subdomain id
    selection: list  # per subdomain, sorted vertex id array
    D: int
    block_size: int


def partition_domain(mesh, block_size) -> Partition:
    """Chunk the Morton-sorted vertices into consecutive blocks."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    codes = morton_codes(mesh.rest_positions)
    order = np.argsort(codes, kind="stable")
    n = len(order)
    D = max(1, math.ceil(n / block_size))
    subdomain_of = np.empty(n, dtype=np.int64)
    selection = []
    for d in range(D):
        verts = np.sort(order[d * block_size : (d + 1) * block_size])
        subdomain_of[verts] = d
        selection.append(verts)
    return Partition(subdomain_of=subdomain_of, selection=selection, D=D, block_size=block_size)


def _dofs_of(verts):
    return (3 * verts[:, None] + np.arange(3)).reshape(-1)


def _spd_inverse(A, err_code):
    try:
        c, low = scipy.linalg.cho_factor(A)
    except scipy.linalg.LinAlgError as e:
        raise NotSpdError(err_code, str(e)) from e
    inv = scipy.linalg.cho_solve((c, low), np.eye(A.shape[0]))
    return 0.5 * (inv + inv.T)


@dataclass
class MasHierarchy:
    """Frozen preconditioner snapshot built from one Hessian."""

    partition: Partition
    B: list  # per-subdomain dense inverses
    dofs: list  # per-subdomain dof index arrays
    coarsen: list  # per-level aggregation matrices (3A_l x 3N), csr
    coarse_inv: list  # per-level dense inverses of C H C^T
    L: int  # number of coarse levels actually built
    n: int
    _batches: list = field(default=None, repr=False)

    def size_batches(self):
        """Subdomains grouped by equal dof count, for batched base solves."""
        if self._batches is None:
            by_size = {}
            for d, idx in enumerate(self.dofs):
                by_size.setdefault(len(idx), []).append(d)
            self._batches = [
                (
                    np.array(ds),
                    np.stack([self.dofs[d] for d in ds]),
                    np.stack([self.B[d] for d in ds]),
                )
                for _, ds in sorted(by_size.items())
            ]
        return self._batches


def _aggregation_matrix(groups, n_verts):
    """Per-coordinate averaging over each group's vertex set."""
    rows, cols, vals = [], [], []
    for a, verts in enumerate(groups):
        w = 1.0 / len(verts)
        for c in range(3):
            rows.append(np.full(len(verts), 3 * a + c))
            cols.append(3 * verts + c)
            vals.append(np.full(len(verts), w))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * len(groups), 3 * n_verts),
    ).tocsr()


def build_hierarchy(H_base, partition: Partition, L=2, coarse_block=4) -> MasHierarchy:
    """Dense subdomain inverses plus Galerkin-restricted coarse levels.

    Coarse level l groups coarse_block units of level l-1 (level 0 units are
    the subdomains themselves).  A level that does not reduce the unit count
    is skipped, so a single-subdomain domain builds no coarse levels.
    """
    n = H_base.shape[0]
    H = H_base.tocsr() if sp.issparse(H_base) else sp.csr_matrix(H_base)

    B, dofs = [], []
    for verts in partition.selection:
        idx = _dofs_of(verts)
        block = H[np.ix_(idx, idx)].toarray()
        B.append(_spd_inverse(block, "non-spd-subdomain"))
        dofs.append(idx)

    coarsen, coarse_inv = [], []
    units = list(partition.selection)  # vertex sets of the current level
    for _ in range(L):
        n_agg = math.ceil(len(units) / coarse_block)
        if n_agg == len(units):
            break
        groups = [
            np.concatenate(units[a * coarse_block : (a + 1) * coarse_block])
            for a in range(n_agg)
        ]
        C = _aggregation_matrix(groups, n // 3)
        M = (C @ H @ C.T).toarray()
        coarse_inv.append(_spd_inverse(0.5 * (M + M.T), "non-spd-subdomain"))
        coarsen.append(C)
        units = groups

    return MasHierarchy(
        partition=partition,
        B=B,
        dofs=dofs,
        coarsen=coarsen,
        coarse_inv=coarse_inv,
        L=len(coarsen),
        n=n,
    )


def apply_preconditioner(hier: MasHierarchy, wb, g):
    """z = sum of subdomain solves (low-rank corrected) + coarse corrections.

    wb may be None or a WoodburyState; subdomains without updates use the
    plain base inverse.
    """
    from . import woodbury as wbmod

    z = np.zeros_like(g)
    updated = wb.per_subdomain if wb is not None else {}

    for ds, idx, Bstack in hier.size_batches():
        vals = np.einsum("dab,db->da", Bstack, g[idx])
        if updated:
            for row, d in enumerate(ds):
                if int(d) in updated:
                    vals[row] = wbmod.apply_subdomain(
                        hier.B[d], updated[int(d)], g[idx[row]]
                    )
        z[idx.reshape(-1)] += vals.reshape(-1)

    for C, Minv in zip(hier.coarsen, hier.coarse_inv):
        z += C.T @ (Minv @ (C @ g))
    return z
