"""Barrier function, constraint sets and contact-change classification.

A contact pair is identified by a type-tagged tuple of vertex ids in
canonical order, so the same geometric pair maps to the same key in every
iteration:

    ("pt", point_id, (t0, t1, t2))   triangle ids sorted ascending
    ("ee", (a0, a1), (b0, b1))       endpoints sorted, edges sorted

The stiffness k stored on a pair is kappa * b''(d), i.e. it already includes
the barrier weight, so ranking candidates by stiffness change ranks by the
actual Hessian magnitude they contribute.

Rank-one update vectors use the raw (unnormalized) stacked distance gradient;
the unit-normalized direction is kept separately and only used to compare
contact normals between the frozen base state and the current state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PenetrationError
from . import geometry as geo


# ---------------------------------------------------------------------------
# barrier


def barrier_derivatives(d, d_hat, kappa):
    """(b, b', b'') of the scaled barrier kappa * b(d) at distance d.

    b(d) = -(d - d_hat)^2 * ln(d / d_hat) inside (0, d_hat), zero beyond.
    Raises penetration-detected when d <= 0.
    """
    if d <= 0.0:
        raise PenetrationError(f"distance {d:g} <= 0")
    if d >= d_hat:
        return 0.0, 0.0, 0.0
    t = d - d_hat
    ln = math.log(d / d_hat)
    b = -t * t * ln
    db = -2.0 * t * ln - t * t / d
    ddb = -2.0 * ln - 4.0 * t / d + t * t / (d * d)
    return kappa * b, kappa * db, kappa * ddb


def barrier_batch(d, d_hat, kappa):
    """Vectorized (b, b', b'') for an array of distances inside the zone."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0.0):
        raise PenetrationError("contact distance <= 0")
    t = d - d_hat
    active = d < d_hat
    ln = np.zeros_like(d)
    np.log(np.where(active, d / d_hat, 1.0), out=ln)
    b = np.where(active, -t * t * ln, 0.0)
    db = np.where(active, -2.0 * t * ln - t * t / d, 0.0)
    ddb = np.where(active, -2.0 * ln - 4.0 * t / d + t * t / (d * d), 0.0)
    return kappa * b, kappa * db, kappa * ddb


# ---------------------------------------------------------------------------
# pairs and sets


@dataclass
class ContactPair:
    """One active barrier constraint.

    n is the unit stacked-gradient direction restricted to free vertices
    (used for normal-rotation tests); grad is the raw restricted gradient
    used for energy derivatives and rank-one updates.
    """

    key: tuple
    verts: np.ndarray  # (4,) vertex ids in canonical order
    d: float
    grad: np.ndarray  # (4, 3) raw d-gradient, pinned rows zeroed
    n: np.ndarray  # (4, 3) unit version of grad
    k: float  # kappa * b''(d)


@dataclass
class ConstraintSet:
    """Active pairs at the current iterate plus the frozen base snapshot."""

    current: dict
    base: dict
    d_hat: float
    kappa: float
    _arrays: tuple = field(default=None, repr=False)

    def arrays(self):
        """Stacked (verts, grad, d, k) over current pairs in key order."""
        if self._arrays is None:
            pairs = [self.current[k] for k in sorted(self.current)]
            if pairs:
                verts = np.stack([p.verts for p in pairs])
                grad = np.stack([p.grad for p in pairs])
                d = np.array([p.d for p in pairs])
                k = np.array([p.k for p in pairs])
            else:
                verts = np.zeros((0, 4), dtype=np.int64)
                grad = np.zeros((0, 4, 3))
                d = np.zeros(0)
                k = np.zeros(0)
            self._arrays = (verts, grad, d, k)
        return self._arrays


def compute_constraint_set(x, surface: geo.SurfaceMesh, d_hat, kappa, dirichlet):
    """All PT/EE pairs with distance < d_hat at positions x.

    x : (N, 3) or (3N,) positions
    dirichlet : (N,) bool pinned mask; pinned rows of the stored gradients
    are zeroed before normalization.

    Returns dict key -> ContactPair.  Raises penetration-detected when any
    candidate pair reaches distance <= 0.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    pt_pairs, ee_pairs = geo.broad_phase(x, surface, 0.0, d_hat)
    out = {}

    if len(pt_pairs):
        v_ids = pt_pairs[:, 0]
        tris = surface.triangles[pt_pairs[:, 1]]
        order = np.argsort(tris, axis=1)
        tris_sorted = np.take_along_axis(tris, order, axis=1)
        d, grad = geo.pt_distance_batch(x[v_ids], x[tris_sorted[:, 0]], x[tris_sorted[:, 1]], x[tris_sorted[:, 2]])
        keep = d < d_hat
        if np.any(d <= 0.0):
            raise PenetrationError("point-triangle distance <= 0")
        for i in np.nonzero(keep)[0]:
            verts = np.concatenate([[v_ids[i]], tris_sorted[i]])
            key = ("pt", int(v_ids[i]), tuple(int(t) for t in tris_sorted[i]))
            out[key] = _make_pair(key, verts, float(d[i]), grad[i], d_hat, kappa, dirichlet)

    if len(ee_pairs):
        ea = surface.edges[ee_pairs[:, 0]]
        eb = surface.edges[ee_pairs[:, 1]]
        d, grad = geo.ee_distance_batch(x[ea[:, 0]], x[ea[:, 1]], x[eb[:, 0]], x[eb[:, 1]])
        keep = d < d_hat
        if np.any(d <= 0.0):
            raise PenetrationError("edge-edge distance <= 0")
        for i in np.nonzero(keep)[0]:
            verts = np.concatenate([ea[i], eb[i]])
            key = ("ee", (int(ea[i, 0]), int(ea[i, 1])), (int(eb[i, 0]), int(eb[i, 1])))
            out[key] = _make_pair(key, verts, float(d[i]), grad[i], d_hat, kappa, dirichlet)
    return out


def _make_pair(key, verts, d, grad, d_hat, kappa, dirichlet):
    grad = grad.copy()
    if dirichlet is not None:
        grad[dirichlet[verts]] = 0.0
    nrm = np.linalg.norm(grad)
    n = grad / nrm if nrm > 1e-12 else np.zeros_like(grad)
    _, _, ddb = barrier_derivatives(d, d_hat, kappa)
    return ContactPair(key=key, verts=np.asarray(verts, dtype=np.int64), d=d, grad=grad, n=n, k=ddb)


# ---------------------------------------------------------------------------
# classification of contact changes against the frozen base state


@dataclass
class UpdateCandidate:
    """Rank-one Hessian update u u^T proposed for the current iterate."""

    key: tuple
    verts: np.ndarray  # (4,)
    u: np.ndarray  # (4, 3) rows aligned with verts
    delta_s: float  # stiffness change used for ranking


def classify_contact(pair: ContactPair, base: dict, eps_rot) -> UpdateCandidate | None:
    """Classify one current pair against the base snapshot.

    new pair                         -> u = sqrt(k_curr) * grad_curr
    normal rotated beyond eps_rot    -> treated as new (ghost wall)
    persisting and stiffening        -> u = sqrt(k_curr - k_base) * grad_curr
    persisting, softening or equal   -> no candidate
    Pairs whose gradient support is fully pinned never emit a candidate.
    """
    nrm = np.linalg.norm(pair.grad)
    if nrm <= 1e-12:
        return None
    prev = base.get(pair.key)
    if prev is not None:
        cos = float((pair.n * prev.n).sum())
        if cos >= eps_rot:
            delta = pair.k - prev.k
            if delta <= 0.0:
                return None
            u = math.sqrt(delta) * pair.grad
            return UpdateCandidate(key=pair.key, verts=pair.verts, u=u, delta_s=delta)
    u = math.sqrt(pair.k) * pair.grad
    return UpdateCandidate(key=pair.key, verts=pair.verts, u=u, delta_s=pair.k)


def classify_all(cs: ConstraintSet, eps_rot) -> list:
    """Candidates for every current pair, in deterministic key order."""
    out = []
    for key in sorted(cs.current):
        cand = classify_contact(cs.current[key], cs.base, eps_rot)
        if cand is not None:
            out.append(cand)
    return out


def select_top_k(candidates, subdomain_of, K):
    """Per-subdomain top-K candidates by stiffness change.

    subdomain_of : (N,) vertex id -> subdomain id
    Returns dict subdomain -> list of candidates, each list sorted by
    (-delta_s, key) and truncated to K entries.
    """
    groups = {}
    for cand in candidates:
        rows = np.any(cand.u != 0.0, axis=1)
        for d in sorted({int(subdomain_of[v]) for v in cand.verts[rows]}):
            groups.setdefault(d, []).append(cand)
    out = {}
    for d, lst in groups.items():
        lst.sort(key=lambda c: (-c.delta_s, c.key))
        out[d] = lst[:K]
    return out
