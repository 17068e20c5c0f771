"""Conservative continuous collision detection.

Each candidate pair gets a safe step size from two independent bounds and
takes the larger:

* a relative-displacement bound: after removing the pair's mean motion, no
  two points approach faster than l_rel per unit step, so alpha_lb =
  (1 - s) * d / l_rel cannot close the current gap d;
* sign-based bisection of the orientation cubic f(alpha) (signed tet
  volume for point-triangle, coplanarity determinant for edge-edge, both
  exactly cubic under linear motion).  Contact implies f = 0, so keeping
  the sign of f(0) on a window where f is monotone excludes crossings.
  The window is clamped at the first positive root of f' (and of f'' via
  the classical inflection bound); only there is monotonicity guaranteed
  and the halving argument sound.

Steps are aggregated per subdomain by a min-reduction over the owning
subdomains of each pair.  An additive-advancement baseline (accd_step) is
included for comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo

S_DEFAULT = 0.1
ALPHA_L_DEFAULT = 2.0**-20
ACCD_ITER_CAP = 10**6


# ---------------------------------------------------------------------------
# orientation cubic


def cubic_coeffs_batch(verts, x, p):
    """(m, 4) coefficients (a3, a2, a1, a0) of det[q1-q0, q2-q0, q3-q0](alpha)."""
    x = x.reshape(-1, 3)
    p = p.reshape(-1, 3)
    c = x[verts[:, 1:]] - x[verts[:, :1]]  # (m, 3, 3) rows are columns c1..c3
    e = p[verts[:, 1:]] - p[verts[:, :1]]

    def det3(r0, r1, r2):
        return np.linalg.det(np.stack([r0, r1, r2], axis=2))

    c1, c2, c3 = c[:, 0], c[:, 1], c[:, 2]
    e1, e2, e3 = e[:, 0], e[:, 1], e[:, 2]
    a0 = det3(c1, c2, c3)
    a1 = det3(e1, c2, c3) + det3(c1, e2, c3) + det3(c1, c2, e3)
    a2 = det3(e1, e2, c3) + det3(e1, c2, e3) + det3(c1, e2, e3)
    a3 = det3(e1, e2, e3)
    return np.stack([a3, a2, a1, a0], axis=1)


def cubic_coeffs(pair, x, p):
    verts = np.asarray(pair[1], dtype=np.int64).reshape(1, 4)
    a3, a2, a1, a0 = cubic_coeffs_batch(verts, np.asarray(x, float), np.asarray(p, float))[0]
    return float(a3), float(a2), float(a1), float(a0)


def monotonic_bound(coeffs):
    """Smallest positive root of f'' (linear: -a2 / (3 a3)), else +inf."""
    a3, a2 = coeffs[0], coeffs[1]
    if a3 == 0.0:
        return math.inf
    r = -a2 / (3.0 * a3)
    return r if r > 0.0 else math.inf


def first_extremum(coeffs):
    """Smallest strictly positive root of f' = 3 a3 x^2 + 2 a2 x + a1, else +inf."""
    a = 3.0 * coeffs[0]
    b = 2.0 * coeffs[1]
    c = coeffs[2]
    if a == 0.0:
        if b == 0.0:
            return math.inf
        r = -c / b
        return r if r > 0.0 else math.inf
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return math.inf
    sq = math.sqrt(disc)
    q = -0.5 * (b + (math.copysign(sq, b) if b != 0.0 else -sq))
    if q == 0.0:  # b == 0 and disc == 0: double root at zero, no sign change
        return math.inf
    pos = [r for r in (q / a, c / q) if r > 0.0]
    return min(pos) if pos else math.inf


def _window_batch(coeffs):
    """min(first f'' root, first f' root) per row, +inf when none positive."""
    a3, a2, a1 = coeffs[:, 0], coeffs[:, 1], coeffs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        mon = np.where(a3 != 0.0, -a2 / (3.0 * a3), np.inf)
    mon = np.where(mon > 0.0, mon, np.inf)

    a = 3.0 * a3
    b = 2.0 * a2
    c = a1
    with np.errstate(divide="ignore", invalid="ignore"):
        lin = np.where(b != 0.0, -c / b, np.inf)
        disc = b * b - 4.0 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        qq = -0.5 * (b + np.where(b != 0.0, np.sign(b), -1.0) * sq)
        r1 = np.where((a != 0.0) & (qq != 0.0), qq / a, np.inf)
        r2 = np.where(qq != 0.0, c / qq, np.inf)
    r1 = np.where((disc >= 0.0) & (r1 > 0.0), r1, np.inf)
    r2 = np.where((disc >= 0.0) & (r2 > 0.0), r2, np.inf)
    ext = np.where(a != 0.0, np.minimum(r1, r2), np.where(lin > 0.0, lin, np.inf))
    return np.minimum(mon, ext)


# ---------------------------------------------------------------------------
# sign-based bisection


@dataclass
class CcdQuery:
    pair: tuple
    coeffs: tuple
    alpha_l: float
    alpha_mon: float


def make_query(pair, x, p, alpha_l=ALPHA_L_DEFAULT) -> CcdQuery:
    coeffs = cubic_coeffs(pair, x, p)
    return CcdQuery(pair=pair, coeffs=coeffs, alpha_l=alpha_l, alpha_mon=monotonic_bound(coeffs))


@dataclass
class CcdResult:
    alpha: float
    evals: int
    flagged: bool  # sign still flipped at the minimal threshold


def _horner(coeffs, alpha):
    a3, a2, a1, a0 = coeffs
    return ((a3 * alpha + a2) * alpha + a1) * alpha + a0


def _bisect(coeffs, alpha_hat, alpha_l) -> CcdResult:
    a0 = coeffs[3]
    alpha = alpha_hat
    evals = 0
    while True:
        evals += 1
        if _horner(coeffs, alpha) * a0 > 0.0:
            return CcdResult(alpha=alpha, evals=evals, flagged=False)
        if alpha <= alpha_l:
            return CcdResult(alpha=alpha, evals=evals, flagged=True)
        alpha = max(0.5 * alpha, alpha_l)


def conservative_step(query: CcdQuery) -> CcdResult:
    """Largest halving step keeping the sign of f within the monotone window."""
    if query.coeffs[3] == 0.0:
        raise ValueError("coplanar start: orientation sign undefined")
    alpha_hat = min(1.0, query.alpha_mon, first_extremum(query.coeffs))
    return _bisect(query.coeffs, alpha_hat, query.alpha_l)


# ---------------------------------------------------------------------------
# relative-displacement lower bound


def _rel_speed_batch(verts, is_pt, p):
    """Frame-invariant bound on point-vs-point relative displacement."""
    p4 = p.reshape(-1, 3)[verts]  # (m, 4, 3)
    q = p4 - p4.mean(axis=1, keepdims=True)
    nrm = np.linalg.norm(q, axis=2)  # (m, 4)
    pt = nrm[:, 0] + nrm[:, 1:].max(axis=1)
    ee = nrm[:, :2].max(axis=1) + nrm[:, 2:].max(axis=1)
    return np.where(is_pt, pt, ee)


def _distance_batch(verts, is_pt, x):
    x3 = x.reshape(-1, 3)
    d = np.empty(len(verts))
    ip = np.nonzero(is_pt)[0]
    ie = np.nonzero(~is_pt)[0]
    if len(ip):
        vp = verts[ip]
        d[ip] = geo.pt_distance_batch(x3[vp[:, 0]], x3[vp[:, 1]], x3[vp[:, 2]], x3[vp[:, 3]])[0]
    if len(ie):
        ve = verts[ie]
        d[ie] = geo.ee_distance_batch(x3[ve[:, 0]], x3[ve[:, 1]], x3[ve[:, 2]], x3[ve[:, 3]])[0]
    return d


def displacement_lower_bound(pair, x, p, d_hat=0.0, s=S_DEFAULT):
    verts = np.asarray(pair[1], dtype=np.int64).reshape(1, 4)
    is_pt = np.array([pair[0] == "pt"])
    d = float(_distance_batch(verts, is_pt, np.asarray(x, float))[0])
    if d <= 0.0:
        return 0.0
    speed = float(_rel_speed_batch(verts, is_pt, np.asarray(p, float))[0])
    if speed == 0.0:
        return 1.0
    return min(1.0, (1.0 - s) * d / speed)


# ---------------------------------------------------------------------------
# pair collection and per-subdomain reduction


@dataclass
class CcdPairs:
    verts: np.ndarray  # (m, 4) vertex ids; PT rows are (v, t0, t1, t2)
    is_pt: np.ndarray  # (m,) bool

    def __len__(self):
        return len(self.verts)


def collect_pairs(x, surface: geo.SurfaceMesh, p) -> CcdPairs:
    """Broad-phase candidates padded by the maximum displacement."""
    x3 = np.asarray(x, float).reshape(-1, 3)
    p3 = np.asarray(p, float).reshape(-1, 3)
    mb = float(np.abs(p3).max()) if p3.size else 0.0
    pt_pairs, ee_pairs = geo.broad_phase(x3, surface, mb, 0.0)
    chunks = []
    if len(pt_pairs):
        chunks.append(
            np.column_stack([pt_pairs[:, 0], surface.triangles[pt_pairs[:, 1]]])
        )
    if len(ee_pairs):
        chunks.append(
            np.column_stack([surface.edges[ee_pairs[:, 0]], surface.edges[ee_pairs[:, 1]]])
        )
    if not chunks:
        return CcdPairs(verts=np.zeros((0, 4), dtype=np.int64), is_pt=np.zeros(0, dtype=bool))
    verts = np.vstack(chunks)
    is_pt = np.zeros(len(verts), dtype=bool)
    is_pt[: len(pt_pairs)] = True
    return CcdPairs(verts=verts, is_pt=is_pt)


@dataclass
class StepInfo:
    alpha_pair: np.ndarray  # (m,) certified step per candidate pair
    evals: int
    n_flagged: int

    @property
    def min_alpha(self):
        return float(self.alpha_pair.min()) if len(self.alpha_pair) else 1.0


def pair_steps(pairs: CcdPairs, x, p, alpha_l=ALPHA_L_DEFAULT, s=S_DEFAULT) -> StepInfo:
    """Certified conservative step for every candidate pair."""
    m = len(pairs)
    if m == 0:
        return StepInfo(alpha_pair=np.ones(0), evals=0, n_flagged=0)
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    coeffs = cubic_coeffs_batch(pairs.verts, x, p)
    d = _distance_batch(pairs.verts, pairs.is_pt, x)
    speed = _rel_speed_batch(pairs.verts, pairs.is_pt, p)
    with np.errstate(divide="ignore"):
        lb_raw = np.where(speed > 0.0, (1.0 - s) * d / speed, np.inf)
    lb_raw = np.where(d > 0.0, lb_raw, 0.0)
    alpha_lb = np.minimum(lb_raw, 1.0)

    alpha_hat = np.minimum(1.0, _window_batch(coeffs))
    bis = np.zeros(m)
    evals = 0
    n_flagged = 0
    todo = np.nonzero((alpha_lb < alpha_hat) & (coeffs[:, 3] != 0.0))[0]
    for i in todo:
        res = _bisect(tuple(coeffs[i]), float(alpha_hat[i]), alpha_l)
        bis[i] = res.alpha
        evals += res.evals
        n_flagged += res.flagged
    alpha_pair = np.minimum(np.maximum(alpha_lb, bis), 1.0)
    return StepInfo(alpha_pair=alpha_pair, evals=evals, n_flagged=n_flagged)


def per_subdomain_steps(pairs: CcdPairs, partition, x, p, alpha_l=ALPHA_L_DEFAULT, s=S_DEFAULT):
    """Min-reduce each pair's certified step over its owning subdomains.

    Returns (alpha_d, info); subdomains touched by no pair keep alpha 1.
    """
    alpha_d = np.ones(partition.D)
    info = pair_steps(pairs, x, p, alpha_l=alpha_l, s=s)
    if len(pairs):
        owners = partition.subdomain_of[pairs.verts]  # (m, 4)
        np.minimum.at(alpha_d, owners.reshape(-1), np.repeat(info.alpha_pair, 4))
    return alpha_d, info


def certify_mixed(pairs: CcdPairs, x, p_mix, s=S_DEFAULT) -> bool:
    """True when every pair is provably safe under the full mixed step p_mix.

    Used after per-subdomain clamping, where a pair's vertices may carry
    different scale factors and the per-pair certificates no longer apply.
    """
    if len(pairs) == 0:
        return True
    x = np.asarray(x, float)
    p_mix = np.asarray(p_mix, float)
    d = _distance_batch(pairs.verts, pairs.is_pt, x)
    speed = _rel_speed_batch(pairs.verts, pairs.is_pt, p_mix)
    with np.errstate(divide="ignore"):
        ok = np.where(speed > 0.0, (1.0 - s) * d, np.inf) >= speed
    ok &= d > 0.0
    rest = np.nonzero(~ok)[0]
    if len(rest) == 0:
        return True
    coeffs = cubic_coeffs_batch(pairs.verts[rest], x, p_mix)
    window = _window_batch(coeffs)
    a0 = coeffs[:, 3]
    f1 = coeffs.sum(axis=1)  # f(1)
    ok_sign = (window >= 1.0) & (a0 != 0.0) & (f1 * a0 > 0.0)
    return bool(np.all(ok_sign))


# ---------------------------------------------------------------------------
# additive advancement baseline


@dataclass
class AccdResult:
    alpha: float
    iters: int
    flagged: bool  # iteration cap reached


def accd_step(pair, x, p, d_hat=0.0, s=S_DEFAULT, iter_cap=ACCD_ITER_CAP) -> AccdResult:
    """Advance by (1-s) * gap / l_rel until the gap shrinks to s * d0."""
    verts = np.asarray(pair[1], dtype=np.int64).reshape(1, 4)
    is_pt = np.array([pair[0] == "pt"])
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    speed = float(_rel_speed_batch(verts, is_pt, p)[0])
    if speed == 0.0:
        return AccdResult(alpha=1.0, iters=0, flagged=False)
    d0 = float(_distance_batch(verts, is_pt, x)[0])
    alpha = 0.0
    d = d0
    iters = 0
    while True:
        step = (1.0 - s) * d / speed
        if alpha + step >= 1.0:
            return AccdResult(alpha=1.0, iters=iters, flagged=False)
        alpha += step
        iters += 1
        d = float(_distance_batch(verts, is_pt, x + alpha * p.reshape(x.shape))[0])
        if d <= s * d0:
            return AccdResult(alpha=alpha, iters=iters, flagged=False)
        if iters >= iter_cap:
            return AccdResult(alpha=alpha, iters=iters, flagged=True)
