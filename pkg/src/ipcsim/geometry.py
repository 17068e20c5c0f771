"""Meshes, distance primitives and the broad phase.

Distances are plain Euclidean point-triangle / edge-edge distances with the
closest-feature region classified the usual way (vertex / edge / interior).
Gradients come from the active region's closed form, so they stay valid right
up to the region boundaries.

All positions are float64, shape (n, 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegeneratePrimitiveError

DEGEN_TOL = 1e-14

# closest-feature classification
REGION_VERTEX = "vertex"
REGION_EDGE = "edge"
REGION_INTERIOR = "interior"


# ---------------------------------------------------------------------------
# distance results


@dataclass
class DistanceResult:
    """Distance between two surface primitives.

    Attributes
    ----------
    d : float
        Euclidean distance (unsquared).
    n : (4, 3) array
        Stacked gradient of d w.r.t. the four participating vertices,
        normalized to unit length.  Zero when d == 0.
    grad : (4, 3) array
        Raw (unnormalized) stacked gradient.
    region : str
        Closest-feature classification, one of "vertex", "edge", "interior".
    """

    d: float
    n: np.ndarray
    grad: np.ndarray
    region: str


def _normalized_or_zero(g):
    nrm = np.sqrt((g * g).sum())
    if nrm < 1e-30:
        return np.zeros_like(g)
    return g / nrm


def _check_triangle(t0, t1, t2):
    if (
        np.linalg.norm(t1 - t0) <= DEGEN_TOL
        or np.linalg.norm(t2 - t0) <= DEGEN_TOL
        or np.linalg.norm(t2 - t1) <= DEGEN_TOL
        or np.linalg.norm(np.cross(t1 - t0, t2 - t0)) <= DEGEN_TOL
    ):
        raise DegeneratePrimitiveError("zero-length edge or zero-area triangle")


def point_triangle_distance(p, t0, t1, t2) -> DistanceResult:
    """Distance from point p to triangle (t0, t1, t2) with gradient.

    The seven closest-point regions (3 vertex, 3 edge, 1 face) are classified
    with the standard barycentric sign tests; the gradient w.r.t. all four
    vertices follows from the active region's closed-form closest point.
    """
    p = np.asarray(p, dtype=float)
    t0 = np.asarray(t0, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    _check_triangle(t0, t1, t2)

    w, region = _pt_bary(p, t0, t1, t2)
    closest = w[0] * t0 + w[1] * t1 + w[2] * t2
    diff = p - closest
    d = float(np.linalg.norm(diff))
    grad = np.zeros((4, 3))
    if d > 0.0:
        u = diff / d
        grad[0] = u
        grad[1] = -w[0] * u
        grad[2] = -w[1] * u
        grad[3] = -w[2] * u
    return DistanceResult(d=d, n=_normalized_or_zero(grad), grad=grad, region=region)


def _pt_bary(p, a, b, c):
    """Barycentric weights of the closest point on triangle abc to p."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return np.array([1.0, 0.0, 0.0]), REGION_VERTEX
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return np.array([0.0, 1.0, 0.0]), REGION_VERTEX
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return np.array([0.0, 0.0, 1.0]), REGION_VERTEX
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return np.array([1.0 - v, v, 0.0]), REGION_EDGE
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        v = d2 / (d2 - d6)
        return np.array([1.0 - v, 0.0, v]), REGION_EDGE
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        v = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.array([0.0, 1.0 - v, v]), REGION_EDGE
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return np.array([1.0 - v - w, v, w]), REGION_INTERIOR


def edge_edge_distance(a0, a1, b0, b1) -> DistanceResult:
    """Distance between segments (a0, a1) and (b0, b1) with gradient.

    The result is exactly symmetric under swapping the two edges (inputs are
    canonicalized internally before the asymmetric clamped solve).
    """
    pts = [np.asarray(q, dtype=float) for q in (a0, a1, b0, b1)]
    for s, e in ((0, 1), (2, 3)):
        if np.linalg.norm(pts[e] - pts[s]) <= DEGEN_TOL:
            raise DegeneratePrimitiveError("zero-length edge")

    # canonical ordering: endpoints sorted within each edge, edges sorted by
    # their endpoint tuples; guarantees bit-identical symmetric results
    order = list(range(4))
    if tuple(pts[1]) < tuple(pts[0]):
        order[0], order[1] = order[1], order[0]
    if tuple(pts[3]) < tuple(pts[2]):
        order[2], order[3] = order[3], order[2]
    ea = (tuple(pts[order[0]]), tuple(pts[order[1]]))
    eb = (tuple(pts[order[2]]), tuple(pts[order[3]]))
    if eb < ea:
        order = [order[2], order[3], order[0], order[1]]

    q0, q1, q2, q3 = (pts[i] for i in order)
    s, t = _seg_seg_params(q0, q1, q2, q3)
    ca = q0 + s * (q1 - q0)
    cb = q2 + t * (q3 - q2)
    diff = ca - cb
    d = float(np.linalg.norm(diff))
    grad_c = np.zeros((4, 3))
    if d > 0.0:
        u = diff / d
        grad_c[0] = (1.0 - s) * u
        grad_c[1] = s * u
        grad_c[2] = -(1.0 - t) * u
        grad_c[3] = -t * u
    n_clamped = int(s in (0.0, 1.0)) + int(t in (0.0, 1.0))
    region = (REGION_INTERIOR, REGION_EDGE, REGION_VERTEX)[n_clamped]

    grad = np.zeros((4, 3))
    for row, orig in enumerate(order):
        grad[orig] = grad_c[row]
    return DistanceResult(d=d, n=_normalized_or_zero(grad), grad=grad, region=region)


def _seg_seg_params(p1, q1, p2, q2):
    """Clamped closest-point parameters (s, t) between two segments."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    c = d1 @ r
    b = d1 @ d2
    denom = a * e - b * b
    if denom > 0.0:
        s = np.clip((b * f - c * e) / denom, 0.0, 1.0)
    else:
        s = 0.0  # parallel edges: pick the p1 end
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t = 1.0
        s = np.clip((b - c) / a, 0.0, 1.0)
    return float(s), float(t)


# ---------------------------------------------------------------------------
# batched distance kernels (used in the solver hot path)


def pt_distance_batch(p, t0, t1, t2):
    """Vectorized point-triangle distances.

    Parameters are (m, 3) arrays.  Returns (d, grad) with d of shape (m,)
    and grad of shape (m, 4, 3); rows match point_triangle_distance.
    """
    ab = t1 - t0
    ac = t2 - t0
    ap = p - t0
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - t1
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - t2
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    m = p.shape[0]
    w = np.zeros((m, 3))
    done = np.zeros(m, dtype=bool)

    mask = (d1 <= 0.0) & (d2 <= 0.0)
    w[mask, 0] = 1.0
    done |= mask

    mask = ~done & (d3 >= 0.0) & (d4 <= d3)
    w[mask, 1] = 1.0
    done |= mask

    mask = ~done & (d6 >= 0.0) & (d5 <= d6)
    w[mask, 2] = 1.0
    done |= mask

    with np.errstate(divide="ignore", invalid="ignore"):
        mask = ~done & (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0)
        v = d1[mask] / (d1[mask] - d3[mask])
        w[mask, 0] = 1.0 - v
        w[mask, 1] = v
        done |= mask

        mask = ~done & (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0)
        v = d2[mask] / (d2[mask] - d6[mask])
        w[mask, 0] = 1.0 - v
        w[mask, 2] = v
        done |= mask

        mask = ~done & (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0)
        v = (d4[mask] - d3[mask]) / ((d4[mask] - d3[mask]) + (d5[mask] - d6[mask]))
        w[mask, 1] = 1.0 - v
        w[mask, 2] = v
        done |= mask

    mask = ~done
    denom = (va + vb + vc)[mask]
    v = vb[mask] / denom
    ww = vc[mask] / denom
    w[mask, 0] = 1.0 - v - ww
    w[mask, 1] = v
    w[mask, 2] = ww

    closest = w[:, 0:1] * t0 + w[:, 1:2] * t1 + w[:, 2:3] * t2
    diff = p - closest
    d = np.linalg.norm(diff, axis=1)
    grad = np.zeros((m, 4, 3))
    safe = d > 0.0
    u = np.zeros_like(diff)
    u[safe] = diff[safe] / d[safe, None]
    grad[:, 0] = u
    grad[:, 1] = -w[:, 0:1] * u
    grad[:, 2] = -w[:, 1:2] * u
    grad[:, 3] = -w[:, 2:3] * u
    return d, grad


def ee_distance_batch(a0, a1, b0, b1):
    """Vectorized edge-edge distances; same conventions as pt_distance_batch.

    Caller is responsible for passing edges in a canonical order when exact
    symmetry matters (the solver orders pairs by vertex id).
    """
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = (d1 * d1).sum(1)
    e = (d2 * d2).sum(1)
    f = (d2 * r).sum(1)
    c = (d1 * r).sum(1)
    b = (d1 * d2).sum(1)
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 0.0, np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0.0, 1.0), 0.0)
        t = (b * s + f) / e
        low = t < 0.0
        high = t > 1.0
        t = np.clip(t, 0.0, 1.0)
        s = np.where(low, np.clip(-c / a, 0.0, 1.0), s)
        s = np.where(high, np.clip((b - c) / a, 0.0, 1.0), s)
    ca = a0 + s[:, None] * d1
    cb = b0 + t[:, None] * d2
    diff = ca - cb
    d = np.linalg.norm(diff, axis=1)
    m = a0.shape[0]
    grad = np.zeros((m, 4, 3))
    safe = d > 0.0
    u = np.zeros_like(diff)
    u[safe] = diff[safe] / d[safe, None]
    grad[:, 0] = (1.0 - s)[:, None] * u
    grad[:, 1] = s[:, None] * u
    grad[:, 2] = -(1.0 - t)[:, None] * u
    grad[:, 3] = -t[:, None] * u
    return d, grad


# ---------------------------------------------------------------------------
# tetrahedral meshes

# outward-oriented faces of a positively oriented tet
_TET_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


def tet_volumes(positions, tets):
    """Signed volumes, one per tet."""
    v = positions[tets]
    return np.linalg.det(np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=1)) / 6.0


@dataclass
class TetMesh:
    """Tetrahedral mesh with rest state and boundary conditions.

    rest_positions : (N, 3) float array, reference configuration
    tets : (T, 4) int array, positively oriented
    positions : (N, 3) float array, current configuration
    dirichlet : (N,) bool array, pinned vertices
    """

    rest_positions: np.ndarray
    tets: np.ndarray
    positions: np.ndarray = None
    dirichlet: np.ndarray = None

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=float)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if self.positions is None:
            self.positions = self.rest_positions.copy()
        if self.dirichlet is None:
            self.dirichlet = np.zeros(len(self.rest_positions), dtype=bool)
        self.validate()

    @property
    def n_vertices(self):
        return len(self.rest_positions)

    def validate(self):
        if self.tets.size:
            vols = tet_volumes(self.rest_positions, self.tets)
            if np.any(vols <= 0.0):
                bad = int(np.argmin(vols))
                raise ConfigError(f"tet {bad} has non-positive rest volume {vols[bad]:g}")
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= self.n_vertices):
            raise ConfigError("tet index out of range")


@dataclass
class SurfaceMesh:
    """Boundary of a tet mesh: outward triangles, unique edges, vertex set."""

    triangles: np.ndarray  # (F, 3)
    edges: np.ndarray  # (E, 2), each row sorted
    vertices: np.ndarray  # (V,) ids of vertices on the surface

    @classmethod
    def from_tet_mesh(cls, mesh: TetMesh) -> "SurfaceMesh":
        faces = {}
        for tet in mesh.tets:
            for f in _TET_FACES:
                tri = (int(tet[f[0]]), int(tet[f[1]]), int(tet[f[2]]))
                key = tuple(sorted(tri))
                if key in faces:
                    faces[key] = None  # interior face, seen twice
                else:
                    faces[key] = tri
        tris = sorted(t for t in faces.values() if t is not None)
        triangles = np.array(tris, dtype=np.int64).reshape(-1, 3)
        edges = set()
        for a, b, c in tris:
            edges.add(tuple(sorted((a, b))))
            edges.add(tuple(sorted((b, c))))
            edges.add(tuple(sorted((a, c))))
        edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
        verts = np.unique(triangles) if triangles.size else np.array([], dtype=np.int64)
        return cls(triangles=triangles, edges=edges, vertices=verts)


# ---------------------------------------------------------------------------
# broad phase: uniform spatial hash over inflated primitive boxes


def _aabbs(x, idx):
    pts = x[idx]  # (m, k, 3)
    return pts.min(axis=1), pts.max(axis=1)


class _HashGrid:
    def __init__(self, cell):
        self.cell = cell
        self.table = {}

    def insert(self, pid, lo, hi):
        c0 = np.floor(lo / self.cell).astype(np.int64)
        c1 = np.floor(hi / self.cell).astype(np.int64)
        for i in range(c0[0], c1[0] + 1):
            for j in range(c0[1], c1[1] + 1):
                for k in range(c0[2], c1[2] + 1):
                    self.table.setdefault((i, j, k), []).append(pid)

    def query(self, lo, hi):
        c0 = np.floor(lo / self.cell).astype(np.int64)
        c1 = np.floor(hi / self.cell).astype(np.int64)
        out = []
        for i in range(c0[0], c1[0] + 1):
            for j in range(c0[1], c1[1] + 1):
                for k in range(c0[2], c1[2] + 1):
                    hit = self.table.get((i, j, k))
                    if hit:
                        out.extend(hit)
        return out


def broad_phase(x, surface: SurfaceMesh, motion_bound: float, d_hat: float):
    """Candidate PT and EE pairs within d_hat under bounded motion.

    Uses a uniform spatial hash whose cell size is the larger of the biggest
    primitive AABB diagonal and (d_hat + motion_bound).  Primitive boxes are
    inflated by d_hat/2 + motion_bound per side, which makes the returned
    candidate set a superset of every pair whose distance can drop below
    d_hat while no vertex moves farther than motion_bound.  Pairs sharing a
    vertex are excluded.

    Returns (pt_pairs, ee_pairs): int arrays of shape (p, 2) holding
    (vertex id, triangle index) and (edge index i, edge index j), i < j.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    tris = surface.triangles
    edges = surface.edges
    if len(tris) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2), dtype=np.int64)

    tri_lo, tri_hi = _aabbs(x, tris)
    edge_lo, edge_hi = _aabbs(x, edges)
    diag = np.linalg.norm(tri_hi - tri_lo, axis=1)
    if len(edges):
        diag = np.concatenate([diag, np.linalg.norm(edge_hi - edge_lo, axis=1)])
    cell = max(float(diag.max()), d_hat + motion_bound)
    pad = 0.5 * d_hat + motion_bound

    tri_grid = _HashGrid(cell)
    for i in range(len(tris)):
        tri_grid.insert(i, tri_lo[i] - pad, tri_hi[i] + pad)
    edge_grid = _HashGrid(cell)
    for i in range(len(edges)):
        edge_grid.insert(i, edge_lo[i] - pad, edge_hi[i] + pad)

    gap = d_hat + 2.0 * motion_bound
    pt_pairs = set()
    for v in surface.vertices:
        pv = x[v]
        cand = np.fromiter(tri_grid.query(pv - pad, pv + pad), dtype=np.int64)
        if not len(cand):
            continue
        cand = cand[~np.any(tris[cand] == v, axis=1)]
        keep = np.all(pv >= tri_lo[cand] - gap, axis=1) & np.all(pv <= tri_hi[cand] + gap, axis=1)
        pt_pairs.update((int(v), int(ti)) for ti in cand[keep])

    ee_pairs = set()
    for i in range(len(edges)):
        cand = np.fromiter(edge_grid.query(edge_lo[i] - pad, edge_hi[i] + pad), dtype=np.int64)
        cand = cand[cand > i]
        if not len(cand):
            continue
        shared = np.any(edges[cand][:, :, None] == edges[i][None, None, :], axis=(1, 2))
        cand = cand[~shared]
        keep = np.all(edge_lo[i] <= edge_hi[cand] + gap, axis=1) & np.all(
            edge_lo[cand] <= edge_hi[i] + gap, axis=1
        )
        ee_pairs.update((int(i), int(j)) for j in cand[keep])

    pt = np.array(sorted(pt_pairs), dtype=np.int64).reshape(-1, 2)
    ee = np.array(sorted(ee_pairs), dtype=np.int64).reshape(-1, 2)
    return pt, ee


# ---------------------------------------------------------------------------
# procedural meshes

# Kuhn subdivision of the unit cube into 6 tets; conforming across a grid
_CUBE_TETS = (
    (0, 1, 3, 7),
    (0, 1, 7, 5),
    (0, 5, 7, 4),
    (0, 3, 2, 7),
    (0, 2, 6, 7),
    (0, 6, 4, 7),
)


def make_box_mesh(nx=1, ny=1, nz=1, size=(1.0, 1.0, 1.0)) -> TetMesh:
    """Axis-aligned box [0, sx] x [0, sy] x [0, sz] split into 6 tets/cell."""
    sx, sy, sz = size
    xs = np.linspace(0.0, sx, nx + 1)
    ys = np.linspace(0.0, sy, ny + 1)
    zs = np.linspace(0.0, sz, nz + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corner = [
                    vid(i, j, k),
                    vid(i + 1, j, k),
                    vid(i, j + 1, k),
                    vid(i + 1, j + 1, k),
                    vid(i, j, k + 1),
                    vid(i + 1, j, k + 1),
                    vid(i, j + 1, k + 1),
                    vid(i + 1, j + 1, k + 1),
                ]
                for t in _CUBE_TETS:
                    tet = [corner[t[0]], corner[t[1]], corner[t[2]], corner[t[3]]]
                    v = verts[tet]
                    if np.linalg.det(np.stack([v[1] - v[0], v[2] - v[0], v[3] - v[0]])) < 0:
                        tet[2], tet[3] = tet[3], tet[2]
                    tets.append(tet)
    return TetMesh(rest_positions=verts, tets=np.array(tets, dtype=np.int64))


def make_single_tet(scale=1.0) -> TetMesh:
    verts = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    ) * scale
    return TetMesh(rest_positions=verts, tets=np.array([[0, 1, 2, 3]]))


# ---------------------------------------------------------------------------
# file formats


def _data_lines(path):
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                yield line.split()


def load_node_ele(path_base) -> TetMesh:
    """Load a TetGen .node/.ele pair; 0- or 1-based indices auto-detected."""
    base = str(path_base)
    if base.endswith(".node") or base.endswith(".ele"):
        base = base.rsplit(".", 1)[0]
    node_lines = list(_data_lines(base + ".node"))
    n_pts = int(node_lines[0][0])
    if int(node_lines[0][1]) != 3:
        raise ConfigError(f"{base}.node: expected 3-D points")
    idx = np.array([int(row[0]) for row in node_lines[1 : 1 + n_pts]])
    pts = np.array([[float(v) for v in row[1:4]] for row in node_lines[1 : 1 + n_pts]])
    node_base = int(idx.min())
    order = np.argsort(idx, kind="stable")
    pts = pts[order]

    ele_lines = list(_data_lines(base + ".ele"))
    n_tets = int(ele_lines[0][0])
    if int(ele_lines[0][1]) != 4:
        raise ConfigError(f"{base}.ele: expected 4-node tets")
    tets = np.array([[int(v) for v in row[1:5]] for row in ele_lines[1 : 1 + n_tets]], dtype=np.int64)
    tets -= node_base if tets.size and tets.min() >= node_base else 0
    if tets.size and (tets.min() < 0 or tets.max() >= n_pts):
        raise ConfigError(f"{base}.ele: node index out of range")

    # repair inverted tets, then let TetMesh validate
    if tets.size:
        vols = tet_volumes(pts, tets)
        flip = vols < 0
        tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return TetMesh(rest_positions=pts, tets=tets)


def save_node_ele(path_base, mesh: TetMesh):
    base = str(path_base)
    with open(base + ".node", "w") as fh:
        fh.write(f"{mesh.n_vertices} 3 0 0\n")
        for i, p in enumerate(mesh.rest_positions):
            fh.write(f"{i} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    with open(base + ".ele", "w") as fh:
        fh.write(f"{len(mesh.tets)} 4 0\n")
        for i, t in enumerate(mesh.tets):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")


def save_obj(path, positions, triangles, groups=None):
    """Write a surface OBJ; groups is an optional list of (name, lo, hi)
    triangle ranges emitted as `o` records."""
    lines = []
    for p in positions:
        lines.append(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    bounds = groups or [("surface", 0, len(triangles))]
    for name, lo, hi in bounds:
        lines.append(f"o {name}")
        for t in triangles[lo:hi]:
            lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path):
    """Read vertices and triangles back from an OBJ written by save_obj."""
    verts = []
    tris = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                ids = [int(tok.split("/", 1)[0]) - 1 for tok in parts[1:4]]
                tris.append(ids)
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# triangle-triangle intersection (used by the post-hoc penetration checker)


def _seg_seg_2d(p0, p1, q0, q1):
    d1 = p1 - p0
    d2 = q1 - q0
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    r = q0 - p0
    if denom == 0.0:
        if r[0] * d1[1] - r[1] * d1[0] != 0.0:
            return False
        # collinear: 1-D overlap test
        tt = d1 @ d1
        if tt == 0.0:
            return False
        t0 = (r @ d1) / tt
        t1 = t0 + (d2 @ d1) / tt
        return max(min(t0, t1), 0.0) <= min(max(t0, t1), 1.0)
    s = (r[0] * d2[1] - r[1] * d2[0]) / denom
    t = (r[0] * d1[1] - r[1] * d1[0]) / denom
    return 0.0 <= s <= 1.0 and 0.0 <= t <= 1.0


def _point_in_tri_2d(p, a, b, c):
    s1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    s2 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
    s3 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
    has_neg = (s1 < 0) or (s2 < 0) or (s3 < 0)
    has_pos = (s1 > 0) or (s2 > 0) or (s3 > 0)
    return not (has_neg and has_pos)


def tri_tri_intersect(t1, t2) -> bool:
    """Exact-ish triangle-triangle intersection test (touching counts)."""
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    n1 = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    n2 = np.cross(t2[1] - t2[0], t2[2] - t2[0])
    d2 = t2 @ n1 - t1[0] @ n1
    if np.all(d2 > 0) or np.all(d2 < 0):
        return False
    d1 = t1 @ n2 - t2[0] @ n2
    if np.all(d1 > 0) or np.all(d1 < 0):
        return False

    if np.all(d2 == 0.0) or np.all(d1 == 0.0):
        # coplanar: project to the dominant axis plane and test in 2-D
        axis = int(np.argmax(np.abs(n1)))
        keep = [i for i in range(3) if i != axis]
        a = t1[:, keep]
        b = t2[:, keep]
        for i in range(3):
            for j in range(3):
                if _seg_seg_2d(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3]):
                    return True
        if _point_in_tri_2d(a[0], b[0], b[1], b[2]):
            return True
        if _point_in_tri_2d(b[0], a[0], a[1], a[2]):
            return True
        return False

    # interval overlap along the intersection line L = n1 x n2
    line = np.cross(n1, n2)
    axis = int(np.argmax(np.abs(line)))

    def interval(tri, dist):
        # interval of the triangle's slice along the plane-plane line:
        # on-plane vertices contribute their own projection, strictly
        # crossing edges contribute their crossing point
        proj = tri[:, axis]
        pos = [i for i in range(3) if dist[i] > 0]
        neg = [i for i in range(3) if dist[i] < 0]
        pts = [proj[i] for i in range(3) if dist[i] == 0]
        for i in pos:
            for j in neg:
                f = dist[i] / (dist[i] - dist[j])
                pts.append(proj[i] + f * (proj[j] - proj[i]))
        return min(pts), max(pts)

    lo1, hi1 = interval(t1, d1)
    lo2, hi2 = interval(t2, d2)
    return max(lo1, lo2) <= min(hi1, hi2)
