"""Incremental potential, elastic models and Hessian snapshots.

The objective minimized each time step is

    E(x) = 1/2 (x - x_tilde)^T M (x - x_tilde) + h^2 Psi(x) + B(x)

with lumped diagonal mass M, elastic energy Psi and barrier energy B summed
over the active constraint set.  Element Hessians are eigen-projected to PSD
before assembly; the contact part of the frozen Hessian is the rank-one
model k * grad_d grad_d^T per pair.  Dirichlet rows/cols are replaced by
identity so pinned vertices decouple exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import contact as con
from .errors import ConfigError

KIND_NONE = 0
KIND_ARAP = 1
KIND_SNH = 2

_KIND_IDS = {"arap": KIND_ARAP, "snh": KIND_SNH, "none": KIND_NONE}

# row-major <-> column-major flattening of 3x3 matrices
_PERM_RC = np.array([3 * j + i for i in range(3) for j in range(3)])


def lame_parameters(youngs, poisson):
    """Standard (mu, lambda) from Young's modulus and Poisson ratio."""
    mu = youngs / (2.0 * (1.0 + poisson))
    lam = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return mu, lam


def lumped_masses(mesh, density):
    """Per-vertex masses: a quarter of each incident tet's rest mass.

    density may be a scalar or a per-element array.
    """
    from .geometry import tet_volumes

    m = np.zeros(mesh.n_vertices)
    if mesh.tets.size:
        vols = tet_volumes(mesh.rest_positions, mesh.tets)
        rho = np.broadcast_to(np.asarray(density, dtype=float), vols.shape)
        share = rho * vols / 4.0
        np.add.at(m, mesh.tets.ravel(), np.repeat(share, 4))
    return m


# ---------------------------------------------------------------------------
# state


@dataclass
class SimState:
    """Flat per-step state vectors (all 3N except mass, which is per vertex)."""

    x: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    h: float
    x_tilde: np.ndarray
    f_ext: np.ndarray

    @property
    def mass3(self):
        return np.repeat(self.mass, 3)


def prepare_step(x, v, mass, h, f_ext, dirichlet):
    """Build a SimState with the inertia target for one implicit step.

    x_tilde = x + h v + h^2 M^{-1} f_ext on free vertices; pinned vertices
    keep x_tilde = x so they contribute nothing to the objective.
    """
    x = np.asarray(x, dtype=float).ravel().copy()
    v = np.asarray(v, dtype=float).ravel().copy()
    f_ext = np.asarray(f_ext, dtype=float).ravel()
    mass3 = np.repeat(mass, 3)
    pinned = np.repeat(dirichlet, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(mass3 > 0, f_ext / mass3, 0.0)
    x_tilde = x + h * v + h * h * acc
    x_tilde[pinned] = x[pinned]
    v = v.copy()
    v[pinned] = 0.0
    return SimState(x=x, v=v, mass=np.asarray(mass, dtype=float), h=h, x_tilde=x_tilde, f_ext=f_ext)


# ---------------------------------------------------------------------------
# elastic model


@dataclass
class ElasticModel:
    """Per-element elastic data on a tet mesh.

    kind_id : (T,) int array (0 none, 1 ARAP, 2 stable neo-Hookean)
    mu, lam : (T,) Lame parameters
    """

    tets: np.ndarray
    Bm: np.ndarray  # (T, 3, 3) inverse rest shape matrices
    vol: np.ndarray  # (T,) rest volumes
    mu: np.ndarray
    lam: np.ndarray
    kind_id: np.ndarray
    G: np.ndarray = field(default=None, repr=False)  # (T, 9, 12) dF/dx

    @classmethod
    def from_mesh(cls, mesh, kind, youngs, poisson):
        T = len(mesh.tets)
        mu, lam = lame_parameters(youngs, poisson)
        return cls.from_arrays(
            mesh,
            np.full(T, _kind_id(kind), dtype=np.int8),
            np.full(T, mu),
            np.full(T, lam),
        )

    @classmethod
    def from_arrays(cls, mesh, kind_id, mu, lam):
        verts = mesh.rest_positions[mesh.tets]
        Dm = np.stack(
            [verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0], verts[:, 3] - verts[:, 0]],
            axis=2,
        )  # columns are rest edges
        vol = np.linalg.det(Dm) / 6.0
        if np.any(vol <= 0):
            raise ConfigError("non-positive rest volume")
        Bm = np.linalg.inv(Dm)
        model = cls(
            tets=mesh.tets,
            Bm=Bm,
            vol=vol,
            mu=np.asarray(mu, dtype=float),
            lam=np.asarray(lam, dtype=float),
            kind_id=np.asarray(kind_id),
            G=None,
        )
        model.G = model._build_G()
        return model

    def _build_G(self):
        # d vec(F) / d x_elem with row-major vec(F) and x_elem = (x0..x3)
        T = len(self.vol)
        G = np.zeros((T, 9, 12))
        bcoef = np.zeros((T, 4, 3))
        bcoef[:, 1:, :] = self.Bm
        bcoef[:, 0, :] = -self.Bm.sum(axis=1)
        for i in range(3):
            for j in range(3):
                for m in range(4):
                    G[:, 3 * i + j, 3 * m + i] = bcoef[:, m, j]
        return G

    def deformation_gradients(self, x):
        x = x.reshape(-1, 3)
        verts = x[self.tets]
        Ds = np.stack(
            [verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0], verts[:, 3] - verts[:, 0]],
            axis=2,
        )
        return Ds @ self.Bm


def _kind_id(kind):
    try:
        return _KIND_IDS[str(kind).lower()]
    except KeyError:
        raise ConfigError(f"unknown elastic model {kind!r}") from None


# --- ARAP ------------------------------------------------------------------


def _signed_svd(F):
    """Batched SVD with reflections folded into the smallest singular value."""
    U, S, Vt = np.linalg.svd(F)
    S = S.copy()
    flip = np.linalg.det(U @ Vt) < 0
    U[flip, :, 2] *= -1.0
    S[flip, 2] *= -1.0
    return U, S, Vt


def arap_energy_density(F, mu):
    _, S, _ = _signed_svd(F)
    return 0.5 * mu * ((S - 1.0) ** 2).sum(axis=-1)


def arap_piola(F, mu):
    U, S, Vt = _signed_svd(F)
    R = U @ Vt
    return mu[:, None, None] * (F - R)


_TWIST_PAIRS = ((0, 1), (1, 2), (0, 2))


def arap_hessian_projected(F, mu):
    """Analytic PSD-projected 9x9 ARAP Hessians (row-major vec)."""
    U, S, Vt = _signed_svd(F)
    T = F.shape[0]
    H = np.einsum("t,ab->tab", mu, np.eye(9))
    for i, j in _TWIST_PAIRS:
        denom = S[:, i] + S[:, j]
        safe = np.where(np.abs(denom) < 1e-8, np.copysign(1e-8, denom + 1e-300), denom)
        lam = mu * (1.0 - 2.0 / safe)  # twist eigenvalue before projection
        lam = np.maximum(lam, 0.0)
        E = np.zeros((3, 3))
        E[i, j] = 1.0
        E[j, i] = -1.0
        Q = (U @ E @ Vt) / np.sqrt(2.0)
        q = Q.reshape(T, 9)
        H += np.einsum("t,ta,tb->tab", lam - mu, q, q)
    return H


# --- stable neo-Hookean ----------------------------------------------------


def _cof(F):
    c = np.empty_like(F)
    c[..., :, 0] = np.cross(F[..., :, 1], F[..., :, 2])
    c[..., :, 1] = np.cross(F[..., :, 2], F[..., :, 0])
    c[..., :, 2] = np.cross(F[..., :, 0], F[..., :, 1])
    return c


def snh_energy_density(F, mu, lam):
    J = np.linalg.det(F)
    ic = (F * F).sum(axis=(-2, -1))
    return 0.5 * mu * (ic - 3.0) - mu * (J - 1.0) + 0.5 * lam * (J - 1.0) ** 2


def snh_piola(F, mu, lam):
    J = np.linalg.det(F)
    coef = (lam * (J - 1.0) - mu)[:, None, None]
    return mu[:, None, None] * F + coef * _cof(F)


def _skew(v):
    T = v.shape[0]
    X = np.zeros((T, 3, 3))
    X[:, 0, 1] = -v[:, 2]
    X[:, 0, 2] = v[:, 1]
    X[:, 1, 0] = v[:, 2]
    X[:, 1, 2] = -v[:, 0]
    X[:, 2, 0] = -v[:, 1]
    X[:, 2, 1] = v[:, 0]
    return X


def _det_hessian(F):
    """d^2 det(F) / dF^2 in row-major vec convention, shape (T, 9, 9)."""
    T = F.shape[0]
    f0, f1, f2 = F[:, :, 0], F[:, :, 1], F[:, :, 2]
    Hc = np.zeros((T, 9, 9))
    Hc[:, 0:3, 3:6] = -_skew(f2)
    Hc[:, 0:3, 6:9] = _skew(f1)
    Hc[:, 3:6, 0:3] = _skew(f2)
    Hc[:, 3:6, 6:9] = -_skew(f0)
    Hc[:, 6:9, 0:3] = -_skew(f1)
    Hc[:, 6:9, 3:6] = _skew(f0)
    return Hc[:, _PERM_RC][:, :, _PERM_RC]


def snh_hessian(F, mu, lam):
    """Unprojected 9x9 stable neo-Hookean Hessians (row-major vec)."""
    J = np.linalg.det(F)
    g = _cof(F).reshape(F.shape[0], 9)
    H = np.einsum("t,ab->tab", mu, np.eye(9))
    H += np.einsum("t,ta,tb->tab", lam, g, g)
    H += (lam * (J - 1.0) - mu)[:, None, None] * _det_hessian(F)
    return H


def project_psd(H, floor=0.0):
    """Batched symmetric eigen-projection: clamp eigenvalues below floor."""
    w, Q = np.linalg.eigh(H)
    w = np.maximum(w, floor)
    return np.einsum("tak,tk,tbk->tab", Q, w, Q)


# --- dispatch --------------------------------------------------------------


def elastic_energy(elastic: ElasticModel, x):
    if elastic is None or len(elastic.vol) == 0:
        return 0.0
    F = elastic.deformation_gradients(x)
    psi = np.zeros(len(elastic.vol))
    m = elastic.kind_id == KIND_ARAP
    if np.any(m):
        psi[m] = arap_energy_density(F[m], elastic.mu[m])
    m = elastic.kind_id == KIND_SNH
    if np.any(m):
        psi[m] = snh_energy_density(F[m], elastic.mu[m], elastic.lam[m])
    return float((elastic.vol * psi).sum())


def elastic_gradient(elastic: ElasticModel, x, out):
    """Accumulate d Psi / dx into out (3N,)."""
    if elastic is None or len(elastic.vol) == 0:
        return
    F = elastic.deformation_gradients(x)
    P = np.zeros_like(F)
    m = elastic.kind_id == KIND_ARAP
    if np.any(m):
        P[m] = arap_piola(F[m], elastic.mu[m])
    m = elastic.kind_id == KIND_SNH
    if np.any(m):
        P[m] = snh_piola(F[m], elastic.mu[m], elastic.lam[m])
    vecP = P.reshape(-1, 9)
    gel = elastic.vol[:, None] * np.einsum("tab,ta->tb", elastic.G, vecP)
    idx = (3 * elastic.tets[:, :, None] + np.arange(3)).reshape(-1)
    np.add.at(out, idx, gel.reshape(-1))


def elastic_element_hessians(elastic: ElasticModel, x):
    """PSD-projected 12x12 element Hessians of Psi (without the h^2 factor)."""
    F = elastic.deformation_gradients(x)
    H9 = np.zeros((len(elastic.vol), 9, 9))
    m = elastic.kind_id == KIND_ARAP
    if np.any(m):
        H9[m] = arap_hessian_projected(F[m], elastic.mu[m])
    m = elastic.kind_id == KIND_SNH
    if np.any(m):
        H9[m] = project_psd(snh_hessian(F[m], elastic.mu[m], elastic.lam[m]))
    H12 = np.einsum("tia,tij,tjb->tab", elastic.G, H9, elastic.G)
    return elastic.vol[:, None, None] * H12


# ---------------------------------------------------------------------------
# objective, gradient, Hessian snapshot


def incremental_potential(state: SimState, elastic, cs: con.ConstraintSet) -> float:
    dx = state.x - state.x_tilde
    e = 0.5 * float(dx @ (state.mass3 * dx))
    e += state.h * state.h * elastic_energy(elastic, state.x)
    _, _, d, _ = cs.arrays()
    if len(d):
        b, _, _ = con.barrier_batch(d, cs.d_hat, cs.kappa)
        e += float(b.sum())
    return e


def gradient(state: SimState, elastic, cs: con.ConstraintSet, dirichlet) -> np.ndarray:
    g = state.mass3 * (state.x - state.x_tilde)
    if elastic is not None:
        scale = np.zeros_like(g)
        elastic_gradient(elastic, state.x, scale)
        g += state.h * state.h * scale
    verts, grads, d, _ = cs.arrays()
    if len(d):
        _, db, _ = con.barrier_batch(d, cs.d_hat, cs.kappa)
        contrib = db[:, None, None] * grads  # (P, 4, 3)
        idx = (3 * verts[:, :, None] + np.arange(3)).reshape(-1)
        np.add.at(g, idx, contrib.reshape(-1))
    g[np.repeat(dirichlet, 3)] = 0.0
    return g


def assemble_base_hessian(state: SimState, elastic, cs: con.ConstraintSet, dirichlet):
    """Frozen Hessian snapshot H = M + h^2 ProjHess(Psi) + sum_c k_c g_c g_c^T.

    Returns a CSR matrix with Dirichlet rows/columns replaced by identity.
    """
    n = len(state.x)
    rows, cols, vals = [], [], []

    if elastic is not None and len(elastic.vol):
        Hel = state.h * state.h * elastic_element_hessians(elastic, state.x)
        idx = (3 * elastic.tets[:, :, None] + np.arange(3)).reshape(len(elastic.vol), 12)
        r = np.repeat(idx, 12, axis=1).ravel()
        c = np.tile(idx, (1, 12)).ravel()
        rows.append(r)
        cols.append(c)
        vals.append(Hel.reshape(-1))

    verts, grads, d, k = cs.arrays()
    if len(d):
        u = grads.reshape(len(d), 12)
        Hc = np.einsum("p,pa,pb->pab", k, u, u)
        idx = (3 * verts[:, :, None] + np.arange(3)).reshape(len(d), 12)
        r = np.repeat(idx, 12, axis=1).ravel()
        c = np.tile(idx, (1, 12)).ravel()
        rows.append(r)
        cols.append(c)
        vals.append(Hc.reshape(-1))

    pinned = np.repeat(dirichlet, 3)
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        keep = ~(pinned[r] | pinned[c])
        H = sp.coo_matrix((v[keep], (r[keep], c[keep])), shape=(n, n))
    else:
        H = sp.coo_matrix((n, n))

    diag = np.where(pinned, 1.0, state.mass3)
    H = (H + sp.diags(diag)).tocsr()
    return H


@dataclass
class HessianModel:
    """Matrix-free model Hessian: frozen base plus rank-one contact updates."""

    H_base: sp.csr_matrix
    updates: list  # of contact.UpdateCandidate
    _uidx: np.ndarray = field(default=None, repr=False)
    _uval: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.updates:
            self._uidx = np.stack(
                [(3 * c.verts[:, None] + np.arange(3)).reshape(-1) for c in self.updates]
            )
            self._uval = np.stack([c.u.reshape(-1) for c in self.updates])
        else:
            self._uidx = np.zeros((0, 12), dtype=np.int64)
            self._uval = np.zeros((0, 12))

    def hvp(self, vec):
        out = self.H_base @ vec
        if len(self._uval):
            dots = (self._uval * vec[self._uidx]).sum(axis=1)
            np.add.at(out, self._uidx.ravel(), (self._uval * dots[:, None]).ravel())
        return out
