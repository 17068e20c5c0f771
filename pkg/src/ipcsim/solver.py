"""Preconditioned nonlinear CG outer loop with incremental preconditioning.

One implicit time step minimizes the incremental potential with a
preconditioned nonlinear conjugate gradient iteration:

* on restart iterations the constraint set is snapshotted, the Hessian
  model and the preconditioner are rebuilt from scratch;
* between restarts the Hessian model gains rank-one terms for new and
  stiffening contacts, and the subdomain inverses of the preconditioner
  absorb the strongest of them through capacitance (Woodbury) solves;
* the step combines the preconditioned gradient z with the previous
  direction by minimizing the local quadratic model over their span
  (a 2x2 solve), instead of a scalar conjugacy parameter;
* conservative CCD clamps the step per subdomain, with a mixed-step
  certification and a global fallback so trajectories stay
  intersection-free;
* a restart triggers when the preconditioned-orthogonality ratio
  r = |g_new . z_prev| / (g_new . z_new) exceeds delta, and convergence
  is only declared at an iteration whose preconditioner is fresh.

Classic direction rules (FR, PR, DK, CD) with a backtracking line search,
a 3x3 block Jacobi preconditioner, alternative update strategies (Freeze,
FullRebuild) and a dense damped-Newton oracle are provided for
comparisons.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import ccd as ccdmod
from . import contact as con
from . import energy as en
from . import mas as masmod
from . import woodbury as wbmod
from .errors import ConfigError, NotSpdError

PRECONDITIONERS = ("MAS", "Jacobi")
DIRECTION_RULES = ("Subspace2D", "FR", "PR", "DK", "CD")
UPDATE_STRATEGIES = ("Woodbury", "Freeze", "FullRebuild")


@dataclass
class SolverConfig:
    eps: float = 1e-5
    delta: float = 0.3
    iter_max: int = 10000
    K: int = 8
    eps_rot: float = math.cos(math.radians(25.0))
    alpha_l: float = ccdmod.ALPHA_L_DEFAULT
    preconditioner: str = "MAS"
    direction_rule: str = "Subspace2D"
    update_strategy: str = "Woodbury"
    block_size: int = 32
    levels: int = 2
    coarse_block: int = 4
    ccd_per_subdomain: bool = True

    def validate(self):
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.iter_max < 1:
            raise ConfigError("iter_max must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")
        if self.direction_rule not in DIRECTION_RULES:
            raise ConfigError(f"unknown direction rule {self.direction_rule!r}")
        if self.update_strategy not in UPDATE_STRATEGIES:
            raise ConfigError(f"unknown update strategy {self.update_strategy!r}")
        return self


@dataclass
class Scene:
    """Static per-simulation data: mesh, materials, contact parameters."""

    mesh: object
    surface: object
    elastic: object  # ElasticModel or None
    mass: np.ndarray
    dirichlet: np.ndarray
    d_hat: float
    kappa: float
    f_ext: np.ndarray
    _partitions: dict = field(default_factory=dict, repr=False)

    def partition(self, block_size):
        if block_size not in self._partitions:
            self._partitions[block_size] = masmod.partition_domain(self.mesh, block_size)
        return self._partitions[block_size]

    @classmethod
    def build(cls, mesh, elastic, density, d_hat, kappa, gravity=(0.0, 0.0, -9.81)):
        from . import geometry as geo

        mass = en.lumped_masses(mesh, density)
        f_ext = (mass[:, None] * np.asarray(gravity, dtype=float)).ravel()
        return cls(
            mesh=mesh,
            surface=geo.SurfaceMesh.from_tet_mesh(mesh),
            elastic=elastic,
            mass=mass,
            dirichlet=mesh.dirichlet,
            d_hat=d_hat,
            kappa=kappa,
            f_ext=f_ext,
        )


@dataclass
class IterRecord:
    k: int
    grad_norm: float
    z_norm: float
    r: float
    restart: bool
    mu: float
    nu: float
    min_alpha: float
    t_grad_ms: float
    t_dir_ms: float
    t_ccd_ms: float


@dataclass
class SolverTrace:
    records: list = field(default_factory=list)
    converged: bool = False
    flags: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# direction subproblems


def solve_2d_subspace(z, p_prev, g, Hz, Hp):
    """Minimize the quadratic model over span{-z, p_prev}.

    Solves [[z.Hz, -z.Hp], [-p.Hz, p.Hp]] (mu, nu) = (z.g, -p.g); an
    ill-conditioned system falls back to the one-dimensional exact step.
    """
    zHz = float(z @ Hz)
    if zHz <= 0.0:
        raise NotSpdError("model-not-spd", "z.Hz <= 0 in subspace solve")
    A = np.array([[zHz, -float(z @ Hp)], [-float(p_prev @ Hz), float(p_prev @ Hp)]])
    b = np.array([float(z @ g), -float(p_prev @ g)])
    if np.linalg.cond(A) > 1e12:
        return b[0] / zHz, 0.0
    mu, nu = np.linalg.solve(A, b)
    return float(mu), float(nu)


def restart_ratio(g_next, z_prev, z_next):
    denom = float(g_next @ z_next)
    if denom <= 0.0:
        raise NotSpdError("precond-not-spd", "g.z <= 0 in restart ratio")
    return abs(float(g_next @ z_prev)) / denom


def baseline_direction(rule, g, z, p_prev, history):
    """p = -z + beta * p_prev with the named conjugacy parameter.

    history holds g_prev and z_prev from the previous iteration; an empty
    history means a fresh start (beta = 0).  beta is clamped at zero.
    """
    if not history or p_prev is None:
        return -z, 0.0
    g_prev = history["g_prev"]
    z_prev = history["z_prev"]
    gz_prev = float(g_prev @ z_prev)
    if rule == "FR":
        beta = float(g @ z) / gz_prev
    elif rule == "PR":
        beta = float(g @ (z - z_prev)) / gz_prev
    elif rule == "DK":
        y = g - g_prev
        py = float(p_prev @ y)
        if py == 0.0:
            beta = 0.0
        else:
            # preconditioned Dai-Kou; P y = z - z_prev while P is unchanged
            beta = float(y @ z) / py - float(y @ (z - z_prev)) * float(g @ p_prev) / py**2
    elif rule == "CD":
        gp = float(g_prev @ p_prev)
        beta = -float(g @ z) / gp if gp != 0.0 else 0.0
    else:
        raise ConfigError(f"unknown direction rule {rule!r}")
    beta = max(beta, 0.0)
    return -z + beta * p_prev, beta


# ---------------------------------------------------------------------------
# preconditioners


def _diag_blocks(H, n_verts):
    blocks = np.zeros((n_verts, 3, 3))
    base = 3 * np.arange(n_verts)
    for r in range(3):
        for c in range(3):
            blocks[:, r, c] = np.asarray(H[base + r, base + c]).ravel()
    return blocks


class JacobiPreconditioner:
    """Per-vertex 3x3 block inverse of the Hessian diagonal."""

    def __init__(self, blocks):
        try:
            np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError as e:
            raise NotSpdError("non-spd-block", str(e)) from e
        self.inv_blocks = np.linalg.inv(blocks)

    def apply(self, g):
        return np.einsum("nab,nb->na", self.inv_blocks, g.reshape(-1, 3)).ravel()


def jacobi_preconditioner(blocks) -> JacobiPreconditioner:
    return JacobiPreconditioner(np.asarray(blocks, dtype=float))


def _blocks_with_updates(base_blocks, candidates):
    blocks = base_blocks.copy()
    for cand in candidates:
        for r, v in enumerate(cand.verts):
            u = cand.u[r]
            if np.any(u):
                blocks[v] += np.outer(u, u)
    return blocks


# ---------------------------------------------------------------------------
# outer loop


def _state_at(state, x):
    return replace(state, x=x)


def _fresh_constraints(scene, x, base=None):
    current = con.compute_constraint_set(x, scene.surface, scene.d_hat, scene.kappa, scene.dirichlet)
    return con.ConstraintSet(
        current=current,
        base=current if base is None else base,
        d_hat=scene.d_hat,
        kappa=scene.kappa,
    )


def total_energy(scene, state, x):
    """Incremental potential at x with a freshly computed constraint set."""
    cs = _fresh_constraints(scene, x)
    return en.incremental_potential(_state_at(state, x), scene.elastic, cs)


def _apply_ccd(scene, partition, x, p, config):
    """Clamp the trial step. Returns (new x, min alpha over pairs/subdomains)."""
    pairs = ccdmod.collect_pairs(x, scene.surface, p)
    if config.ccd_per_subdomain:
        alpha_d, info = ccdmod.per_subdomain_steps(pairs, partition, x, p, alpha_l=config.alpha_l)
        scale = alpha_d[partition.subdomain_of]  # (N,)
        p_mix = (scale[:, None] * p.reshape(-1, 3)).ravel()
        if not ccdmod.certify_mixed(pairs, x, p_mix):
            p_mix = info.min_alpha * p
            return x + p_mix, info.min_alpha
        return x + p_mix, float(alpha_d.min())
    info = ccdmod.pair_steps(pairs, x, p, alpha_l=config.alpha_l)
    return x + info.min_alpha * p, info.min_alpha


def _line_search_alpha(scene, state, x, p, alpha_start, e0):
    """Backtracking halving until the incremental potential decreases."""
    alpha = alpha_start
    for _ in range(40):
        try:
            if total_energy(scene, state, x + alpha * p) < e0:
                return alpha
        except Exception:
            pass  # treat invalid trial states as non-decreasing
        alpha *= 0.5
    return alpha


def advance_step(scene: Scene, state: en.SimState, config: SolverConfig):
    """One implicit time step; returns (new SimState, SolverTrace)."""
    config.validate()
    partition = scene.partition(config.block_size)
    sub_of = partition.subdomain_of
    pinned3 = np.repeat(scene.dirichlet, 3)
    x_start = state.x.copy()
    x = state.x.copy()

    trace = SolverTrace()
    restart = True
    z_prev = None
    p_prev = None
    Hp_prev = None
    history = {}
    base_pairs = None
    H_base = None
    hier = None
    base_blocks = None
    jac = None
    best = (math.inf, x.copy())
    use_mas = config.preconditioner == "MAS"
    full_every = config.update_strategy == "FullRebuild"

    for k in range(config.iter_max):
        t0 = time.perf_counter()
        rebuild = restart or full_every
        if rebuild:
            cs = _fresh_constraints(scene, x)
            base_pairs = cs.current
            H_base = en.assemble_base_hessian(_state_at(state, x), scene.elastic, cs, scene.dirichlet)
            hmodel = en.HessianModel(H_base=H_base, updates=[])
            if use_mas:
                hier = masmod.build_hierarchy(
                    H_base, partition, L=config.levels, coarse_block=config.coarse_block
                )
                wb = None
            else:
                base_blocks = _diag_blocks(H_base, len(scene.mass))
                jac = JacobiPreconditioner(base_blocks)
        else:
            cs = _fresh_constraints(scene, x, base=base_pairs)
            cands = con.classify_all(cs, config.eps_rot)
            hmodel = en.HessianModel(H_base=H_base, updates=cands)
            if config.update_strategy == "Freeze":
                wb = None
            elif use_mas:
                topk = con.select_top_k(cands, sub_of, config.K)
                wb = wbmod.build_update(hier, topk, K=config.K)
            else:
                jac = JacobiPreconditioner(_blocks_with_updates(base_blocks, cands))

        g = en.gradient(_state_at(state, x), scene.elastic, cs, scene.dirichlet)
        if use_mas:
            z = masmod.apply_preconditioner(hier, wb, g)
            # coarse aggregates mix pinned rows in; project back to free dofs
            z[pinned3] = 0.0
        else:
            z = jac.apply(g)
        t1 = time.perf_counter()

        z_norm = float(np.linalg.norm(z))
        grad_norm = float(np.linalg.norm(g))
        if z_norm < best[0]:
            best = (z_norm, x.copy())

        v = hmodel.hvp(z)
        zg = float(z @ g)
        zv = float(z @ v)
        beta = 0.0
        if z_norm == 0.0:
            # already at a stationary point; keep the bookkeeping trivial
            mu, nu = 0.0, 0.0
            p = np.zeros_like(z)
            Hp = np.zeros_like(z)
        elif config.direction_rule == "Subspace2D":
            if restart or p_prev is None:
                if zv <= 0.0:
                    if z_norm == 0.0:
                        mu, nu = 0.0, 0.0
                    else:
                        raise NotSpdError("model-not-spd", "z.Hz <= 0 at restart")
                else:
                    mu, nu = zg / zv, 0.0
                p = -mu * z
                Hp = -mu * v
            else:
                mu, nu = solve_2d_subspace(z, p_prev, g, v, Hp_prev)
                p = -mu * z + nu * p_prev
                Hp = -mu * v + nu * Hp_prev
                if float(g @ p) >= 0.0 and z_norm > 0.0:
                    # drift in the Hp recurrence can spoil descent; fall back
                    if zv <= 0.0:
                        raise NotSpdError("model-not-spd", "z.Hz <= 0 in fallback")
                    mu, nu = zg / zv, 0.0
                    p = -mu * z
                    Hp = -mu * v
        else:
            if restart:
                p, beta = -z, 0.0
            else:
                p, beta = baseline_direction(config.direction_rule, g, z, p_prev, history)
                if float(g @ p) >= 0.0 and z_norm > 0.0:
                    p, beta = -z, 0.0
            mu, nu = 1.0, beta
            Hp = None
        t2 = time.perf_counter()

        if not np.any(p):
            x_new, min_alpha = x, 1.0
        elif config.direction_rule == "Subspace2D":
            x_new, min_alpha = _apply_ccd(scene, partition, x, p, config)
        else:
            pairs = ccdmod.collect_pairs(x, scene.surface, p)
            info = ccdmod.pair_steps(pairs, x, p, alpha_l=config.alpha_l)
            e0 = en.incremental_potential(_state_at(state, x), scene.elastic, cs)
            alpha = _line_search_alpha(scene, state, x, p, min(1.0, info.min_alpha), e0)
            mu = alpha
            min_alpha = info.min_alpha
            x_new = x + alpha * p
        x = x_new
        t3 = time.perf_counter()

        converged_now = z_norm <= config.eps
        trace.records.append(
            IterRecord(
                k=k,
                grad_norm=grad_norm,
                z_norm=z_norm,
                r=0.0,
                restart=restart,
                mu=float(mu),
                nu=float(nu),
                min_alpha=float(min_alpha),
                t_grad_ms=(t1 - t0) * 1e3,
                t_dir_ms=(t2 - t1) * 1e3,
                t_ccd_ms=(t3 - t2) * 1e3,
            )
        )

        if converged_now and (restart or full_every):
            trace.converged = True
            break
        if converged_now:
            # too small to trust the stale preconditioner: force a fresh
            # rebuild and re-test convergence there
            restart = True
        else:
            r = 0.0 if z_prev is None else restart_ratio(g, z_prev, z)
            trace.records[-1].r = r
            restart = r > config.delta
        z_prev = z
        p_prev = p
        Hp_prev = Hp
        history = {"g_prev": g, "z_prev": z}
    else:
        trace.flags.append("not-converged")
        x = best[1]

    v_new = (x - x_start) / state.h
    v_new[pinned3] = 0.0
    new_state = replace(state, x=x, v=v_new)
    return new_state, trace


def step(scene: Scene, x, v, h, config: SolverConfig):
    """Prepare the inertia target and advance one implicit step."""
    state = en.prepare_step(x, v, scene.mass, h, scene.f_ext, scene.dirichlet)
    return advance_step(scene, state, config)


# ---------------------------------------------------------------------------
# dense Newton oracle


def newton_oracle_step(scene: Scene, state: en.SimState, eps=1e-8, iter_max=200):
    """Damped dense Newton on the same objective; reference for accuracy.

    Desk scale only: factorizes the full projected Hessian each iteration.
    """
    x = state.x.copy()
    x_start = state.x.copy()
    pinned3 = np.repeat(scene.dirichlet, 3)
    iters = 0
    for _ in range(iter_max):
        cs = _fresh_constraints(scene, x)
        g = en.gradient(_state_at(state, x), scene.elastic, cs, scene.dirichlet)
        if np.linalg.norm(g) <= eps:
            break
        H = en.assemble_base_hessian(_state_at(state, x), scene.elastic, cs, scene.dirichlet)
        c, low = scipy.linalg.cho_factor(H.toarray())
        p = -scipy.linalg.cho_solve((c, low), g)
        p[pinned3] = 0.0
        pairs = ccdmod.collect_pairs(x, scene.surface, p)
        info = ccdmod.pair_steps(pairs, x, p, alpha_l=ccdmod.ALPHA_L_DEFAULT)
        e0 = en.incremental_potential(_state_at(state, x), scene.elastic, cs)
        alpha = _line_search_alpha(scene, state, x, p, min(1.0, info.min_alpha), e0)
        x = x + alpha * p
        iters += 1
    v_new = (x - x_start) / state.h
    v_new[pinned3] = 0.0
    return replace(state, x=x, v=v_new), iters
