"""Command line surface: scene configs, simulation driver, compare, check.

Configs are flat INI files: one ``[scene]`` section, one ``[solver]``
section, and one ``[mesh:<name>]`` section per object.  Frames go out as
``frame_%05d.obj`` plus two CSV logs, ``iters.csv`` (one row per solver
iteration) and ``frames.csv`` (one row per frame).  The ``check`` command
re-reads emitted frames and verifies separation with brute-force distance
queries, independent of any solver state.
"""

import argparse
import configparser
import csv
import os
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path


def _apply_thread_cap():
    # must run before numpy first loads its BLAS
    t = os.environ.get("THREADS")
    if t:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
            "VECLIB_MAXIMUM_THREADS",
        ):
            os.environ.setdefault(var, t)


_apply_thread_cap()

import numpy as np  # noqa: E402

from . import energy as en  # noqa: E402
from . import geometry as geo  # noqa: E402
from . import solver as sol  # noqa: E402
from .errors import ConfigError, SimError  # noqa: E402

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_CHECK = 4

ITER_COLUMNS = (
    "frame,iter,grad_norm,z_norm,r_k,restart,mu,nu,min_alpha,t_grad_ms,t_dir_ms,t_ccd_ms"
)
FRAME_COLUMNS = "frame,iterations,converged,min_alpha,wall_ms"


@dataclass
class RunParams:
    gravity: np.ndarray
    h: float
    frames: int
    output_dir: Path
    seed: int


def _floats(text, n, where):
    parts = text.split()
    if len(parts) != n:
        raise ConfigError(f"{where}: expected {n} numbers, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


_PIN_RE = re.compile(r"^([xyz])\s*([<>])\s*([-+0-9.eE]+)$")


def _pinned_mask(expr, rest, where):
    expr = expr.strip()
    if expr == "none":
        return np.zeros(len(rest), dtype=bool)
    if expr == "all":
        return np.ones(len(rest), dtype=bool)
    m = _PIN_RE.match(expr)
    if not m:
        raise ConfigError(f"{where}: cannot parse pinned selector {expr!r}")
    axis = "xyz".index(m.group(1))
    value = float(m.group(3))
    col = rest[:, axis]
    return col < value if m.group(2) == "<" else col > value


_MATERIAL_IDS = {"arap": 1, "snh": 2, "neo-hookean": 2}


def _load_object(section, name, config_dir):
    where = f"[{name}]"
    kind = section.get("kind", "box")
    if kind == "box":
        cells = section.get("cells", "1 1 1").split()
        size = _floats(section.get("size", "1 1 1"), 3, where)
        mesh = geo.make_box_mesh(int(cells[0]), int(cells[1]), int(cells[2]), tuple(size))
    elif kind == "tet":
        mesh = geo.make_single_tet(float(section.get("scale", "1")))
    elif kind == "file":
        base = config_dir / section.get("path", "")
        if not Path(str(base) + ".node").exists():
            raise ConfigError(f"{where}: mesh file {base}.node not found")
        mesh = geo.load_node_ele(base)
    else:
        raise ConfigError(f"{where}: unknown mesh kind {kind!r}")

    rest = mesh.rest_positions.copy()
    if "scale" in section and kind != "tet":
        rest *= float(section["scale"])
    if "translate" in section:
        rest += _floats(section["translate"], 3, where)

    material = section.get("material", "arap").lower()
    if material not in _MATERIAL_IDS:
        raise ConfigError(f"{where}: unknown material {material!r}")
    youngs = section.getfloat("youngs", 1e4)
    poisson = section.getfloat("poisson", 0.3)
    density = section.getfloat("density", 1000.0)
    for label, val in (("youngs", youngs), ("density", density)):
        if val <= 0:
            raise ConfigError(f"{where}: {label} must be positive")
    if not 0 <= poisson < 0.5:
        raise ConfigError(f"{where}: poisson must lie in [0, 0.5)")

    pinned = _pinned_mask(section.get("pinned", "none"), rest, where)
    mu, lam = en.lame_parameters(youngs, poisson)
    T = len(mesh.tets)
    return {
        "rest": rest,
        "tets": mesh.tets,
        "pinned": pinned,
        "kind_id": np.full(T, _MATERIAL_IDS[material], dtype=np.int8),
        "mu": np.full(T, mu),
        "lam": np.full(T, lam),
        "density": np.full(T, density),
    }


def load_config(path):
    """Parse an INI scene file. Returns (Scene, SolverConfig, RunParams)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e

    if "scene" not in cp:
        raise ConfigError("missing [scene] section")
    sc = cp["scene"]
    h = sc.getfloat("h", 0.01)
    d_hat = sc.getfloat("d_hat", 1e-3)
    kappa = sc.getfloat("kappa", 1e4)
    frames = sc.getint("frames", 1)
    for label, val in (("h", h), ("d_hat", d_hat), ("kappa", kappa)):
        if val <= 0:
            raise ConfigError(f"[scene] {label} must be positive")
    if frames < 0:
        raise ConfigError("[scene] frames must be >= 0")
    gravity = _floats(sc.get("gravity", "0 0 -9.81"), 3, "[scene] gravity")
    output_dir = Path(sc.get("output_dir", "out"))
    if not output_dir.is_absolute():
        output_dir = path.parent / output_dir
    run = RunParams(gravity=gravity, h=h, frames=frames, output_dir=output_dir, seed=sc.getint("seed", 0))

    cfg_kwargs = {}
    if "solver" in cp:
        converters = {
            "eps": float, "delta": float, "eps_rot": float, "alpha_l": float,
            "iter_max": int, "K": int, "block_size": int, "levels": int,
            "coarse_block": int, "ccd_per_subdomain": lambda s: s.lower() in ("1", "true", "yes"),
            "preconditioner": str, "direction_rule": str, "update_strategy": str,
        }
        for key, raw in cp["solver"].items():
            # configparser lowercases keys; K is the only cased field name
            field = "K" if key == "k" else key
            if field not in converters:
                raise ConfigError(f"[solver] unknown key {key!r}")
            cfg_kwargs[field] = converters[field](raw)
    config = sol.SolverConfig(**cfg_kwargs).validate()

    objects = [
        _load_object(cp[s], s, path.parent) for s in cp.sections() if s.startswith("mesh")
    ]
    if not objects:
        raise ConfigError("no [mesh:*] sections")

    offset = 0
    verts, tets, pinned = [], [], []
    for ob in objects:
        verts.append(ob["rest"])
        tets.append(ob["tets"] + offset)
        pinned.append(ob["pinned"])
        offset += len(ob["rest"])
    mesh = geo.TetMesh(
        rest_positions=np.vstack(verts),
        tets=np.vstack(tets),
        dirichlet=np.concatenate(pinned),
    )
    elastic = en.ElasticModel.from_arrays(
        mesh,
        np.concatenate([ob["kind_id"] for ob in objects]),
        np.concatenate([ob["mu"] for ob in objects]),
        np.concatenate([ob["lam"] for ob in objects]),
    )
    density = np.concatenate([ob["density"] for ob in objects])
    mass = en.lumped_masses(mesh, density)
    if np.any(mass <= 0):
        raise ConfigError("every vertex needs positive lumped mass")
    scene = sol.Scene(
        mesh=mesh,
        surface=geo.SurfaceMesh.from_tet_mesh(mesh),
        elastic=elastic,
        mass=mass,
        dirichlet=mesh.dirichlet,
        d_hat=d_hat,
        kappa=kappa,
        f_ext=(mass[:, None] * gravity).ravel(),
    )
    return scene, config, run


# ---------------------------------------------------------------------------
# simulation driver


def _fmt(x):
    return format(float(x), ".17g")


def _write_frame(out_dir, index, x, surface):
    geo.save_obj(out_dir / f"frame_{index:05d}.obj", np.asarray(x).reshape(-1, 3), surface.triangles)


def _simulate(scene, config, run, curve_sink=None):
    """Run all frames, writing outputs. Returns (ok, total_iters)."""
    out = run.output_dir
    os.makedirs(out, exist_ok=True)
    x = scene.mesh.rest_positions.ravel().copy()
    v = np.zeros_like(x)
    _write_frame(out, 0, x, scene.surface)
    total = 0
    ok = True
    with open(out / "iters.csv", "w", newline="") as fi, open(out / "frames.csv", "w", newline="") as ff:
        fi.write(ITER_COLUMNS + "\n")
        ff.write(FRAME_COLUMNS + "\n")
        for frame in range(1, run.frames + 1):
            t0 = time.perf_counter()
            try:
                state, trace = sol.step(scene, x, v, run.h, config)
            except SimError as e:
                print(f"solver failure at frame {frame}: {e}", file=sys.stderr)
                ok = False
                break
            wall_ms = (time.perf_counter() - t0) * 1e3
            x, v = state.x, state.v
            min_alpha = 1.0
            for rec in trace.records:
                fi.write(
                    f"{frame},{rec.k},{_fmt(rec.grad_norm)},{_fmt(rec.z_norm)},{_fmt(rec.r)},"
                    f"{int(rec.restart)},{_fmt(rec.mu)},{_fmt(rec.nu)},{_fmt(rec.min_alpha)},"
                    f"{_fmt(rec.t_grad_ms)},{_fmt(rec.t_dir_ms)},{_fmt(rec.t_ccd_ms)}\n"
                )
                min_alpha = min(min_alpha, rec.min_alpha)
            ff.write(
                f"{frame},{trace.iterations},{int(trace.converged)},{_fmt(min_alpha)},{_fmt(wall_ms)}\n"
            )
            total += trace.iterations
            if curve_sink is not None and frame == 1:
                z0 = trace.records[0].z_norm or 1.0
                curve_sink.extend((rec.k, rec.z_norm / z0) for rec in trace.records)
            _write_frame(out, frame, x, scene.surface)
    return ok, total


def run_simulation(config_path) -> int:
    try:
        scene, config, run = load_config(config_path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    ok, total = _simulate(scene, config, run)
    if not ok:
        return EXIT_SOLVER
    print(f"wrote {run.frames + 1} frames, {total} iterations -> {run.output_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solver comparison

_VARIANT_TOKENS = {}
for _v in sol.PRECONDITIONERS:
    _VARIANT_TOKENS[_v.lower()] = ("preconditioner", _v)
for _v in sol.DIRECTION_RULES:
    _VARIANT_TOKENS[_v.lower()] = ("direction_rule", _v)
for _v in sol.UPDATE_STRATEGIES:
    _VARIANT_TOKENS[_v.lower()] = ("update_strategy", _v)


def _variant_config(base, name):
    import dataclasses

    overrides = {}
    for token in name.split("+"):
        token = token.strip()
        if token.lower() not in _VARIANT_TOKENS:
            raise ConfigError(f"unknown variant token {token!r}")
        field, value = _VARIANT_TOKENS[token.lower()]
        overrides[field] = value
    return dataclasses.replace(base, **overrides)


def compare_solvers(config_path, variants) -> int:
    try:
        _, base_cfg, base_run = load_config(config_path)
        variant_cfgs = [(name, _variant_config(base_cfg, name)) for name in variants]
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(base_run.output_dir, exist_ok=True)
    rows = []
    for name, cfg in variant_cfgs:
        scene, _, run = load_config(config_path)  # fresh state per variant
        slug = name.replace("+", "_").lower()
        run.output_dir = base_run.output_dir / slug
        curve = []
        t0 = time.perf_counter()
        try:
            ok, total = _simulate(scene, cfg, run, curve_sink=curve)
        except SimError:
            ok, total = False, 0
        wall_ms = (time.perf_counter() - t0) * 1e3
        rows.append((name, "ok" if ok else "failed", total, wall_ms))
        with open(base_run.output_dir / f"curve_{slug}.csv", "w", newline="") as f:
            f.write("iter,rel_z\n")
            for k, rel in curve:
                f.write(f"{k},{_fmt(rel)}\n")
    with open(base_run.output_dir / "comparison.csv", "w", newline="") as f:
        f.write("variant,status,total_iters,wall_ms\n")
        for name, status, total, wall in rows:
            f.write(f"{name},{status},{total},{_fmt(wall)}\n")
    for name, status, total, wall in rows:
        print(f"{name}: {status}, {total} iterations, {wall:.1f} ms")
    return EXIT_OK


# ---------------------------------------------------------------------------
# independent penetration checker


def _frame_min_distance(positions, triangles):
    """Brute-force min separation among non-adjacent surface primitives."""
    x = np.asarray(positions)
    tris = np.asarray(triangles)
    edges = set()
    for a, b, c in tris:
        edges.add(tuple(sorted((int(a), int(b)))))
        edges.add(tuple(sorted((int(b), int(c)))))
        edges.add(tuple(sorted((int(a), int(c)))))
    edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    verts = np.unique(tris)
    best = np.inf

    vi, ti = np.meshgrid(np.arange(len(verts)), np.arange(len(tris)), indexing="ij")
    vi, ti = vi.ravel(), ti.ravel()
    vid = verts[vi]
    keep = ~np.any(tris[ti] == vid[:, None], axis=1)
    if np.any(keep):
        vv, tt = vid[keep], tris[ti[keep]]
        d, _ = geo.pt_distance_batch(x[vv], x[tt[:, 0]], x[tt[:, 1]], x[tt[:, 2]])
        best = min(best, float(d.min()))

    ii, jj = np.triu_indices(len(edges), k=1)
    ea, eb = edges[ii], edges[jj]
    keep = (
        (ea[:, 0] != eb[:, 0]) & (ea[:, 0] != eb[:, 1])
        & (ea[:, 1] != eb[:, 0]) & (ea[:, 1] != eb[:, 1])
    )
    if np.any(keep):
        ea, eb = ea[keep], eb[keep]
        d, _ = geo.ee_distance_batch(x[ea[:, 0]], x[ea[:, 1]], x[eb[:, 0]], x[eb[:, 1]])
        best = min(best, float(d.min()))
    return best


def _frame_has_intersections(positions, triangles):
    x = np.asarray(positions)
    tris = np.asarray(triangles)
    for i in range(len(tris)):
        for j in range(i + 1, len(tris)):
            if set(tris[i]) & set(tris[j]):
                continue
            if geo.tri_tri_intersect(x[tris[i]], x[tris[j]]):
                return True
    return False


def run_check(output_dir) -> int:
    out = Path(output_dir)
    frames = sorted(out.glob("frame_*.obj"))
    if not frames:
        print(f"no frames found in {out}", file=sys.stderr)
        return EXIT_CONFIG
    worst = np.inf
    for path in frames:
        positions, triangles = geo.load_obj(path)
        d = _frame_min_distance(positions, triangles)
        worst = min(worst, d)
        if d <= 0.0 or _frame_has_intersections(positions, triangles):
            print(f"penetration in {path.name}: min distance {d:g}", file=sys.stderr)
            return EXIT_CHECK
    print(f"{len(frames)} frames checked, min surface distance {worst:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ipcsim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    p_sim = sub.add_parser("simulate", help="run a scene config")
    p_sim.add_argument("config")
    p_cmp = sub.add_parser("compare", help="run solver variants on one scene")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--variants", required=True, help="comma-separated, e.g. mas+woodbury,jacobi")
    p_chk = sub.add_parser("check", help="verify emitted frames are penetration-free")
    p_chk.add_argument("output_dir")
    args = ap.parse_args(argv)
    if args.command == "simulate":
        return run_simulation(args.config)
    if args.command == "compare":
        return compare_solvers(args.config, [v for v in args.variants.split(",") if v])
    return run_check(args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
