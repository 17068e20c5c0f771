"""Config parsing, driver outputs, determinism, and the checker."""

import subprocess
import sys

import numpy as np
import pytest

import ipcsim.cli as cli
import ipcsim.geometry as geo
from ipcsim.errors import ConfigError

CONFIG = """
[scene]
gravity = 0 0 -9.81
h = 0.01
d_hat = 0.004
kappa = 1e4
frames = {frames}
output_dir = {out}

[mesh:floor]
kind = box
size = 0.8 0.8 0.1
translate = -0.4 -0.4 -0.1
material = arap
youngs = 1e6
poisson = 0.3
density = 1000
pinned = all

[mesh:drop]
kind = tet
scale = 0.15
translate = -0.04 -0.04 0.02
material = snh
youngs = 5e4
poisson = 0.3
density = 1000

[solver]
eps = 1e-5
block_size = 32
"""


def _write_config(tmp_path, frames=2, out="out", extra=""):
    path = tmp_path / "scene.ini"
    path.write_text(CONFIG.format(frames=frames, out=out) + extra)
    return path


def test_load_config_builds_merged_scene(tmp_path):
    path = _write_config(tmp_path)
    scene, config, run = cli.load_config(path)
    assert scene.mesh.n_vertices == 8 + 4
    assert scene.dirichlet.sum() == 8  # the whole floor
    assert set(scene.elastic.kind_id.tolist()) == {1, 2}  # arap floor, snh tet
    assert np.all(scene.mass > 0)
    assert config.eps == 1e-5 and config.block_size == 32
    assert run.frames == 2
    assert run.output_dir == tmp_path / "out"
    assert np.allclose(run.gravity, [0, 0, -9.81])


def test_pinned_selector_expressions(tmp_path):
    path = _write_config(tmp_path)
    text = path.read_text().replace("pinned = all", "pinned = z < -0.04")
    path.write_text(text)
    scene, _, _ = cli.load_config(path)
    # only the bottom face of the floor satisfies z < -0.04
    assert scene.dirichlet.sum() == 4
    path.write_text(text.replace("z < -0.04", "w < 1"))
    with pytest.raises(ConfigError):
        cli.load_config(path)


@pytest.mark.parametrize(
    "mutation",
    [
        ("h = 0.01", "h = -0.01"),
        ("material = snh", "material = rubber"),
        ("eps = 1e-5", "epsilon = 1e-5"),
        ("kind = tet", "kind = sphere"),
    ],
)
def test_bad_configs_raise(tmp_path, mutation):
    path = _write_config(tmp_path)
    path.write_text(path.read_text().replace(*mutation))
    with pytest.raises(ConfigError):
        cli.load_config(path)


def test_missing_config_gives_exit_2(tmp_path):
    assert cli.run_simulation(tmp_path / "nope.ini") == 2


def test_frames_zero_writes_initial_geometry_only(tmp_path):
    path = _write_config(tmp_path, frames=0)
    assert cli.run_simulation(path) == 0
    out = tmp_path / "out"
    assert (out / "frame_00000.obj").exists()
    assert not (out / "frame_00001.obj").exists()
    assert (out / "iters.csv").read_text().strip() == cli.ITER_COLUMNS
    assert (out / "frames.csv").read_text().strip() == cli.FRAME_COLUMNS


def test_simulation_outputs_are_complete(tmp_path):
    path = _write_config(tmp_path, frames=3)
    assert cli.run_simulation(path) == 0
    out = tmp_path / "out"
    objs = sorted(out.glob("frame_*.obj"))
    assert len(objs) == 4
    iters = (out / "iters.csv").read_text().strip().splitlines()
    frames = (out / "frames.csv").read_text().strip().splitlines()
    assert iters[0] == cli.ITER_COLUMNS
    assert frames[0] == cli.FRAME_COLUMNS
    assert len(frames) == 1 + 3
    per_frame = [int(row.split(",")[1]) for row in frames[1:]]
    assert len(iters) - 1 == sum(per_frame)
    assert all(int(row.split(",")[2]) == 1 for row in frames[1:])  # all converged


def _strip_timing(csv_text):
    rows = []
    for line in csv_text.strip().splitlines():
        cols = line.split(",")
        rows.append(cols[:-3] if "t_grad_ms" in csv_text.splitlines()[0] else cols[:-1])
    return rows


def test_rerun_is_byte_identical_except_timing(tmp_path):
    p1 = _write_config(tmp_path, frames=2, out="run_a")
    assert cli.run_simulation(p1) == 0
    p2 = _write_config(tmp_path, frames=2, out="run_b")
    assert cli.run_simulation(p2) == 0
    a, b = tmp_path / "run_a", tmp_path / "run_b"
    for name in ("frame_00000.obj", "frame_00001.obj", "frame_00002.obj"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for name, drop in (("iters.csv", 3), ("frames.csv", 1)):
        ra = [r.split(",")[:-drop] for r in (a / name).read_text().strip().splitlines()]
        rb = [r.split(",")[:-drop] for r in (b / name).read_text().strip().splitlines()]
        assert ra == rb


def test_checker_accepts_valid_run(tmp_path):
    path = _write_config(tmp_path, frames=2)
    assert cli.run_simulation(path) == 0
    assert cli.run_check(tmp_path / "out") == 0


def test_checker_rejects_touching_triangles(tmp_path):
    out = tmp_path / "bad"
    out.mkdir()
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.1, 0.1, 0.0], [1.1, 0.1, 0.0], [0.1, 1.1, 0.0]],
        dtype=float,
    )
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    geo.save_obj(out / "frame_00000.obj", verts, tris)
    assert cli.run_check(out) == 4


def test_checker_rejects_piercing_triangle(tmp_path):
    # a triangle stabbing through another has positive PT/EE distances,
    # so this exercises the tri-tri intersection path
    out = tmp_path / "pierce"
    out.mkdir()
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, -0.5], [0.3, 0.2, 0.5], [0.2, 0.3, 0.5]],
        dtype=float,
    )
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    geo.save_obj(out / "frame_00000.obj", verts, tris)
    assert cli.run_check(out) == 4


def test_checker_on_empty_dir_is_config_error(tmp_path):
    assert cli.run_check(tmp_path) == 2


def test_compare_writes_rows_and_curves(tmp_path):
    path = _write_config(tmp_path, frames=1, out="cmp")
    rc = cli.compare_solvers(path, ["mas+woodbury", "mas+fullrebuild"])
    assert rc == 0
    out = tmp_path / "cmp"
    rows = (out / "comparison.csv").read_text().strip().splitlines()
    assert rows[0] == "variant,status,total_iters,wall_ms"
    assert len(rows) == 3
    for row in rows[1:]:
        cols = row.split(",")
        assert cols[1] == "ok"
        assert int(cols[2]) >= 1
    for slug in ("mas_woodbury", "mas_fullrebuild"):
        curve = (out / f"curve_{slug}.csv").read_text().strip().splitlines()
        assert curve[0] == "iter,rel_z"
        assert len(curve) >= 2
        assert float(curve[1].split(",")[1]) == 1.0  # normalized start


def test_compare_unknown_variant_exits_2(tmp_path):
    path = _write_config(tmp_path, frames=1)
    assert cli.compare_solvers(path, ["warp-drive"]) == 2


def test_main_dispatch(tmp_path):
    path = _write_config(tmp_path, frames=1, out="md")
    assert cli.main(["simulate", str(path)]) == 0
    assert cli.main(["check", str(tmp_path / "md")]) == 0


def test_threads_env_caps_blas_before_numpy():
    code = (
        "import os; os.environ['THREADS'] = '1'; import ipcsim.cli; "
        "print(os.environ['OMP_NUM_THREADS'])"
    )
    res = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, timeout=120
    )
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip() == "1"
