"""Domain partition and multilevel additive Schwarz preconditioner."""

import types

import numpy as np
import pytest
import scipy.sparse as sp

import ipcsim.geometry as geo
import ipcsim.mas as mas


def _points_mesh(pts):
    return types.SimpleNamespace(rest_positions=np.asarray(pts, dtype=float))


def _random_spd(n, rng, shift=None):
    A = rng.standard_normal((n, n))
    M = A @ A.T + (shift if shift is not None else n) * np.eye(n)
    return 0.5 * (M + M.T)


def _dense_apply_oracle(H, hier):
    """Independent dense build of the preconditioner matrix."""
    n = H.shape[0]
    P = np.zeros((n, n))
    for verts in hier.partition.selection:
        idx = (3 * verts[:, None] + np.arange(3)).reshape(-1)
        S = np.zeros((len(idx), n))
        S[np.arange(len(idx)), idx] = 1.0
        P += S.T @ np.linalg.inv(S @ H @ S.T) @ S
    for C in hier.coarsen:
        Cd = C.toarray()
        P += Cd.T @ np.linalg.inv(Cd @ H @ Cd.T) @ Cd
    return P


# ---------------------------------------------------------------------------
# partition


def test_partition_even_blocks():
    mesh = geo.make_box_mesh(3, 3, 3)  # 64 vertices
    part = mas.partition_domain(mesh, 16)
    assert part.D == 4
    assert all(len(s) == 16 for s in part.selection)


def test_partition_remainder_block(rng):
    part = mas.partition_domain(_points_mesh(rng.random((17, 3))), 16)
    assert part.D == 2
    assert sorted(len(s) for s in part.selection) == [1, 16]


def test_partition_covers_each_vertex_once(rng):
    pts = rng.random((53, 3))
    part = mas.partition_domain(_points_mesh(pts), 8)
    seen = np.concatenate(part.selection)
    assert np.array_equal(np.sort(seen), np.arange(53))
    for d, verts in enumerate(part.selection):
        assert len(verts) <= 8
        assert np.all(part.subdomain_of[verts] == d)


def test_partition_spatial_locality():
    mesh = geo.make_box_mesh(5, 5, 5)  # 216 vertices on a regular grid
    part = mas.partition_domain(mesh, 32)
    pts = mesh.rest_positions

    def diameter(a, b):
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        return d.max()

    intra = np.mean([diameter(pts[s], pts[s]) for s in part.selection])
    inter = np.mean(
        [
            diameter(pts[part.selection[i]], pts[part.selection[j]])
            for i in range(part.D)
            for j in range(i + 1, part.D)
        ]
    )
    assert intra <= inter


def test_partition_deterministic(rng):
    pts = rng.random((40, 3))
    a = mas.partition_domain(_points_mesh(pts), 8)
    b = mas.partition_domain(_points_mesh(pts), 8)
    assert np.array_equal(a.subdomain_of, b.subdomain_of)


# ---------------------------------------------------------------------------
# hierarchy build


def test_single_subdomain_no_coarse_is_exact_inverse(rng):
    pts = rng.random((10, 3))
    part = mas.partition_domain(_points_mesh(pts), 32)
    assert part.D == 1
    H = sp.csr_matrix(_random_spd(30, rng))
    hier = mas.build_hierarchy(H, part, L=0)
    g = rng.standard_normal(30)
    z = mas.apply_preconditioner(hier, None, g)
    z_direct = np.linalg.solve(H.toarray(), g)
    assert np.linalg.norm(z - z_direct) <= 1e-10 * np.linalg.norm(z_direct)


def test_single_subdomain_skips_non_coarsening_levels(rng):
    part = mas.partition_domain(_points_mesh(rng.random((10, 3))), 32)
    hier = mas.build_hierarchy(sp.identity(30, format="csr"), part, L=2)
    assert hier.L == 0  # one unit cannot be coarsened


def test_coarse_level_counts(rng):
    pts = rng.random((64, 3))
    part = mas.partition_domain(_points_mesh(pts), 4)  # 16 subdomains
    hier = mas.build_hierarchy(sp.identity(192, format="csr"), part, L=2, coarse_block=4)
    assert hier.L == 2  # 16 -> 4 -> 1
    part2 = mas.partition_domain(_points_mesh(pts), 16)  # 4 subdomains
    hier2 = mas.build_hierarchy(sp.identity(192, format="csr"), part2, L=2, coarse_block=4)
    assert hier2.L == 1  # 4 -> 1, then stuck


def test_identity_hessian_gives_identity_blocks(rng):
    pts = rng.random((24, 3))
    part = mas.partition_domain(_points_mesh(pts), 8)
    hier = mas.build_hierarchy(sp.identity(72, format="csr"), part, L=1)
    for B in hier.B:
        assert np.allclose(B, np.eye(B.shape[0]), atol=1e-12)
    # a rigid translation is reproduced up to the constant level factors
    g = np.tile([1.0, -2.0, 0.5], 24)
    z = mas.apply_preconditioner(hier, None, g)
    assert np.allclose(z, (1 + hier.L) * g, atol=1e-10)


def test_non_spd_rejected(rng):
    part = mas.partition_domain(_points_mesh(rng.random((4, 3))), 8)
    H = sp.csr_matrix(-np.eye(12))
    with pytest.raises(mas.NotSpdError):
        mas.build_hierarchy(H, part, L=0)


# ---------------------------------------------------------------------------
# apply


def test_apply_matches_dense_oracle(rng):
    pts = rng.random((20, 3))
    part = mas.partition_domain(_points_mesh(pts), 6)
    H = _random_spd(60, rng)
    hier = mas.build_hierarchy(sp.csr_matrix(H), part, L=2, coarse_block=2)
    assert hier.L == 2
    P = _dense_apply_oracle(H, hier)
    for _ in range(3):
        g = rng.standard_normal(60)
        z = mas.apply_preconditioner(hier, None, g)
        assert np.linalg.norm(z - P @ g) <= 1e-10 * np.linalg.norm(P @ g)


def test_preconditioner_symmetric_positive_definite(rng):
    pts = rng.random((20, 3))
    part = mas.partition_domain(_points_mesh(pts), 6)
    H = _random_spd(60, rng)
    hier = mas.build_hierarchy(sp.csr_matrix(H), part, L=1)
    cols = np.stack([mas.apply_preconditioner(hier, None, e) for e in np.eye(60)], axis=1)
    assert np.abs(cols - cols.T).max() <= 1e-10 * np.abs(cols).max()
    assert np.linalg.eigvalsh(0.5 * (cols + cols.T)).min() > 0
    for _ in range(5):
        g = rng.standard_normal(60)
        assert g @ mas.apply_preconditioner(hier, None, g) > 0


def test_apply_zero_is_zero(rng):
    part = mas.partition_domain(_points_mesh(rng.random((12, 3))), 4)
    hier = mas.build_hierarchy(sp.identity(36, format="csr"), part, L=1)
    assert np.array_equal(mas.apply_preconditioner(hier, None, np.zeros(36)), np.zeros(36))


def test_empty_woodbury_equals_base(rng):
    import ipcsim.woodbury as wb

    pts = rng.random((16, 3))
    part = mas.partition_domain(_points_mesh(pts), 4)
    H = _random_spd(48, rng)
    hier = mas.build_hierarchy(sp.csr_matrix(H), part, L=1)
    g = rng.standard_normal(48)
    base = mas.apply_preconditioner(hier, None, g)
    empty = mas.apply_preconditioner(hier, wb.WoodburyState.empty(8), g)
    assert np.array_equal(base, empty)
