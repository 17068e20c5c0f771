"""Conservative CCD: cubics, bisection, displacement bounds, aggregation."""

import types

import numpy as np
import pytest

import ipcsim.ccd as ccd
import ipcsim.geometry as geo


def _floor_drop(height=1.0, drop=2.0, over=(0.3, 0.3)):
    """One vertex over a unit right triangle in z = 0, moving straight down."""
    x = np.array(
        [
            [over[0], over[1], height],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ]
    )
    p = np.zeros((4, 3))
    p[0, 2] = -drop
    return ("pt", (0, 1, 2, 3)), x, p


# ---------------------------------------------------------------------------
# cubic coefficients


def test_cubic_zero_displacement(rng):
    x = rng.random((4, 3))
    a3, a2, a1, a0 = ccd.cubic_coeffs(("pt", (0, 1, 2, 3)), x, np.zeros((4, 3)))
    expect = np.linalg.det((x[1:] - x[0]).T)
    assert (a3, a2, a1) == (0.0, 0.0, 0.0)
    assert a0 == pytest.approx(expect, rel=1e-12)


def test_cubic_straight_drop_is_linear_with_root_half():
    pair, x, p = _floor_drop()
    a3, a2, a1, a0 = ccd.cubic_coeffs(pair, x, p)
    assert a3 == 0.0 and a2 == 0.0
    assert a1 != 0.0
    assert -a0 / a1 == pytest.approx(0.5, abs=1e-12)


def test_cubic_matches_interpolation_oracle(rng):
    for _ in range(20):
        x = rng.standard_normal((4, 3))
        p = rng.standard_normal((4, 3))
        pair = ("ee", (0, 1, 2, 3))
        coeffs = np.array(ccd.cubic_coeffs(pair, x, p))

        def f(alpha):
            q = x + alpha * p
            return np.linalg.det((q[1:] - q[0]).T)

        ts = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
        fit = np.linalg.solve(np.vander(ts, 4), np.array([f(t) for t in ts]))
        scale = max(1.0, np.abs(coeffs).max())
        assert np.allclose(coeffs, fit, atol=1e-10 * scale)


def test_batch_matches_scalar(rng):
    x = rng.standard_normal((8, 3))
    p = rng.standard_normal((8, 3))
    verts = np.array([[0, 1, 2, 3], [4, 5, 6, 7], [1, 3, 5, 7]])
    batch = ccd.cubic_coeffs_batch(verts, x, p)
    for i, vs in enumerate(verts):
        scalar = ccd.cubic_coeffs(("pt", tuple(vs)), x, p)
        assert np.allclose(batch[i], scalar, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# search window


def test_monotonic_bound_cases():
    assert ccd.monotonic_bound((0.0, 0.0, -2.0, 1.0)) == np.inf  # linear
    assert ccd.monotonic_bound((1.0, -3.0, 0.0, 0.0)) == pytest.approx(1.0)
    assert ccd.monotonic_bound((1.0, 3.0, 0.0, 0.0)) == np.inf  # root at -1


def test_first_extremum_cases():
    # f = -x^3 + x: f' = -3x^2 + 1, first positive root 1/sqrt(3)
    assert ccd.first_extremum((-1.0, 0.0, 1.0, 5.0)) == pytest.approx(1.0 / np.sqrt(3.0))
    # f = x^3 - 3x^2: f' = 3x^2 - 6x, roots {0, 2}: zero excluded
    assert ccd.first_extremum((1.0, -3.0, 0.0, 1.0)) == pytest.approx(2.0)
    # f = 1 - x^2: f' = -2x touches zero only at the origin
    assert ccd.first_extremum((0.0, -1.0, 0.0, 1.0)) == np.inf
    assert ccd.first_extremum((0.0, 0.0, -2.0, 1.0)) == np.inf  # linear f


def test_window_batch_matches_scalar(rng):
    coeffs = rng.standard_normal((200, 4))
    coeffs[:40, 0] = 0.0  # quadratics
    coeffs[:10, 1] = 0.0  # linears
    win = ccd._window_batch(coeffs)
    for i in range(len(coeffs)):
        expect = min(ccd.monotonic_bound(tuple(coeffs[i])), ccd.first_extremum(tuple(coeffs[i])))
        assert win[i] == pytest.approx(expect, rel=1e-12) or (
            np.isinf(win[i]) and np.isinf(expect)
        )


# ---------------------------------------------------------------------------
# bisection


def test_bisection_frozen_walkthrough():
    # f = 1 - 2a: evals at 1 (flip), 0.5 (zero counts as flip), 0.25 (ok)
    q = ccd.CcdQuery(pair=None, coeffs=(0.0, 0.0, -2.0, 1.0), alpha_l=2.0**-20, alpha_mon=np.inf)
    res = ccd.conservative_step(q)
    assert res.alpha == 0.25
    assert res.evals == 3
    assert not res.flagged


def test_bisection_no_root_returns_one():
    q = ccd.CcdQuery(pair=None, coeffs=(0.0, 0.0, -0.5, 1.0), alpha_l=2.0**-20, alpha_mon=np.inf)
    res = ccd.conservative_step(q)
    assert res.alpha == 1.0
    assert res.evals == 1


def test_bisection_eval_budget_worst_case():
    # root barely above the floor: full halving cascade, still within budget
    root = 1.5 * 2.0**-20
    q = ccd.CcdQuery(
        pair=None, coeffs=(0.0, 0.0, -1.0 / root, 1.0), alpha_l=2.0**-20, alpha_mon=np.inf
    )
    res = ccd.conservative_step(q)
    assert res.evals <= 21
    assert not res.flagged
    assert res.alpha <= root
    # root below the floor: progress fallback, flagged
    root = 0.5 * 2.0**-20
    q = ccd.CcdQuery(
        pair=None, coeffs=(0.0, 0.0, -1.0 / root, 1.0), alpha_l=2.0**-20, alpha_mon=np.inf
    )
    res = ccd.conservative_step(q)
    assert res.flagged
    assert res.alpha == 2.0**-20
    assert res.evals <= 21


def test_coplanar_start_rejected():
    q = ccd.CcdQuery(pair=None, coeffs=(0.0, 0.0, 1.0, 0.0), alpha_l=2.0**-20, alpha_mon=np.inf)
    with pytest.raises(ValueError):
        ccd.conservative_step(q)


def _earliest_positive_root(coeffs):
    roots = np.roots(coeffs)
    real = roots[np.abs(roots.imag) < 1e-9].real
    pos = real[real > 1e-12]
    return pos.min() if len(pos) else np.inf


def test_thousand_random_cubics_never_overshoot(rng):
    violations = 0
    for _ in range(1000):
        c = rng.standard_normal(4)
        c[3] = np.sign(c[3] or 1.0) * (0.1 + abs(c[3]))  # keep |f(0)| away from 0
        q = ccd.CcdQuery(pair=None, coeffs=tuple(c), alpha_l=2.0**-20, alpha_mon=ccd.monotonic_bound(c))
        res = ccd.conservative_step(q)
        assert res.evals <= 21
        assert not res.flagged
        if res.alpha > _earliest_positive_root(c) + 1e-12:
            violations += 1
    assert violations == 0


# ---------------------------------------------------------------------------
# displacement lower bound


def test_lower_bound_frozen_drop():
    pair, x, p = _floor_drop(height=1.0, drop=2.0)
    assert ccd.displacement_lower_bound(pair, x, p) == pytest.approx(0.45, abs=1e-12)


def test_lower_bound_rigid_translation_capped(rng):
    x = rng.standard_normal((4, 3))
    x[0] += 5.0  # keep the pair separated
    p = np.tile(rng.standard_normal(3), (4, 1))
    assert ccd.displacement_lower_bound(("pt", (0, 1, 2, 3)), x, p) == 1.0


def test_lower_bound_frame_invariant(rng):
    x = rng.standard_normal((4, 3))
    x[0] += 3.0
    p = rng.standard_normal((4, 3))
    a = ccd.displacement_lower_bound(("ee", (0, 1, 2, 3)), x, p)
    b = ccd.displacement_lower_bound(("ee", (0, 1, 2, 3)), x, p + np.array([3.0, -1.0, 2.0]))
    assert a == pytest.approx(b, abs=1e-12)


def test_lower_bound_trajectory_stays_clear(rng):
    for _ in range(5):
        x = rng.standard_normal((4, 3))
        x[0] += np.array([0.0, 0.0, 2.0])
        p = rng.standard_normal((4, 3))
        pair = ("pt", (0, 1, 2, 3))
        lb = ccd.displacement_lower_bound(pair, x, p)
        assert lb > 0.0
        ts = np.linspace(0.0, lb, 10_000)
        pos = x[None] + ts[:, None, None] * p[None]
        d = geo.pt_distance_batch(pos[:, 0], pos[:, 1], pos[:, 2], pos[:, 3])[0]
        assert d.min() > 0.0


# ---------------------------------------------------------------------------
# ACCD baseline


def test_accd_receding_pair():
    pair, x, p = _floor_drop(drop=-1.0)  # moving away
    res = ccd.accd_step(pair, x, p)
    assert res.alpha == 1.0
    assert res.iters <= 2


def test_accd_head_on_frozen():
    # gap 1, closing speed 2: first step 0.45 leaves exactly s*d0, stop
    pair, x, p = _floor_drop(height=1.0, drop=2.0)
    res = ccd.accd_step(pair, x, p)
    assert res.alpha == pytest.approx(0.45, abs=1e-12)
    assert res.alpha < 0.5  # never beyond the exact time of impact
    assert res.iters == 1


def test_accd_grazing_needs_hundredfold_more_work():
    # nearly tangential slide toward the floor: ACCD crawls, bisection does not
    pair, x, p = _floor_drop(height=1e-4, drop=2e-4)
    p[0, 0] = 0.2  # dominant tangential motion, impact point stays inside
    accd = ccd.accd_step(pair, x, p)
    q = ccd.make_query(pair, x, p)
    bis = ccd.conservative_step(q)
    assert not accd.flagged
    assert accd.iters >= 100 * bis.evals
    assert bis.alpha <= 0.5 and accd.alpha <= 0.5  # exact impact time is 0.5


# ---------------------------------------------------------------------------
# per-subdomain aggregation


def _fake_partition(subdomain_of, D):
    return types.SimpleNamespace(subdomain_of=np.asarray(subdomain_of), D=D)


def test_per_subdomain_no_pairs():
    part = _fake_partition([0, 0, 1, 1, 2, 2], 3)
    pairs = ccd.CcdPairs(verts=np.zeros((0, 4), dtype=np.int64), is_pt=np.zeros(0, dtype=bool))
    alpha_d, info = ccd.per_subdomain_steps(pairs, part, np.zeros((6, 3)), np.zeros((6, 3)))
    assert np.array_equal(alpha_d, np.ones(3))
    assert info.min_alpha == 1.0


def test_per_subdomain_min_rule_and_dominance():
    _, x, p = _floor_drop(height=1.0, drop=2.0)
    # two extra far-away vertices form an untouched third subdomain
    x = np.vstack([x, [[50.0, 0.0, 0.0], [51.0, 0.0, 0.0]]])
    p = np.vstack([p, np.zeros((2, 3))])
    part = _fake_partition([1, 2, 2, 2, 0, 0], 3)
    pairs = ccd.CcdPairs(verts=np.array([[0, 1, 2, 3]]), is_pt=np.array([True]))
    alpha_d, info = ccd.per_subdomain_steps(pairs, part, x, p)
    a = info.alpha_pair[0]
    assert a < 1.0
    assert alpha_d[1] == a and alpha_d[2] == a
    assert alpha_d[0] == 1.0
    assert np.all(alpha_d >= info.min_alpha)


def test_pair_step_uses_larger_of_bound_and_bisection():
    pair, x, p = _floor_drop(height=1.0, drop=2.0)
    pairs = ccd.CcdPairs(verts=np.array([[0, 1, 2, 3]]), is_pt=np.array([True]))
    info = ccd.pair_steps(pairs, x, p)
    lb = ccd.displacement_lower_bound(pair, x, p)
    bis = ccd.conservative_step(ccd.make_query(pair, x, p))
    assert info.alpha_pair[0] == pytest.approx(max(lb, bis.alpha), abs=1e-15)


def test_certify_mixed_accepts_safe_and_rejects_crossing():
    pair, x, p = _floor_drop(height=1.0, drop=2.0)
    pairs = ccd.CcdPairs(verts=np.array([[0, 1, 2, 3]]), is_pt=np.array([True]))
    assert ccd.certify_mixed(pairs, x, 0.1 * p)  # small step provably safe
    assert not ccd.certify_mixed(pairs, x, p)  # full drop crosses the floor


def test_collect_pairs_sees_incoming_motion():
    mesh = geo.make_box_mesh(1, 1, 1)
    n = mesh.n_vertices
    verts = np.vstack(
        [mesh.rest_positions, mesh.rest_positions + np.array([0.25, 0.25, 1.6])]
    )
    tets = np.vstack([mesh.tets, mesh.tets + n])
    big = geo.TetMesh(rest_positions=verts, tets=tets)
    surf = geo.SurfaceMesh.from_tet_mesh(big)
    p = np.zeros_like(verts)
    p[n:, 2] = -1.0  # upper box falls
    pairs = ccd.collect_pairs(verts, surf, p)
    assert len(pairs) > 0
    # without motion the candidates (a superset) all certify a full step
    still = ccd.collect_pairs(verts, surf, np.zeros_like(verts))
    part = _fake_partition(np.zeros(len(verts), dtype=int), 1)
    alpha_d, _ = ccd.per_subdomain_steps(still, part, verts, np.zeros_like(verts))
    assert np.array_equal(alpha_d, np.ones(1))


def test_clam_full_pipeline_is_penetration_free(rng):
    # drop a box hard onto a pinned floor: clamped motion must stay clear
    mesh = geo.make_box_mesh(1, 1, 1)
    n = mesh.n_vertices
    verts = np.vstack(
        [
            mesh.rest_positions * np.array([3.0, 3.0, 0.5]) - np.array([1.0, 1.0, 0.5]),
            mesh.rest_positions + np.array([0.4, 0.4, 0.3]),
        ]
    )
    tets = np.vstack([mesh.tets, mesh.tets + n])
    big = geo.TetMesh(rest_positions=verts, tets=tets)
    surf = geo.SurfaceMesh.from_tet_mesh(big)
    part = _fake_partition(np.repeat([0, 1], n), 2)
    p = np.zeros_like(verts)
    p[n:] = np.array([0.05, -0.03, -1.5]) + 0.01 * rng.standard_normal((n, 3))
    pairs = ccd.collect_pairs(verts, surf, p)
    assert len(pairs) > 0
    alpha_d, info = ccd.per_subdomain_steps(pairs, part, verts, p)
    p_mix = alpha_d[part.subdomain_of][:, None] * p
    if not ccd.certify_mixed(pairs, verts, p_mix):
        p_mix = info.min_alpha * p
    moved = verts + p_mix
    # exhaustive distance recheck over all surface primitive pairs
    tris = surf.triangles
    for v in surf.vertices:
        for t in range(len(tris)):
            if v in tris[t]:
                continue
            d = geo.pt_distance_batch(
                moved[v][None], moved[tris[t, 0]][None], moved[tris[t, 1]][None], moved[tris[t, 2]][None]
            )[0][0]
            assert d > 0.0
    for i in range(len(surf.edges)):
        for j in range(i + 1, len(surf.edges)):
            ea, eb = surf.edges[i], surf.edges[j]
            if len(set(ea) & set(eb)):
                continue
            d = geo.ee_distance_batch(
                moved[ea[0]][None], moved[ea[1]][None], moved[eb[0]][None], moved[eb[1]][None]
            )[0][0]
            assert d > 0.0
