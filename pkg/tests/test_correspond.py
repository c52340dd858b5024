import numpy as np
import pytest
from hypothesis import given, strategies as st

from deformflow.correspond import (
    Camera,
    Matches,
    PairSet,
    cluster_points,
    confidence_filter,
    filter_3d,
    filter_3d_mask,
    fuse_multiview,
    hemisphere_poses,
    lift_pairs,
    look_at,
    neighbor_densities,
    neighbor_density,
    snap_to_anchors,
    unproject,
)
from deformflow.errors import InvalidDepth
from deformflow.geometry import TriMesh
from deformflow.synthetic import make_synthetic, render_match_fixture


def cam(pose=None, f=100.0, c=50.0, size=101):
    return Camera(f, f, c, c, size, size, np.eye(4) if pose is None else pose)


def block(view, center, conf=0.8, size=3):
    r = size // 2
    rows = [(view, center[0] + du, center[1] + dv, 5.0, 5.0, conf) for du in range(-r, r + 1) for dv in range(-r, r + 1)]
    return rows


def matches(rows):
    return Matches(*zip(*rows)) if rows else Matches.empty()


# --- camera

def test_unproject_examples():
    np.testing.assert_array_equal(unproject(cam(), 50, 50, 2.0), [0, 0, 2])
    np.testing.assert_array_equal(unproject(cam(), 150, 50, 1.0), [1, 0, 1])
    pose = np.eye(4)
    pose[2, 3] = 5.0
    np.testing.assert_array_equal(unproject(cam(pose), 150, 50, 1.0), [1, 0, 6])
    for bad in (0.0, -1.0, np.nan, np.inf):
        with pytest.raises(InvalidDepth):
            unproject(cam(), 10, 10, bad)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0, 10, 10, np.eye(4))
    bad = np.eye(4)
    bad[0, 0] = 2
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 10, 10, bad)


@given(
    st.floats(0, 511), st.floats(0, 511), st.floats(0.1, 50),
    st.tuples(*[st.floats(-3, 3)] * 3),
)
def test_unproject_project_round_trip(u, v, d, pos):
    pose = look_at(np.array(pos) + [0, 0, 5.0], [0.2, -0.1, 0.0])
    c = Camera(300.0, 310.0, 256.0, 250.0, 512, 512, pose)
    uu, vv, dd = c.project(unproject(c, u, v, d)[None])
    assert abs(uu[0] - u) < 1e-9 and abs(vv[0] - v) < 1e-9 and abs(dd[0] - d) < 1e-9 * max(1, d)


# --- confidence

def test_confidence_filter():
    m = matches([(0, 1, 1, 1, 1, c) for c in (0.3, 0.6, 0.9, 1.0)])
    assert len(confidence_filter(m, 0.0)) == 4
    assert len(confidence_filter(m, 1.0)) == 1
    kept = confidence_filter(m, 0.5)
    assert kept.conf.tolist() == [0.6, 0.9, 1.0]
    with pytest.raises(ValueError):
        confidence_filter(m, 1.5)


@given(st.lists(st.floats(0, 1), max_size=40), st.floats(0, 1), st.floats(0, 1))
def test_confidence_monotone(confs, t1, t2):
    lo, hi = sorted((t1, t2))
    m = matches([(0, 0, 0, 0, 0, c) for c in confs])
    assert len(confidence_filter(m, hi)) <= len(confidence_filter(m, lo))


# --- density and fusion

def test_neighbor_density_examples():
    iso = matches([(0, 10, 10, 0, 0, 0.9)])
    assert neighbor_density(iso, 0, (10, 10)) == 0
    full = matches(block(2, (20, 20)))
    assert neighbor_density(full, 2, (20, 20)) == 8
    other = matches(block(1, (20, 20)))
    assert neighbor_density(other, 2, (20, 20)) == 0
    with pytest.raises(ValueError):
        neighbor_density(full, 2, (20, 20), radius=0)


def test_neighbor_densities_match_scalar_version():
    rng = np.random.default_rng(0)
    rows = [(int(rng.integers(3)), int(rng.integers(12)), int(rng.integers(12)), 0, 0, 0.9) for _ in range(150)]
    m = matches(rows)
    for r in (1, 2):
        dens = neighbor_densities(m, r)
        for i in range(len(m)):
            # duplicates at one pixel count as neighbours of each other
            assert dens[i] == neighbor_density(m, m.view[i], (m.ub[i], m.vb[i]), r)


def fig4_rows():
    # pixel (20, 20) matched in view 1 (2 neighbours) and view 2 (full 3x3 block)
    v1 = [(1, 20, 20, 30, 30, 0.95), (1, 21, 20, 31, 30, 0.9), (1, 20, 21, 30, 31, 0.9)]
    v2 = [r for r in block(2, (20, 20), conf=0.8) if (r[1], r[2]) != (20, 20)] + [(2, 20, 20, 70, 70, 0.8)]
    return v1 + v2


def test_fig4_fusion_keeps_density_8():
    m = matches(fig4_rows())
    d = neighbor_densities(m)
    assert d[0] == 2
    assert d[len(m) - 1] == 8
    fused = fuse_multiview(m)
    hit = (fused.ub == 20) & (fused.vb == 20)
    assert hit.sum() == 1
    assert fused.view[hit][0] == 2 and fused.ua[hit][0] == 70


def test_fusion_tie_breaks():
    m = matches([(0, 5, 5, 1, 1, 0.7), (1, 5, 5, 2, 2, 0.9)])
    assert fuse_multiview(m).conf.tolist() == [0.9]
    m = matches([(3, 5, 5, 1, 1, 0.7), (1, 5, 5, 2, 2, 0.7)])
    assert fuse_multiview(m).view.tolist() == [1]
    single = matches([(4, 9, 9, 1, 2, 0.6)])
    assert fuse_multiview(single).records() == single.records()


def test_fusion_component_mode_sees_long_patches():
    # a 1x7 strip in view 0 vs a plus-shaped cluster of 5 in view 1 sharing the strip centre
    strip = [(0, 10 + i, 10, 0, 0, 0.8) for i in range(-3, 4)]
    plus = [(1, 10, 10, 1, 1, 0.8), (1, 9, 10, 1, 1, 0.8), (1, 11, 10, 1, 1, 0.8), (1, 10, 9, 1, 1, 0.8), (1, 10, 11, 1, 1, 0.8)]
    m = matches(strip + plus)
    f = fuse_multiview(m, mode="count")
    assert f.view[(f.ub == 10) & (f.vb == 10)][0] == 1
    f = fuse_multiview(m, mode="component")
    assert f.view[(f.ub == 10) & (f.vb == 10)][0] == 0


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 6), st.integers(0, 6), st.floats(0, 1)), max_size=40),
       st.randoms(use_true_random=False))
def test_fusion_permutation_invariant(rows, rnd):
    full = [(v, u, w, i, -i, c) for i, (v, u, w, c) in enumerate(rows)]
    shuffled = full[:]
    rnd.shuffle(shuffled)
    a = {(r.ub, r.vb): r for r in fuse_multiview(matches(full)).records()}
    b = {(r.ub, r.vb): r for r in fuse_multiview(matches(shuffled)).records()}
    assert a == b
    assert len(a) == len({(u, w) for _, u, w, _ in rows})


# --- lifting

def sphere_depth(c: Camera, centre, radius):
    """Ray-cast z-depth raster of a sphere; 0 on background."""
    v, u = np.mgrid[0:c.height, 0:c.width].astype(float)
    d = np.stack([(u - c.cx) / c.fx, (v - c.cy) / c.fy, np.ones_like(u)], axis=-1)
    dw = d @ c.pose[:3, :3].T
    o = c.pose[:3, 3]
    oc = o - centre
    a = np.einsum("...i,...i", dw, dw)
    b = 2 * dw @ oc
    disc = b * b - 4 * a * (oc @ oc - radius * radius)
    s = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), 0.0)
    return np.where(disc >= 0, s, 0.0), o + s[..., None] * dw


def test_lift_matches_ray_cast():
    centre, radius = np.array([0.1, 0.0, 0.05]), 0.5
    tcam = Camera(200, 200, 64, 64, 128, 128, look_at([0, -2, 0.5], [0, 0, 0]))
    scam = Camera(180, 180, 60, 64, 120, 128, look_at([2, 0.3, 0.2], [0, 0, 0]))
    dt, pt = sphere_depth(tcam, centre, radius)
    ds, ps = sphere_depth(scam, centre, radius)
    rng = np.random.default_rng(0)
    ub, vb = rng.integers(0, 128, 300), rng.integers(0, 128, 300)
    ua, va = rng.integers(0, 120, 300), rng.integers(0, 128, 300)
    m = Matches(np.zeros(300, int), ub, vb, ua, va, np.ones(300))
    pairs, skipped = lift_pairs(m, tcam, dt, [scam], [ds])
    ok = (dt[vb, ub] > 0) & (ds[va, ua] > 0)
    assert len(pairs) == ok.sum() > 50 and skipped == 300 - ok.sum()
    np.testing.assert_allclose(pairs.pa, ps[va[ok], ua[ok]], atol=1e-6)
    np.testing.assert_allclose(pairs.pb, pt[vb[ok], ub[ok]], atol=1e-6)
    assert np.abs(np.linalg.norm(pairs.pa - centre, axis=1) - radius).max() < 1e-6


def test_lift_drops_background_and_bad_views():
    c = cam()
    depth = np.ones((101, 101))
    depth[0, 0] = 0.0
    depth[1, 1] = np.nan
    m = matches([(0, 5, 5, 5, 5, 1), (0, 0, 0, 5, 5, 1), (0, 1, 1, 5, 5, 1), (7, 5, 5, 5, 5, 1), (0, 500, 5, 5, 5, 1)])
    pairs, skipped = lift_pairs(m, c, depth, [c], [depth])
    assert len(pairs) == 1 and skipped == 4
    with pytest.raises(ValueError):
        lift_pairs(m, c, np.ones((3, 3)), [c], [depth])


def test_lift_synthetic_fixture_recovers_pairs():
    scene = make_synthetic("bend", seed=1)
    m, cams, depths, tcam, tdepth, labels = render_match_fixture(scene, decoys=0.0)
    pairs, skipped = lift_pairs(m, tcam, tdepth, cams, depths)
    assert skipped == 0
    # every lifted original point is one of the scene's correspondence points
    from scipy.spatial import cKDTree

    d, _ = cKDTree(scene.contaminated.pa).query(pairs.pa)
    assert d.max() < 1e-6


# --- clustering and 3D filtering

def leader_reference(points, radius):
    leaders, groups = [], []
    for i, p in enumerate(points):
        for j, l in enumerate(leaders):
            if np.sqrt(((p - l) ** 2).sum()) <= radius:
                groups[j].append(i)
                break
        else:
            leaders.append(p)
            groups.append([i])
    return groups


def test_cluster_examples():
    p = np.random.default_rng(0).normal(size=(20, 3)) * 0.01
    assert [c.tolist() for c in cluster_points(p, 1.0)] == [list(range(20))]
    q = np.concatenate([p, p + [10.0, 0, 0]])
    assert len(cluster_points(q, 0.1)) == 2
    with pytest.raises(ValueError):
        cluster_points(p, 0.0)
    assert cluster_points(np.zeros((0, 3)), 1.0) == []


@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_cluster_matches_reference(seed, radius):
    p = np.random.default_rng(seed).random((80, 3))
    got = [c.tolist() for c in cluster_points(p, radius)]
    assert got == leader_reference(p, radius)


def test_filter_3d_examples():
    rng = np.random.default_rng(0)
    pa = rng.random((10, 3)) * 0.01
    d = np.array([0.3, -0.1, 0.2])
    kept = filter_3d(PairSet(pa, pa + d), eps_a=0.05)
    assert len(kept) == 10

    pb = pa + d
    pb[4] += [1.0, 0, 0]  # 20 * eps_a
    mask = filter_3d_mask(PairSet(pa, pb), eps_a=0.05)
    assert mask.sum() == 9 and not mask[4]

    assert len(filter_3d(PairSet(pa[:1], pa[:1]), eps_a=0.05, min_size=3)) == 0
    with pytest.raises(ValueError):
        filter_3d(PairSet(pa, pb), eps_a=0.05, min_size=1)


def test_filter_3d_synthetic_precision_recall():
    for seed in range(5):
        s = make_synthetic("bend", seed=seed)
        keep = filter_3d_mask(s.contaminated)
        inl = ~s.outlier_mask
        assert (keep & inl).sum() / keep.sum() >= 0.9
        assert (keep & inl).sum() / inl.sum() >= 0.8


# --- snapping

def test_snap_examples():
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    an, dist = snap_to_anchors(PairSet([[1, 0, 0]], [[2, 2, 2]]), mesh)
    assert an.vertex_ids.tolist() == [1] and dist.tolist() == [0.0]
    np.testing.assert_array_equal(an.vb, [[2, 2, 2]])

    an, dist = snap_to_anchors(PairSet([[0.001, 0, 0], [0.01, 0, 0]], [[1, 1, 1], [2, 2, 2]]), mesh)
    assert len(an) == 1 and dist[0] == 0.001
    np.testing.assert_array_equal(an.vb, [[1, 1, 1]])

    an, _ = snap_to_anchors(PairSet([[0.01, 0, 0], [0.001, 0, 0]], [[1, 1, 1], [2, 2, 2]]), mesh)
    np.testing.assert_array_equal(an.vb, [[2, 2, 2]])

    # equal distance: earlier pair wins
    an, _ = snap_to_anchors(PairSet([[0, 0, 0.5], [0, 0, -0.5]], [[1, 1, 1], [2, 2, 2]]), mesh)
    np.testing.assert_array_equal(an.vb, [[1, 1, 1]])


def test_snap_bounds():
    rng = np.random.default_rng(3)
    mesh = TriMesh(rng.random((30, 3)), [[0, 1, 2]])
    pa = rng.random((200, 3))
    an, dist = snap_to_anchors(PairSet(pa, pa), mesh)
    assert len(an) <= 30 and len(an) <= 200
    assert np.all(np.diff(an.vertex_ids) > 0)
    assert len(snap_to_anchors(PairSet(np.zeros((0, 3)), np.zeros((0, 3))), mesh)[0]) == 0


# --- poses

def test_hemisphere_poses():
    centre = np.array([0.1, -0.2, 0.3])
    cams = hemisphere_poses(200, 2.5, centre)
    assert len(cams) == 1400
    pos = np.array([c.pose[:3, 3] for c in cams])
    assert np.abs(np.linalg.norm(pos - centre, axis=1) - 2.5).max() < 1e-9
    assert pos[:, 2].min() >= centre[2]
    for c in cams[:70]:
        r = c.pose[:3, :3]
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12 and np.linalg.det(r) > 0
        # optical axis points at the centre
        f = centre - c.pose[:3, 3]
        np.testing.assert_allclose(r[:, 2], f / np.linalg.norm(f), atol=1e-12)
    # the 7 yaws of one position are rolls of each other about the view axis
    z = np.array([c.pose[:3, 2] for c in cams[:7]])
    assert np.abs(z - z[0]).max() < 1e-12
    assert len(hemisphere_poses(3, 1.0, yaws=[0.0])) == 3
    with pytest.raises(ValueError):
        hemisphere_poses(0, 1.0)
