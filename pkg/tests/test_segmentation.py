import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mmchange.geometry import PointCloud
from mmchange.segmentation import (
    Segment,
    SegmentationError,
    denoise_morphological,
    estimate_normals,
    euclidean_cluster,
    merge_or_split,
    mls_smooth,
    morphology_voxels,
    overlap_ratio,
    ransac_ground,
    region_grow_refine,
    structuring_offsets,
)


def plane_points(rng, n, z=0.0, size=4.0, noise=0.0):
    xy = rng.uniform(-size / 2, size / 2, (n, 2))
    return np.c_[xy, z + noise * rng.normal(size=n)]


def test_ransac_finds_the_floor(rng):
    floor = plane_points(rng, 4000, z=0.1, noise=0.005)
    clutter = rng.uniform([-2, -2, 0.3], [2, 2, 2], (1500, 3))
    model, rest = ransac_ground(PointCloud(np.vstack([floor, clutter])), 0.03, np.deg2rad(15), 300, seed=1)
    assert model.normal[2] == pytest.approx(1.0, abs=1e-2)
    assert model.offset == pytest.approx(-0.1, abs=0.01)
    assert len(model.inliers) >= 3900
    assert len(rest) <= 1600 and np.all(rest.points[:, 2] > 0.05)


def test_ransac_rejects_steep_planes(rng):
    p = plane_points(rng, 500)
    wall = np.c_[p[:, 2], p[:, 0], p[:, 1]]
    with pytest.raises(SegmentationError, match="no plane hypothesis"):
        ransac_ground(PointCloud(wall), 0.02, np.deg2rad(15), 100)
    with pytest.raises(SegmentationError):
        ransac_ground(PointCloud(np.zeros((2, 3))))


def test_mls_reduces_noise_on_a_plane(rng):
    P = plane_points(rng, 3000, size=1.0, noise=0.01)
    lone = np.array([[5.0, 5.0, 0.3]])
    out = mls_smooth(PointCloud(np.vstack([P, lone])), radius=0.1, poly_order=2)
    assert np.std(out.points[:-1, 2]) < 0.5 * np.std(P[:, 2])
    assert np.array_equal(out.points[-1], lone[0])
    assert np.allclose(out.points[:, :2], np.vstack([P, lone])[:, :2], atol=0.02)
    with pytest.raises(SegmentationError):
        mls_smooth(PointCloud(P), radius=0)
    with pytest.raises(SegmentationError):
        mls_smooth(PointCloud(P), poly_order=3)


def test_structuring_offsets():
    assert [len(structuring_offsets(c)) for c in (6, 18, 26)] == [6, 18, 26]
    with pytest.raises(SegmentationError):
        structuring_offsets(8)


def _dense(ijk, shape, base):
    g = np.zeros(shape, bool)
    g[tuple((ijk - base).T)] = True
    return g


def _struct(connectivity):
    return ndimage.generate_binary_structure(3, {6: 1, 18: 2, 26: 3}[connectivity])


def morphology_oracle(ijk, erode_n, dilate_n, connectivity, min_neighbors):
    pad = erode_n + dilate_n + 3
    base = ijk.min(axis=0) - pad
    shape = tuple(ijk.max(axis=0) - base + pad + 1)
    g = _dense(ijk, shape, base)
    s = _struct(connectivity)
    for _ in range(erode_n):
        if min_neighbors is None:
            g = ndimage.binary_erosion(g, s, border_value=0)
        else:
            nb = s.astype(int)
            nb[1, 1, 1] = 0
            g = g & (ndimage.convolve(g.astype(int), nb, mode="constant") >= min_neighbors)
    for _ in range(dilate_n):
        g = ndimage.binary_dilation(g, s)
    return {tuple(v) for v in np.argwhere(g) + base}


@given(seed=st.integers(0, 10_000), conn=st.sampled_from([6, 18, 26]),
       erode=st.integers(0, 2), dilate=st.integers(0, 2), k=st.sampled_from([None, 1, 3, 5]))
@settings(max_examples=60, deadline=None)
def test_morphology_matches_dense_oracle(seed, conn, erode, dilate, k):
    rng = np.random.default_rng(seed)
    blob = rng.integers(0, 6, (120, 3))
    noise = rng.integers(-10, 16, (15, 3))
    ijk = np.unique(np.vstack([blob, noise]), axis=0)
    got = {tuple(v) for v in morphology_voxels(ijk, erode, dilate, conn, k)}
    assert got == morphology_oracle(ijk, erode, dilate, conn, k)


def test_denoise_drops_isolated_points(rng):
    block = rng.uniform(0, 0.5, (3000, 3))
    speck = np.array([[3.0, 3.0, 3.0]])
    out = denoise_morphological(PointCloud(np.vstack([block, speck])), 0.05, 1, 2, 26, 2)
    assert len(out) == 3000
    with pytest.raises(SegmentationError):
        denoise_morphological(PointCloud(block), voxel=0)


def union_find_clusters(P, tol):
    parent = list(range(len(P)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    d = np.linalg.norm(P[:, None] - P[None], axis=2)
    for i, j in zip(*np.nonzero(np.triu(d <= tol, 1))):
        parent[find(i)] = find(j)
    groups = {}
    for i in range(len(P)):
        groups.setdefault(find(i), []).append(i)
    return groups.values()


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_euclidean_cluster_matches_union_find(seed):
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-3, 3, (5, 3))
    P = np.vstack([c + 0.15 * rng.normal(size=(60, 3)) for c in centres] + [rng.uniform(-4, 4, (20, 3))])
    tol, min_size = 0.2, 5
    segs = euclidean_cluster(PointCloud(P, np.arange(len(P))), tol, min_size, None, "A")
    got = sorted(tuple(sorted(s.cloud.labels.tolist())) for s in segs)
    want = sorted(tuple(sorted(g)) for g in union_find_clusters(P, tol) if len(g) >= min_size)
    assert got == want
    firsts = [s.cloud.labels.min() for s in segs]
    assert firsts == sorted(firsts)
    assert [s.segment_id for s in segs] == [f"A-{i:03d}" for i in range(len(segs))]


def test_cluster_size_limits(rng):
    P = np.vstack([rng.normal(size=(100, 3)) * 0.05, 5 + rng.normal(size=(10, 3)) * 0.05])
    assert [len(s) for s in euclidean_cluster(PointCloud(P), 0.2, 20)] == [100]
    assert [len(s) for s in euclidean_cluster(PointCloud(P), 0.2, 5, 50)] == [10]
    with pytest.raises(SegmentationError):
        euclidean_cluster(PointCloud(P), 0)


def test_normals_of_a_plane(rng):
    n, curv, nn = estimate_normals(plane_points(rng, 500, size=1.0), 12)
    assert np.allclose(np.abs(n[:, 2]), 1.0, atol=1e-9)
    assert np.allclose(curv, 0.0, atol=1e-12)
    assert nn.shape == (500, 12)


def test_region_grow_splits_two_walls_and_keeps_every_point(rng):
    u = rng.uniform(0, 2, (2000, 2))
    wall_x = np.c_[u[:, 0], np.zeros(2000), u[:, 1]]
    wall_y = np.c_[np.zeros(2000) - 0.02, u[:, 0] + 0.02, u[:, 1]]
    seg = Segment(PointCloud(np.vstack([wall_x, wall_y]), np.arange(4000)), "A", "A-000")
    parts = region_grow_refine(seg, 20, np.deg2rad(25), 0.03)
    assert len(parts) == 2
    labels = np.sort(np.concatenate([p.cloud.labels for p in parts]))
    assert np.array_equal(labels, np.arange(4000))
    for p in parts:
        side = p.cloud.labels < 2000
        assert side.mean() > 0.95 or side.mean() < 0.05
    assert [p.segment_id for p in parts] == ["A-000.0", "A-000.1"]


def test_region_grow_leaves_a_single_plane_alone(rng):
    seg = Segment(PointCloud(plane_points(rng, 500, size=1.0)), "A", "A-000")
    assert region_grow_refine(seg) == [seg]
    with pytest.raises(SegmentationError, match="normal_k"):
        region_grow_refine(Segment(PointCloud(rng.normal(size=(5, 3)))), normal_k=20)


def test_merge_or_split(rng):
    blob = rng.uniform(0, 0.5, (800, 3))
    other = rng.uniform(2, 2.5, (800, 3))
    a = [Segment(PointCloud(blob), "A", "A-000"), Segment(PointCloud(other), "A", "A-001")]
    b = [Segment(PointCloud(blob.copy()), "B", "B-000")]
    out_a, out_b = merge_or_split(a, b, 0.3, 0.05, 0.1)
    # identical segments vanish, the unrelated one is untouched
    assert [s.segment_id for s in out_a] == ["A-001"] and out_b == []
    half = Segment(PointCloud(blob[blob[:, 0] < 0.25]), "B", "B-000")
    assert overlap_ratio(a[0], half, 0.05) == pytest.approx(1.0)
    low = Segment(PointCloud(blob + [0.45, 0, 0]), "B", "B-001")
    assert overlap_ratio(a[0], low, 0.05) < 0.3
    out_a, out_b = merge_or_split(a, [low], 0.3, 0.05, 0.1)
    assert len(out_a) == 2 and len(out_b) == 1


def test_ransac_exact_plane_returns_only_elevated_points(rng):
    floor = plane_points(rng, 1000)
    up = rng.uniform([-2, -2, 1], [2, 2, 1], (100, 3))
    model, rest = ransac_ground(PointCloud(np.vstack([floor, up])), 0.01, np.deg2rad(15), 200, seed=0)
    assert np.allclose(np.abs(model.normal), [0, 0, 1]) and abs(model.offset) < 1e-12
    assert np.array_equal(np.sort(rest.points, axis=0), np.sort(up, axis=0))
    tilted = plane_points(rng, 500)
    tilted = np.c_[tilted[:, 0], tilted[:, 1] * np.cos(np.pi / 4), tilted[:, 1] * np.sin(np.pi / 4)]
    with pytest.raises(SegmentationError):
        ransac_ground(PointCloud(tilted), 0.02, np.deg2rad(10), 100)


def test_ransac_inliers_match_brute_force_distances(rng):
    floor = plane_points(rng, 2000, noise=0.01)
    clutter = rng.uniform([-2, -2, 0.5], [2, 2, 2], (500, 3))
    model, _ = ransac_ground(PointCloud(np.vstack([floor, clutter])), 0.03, np.deg2rad(15), 500, seed=2)
    found = np.zeros(2500, bool)
    found[model.inliers] = True
    # the plane's own points: almost all inside 3 sigma
    assert found[:2000].mean() >= 0.99
    brute = np.abs(np.vstack([floor, clutter]) @ model.normal + model.offset) <= 0.03
    assert np.array_equal(found, brute)


def test_ransac_is_scale_consistent(rng):
    cloud = np.vstack([plane_points(rng, 800, z=0.2, noise=0.01), rng.uniform(-2, 2, (200, 3)) + [0, 0, 2.5]])
    m1, _ = ransac_ground(PointCloud(cloud), 0.03, np.deg2rad(15), 200, seed=4)
    m2, _ = ransac_ground(PointCloud(cloud * 3.0), 0.09, np.deg2rad(15), 200, seed=4)
    assert np.array_equal(np.sort(m1.inliers), np.sort(m2.inliers))
    assert m2.offset == pytest.approx(3.0 * m1.offset)


def test_mls_on_exact_plane_and_uniform_noise(rng):
    flat = plane_points(rng, 2000, z=0.3, size=1.0)
    out = mls_smooth(PointCloud(flat), radius=0.1)
    assert np.allclose(out.points, flat, atol=1e-9)
    noisy = flat + np.c_[np.zeros((2000, 2)), rng.uniform(-0.02, 0.02, 2000) * np.sqrt(3)]
    smooth = mls_smooth(PointCloud(noisy), radius=0.1)
    rms = lambda p: np.sqrt(np.mean((p[:, 2] - 0.3) ** 2))
    assert rms(smooth.points) < rms(noisy)
    lone = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(mls_smooth(PointCloud(lone), 0.1).points, lone)


def test_solid_block_survives_opening_and_isolated_voxel_does_not():
    ijk = np.argwhere(np.ones((10, 10, 10), bool))
    # the full 3x3x3 element makes a box stable under opening
    assert len(morphology_voxels(ijk, 1, 1, 26, None)) == 1000
    # k-neighbour erosion leaves a solid alone, so every point survives denoising
    pts = (ijk + 0.5) * 0.05
    assert len(denoise_morphological(PointCloud(pts), 0.05, 1, 1, 26, 2)) == 1000
    # the 6-connected cross shaves edges and corners off the box
    assert len(morphology_voxels(ijk, 1, 1, 6, None)) == 1000 - 12 * 8 - 8
    assert len(morphology_voxels(np.array([[0, 0, 0]]), 1, 0, 6, None)) == 0


def test_cluster_examples(rng):
    blobs = np.vstack([rng.normal(size=(100, 3)) * 0.05, rng.normal(size=(100, 3)) * 0.05 + [5, 0, 0]])
    assert len(euclidean_cluster(PointCloud(blobs), 0.5, 1)) == 2
    assert euclidean_cluster(PointCloud(rng.normal(size=(5, 3)) * 0.01), 0.5, 10) == []


def test_region_grow_sphere_and_collinear(rng):
    d = rng.normal(size=(4000, 3))
    sphere = Segment(PointCloud(d / np.linalg.norm(d, axis=1, keepdims=True)), "A", "A-000")
    assert len(region_grow_refine(sphere, 20, np.deg2rad(60), 0.1)) == 1
    line = Segment(PointCloud(np.c_[np.linspace(0, 1, 50), np.zeros(50), np.zeros(50)]), "A", "A-001")
    assert region_grow_refine(line) == [line]


def test_half_width_move_leaves_one_residual_per_mission(rng):
    # dense enough that every voxel inside the box holds points from both missions
    box = rng.uniform([0, 0, 0], [0.6, 0.4, 0.4], (40000, 3)) + 0.0123
    a = Segment(PointCloud(box), "A", "A-000")
    b = Segment(PointCloud(box + [0.3, 0, 0]), "B", "B-000")
    out_a, out_b = merge_or_split([a], [b], 0.3, 0.05, 0.1)
    assert len(out_a) == 1 and len(out_b) == 1
    va = {tuple(v) for v in np.floor(out_a[0].cloud.points / 0.05).astype(int)}
    vb = {tuple(v) for v in np.floor(out_b[0].cloud.points / 0.05).astype(int)}
    assert not va & vb
    assert out_a[0].cloud.points[:, 0].max() < 0.30
    # A barely reaches into the last voxel column, so that column stays with B
    assert out_b[0].cloud.points[:, 0].min() >= 0.60
