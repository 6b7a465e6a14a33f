import copy

import numpy as np
import pytest

from mmchange import _raycast
from mmchange.geometry import RigidTransform
from mmchange.scenegen import (
    GroundTruth,
    LidarModel,
    SpecError,
    apply_changes,
    box_mesh,
    build_scene,
    cylinder_mesh,
    generate_mission,
    icosphere_mesh,
    lidar_from_json,
    scene_from_json,
    script_from_json,
    shape_parts,
    simulate_scan,
)
from conftest import SMALL_SCENE


def spec_dict(**over):
    d = copy.deepcopy(SMALL_SCENE)
    d.update(over)
    return d


def brute_first_hit(o, dirs, tris):
    """First hit per ray by solving o + t d = v0 + u e1 + v e2 against every triangle."""
    v0, e1, e2 = tris[:, 0], tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    t_out = np.full(len(dirs), np.inf)
    idx = np.full(len(dirs), -1)
    margin = np.full(len(dirs), np.inf)
    for r, d in enumerate(dirs):
        M = np.stack([-np.broadcast_to(d, e1.shape), e1, e2], axis=2)
        ok = np.abs(np.linalg.det(M)) > 1e-12
        sol = np.full((len(tris), 3), np.nan)
        sol[ok] = np.linalg.solve(M[ok], (o - v0[ok])[..., None])[..., 0]
        t, u, v = sol.T
        with np.errstate(invalid="ignore"):
            hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        if hit.any():
            k = np.flatnonzero(hit)[np.argmin(t[hit])]
            t_out[r], idx[r] = t[k], k
            margin[r] = min(u[k], v[k], 1 - u[k] - v[k])
    return t_out, idx, margin


def test_raycast_matches_brute_force(small_spec, rng):
    scene = build_scene(small_spec)
    tris = np.stack([scene.v0, scene.v0 + scene.e1, scene.v0 + scene.e2], axis=1)
    o = np.array([0.3, -0.4, 0.7])
    dirs = rng.normal(size=(1500, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    got, lab = _raycast.cast_rays(o, dirs, scene.v0, scene.e1, scene.e2, scene.labels, scene.part_start,
                                  scene.part_lo, scene.part_hi, 1e9, 0.0, 0.0, np.uint64(0), 1)
    want, k, margin = brute_first_hit(o, dirs, tris)
    assert np.array_equal(np.isinf(got), np.isinf(want))
    hit = np.isfinite(want)
    assert np.allclose(got[hit], want[hit], atol=1e-9, rtol=0)
    # labels agree unless the ray grazes a shared triangle edge
    clear = hit & (margin > 1e-9)
    assert np.array_equal(lab[clear], scene.labels[k[clear]])


def test_wall_at_one_metre_without_noise():
    spec = scene_from_json({
        "extent": {"min": [-2, -2, -1], "max": [2, 2, 2]}, "ground": False,
        "objects": [{"id": 1, "shape": {"type": "box", "size": [0.1, 2.0, 2.0]},
                     "pose": {"translation": [1.05, 0.0, -0.5]}}]})
    lidar = LidarModel(channels=1, vfov_deg=10, hres_deg=90.0, max_range=10, sigma=0.0)
    scan = simulate_scan(build_scene(spec), RigidTransform.identity(), lidar)
    assert len(scan) == 1 and np.array_equal(scan.labels, [1])
    assert np.linalg.norm(scan.points[0]) == pytest.approx(1.0, abs=1e-12)
    noisy = LidarModel(channels=1, vfov_deg=10, hres_deg=90.0, max_range=0.5, sigma=0.0)
    assert len(simulate_scan(build_scene(spec), RigidTransform.identity(), noisy)) == 0


def test_range_noise_has_the_configured_spread():
    spec = scene_from_json({
        "extent": {"min": [-2, -2, -2], "max": [2, 2, 2]}, "ground": False,
        "objects": [{"id": 1, "shape": {"type": "sphere", "radius": 1.5, "subdivisions": 3},
                     "pose": {"translation": [0, 0, -1.5]}}]})
    scene = build_scene(spec)
    exact = simulate_scan(scene, RigidTransform.identity(), LidarModel(16, 60, 1.0, 10, 0.0))
    noisy = simulate_scan(scene, RigidTransform.identity(), LidarModel(16, 60, 1.0, 10, 0.01), seed=5)
    dr = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(exact.points, axis=1)
    assert abs(dr.mean()) < 1e-3 and dr.std() == pytest.approx(0.01, rel=0.05)


def test_empty_scene_gives_empty_scans():
    spec = scene_from_json({"extent": {"min": [-1, -1, -1], "max": [1, 1, 1]}, "ground": False})
    scan = simulate_scan(build_scene(spec), RigidTransform.identity(), LidarModel(8, 30, 5.0))
    assert len(scan) == 0 and scan.labels is not None


def test_simulation_is_deterministic(small_spec):
    scene = build_scene(small_spec)
    poses = small_spec.trajectory.poses()[:2]
    a = generate_mission(scene, poses, small_spec.lidar, seed=7)
    b = generate_mission(scene, poses, small_spec.lidar, seed=7)
    c = generate_mission(scene, poses, small_spec.lidar, seed=8)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a.scans, b.scans))
    assert not np.array_equal(a.scans[0].points, c.scans[0].points)


def test_odometry_noise_only_touches_poses(small_spec):
    scene = build_scene(small_spec)
    poses = small_spec.trajectory.poses()[:4]
    clean = generate_mission(scene, poses, small_spec.lidar, seed=1)
    drift = generate_mission(scene, poses, small_spec.lidar, seed=1, odometry_sigma=(0.05, 0.01))
    assert all(np.allclose(p.matrix(), q.matrix()) for p, q in zip(clean.poses, poses))
    assert np.array_equal(drift.poses[0].matrix(), poses[0].matrix())
    assert not np.allclose(drift.poses[-1].matrix(), poses[-1].matrix())
    assert all(np.array_equal(x.points, y.points) for x, y in zip(clean.scans, drift.scans))


def test_trajectory_poses_follow_the_loop(small_spec):
    poses = small_spec.trajectory.poses()
    assert len(poses) == 10
    xy = np.array([p.translation[:2] for p in poses])
    step = np.linalg.norm(np.diff(np.vstack([xy, xy[:1]]), axis=0), axis=1)
    # evenly spaced by arc length, so chords never exceed the 1.88 m spacing
    assert np.all(step <= 2 * (5.2 + 3.8) / 10 + 1e-9)
    assert np.allclose([p.translation[2] for p in poses], 0.7)
    assert np.allclose(poses[0].rotation, np.eye(3))


def test_mesh_triangle_counts():
    assert box_mesh([1, 2, 3]).shape == (12, 3, 3)
    assert len(cylinder_mesh(0.5, 1.0, 16)) == 64
    assert len(icosphere_mesh(1.0, 2)) == 20 * 16
    comp = {"type": "composite", "parts": [
        {"shape": {"type": "box", "size": [1, 1, 1]}},
        {"shape": {"type": "cylinder", "radius": 0.2, "height": 1, "segments": 8},
         "pose": {"translation": [0, 0, 1]}}]}
    assert sum(len(p) for p in shape_parts(comp)) == 12 + 32
    # closed box: the signed volume from its triangles is the box volume
    v = box_mesh([1, 2, 3])
    assert np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6 == pytest.approx(6.0)


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d["objects"][4]["shape"]["parts"][0]["shape"].update(size=[1, -1, 1]),
     r"objects\[4\]\.shape\.parts\[0\]\.shape\.size\[1\]: must be positive"),
    (lambda d: d["objects"][0].update(colour="red"), r"objects\[0\]: unknown keys \['colour'\]"),
    (lambda d: d["objects"][1].update(id=1), r"objects\[1\]\.id: duplicate id 1"),
    (lambda d: d["objects"][6]["pose"].update(translation=[9.0, 0, 0]), r"objects\[6\]: object 12 extends"),
    (lambda d: d["objects"][6]["shape"].update(type="torus"), r"objects\[6\]\.shape\.type: unknown shape"),
    (lambda d: d.update(lidar="hdl-64"), r"lidar: unknown preset 'hdl-64'"),
    (lambda d: d["trajectory"].update(waypoints=[[0, 0]]), r"trajectory\.waypoints"),
    (lambda d: d["extent"].update(min=[0, 0]), r"extent\.min"),
    (lambda d: d.update(weather="rain"), r"scene: unknown keys"),
])
def test_scene_errors_carry_key_paths(mutate, msg):
    d = spec_dict()
    mutate(d)
    with pytest.raises(SpecError, match=msg):
        scene_from_json(d)


def test_lidar_presets_and_overrides():
    assert lidar_from_json("xt32-like").channels == 32
    assert lidar_from_json({"preset": "xt32-like", "sigma": 0.0}).sigma == 0.0
    with pytest.raises(SpecError, match="channels"):
        LidarModel(channels=0)


def test_apply_changes_ground_truth(small_spec):
    script = script_from_json({"changes": [
        {"id": 10, "action": "move", "motion": {"translation": [0.3, 1.3, 0], "yaw_deg": 30}},
        {"id": 12, "action": "remove"},
        {"id": 20, "action": "add", "object": {"id": 20, "shape": {"type": "box", "size": [0.3, 0.3, 0.3]},
                                               "pose": {"translation": [0, 0, 0]}}}]})
    spec_b, gt = apply_changes(small_spec, script)
    assert gt.changed_ids == {10, 12, 20} and gt.added == {20} and gt.removed == {12}
    before = small_spec.object(10)
    after = spec_b.object(10)
    V = np.concatenate(shape_parts(before.shape)).reshape(-1, 3)
    assert np.allclose(gt.moved[10].apply(before.pose.apply(V)), after.pose.apply(V), atol=1e-12)
    assert [o.id for o in spec_b.objects] == [1, 2, 3, 4, 10, 11, 20]
    # the input spec is untouched
    assert np.allclose(small_spec.object(10).pose.translation, [-1.476, -0.778, 0])
    back = GroundTruth.from_json(gt.to_json())
    assert back.changed_ids == gt.changed_ids
    assert np.allclose(back.moved[10].matrix(), gt.moved[10].matrix())


def test_change_script_errors(small_spec):
    with pytest.raises(SpecError, match=r"changes\[0\]\.id: unknown object id 99"):
        apply_changes(small_spec, script_from_json({"changes": [{"id": 99, "action": "remove"}]}))
    with pytest.raises(SpecError, match=r"changes\[0\]\.action"):
        script_from_json({"changes": [{"id": 10, "action": "explode"}]})
    with pytest.raises(SpecError, match="leaves the scene extent"):
        apply_changes(small_spec, script_from_json(
            {"changes": [{"id": 10, "action": "move", "motion": {"translation": [9, 0, 0]}}]}))
    with pytest.raises(SpecError, match="mission_b: unknown keys"):
        script_from_json({"changes": [], "mission_b": {"speed": 2}})
