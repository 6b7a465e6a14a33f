import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from mmchange.descriptors import (
    DIM,
    DescriptorError,
    describe,
    describe_all,
    export_descriptors,
    import_descriptors,
    raw_descriptor,
)
from mmchange.geometry import PointCloud
from mmchange.segmentation import Segment
from oracles import box_surface, synthetic_object


def seg(points, sid="A-000"):
    return Segment(PointCloud(points), "A", sid)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_rigid_motion_leaves_descriptor_unchanged(seed):
    rng = np.random.default_rng(seed)
    P = synthetic_object(rng)
    R = Rotation.random(random_state=seed).as_matrix()
    moved = P @ R.T + rng.uniform(-50, 50, 3)
    assert np.linalg.norm(describe(seg(P)) - describe(seg(moved))) < 1e-9


def test_point_order_does_not_matter(rng):
    P = synthetic_object(rng)
    d = describe(seg(P))
    assert np.array_equal(d, describe(seg(P[rng.permutation(len(P))])))
    assert np.linalg.norm(d) == pytest.approx(1.0)
    assert d.shape == (DIM,)


def test_shapes_are_told_apart(rng):
    slab = box_surface(rng, (2.0, 2.0, 0.05), 3000)
    cube = box_surface(rng, (0.6, 0.6, 0.6), 3000)
    rod = box_surface(rng, (2.0, 0.1, 0.1), 3000)
    d = [describe(seg(p)) for p in (slab, cube, rod)]
    assert min(np.linalg.norm(d[i] - d[j]) for i, j in [(0, 1), (0, 2), (1, 2)]) > 0.1


def test_count_slot_spans_the_batch(rng):
    small, big = box_surface(rng, (1, 1, 1), 50), box_surface(rng, (1, 1, 1), 5000)
    raw = [raw_descriptor(p, (np.log1p(50), np.log1p(5000))) for p in (small, big)]
    assert raw[0][-1] == 0.0 and raw[1][-1] == 1.0
    objs = describe_all([seg(small, "A-000"), seg(big, "A-001")])
    assert objs[0].descriptor[-1] == 0.0 and objs[1].descriptor[-1] > 0
    assert raw_descriptor(big)[-1] == 0.0


def test_degenerate_segments_are_rejected():
    with pytest.raises(DescriptorError, match="at least 10"):
        raw_descriptor(np.zeros((9, 3)))
    with pytest.raises(DescriptorError, match="identical"):
        raw_descriptor(np.ones((20, 3)))
    bad = seg(np.zeros((5, 3)), "B-007")
    with pytest.raises(DescriptorError, match=r"\[1\] B-007"):
        describe_all([seg(np.random.default_rng(0).normal(size=(30, 3))), bad])
    assert describe_all([]) == []


def test_export_import_round_trip(tmp_path, rng):
    items = [(f"A-{i:03d}", describe(seg(synthetic_object(rng)))) for i in range(3)]
    path = tmp_path / "d.txt"
    export_descriptors(items, path)
    back = import_descriptors(path, known_ids=[s for s, _ in items])
    assert [s for s, _ in back] == [s for s, _ in items]
    for (_, a), (_, b) in zip(items, back):
        # values are written exactly; only the renormalisation on ingest may round
        assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_import_normalises_and_validates(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text("# comment\nX " + " ".join(["2"] * DIM) + "\n")
    (sid, v), = import_descriptors(path)
    assert sid == "X" and np.allclose(v, 0.25)
    cases = {
        "X " + " ".join(["1"] * (DIM - 1)): "expected 16 values",
        "X " + " ".join(["1"] * (DIM - 1) + ["nan"]): "non-finite",
        "X " + " ".join(["1"] * (DIM - 1) + ["one"]): "line 1",
        "X " + " ".join(["0"] * DIM): "zero",
        "Y " + " ".join(["1"] * DIM): "unknown segment id",
    }
    for line, msg in cases.items():
        path.write_text(line + "\n")
        with pytest.raises(DescriptorError, match=msg):
            import_descriptors(path, known_ids=["X"])
    path.write_text(("X " + " ".join(["1"] * DIM) + "\n") * 2)
    with pytest.raises(DescriptorError, match="line 2: duplicate"):
        import_descriptors(path)
    with pytest.raises(DescriptorError, match="whitespace"):
        export_descriptors([("a b", np.ones(DIM))], path)
    with pytest.raises(DescriptorError, match="shape"):
        export_descriptors([("a", np.ones(3))], path)


def test_sphere_is_isotropic(rng):
    d = rng.normal(size=(5000, 3))
    sphere = d / np.linalg.norm(d, axis=1, keepdims=True)
    ratios = raw_descriptor(sphere)[8:11]
    assert np.allclose(ratios, 1.0, atol=0.05)


def test_rod_and_disk_differ_more_than_two_rod_samples(rng):
    def rod():
        return box_surface(rng, (1.5, 0.2, 0.2), 3000)

    t = rng.uniform(0, 2 * np.pi, 3000)
    r = 0.6 * np.sqrt(rng.uniform(0, 1, 3000))
    disk = np.c_[r * np.cos(t), r * np.sin(t), 0.01 * rng.normal(size=3000)]
    d_rod1, d_rod2, d_disk = (describe(seg(p)) for p in (rod(), rod(), disk))
    assert np.linalg.norm(d_rod1 - d_disk) > np.linalg.norm(d_rod1 - d_rod2)


def test_batch_keeps_order_and_is_fast(rng):
    import time

    segs = [seg(synthetic_object(rng), f"A-{i:03d}") for i in range(150)]
    t0 = time.perf_counter()
    objs = describe_all(segs)
    assert time.perf_counter() - t0 < 7.5
    order = rng.permutation(150)
    again = describe_all([segs[i] for i in order])
    for k, i in enumerate(order):
        assert again[k].segment.segment_id == objs[i].segment.segment_id
        assert np.array_equal(again[k].descriptor, objs[i].descriptor)
