import copy
import json

import numpy as np
import pytest

from mmchange.cli import main
from mmchange.geometry import RigidTransform
from mmchange.pipeline import ConfigError, StageError, build_config, detect, load_config
from conftest import SMALL_SCENE, SMALL_SCRIPT


def test_config_rejects_unknown_keys_and_bad_types(tmp_path):
    with pytest.raises(ConfigError, match=r"unknown config key\(s\): octree\.resolutoin"):
        build_config({"octree": {"resolutoin": 0.1}})
    with pytest.raises(ConfigError, match=r"grouping\.k_max: expected an integer"):
        build_config({"grouping": {"k_max": 2.5}})
    with pytest.raises(ConfigError, match=r"figures: expected true or false"):
        build_config({"figures": 1})
    with pytest.raises(ConfigError, match=r"octree\.resolution: must be positive"):
        build_config({"octree": {"resolution": 0}})
    with pytest.raises(ConfigError, match=r"crop\.min"):
        build_config({"crop": {"min": [0, 0]}})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "c.json")
    cfg = build_config({"grouping": {"alpha": 1.0}})
    assert cfg["grouping"]["alpha"] == 1.0 and cfg["grouping"]["beta"] == 0.5


def test_detect_on_small_scene(small_pair):
    a, b, gt, _ = small_pair
    res = detect(a, b)
    moved = {c.object_a: c for c in res.correspondences if c.kind == "moved"}
    kinds = sorted(c.kind for c in res.correspondences)
    assert kinds == ["moved", "moved", "removed"]
    labels = {s.segment_id: np.bincount(s.cloud.labels).argmax() for s in res.segments}
    for c in moved.values():
        oid = labels[c.object_a]
        assert labels[c.object_b] == oid
        err = c.transform @ gt.moved[oid].inverse()
        assert np.degrees(err.rotation_angle()) < 2.0
        assert np.linalg.norm(c.transform.translation - gt.moved[oid].translation) < 0.05
    removed = [c for c in res.correspondences if c.kind == "removed"][0]
    assert labels[removed.object_a] == 12


def test_stage_errors_name_the_stage(small_pair):
    a, b, _, _ = small_pair
    with pytest.raises(StageError, match=r"^\[align\]") as info:
        detect(a, b, {"alignment": {"seeds": {"B": {"translation": [40.0, 0, 0]}}}})
    assert info.value.stage == "align"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.json").write_text(json.dumps(SMALL_SCENE))
    (root / "changes.json").write_text(json.dumps(SMALL_SCRIPT))
    assert main(["simulate", "--scene", str(root / "scene.json"),
                 "--changes", str(root / "changes.json"), "--out", str(root / "sim")]) == 0
    return root


@pytest.fixture(scope="module")
def detected(sim_dir):
    """Stdout of one full CLI detect run into ``sim_dir / "r1"``."""
    import contextlib
    import io

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        assert main(["detect", str(sim_dir / "sim" / "A"), str(sim_dir / "sim" / "B"),
                     "--out", str(sim_dir / "r1")]) == 0
    return buf.getvalue()


def test_cli_detect_evaluate_match(sim_dir, detected, capsys):
    sim = sim_dir / "sim"
    assert "2 moved, 0 added, 1 removed" in detected
    for name in ("report.json", "segments.json", "match_matrix.csv", "timings.json",
                 "effective_config.json", "aligned/A_trajectory.txt",
                 "figures/changes_topdown.png", "figures/match_matrix.png", "figures/wcss.png",
                 "figures/descriptors_pca.png"):
        assert (sim_dir / "r1" / name).is_file(), name
    assert (sim_dir / "r1" / "figures" / "wcss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    code, _, _ = run(capsys, "detect", sim / "A", sim / "B", "--out", sim_dir / "r2", "--no-figures")
    assert code == 0
    assert (sim_dir / "r1" / "report.json").read_bytes() == (sim_dir / "r2" / "report.json").read_bytes()
    assert not (sim_dir / "r2" / "figures").exists()

    code, out, _ = run(capsys, "evaluate", sim_dir / "r1", sim / "ground_truth.json", "--title", "small")
    assert code == 0 and out.splitlines()[1].startswith("small")
    metrics = json.loads((sim_dir / "r1" / "metrics.json").read_text())["metrics"]
    assert metrics["precision"] > 0.8 and metrics["recall"] > 0.6

    code, out, _ = run(capsys, "match", sim_dir / "r1", "--alpha", "0", "--beta", "1", "--out", sim_dir / "m")
    assert code == 0 and "removed" in out
    assert json.loads((sim_dir / "m" / "correspondences.json").read_text())["alpha"] == 0.0


def test_cli_align_then_detect_without_alignment(sim_dir, capsys):
    sim = sim_dir / "sim"
    code, out, _ = run(capsys, "align", sim / "A", sim / "B", "--out", sim_dir / "al")
    assert code == 0 and "loop closures" in out
    summary = json.loads((sim_dir / "al" / "alignment.json").read_text())
    assert summary["missions"] == ["A", "B"] and summary["loop_closures"] > 0
    code, out, _ = run(capsys, "detect", sim_dir / "al" / "A", sim_dir / "al" / "B",
                       "--out", sim_dir / "r3", "--no-align", "--no-figures")
    assert code == 0 and "2 moved" in out


def test_cli_describe(sim_dir, detected, capsys):
    files = sorted((sim_dir / "r1" / "segments").glob("*.ply"))
    code, out, _ = run(capsys, "describe", *files, "--out", sim_dir / "d.txt")
    assert code == 0
    rows = (sim_dir / "d.txt").read_text().splitlines()
    # two moved objects seen on both sides plus the removed one
    assert len(files) == 5
    assert [r.split()[0] for r in rows] == [f.stem for f in files]
    assert all(len(r.split()) == 17 for r in rows)


def test_cli_errors_are_stage_tagged(sim_dir, tmp_path, capsys):
    code, _, err = run(capsys, "detect", tmp_path / "nope", sim_dir / "sim" / "B", "--out", tmp_path / "o")
    assert code == 1 and err.startswith("mmchange: error: [load] FileNotFoundError")
    (tmp_path / "bad.json").write_text(json.dumps({"octree": {"size": 1}}))
    code, _, err = run(capsys, "detect", sim_dir / "sim" / "A", sim_dir / "sim" / "B",
                       "--out", tmp_path / "o", "--config", tmp_path / "bad.json")
    assert code == 1 and "[detect] ConfigError: unknown config key(s): octree.size" in err
    bad = copy.deepcopy(SMALL_SCRIPT)
    bad["changes"][0]["id"] = 99
    (tmp_path / "c.json").write_text(json.dumps(bad))
    code, _, err = run(capsys, "simulate", "--scene", sim_dir / "scene.json", "--changes", tmp_path / "c.json",
                       "--out", tmp_path / "s")
    assert code == 1 and "[simulate] SpecError: changes[0].id: unknown object id 99" in err
    code, _, err = run(capsys, "--threads", "0", "evaluate", "r", "g")
    assert code == 2 and "--threads" in err


def test_report_ids_resolve_and_config_round_trips(sim_dir, detected, capsys):
    r1 = sim_dir / "r1"
    report = json.loads((r1 / "report.json").read_text())
    index = {s["segment_id"] for s in json.loads((r1 / "segments.json").read_text())["segments"]}
    for c in report["correspondences"]:
        assert {c["objectA"], c["objectB"]} - {None} <= index
    assert set(report["descriptors"]) <= index
    code, _, _ = run(capsys, "detect", sim_dir / "sim" / "A", sim_dir / "sim" / "B", "--out", sim_dir / "r4",
                     "--config", r1 / "effective_config.json")
    assert code == 0
    assert (r1 / "report.json").read_bytes() == (sim_dir / "r4" / "report.json").read_bytes()


def test_simulate_is_byte_identical(sim_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", "--scene", sim_dir / "scene.json", "--changes", sim_dir / "changes.json",
                     "--out", tmp_path / "again")
    assert code == 0
    for f in sorted((sim_dir / "sim").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(sim_dir / "sim")).read_bytes(), f
