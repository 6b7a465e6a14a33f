"""Shared fixtures: a small fast scene and the bundled office scene run once."""

from __future__ import annotations

import copy
import json
import time

import numpy as np
import pytest

from mmchange.cli import EXAMPLES, _data
from mmchange.pipeline import build_config, evaluate_detection, run_detect, save_mission
from mmchange.scenegen import load_scene, load_script, scene_from_json, script_from_json, simulate_pair


def _box(oid, size, xy, yaw=0.0, role="object"):
    return {"id": oid, "role": role, "shape": {"type": "box", "size": list(size)},
            "pose": {"translation": [xy[0], xy[1], 0.0], "yaw_deg": yaw}}


# Room 8 x 6 m, walls and boxes placed off the 5 cm grid.
SMALL_SCENE = {
    "name": "small-room",
    "extent": {"min": [-4.5, -3.5, -0.5], "max": [4.5, 3.5, 2.6]},
    "lidar": {"channels": 64, "vfov_deg": 90.0, "hres_deg": 0.5, "max_range": 30.0, "sigma": 0.005},
    "trajectory": {"waypoints": [[-2.6, -1.9], [2.6, -1.9], [2.6, 1.9], [-2.6, 1.9]],
                   "n_poses": 10, "height": 0.7, "closed": True},
    "seed": 3,
    "objects": [
        _box(1, (8.0, 0.2, 2.213), (0.013, 3.122), role="structure"),
        _box(2, (8.0, 0.2, 2.213), (0.013, -3.078), role="structure"),
        _box(3, (0.2, 6.0, 2.213), (4.122, 0.022), role="structure"),
        _box(4, (0.2, 6.0, 2.213), (-4.078, 0.022), role="structure"),
        {"id": 10, "role": "object", "shape": {"type": "composite", "parts": [
            {"shape": {"type": "box", "size": [0.7, 0.5, 0.413]}},
            {"shape": {"type": "box", "size": [0.3, 0.3, 0.4]},
             "pose": {"translation": [0.15, 0.1, 0.413]}}]},
         "pose": {"translation": [-1.476, -0.778, 0.0], "yaw_deg": 0}},
        {"id": 11, "role": "object", "shape": {"type": "composite", "parts": [
            {"shape": {"type": "box", "size": [1.4, 0.4, 0.763]}},
            {"shape": {"type": "box", "size": [0.4, 0.6, 0.513]},
             "pose": {"translation": [0.5, 0.5, 0.0]}}]},
         "pose": {"translation": [1.224, -0.978, 0.0], "yaw_deg": 0}},
        {"id": 12, "role": "object", "shape": {"type": "cylinder", "radius": 0.25, "height": 0.9},
         "pose": {"translation": [2.024, 1.122, 0.0], "yaw_deg": 0}},
    ],
}

SMALL_SCRIPT = {
    "changes": [
        {"id": 10, "action": "move", "motion": {"translation": [0.3, 1.3, 0.0], "yaw_deg": 30}},
        {"id": 11, "action": "move", "motion": {"translation": [-1.0, 0.9, 0.0], "yaw_deg": -25}},
        {"id": 12, "action": "remove"},
    ],
    "mission_b": {"seed": 4},
}


@pytest.fixture(scope="session")
def small_spec():
    return scene_from_json(copy.deepcopy(SMALL_SCENE))


@pytest.fixture(scope="session")
def small_pair(small_spec):
    """Missions A and B of the small scene, with ground truth."""
    return simulate_pair(small_spec, script_from_json(copy.deepcopy(SMALL_SCRIPT)))


@pytest.fixture(scope="session")
def small_dirs(small_pair, tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    a, b, gt, _ = small_pair
    save_mission(a, root / "A")
    save_mission(b, root / "B")
    (root / "ground_truth.json").write_text(json.dumps(gt.to_json()))
    return root


@pytest.fixture(scope="session")
def office_pair():
    scene, script = (_data(n) for n in EXAMPLES["office"])
    return simulate_pair(load_scene(scene), load_script(script))


def _run_bundled(example, tmp_path_factory):
    scene, script = (_data(n) for n in EXAMPLES[example])
    a, b, gt, _ = simulate_pair(load_scene(scene), load_script(script))
    root = tmp_path_factory.mktemp(example)
    save_mission(a, root / "A")
    save_mission(b, root / "B")
    (root / "ground_truth.json").write_text(json.dumps(gt.to_json()))
    t0 = time.perf_counter()
    result = run_detect(root / "A", root / "B", build_config(), root / "out")
    seconds = time.perf_counter() - t0
    metrics, counts = evaluate_detection(root / "out", root / "ground_truth.json")
    return {"root": root, "result": result, "metrics": metrics, "counts": counts,
            "seconds": seconds, "gt": gt}


@pytest.fixture(scope="session")
def office_run(tmp_path_factory):
    """Full detection on the bundled office scene."""
    return _run_bundled("office", tmp_path_factory)


@pytest.fixture(scope="session")
def overlap_run(tmp_path_factory):
    """Same room, but the moved objects shift by less than their own width."""
    return _run_bundled("overlap", tmp_path_factory)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
