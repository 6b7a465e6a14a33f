"""Command-line entry point: ``mmchange <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

EXAMPLES = {
    "office": ("office_scene.json", "office_changes.json"),
    "overlap": ("office_scene.json", "office_overlap_changes.json"),
}


def _data(name: str) -> Path:
    return Path(str(resources.files("mmchange").joinpath("data", name)))


def _config(args) -> dict:
    from .pipeline import build_config, load_config

    cfg = load_config(args.config)
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    g = {k: v for k, v in (("alpha", getattr(args, "alpha", None)),
                           ("beta", getattr(args, "beta", None)),
                           ("k_max", getattr(args, "k_max", None))) if v is not None}
    if g:
        over["grouping"] = g
    if getattr(args, "changes_require_observed_both", False):
        over["octree"] = {"require_observed_both": True}
    if getattr(args, "no_align", False):
        over["alignment"] = {"enabled": False}
    if getattr(args, "no_figures", False):
        over["figures"] = False
    return build_config(_deep_merge(cfg, over)) if over else cfg


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _deep_merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


# -- subcommands -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .pipeline import save_mission
    from .scenegen import load_scene, load_script, simulate_pair

    scene_path, script_path = (_data(n) for n in EXAMPLES[args.example])
    spec = load_scene(args.scene or scene_path)
    script = load_script(args.changes or script_path)
    a, b, gt, spec_b = simulate_pair(spec, script)
    out = Path(args.out)
    save_mission(a, out / "A")
    save_mission(b, out / "B")
    (out / "ground_truth.json").write_text(json.dumps(gt.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "scene_b.json").write_text(json.dumps(spec_b.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"wrote missions {out / 'A'} and {out / 'B'} "
          f"({sum(len(s) for s in a.scans)} + {sum(len(s) for s in b.scans)} points)")
    return 0


def cmd_align(args) -> int:
    from .pipeline import run_align

    graph = run_align(args.mission_a, args.mission_b, _config(args), args.out)
    n = sum(f.kind == "loop_closure" for f in graph.factors)
    print(f"aligned {len(graph.trajectories)} missions with {n} loop closures -> {args.out}")
    return 0


def cmd_detect(args) -> int:
    from .pipeline import run_detect

    cfg = _config(args)
    result = run_detect(args.mission_a, args.mission_b, cfg, args.out)
    kinds = [c.kind for c in result.correspondences]
    print(f"{len(result.segments)} changed segments: {kinds.count('moved')} moved, "
          f"{kinds.count('added')} added, {kinds.count('removed')} removed -> {args.out}")
    for c in result.correspondences:
        extra = ""
        if c.transform is not None:
            extra = (f"  t=({', '.join(f'{x:.3f}' for x in c.transform.translation)})"
                     f"  rot={np.degrees(c.transform.rotation_angle()):.1f} deg")
        print(f"  {c.kind:<8} class {c.cls}  {c.object_a or '-':>8} -> {c.object_b or '-':<8}{extra}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import dump_json
    from .pipeline import evaluate_detection

    metrics, counts = evaluate_detection(args.report, args.ground_truth, args.match_radius)
    print(metrics.table(args.title))
    out = Path(args.out) if args.out else Path(args.report) / "metrics.json"
    dump_json({"metrics": metrics.to_json(), "counts": counts.__dict__}, out)
    return 0


def cmd_describe(args) -> int:
    from .cloud_io import load_cloud
    from .descriptors import describe_all, export_descriptors
    from .geometry import voxel_downsample
    from .segmentation import Segment

    segs = []
    for f in args.clouds:
        cloud = load_cloud(f)
        if args.leaf > 0:
            cloud = voxel_downsample(cloud, args.leaf)
        segs.append(Segment(cloud, "", Path(f).stem))
    objs = describe_all(segs)
    export_descriptors([(o.segment.segment_id, o.descriptor) for o in objs], args.out)
    print(f"described {len(objs)} objects -> {args.out}")
    return 0


def cmd_match(args) -> int:
    from .pipeline import rematch_report

    corr, _ = rematch_report(args.report, _config(args), args.out)
    kinds = [c.kind for c in corr]
    print(f"{kinds.count('moved')} moved, {kinds.count('added')} added, "
          f"{kinds.count('removed')} removed -> {args.out or args.report}")
    return 0


# -- parser --------------------------------------------------------------------------

def _add_config_args(p, grouping=True, detect=False):
    p.add_argument("--config", help="JSON config merged over the defaults")
    p.add_argument("--seed", type=int, help="override the config seed")
    if grouping:
        p.add_argument("--alpha", type=float, help="weight of centroid distance in correspondence")
        p.add_argument("--beta", type=float, help="weight of descriptor distance in correspondence")
        p.add_argument("--k-max", type=int, help="largest K tried by the elbow search")
    if detect:
        p.add_argument("--changes-require-observed-both", action="store_true",
                       help="ignore voxels that one mission never observed")
        p.add_argument("--no-align", action="store_true", help="use the input poses as they are")
        p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmchange", description=__doc__)
    ap.add_argument("--threads", type=int, help="cap numba worker threads")
    ap.add_argument("-v", "--verbose", action="store_true", help="log stage timings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render two missions of a synthetic scene")
    p.add_argument("--example", choices=sorted(EXAMPLES), default="office",
                   help="bundled scene and change script (default: office)")
    p.add_argument("--scene", help="scene JSON (overrides the example)")
    p.add_argument("--changes", help="change script JSON (overrides the example)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate, stage="simulate")

    p = sub.add_parser("align", help="co-register two missions by pose-graph optimisation")
    p.add_argument("mission_a")
    p.add_argument("mission_b")
    p.add_argument("--out", required=True)
    _add_config_args(p, grouping=False)
    p.set_defaults(func=cmd_align, stage="align")

    p = sub.add_parser("detect", help="run the full change detection pipeline")
    p.add_argument("mission_a")
    p.add_argument("mission_b")
    p.add_argument("--out", required=True)
    _add_config_args(p, detect=True)
    p.set_defaults(func=cmd_detect, stage="detect")

    p = sub.add_parser("evaluate", help="per-point metrics of a report against ground truth")
    p.add_argument("report")
    p.add_argument("ground_truth")
    p.add_argument("--match-radius", type=float)
    p.add_argument("--title", default="run")
    p.add_argument("--out", help="metrics JSON (default: <report>/metrics.json)")
    p.set_defaults(func=cmd_evaluate, stage="evaluate")

    p = sub.add_parser("describe", help="descriptors of segment point clouds")
    p.add_argument("clouds", nargs="+")
    p.add_argument("--leaf", type=float, default=0.05, help="downsampling leaf; 0 keeps all points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_describe, stage="describe")

    p = sub.add_parser("match", help="re-group a report's segments with other weights")
    p.add_argument("report")
    p.add_argument("--out", help="output directory (default: the report)")
    _add_config_args(p)
    p.set_defaults(func=cmd_match, stage="match")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba

        if args.threads < 1:
            print("mmchange: error: --threads must be at least 1", file=sys.stderr)
            return 2
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    from .pipeline import StageError

    try:
        return args.func(args)
    except StageError as exc:
        print(f"mmchange: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"mmchange: error: [{args.stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
