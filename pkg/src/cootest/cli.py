"""Command-line entry points.

    cootest gen        --config cfg.json --out DIR
    cootest transform  --in DIR --op KIND|all --seed U64 --out DIR
    cootest run        --suite DIR --detector early|late|external:CMD
                       --epsilon F --out DIR [--fail-on-violation] [--jobs N]
    cootest guide      --seeds DIR --strategy vgt|random
                       (--keep-fraction F | --num-gen N)
                       --detector ... --seed U64 --out DIR

Failures print one machine-parseable `COOTEST-ERR: ...` line on stderr and
exit 2; `run --fail-on-violation` exits 1 when any scene violates the
consistency relation.  Identical flags and seeds reproduce byte-identical
scene files and report.json.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import guidance, metrics, operators, perception, report, synth
from .errors import CootestError, TransformError
from .jsonio import canonical_json, read_json, write_canonical_json
from .rng import derive_seed
from .scene import Scene, list_scene_dirs, load_scene, save_scene


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"COOTEST-ERR: {message}", file=sys.stderr)
        self.exit(2)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cootest")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic seed scenes")
    gen.add_argument("--config", required=True, help="generator config JSON")
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("transform", help="apply operators to a seed suite")
    tr.add_argument("--in", dest="in_dir", required=True)
    tr.add_argument("--op", required=True, help="operator kind or 'all'")
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out", required=True)

    run = sub.add_parser("run", help="evaluate a suite with a detector")
    run.add_argument("--suite", required=True)
    run.add_argument("--detector", required=True, help="early|late|external:CMD")
    run.add_argument("--epsilon", type=float, default=0.1)
    run.add_argument("--out", required=True)
    run.add_argument("--fail-on-violation", action="store_true")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--score-floor", type=float, default=None)

    guide = sub.add_parser("guide", help="guided or random suite generation")
    guide.add_argument("--seeds", required=True)
    guide.add_argument("--strategy", choices=("vgt", "random"), required=True)
    budget = guide.add_mutually_exclusive_group(required=True)
    budget.add_argument("--keep-fraction", type=float, default=None)
    budget.add_argument("--num-gen", type=int, default=None)
    guide.add_argument("--detector", required=True)
    guide.add_argument("--seed", type=int, required=True)
    guide.add_argument("--epsilon", type=float, default=0.1)
    guide.add_argument("--out", required=True)
    return parser


def _detector_config(spec: str, score_floor: Optional[float] = None):
    overrides = {} if score_floor is None else {"score_floor": score_floor}
    if spec in (perception.FUSION_EARLY, perception.FUSION_LATE):
        return perception.DetectorConfig(fusion=spec, **overrides)
    if spec.startswith("external:"):
        cmd = spec[len("external:") :]
        if not cmd:
            raise CootestError("external detector command is empty")
        return perception.DetectorConfig(
            fusion=perception.FUSION_EXTERNAL, external_cmd=cmd, **overrides
        )
    raise CootestError(f"unknown detector {spec!r} (early|late|external:CMD)")


def _detector_echo(cfg: perception.DetectorConfig) -> dict:
    return {
        "fusion": cfg.fusion,
        "cluster_radius": cfg.cluster_radius,
        "min_points": cfg.min_points,
        "nms_iou": cfg.nms_iou,
        "score_floor": cfg.score_floor,
        "ground_z": cfg.ground_z,
        "external_cmd": cfg.external_cmd,
        "detector_id": cfg.detector_id(),
    }


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    cfg_obj = read_json(Path(args.config))
    count = int(cfg_obj.pop("count", 10))
    if count < 1:
        raise CootestError("gen config needs count >= 1")
    base_seed = int(cfg_obj.pop("master_seed", 0))
    try:
        synth.SynthConfig(master_seed=0, **cfg_obj)  # validate field set early
    except (TypeError, ValueError) as exc:
        raise CootestError(f"bad gen config: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for index in range(count):
        cfg = synth.SynthConfig(
            **{
                **cfg_obj,
                "master_seed": derive_seed(base_seed, "scene", index),
            }
        )
        scene_id = f"scene-{index:04d}"
        if cfg.frames >= 2:
            scene = synth.generate_sequence(cfg, scene_id=scene_id)
        else:
            scene = synth.generate_scene(cfg, scene_id=scene_id)
        save_scene(scene, out / scene_id)
    print(f"wrote {count} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# transform


def transformed_scene_id(seed_id: str, kind: str) -> str:
    return f"{seed_id}--{kind.lower()}"


def seed_id_of(scene_id: str) -> str:
    return scene_id.split("--", 1)[0]


def cmd_transform(args) -> int:
    kinds = operators.ALL_KINDS if args.op == "all" else (args.op.upper(),)
    for kind in kinds:
        if kind not in operators.ALL_KINDS:
            raise CootestError(f"unknown operator {args.op!r}")
    scene_dirs = list_scene_dirs(args.in_dir)
    if not scene_dirs:
        raise CootestError(f"no scenes found in {args.in_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for scene_dir in scene_dirs:
        seed_scene = load_scene(scene_dir)
        save_scene(seed_scene, out / seed_scene.scene_id)
        for kind in kinds:
            spec = operators.sample_params(
                kind, derive_seed(args.seed, seed_scene.scene_id, kind)
            )
            try:
                transformed = operators.apply(spec, seed_scene)
            except TransformError as exc:
                print(
                    f"COOTEST-WARN: skipping {kind} on {seed_scene.scene_id}: {exc}",
                    file=sys.stderr,
                )
                continue
            new_id = transformed_scene_id(seed_scene.scene_id, kind)
            transformed = replace(transformed, scene_id=new_id)
            save_scene(transformed, out / new_id)
            written += 1
    print(f"wrote {written} transformed scenes (+{len(scene_dirs)} seeds) to {out}")
    return 0


# ---------------------------------------------------------------------------
# run


def _evaluate_scene(scene: Scene, det_cfg: perception.DetectorConfig) -> dict:
    ego_result, cp_result = perception.get_pred(det_cfg, scene)
    gts = scene.ground_truth
    buckets = metrics.ap_by_range(cp_result, gts)
    mce, _ = metrics.count_mce(ego_result, cp_result, gts)
    spec = scene.provenance[-1] if scene.provenance else None
    return {
        "scene_id": scene.scene_id,
        "spec": spec,
        "ap_overall": metrics.average_precision(cp_result.boxes, gts),
        "buckets": buckets,
        "mce": mce,
        "gt_digest": canonical_json(
            [[list(b.center), list(b.dims), b.yaw, b.confidence] for b in gts]
        ),
    }


def _evaluate_scene_dir(task: tuple[str, perception.DetectorConfig]) -> dict:
    scene_dir, det_cfg = task
    return _evaluate_scene(load_scene(scene_dir), det_cfg)


def _evaluate_suite(
    scene_dirs: Sequence[Path], det_cfg: perception.DetectorConfig, jobs: int
) -> list[dict]:
    tasks = [(str(d), det_cfg) for d in scene_dirs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_scene_dir, tasks))
    else:
        results = [_evaluate_scene_dir(t) for t in tasks]
    results.sort(key=lambda r: r["scene_id"])
    return results


def _records_from_evaluations(
    evaluations: list[dict],
    epsilon: float,
    gui_by_scene: Optional[dict[str, Optional[float]]] = None,
) -> list[report.SceneRecord]:
    by_id = {e["scene_id"]: e for e in evaluations}
    records = []
    for ev in evaluations:
        mr_violated = None
        if ev["spec"] is not None:
            base = by_id.get(seed_id_of(ev["scene_id"]))
            if base is not None:
                if base["gt_digest"] != ev["gt_digest"]:
                    raise CootestError(
                        f"{ev['scene_id']}: ground truth differs from its seed; "
                        "oracle preservation broken"
                    )
                mr_violated = base["ap_overall"] - ev["ap_overall"] > epsilon
        records.append(
            report.SceneRecord(
                scene_id=ev["scene_id"],
                spec=ev["spec"],
                ap_overall=ev["ap_overall"],
                ap_by_range=ev["buckets"],
                mce_count=ev["mce"],
                mr_violated=mr_violated,
                gui_pri=(gui_by_scene or {}).get(ev["scene_id"]),
            )
        )
    return records


def _write_reports(suite_report: report.SuiteReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for fmt in ("json", "csv", "md"):
        (out / f"report.{fmt}").write_text(
            report.render_report(suite_report, fmt), encoding="utf-8", newline="\n"
        )


def _jobs_from(args) -> int:
    env = os.environ.get("COOTEST_JOBS")
    jobs = int(env) if env else getattr(args, "jobs", 1)
    return max(1, jobs)


def cmd_run(args) -> int:
    det_cfg = _detector_config(args.detector, args.score_floor)
    scene_dirs = list_scene_dirs(args.suite)
    if not scene_dirs:
        raise CootestError(f"suite {args.suite} contains no scenes")
    gui_by_scene: dict[str, Optional[float]] = {}
    manifest_path = Path(args.suite) / "manifest.json"
    if manifest_path.is_file():
        manifest = read_json(manifest_path)
        gui_by_scene = {
            c["scene_id"]: c.get("gui_pri") for c in manifest.get("candidates", [])
        }
    evaluations = _evaluate_suite(scene_dirs, det_cfg, _jobs_from(args))
    records = _records_from_evaluations(evaluations, args.epsilon, gui_by_scene)
    suite_report = report.SuiteReport(
        per_scene=tuple(records),
        config={
            "command": "run",
            "suite": args.suite,
            "detector": args.detector,
            "detector_config": _detector_echo(det_cfg),
            "epsilon": args.epsilon,
            "match_iou": metrics.MATCH_IOU_THRESHOLD,
        },
    )
    _write_reports(suite_report, Path(args.out))
    violations = suite_report.violation_count()
    print(
        f"evaluated {len(records)} scenes: {violations} MR violations, "
        f"{sum(r.mce_count for r in records)} total MCE"
    )
    if args.fail_on_violation and violations:
        return 1
    return 0


# ---------------------------------------------------------------------------
# guide


def cmd_guide(args) -> int:
    det_cfg = _detector_config(args.detector)
    seed_dirs = list_scene_dirs(args.seeds)
    if not seed_dirs:
        raise CootestError(f"no seed scenes in {args.seeds}")
    seeds = [load_scene(d) for d in seed_dirs]
    n_candidates = len(seeds) * len(operators.ALL_KINDS)
    if args.keep_fraction is not None:
        if not 0.0 < args.keep_fraction <= 1.0:
            raise CootestError("--keep-fraction must be in (0, 1]")
        num_gen = math.floor(args.keep_fraction * n_candidates)
    else:
        num_gen = args.num_gen
    if num_gen is None or num_gen < 1:
        raise CootestError("need at least one test to generate")

    if args.strategy == "vgt":
        candidates = guidance.guided_generate(
            det_cfg, operators.ALL_KINDS, seeds, num_gen, args.seed
        )
    else:
        candidates = guidance.random_generate(
            operators.ALL_KINDS, seeds, num_gen, args.seed
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kept_seed_ids = {seed_id_of(c.transformed_scene.scene_id) for c in candidates}
    for scene in seeds:
        if scene.scene_id in kept_seed_ids:
            save_scene(scene, out / scene.scene_id)
    manifest_entries = []
    for candidate in candidates:
        scene = candidate.transformed_scene
        save_scene(scene, out / scene.scene_id)
        raw = candidate.gui_raw
        manifest_entries.append(
            {
                "scene_id": scene.scene_id,
                "spec": candidate.spec.to_json_obj(),
                "gui_raw": None if raw in (None, guidance.SENTINEL) else raw,
                "gui_pri": candidate.gui_pri,
                "path": scene.scene_id,
            }
        )
    write_canonical_json(
        out / "manifest.json",
        {
            "strategy": args.strategy,
            "master_seed": args.seed,
            "num_gen": num_gen,
            "candidates": manifest_entries,
        },
    )

    evaluations = _evaluate_suite(sorted(
        p for p in out.iterdir() if (p / "scene.json").is_file()
    ), det_cfg, _jobs_from(args))
    gui_by_scene = {e["scene_id"]: e["gui_pri"] for e in manifest_entries}
    records = _records_from_evaluations(evaluations, args.epsilon, gui_by_scene)
    suite_report = report.SuiteReport(
        per_scene=tuple(records),
        config={
            "command": "guide",
            "seeds": args.seeds,
            "strategy": args.strategy,
            "keep_fraction": args.keep_fraction,
            "num_gen": num_gen,
            "master_seed": args.seed,
            "detector": args.detector,
            "detector_config": _detector_echo(det_cfg),
            "epsilon": args.epsilon,
            "match_iou": metrics.MATCH_IOU_THRESHOLD,
        },
    )
    _write_reports(suite_report, out)
    print(
        f"kept {len(candidates)} of {n_candidates} candidates "
        f"({args.strategy}) in {out}"
    )
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "gen": cmd_gen,
        "transform": cmd_transform,
        "run": cmd_run,
        "guide": cmd_guide,
    }
    try:
        return handlers[args.command](args)
    except CootestError as exc:
        print(f"COOTEST-ERR: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"COOTEST-ERR: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
