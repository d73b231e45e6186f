"""Command-line surface: gen, train, infer, link, eval, gradcheck, bank.

Every run writes a manifest (config snapshot + seed + summary) next to its
outputs, so a pipeline of subcommands is reproducible from the files alone.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, dump_config, load_config, parse_config
from .criterion import training_loss
from .decoder import build_query_bank
from .errors import CheckpointError, ConfigError
from .feature_space import StageFeatureMap
from .gradcheck import check_gradients, jitter_parameters
from .queries import KEYFRAME
from .rng import Rng
from .synthetic import Actor, Scenario, ScenarioConfig, gen_scenario
from .tensorio import (
    load_module,
    load_tensors,
    read_manifest,
    read_tensor,
    save_module,
    save_tensors,
    write_manifest,
    write_tensor,
)
from .training import (
    DetectorModel,
    clip_ground_truth,
    evaluate_model,
    keyframe_detections,
    train_toy,
    tubelet_detections,
)
from .tubes import (
    FrameDetection,
    frame_map,
    link_tubelets,
    read_detections,
    tubes_from_json,
    tubes_to_json,
    video_map,
    write_detections,
)
from .autodiff import Tensor


def _load_run_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if args.config:
        return load_config(args.config, **overrides)
    return parse_config("", **overrides)


# -- scenario persistence -----------------------------------------------------


def save_scenario(directory, scenario: Scenario) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = scenario.cfg
    meta = {
        "frame_w": cfg.frame_w,
        "frame_h": cfg.frame_h,
        "t": cfg.t,
        "n_frames": cfg.n_frames,
        "n_classes": cfg.n_classes,
        "scales": list(cfg.scales),
        "base_channels": cfg.base_channels,
        "clip_starts": scenario.clip_starts,
        "actors": [
            {
                "class_id": a.class_id,
                "boxes": a.boxes.tolist(),
                "dropout_frames": list(a.dropout_frames),
            }
            for a in scenario.actors
        ],
    }
    (directory / "scenario.json").write_text(json.dumps(meta, indent=1))
    for clip_index, maps in enumerate(scenario.stage_maps):
        for m in maps:
            write_tensor(directory / f"clip{clip_index:03d}_z{m.z}.stmx", m.data.data)
    gt_frames = [
        {"clip_start": int(f), "boxes": [box.tolist()], "class": int(cls)}
        for f, cls, box in scenario.gt_frame_annotations()
    ]
    (directory / "gt_frames.json").write_text(json.dumps(gt_frames, indent=1))
    (directory / "gt_tubes.json").write_text(
        json.dumps(tubes_to_json(scenario.gt_tubes()), indent=1)
    )


def load_scenario(directory) -> Scenario:
    directory = Path(directory)
    meta = json.loads((directory / "scenario.json").read_text())
    cfg = ScenarioConfig(
        frame_w=meta["frame_w"],
        frame_h=meta["frame_h"],
        t=meta["t"],
        n_frames=meta["n_frames"],
        n_classes=meta["n_classes"],
        scales=tuple(meta["scales"]),
        base_channels=meta["base_channels"],
    )
    actors = [
        Actor(
            class_id=a["class_id"],
            boxes=np.asarray(a["boxes"], dtype=np.float64),
            dropout_frames=tuple(a["dropout_frames"]),
        )
        for a in meta["actors"]
    ]
    stage_maps = []
    for clip_index in range(len(meta["clip_starts"])):
        maps = [
            StageFeatureMap(z=z, data=Tensor(read_tensor(directory / f"clip{clip_index:03d}_z{z}.stmx")))
            for z in cfg.scales
        ]
        stage_maps.append(maps)
    return Scenario(
        cfg=cfg,
        actors=actors,
        clip_starts=list(meta["clip_starts"]),
        class_signatures={},
        stage_maps=stage_maps,
    )


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(directory, model: DetectorModel, extra: dict[str, str]) -> None:
    metadata = {f"config.{k}": v for k, v in _config_items(model.run_cfg)}
    metadata.update(extra)
    save_module(directory, model, metadata)


def _config_items(cfg: RunConfig) -> list[tuple[str, str]]:
    items = []
    for line in dump_config(cfg).splitlines():
        key, value = line.split("=", 1)
        items.append((key, value))
    return items


def load_checkpoint(directory) -> tuple[DetectorModel, dict[str, str]]:
    manifest = read_manifest(Path(directory) / "manifest.txt")
    lines = [
        f"{key[len('config.'):]}={value}"
        for key, value in manifest.items()
        if key.startswith("config.")
    ]
    if not lines:
        raise CheckpointError(f"{directory}: manifest carries no config snapshot")
    run_cfg = parse_config("\n".join(lines))
    model = DetectorModel(run_cfg, run_cfg.stage_channels(), Rng(run_cfg.seed))
    metadata = load_module(directory, model)
    return model, metadata


# -- subcommands ---------------------------------------------------------------------


def cmd_gen(args) -> int:
    run_cfg = _load_run_config(args)
    scenario = gen_scenario(run_cfg.scenario(), Rng(run_cfg.seed).spawn(11).seed)
    out = Path(args.out)
    save_scenario(out, scenario)
    write_manifest(
        out / "manifest.txt",
        dict(_config_items(run_cfg))
        | {"kind": "scenario", "clips": str(len(scenario.clip_starts))},
    )
    print(f"gen: {len(scenario.clip_starts)} clips, {len(scenario.actors)} actors -> {out}")
    return 0


def cmd_train(args) -> int:
    run_cfg = _load_run_config(args)
    scenario = load_scenario(args.scenario) if args.scenario else None
    result = train_toy(run_cfg, scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    final_metric = result.final_metric
    save_checkpoint(
        out / "checkpoint",
        result.model,
        {
            "kind": "checkpoint",
            "iterations": str(len(result.trace)),
            "final_metric": f"{final_metric:.6f}",
        },
    )
    (out / "trace.json").write_text(json.dumps(result.trace, indent=1))
    if not args.scenario:
        save_scenario(out / "scenario", result.scenario)
    summary = {
        "final_metric": final_metric,
        "reached_perfect_at": result.reached_perfect_at,
        "iterations_run": len(result.trace),
        "elapsed_seconds": result.elapsed_seconds,
    }
    (out / "metrics.json").write_text(json.dumps(summary, indent=1))
    print(
        f"train: {len(result.trace)} iterations, metric {final_metric:.3f}, "
        f"perfect at {result.reached_perfect_at} -> {out}"
    )
    return 0


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    scenario = load_scenario(args.scenario)
    cfg = model.run_cfg
    threshold = cfg.bg_threshold if args.threshold is None else args.threshold
    records = []
    with ad.no_grad():
        for clip_index in range(len(scenario.clip_starts)):
            result = model.forward(scenario.stage_maps[clip_index])
            if cfg.mode == KEYFRAME:
                for det in keyframe_detections(result, scenario, clip_index, threshold):
                    records.append(
                        {
                            "clip_start": int(det.frame),
                            "boxes": [det.box.tolist()],
                            "class": int(det.class_id),
                            "score": det.score,
                        }
                    )
            else:
                for tl in tubelet_detections(result, scenario, clip_index, threshold):
                    records.append(
                        {
                            "clip_start": int(tl.start_frame),
                            "boxes": tl.boxes.tolist(),
                            "class": int(tl.class_id),
                            "score": tl.score,
                        }
                    )
    Path(args.out).write_text(json.dumps(records, indent=1))
    print(f"infer: {len(records)} detections -> {args.out}")
    return 0


def cmd_link(args) -> int:
    tubelets = read_detections(args.detections)
    tubes = link_tubelets(tubelets, args.threshold)
    Path(args.out).write_text(json.dumps(tubes_to_json(tubes), indent=1))
    print(f"link: {len(tubelets)} tubelets -> {len(tubes)} tubes -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    scenario_dir = Path(args.scenario)
    if args.mode == KEYFRAME:
        records = json.loads(Path(args.detections).read_text())
        detections = [
            FrameDetection(
                frame=int(r["clip_start"]),
                box=np.asarray(r["boxes"][0], dtype=np.float64),
                class_id=int(r["class"]),
                score=float(r["score"]),
            )
            for r in records
        ]
        gt_records = json.loads((scenario_dir / "gt_frames.json").read_text())
        ground_truth = [
            (int(r["clip_start"]), int(r["class"]), np.asarray(r["boxes"][0], float))
            for r in gt_records
        ]
        value, per_class = frame_map(detections, ground_truth, args.iou)
        label = f"frame mAP@{args.iou}"
    else:
        tubes = tubes_from_json(json.loads(Path(args.detections).read_text()))
        gt_tubes = tubes_from_json(
            json.loads((scenario_dir / "gt_tubes.json").read_text())
        )
        value, per_class = video_map(tubes, gt_tubes, args.iou)
        label = f"video mAP@{args.iou}"
    report = {"metric": label, "value": value, "per_class": {str(k): v for k, v in per_class.items()}}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    print(f"{label}: {value:.4f}")
    for cls in sorted(per_class):
        print(f"  class {cls:>3}: AP {per_class[cls]:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    run_cfg = _load_run_config(args)
    rng = Rng(run_cfg.seed)
    scenario = gen_scenario(run_cfg.scenario(), rng.spawn(11).seed)
    model = DetectorModel(run_cfg, run_cfg.stage_channels(), rng.spawn(13))
    if args.jitter:
        jitter_parameters(model.decoder, rng.spawn(19), args.jitter)
    gt = clip_ground_truth(scenario, 0, run_cfg.mode)
    weights = run_cfg.loss_weights()
    space = model.build_space(scenario.stage_maps[0])

    def objective():
        result = model.decoder.forward(space)
        return training_loss(
            result.outputs, gt, weights, (run_cfg.frame, run_cfg.frame)
        ).total

    report = check_gradients(
        objective,
        model.decoder,
        h=args.h,
        tol=args.tol,
        max_coords_per_param=args.max_coords,
    )
    print(report.summary())
    for failure in report.failures[:20]:
        print(
            f"  FAIL {failure.param}{list(failure.index)}: "
            f"analytic {failure.analytic:.6e} numeric {failure.numeric:.6e} "
            f"rel {failure.rel_error:.2e}"
        )
    return 0 if report.passed else 1


def cmd_bank(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    scenario = load_scenario(args.scenario)
    spaces = [model.build_space(maps) for maps in scenario.stage_maps]
    bank = build_query_bank(model.decoder, spaces)
    save_tensors(
        Path(args.out),
        {f"clip{idx:03d}": entry for idx, entry in enumerate(bank.entries)},
        {
            "kind": "query_bank",
            "top_k": str(bank.top_k),
            "window": str(bank.window),
            "clips": str(bank.clips),
        },
    )
    print(f"bank: {bank.clips} clips x top-{bank.top_k} queries -> {args.out}")
    return 0


def load_bank(directory):
    from .decoder import QueryBank

    tensors, metadata = load_tensors(directory)
    if metadata.get("kind") != "query_bank":
        raise CheckpointError(f"{directory} is not a query bank")
    entries = [tensors[name] for name in sorted(tensors)]
    return QueryBank(entries, int(metadata["top_k"]), int(metadata["window"]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actionmix",
        description="Desk-scale sparse action detector: synthetic scenarios, "
        "toy training, inference, tube linking, and mAP evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mode=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        if with_mode:
            p.add_argument("--mode", choices=["keyframe", "tubelet"], default=None)

    p = sub.add_parser("gen", help="generate a synthetic scenario")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the toy training loop")
    common(p)
    p.add_argument("--scenario", help="existing scenario directory (else generated)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run inference from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--threshold", type=float, default=None, help="background threshold")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("link", help="link tubelet detections into tubes")
    p.add_argument("--detections", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("eval", help="evaluate detections against a scenario")
    p.add_argument("--mode", choices=["keyframe", "tubelet"], required=True)
    p.add_argument("--detections", required=True, help="detections or linked tubes JSON")
    p.add_argument("--scenario", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the decoder")
    common(p)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=None, dest="max_coords")
    p.add_argument("--jitter", type=float, default=0.02, help="parameter noise before checking (0 disables)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bank", help="build a query bank from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bank)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    code = args.func(args)
    elapsed = time.perf_counter() - started
    print(f"done in {elapsed:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
