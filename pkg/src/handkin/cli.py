"""Command line entry points for the hand-pose toolkit.

Subcommands: gen-data, fit-ik, extract-limits, train, sample, eval, smooth.
Global flags: --config, --seed, --out-dir, --threads. Every command persists
the effective config (with its hash) plus the skeleton and camera into the
output directory, and every artifact header embeds the config hash so runs
can be traced back to their settings.

Exit codes are stable for scripting: 0 on success, 2 on validation errors,
3 on numerical failures. HANDKIN_DETERMINISTIC=1 forces single-threaded
execution (thread pinning for the numerics backend happens in the package
init, before numpy loads).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import (
    RunConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    save_config,
)
from .data import (
    camera_from_config,
    gen_poses,
    gen_sequences,
    load_dataset,
    save_dataset,
)
from .errors import NumericalError, ValidationError
from .evaluation import (
    _atomic_text,
    count_violations,
    evaluate,
    sample_poses,
    smooth_sequences,
)
from .geometry import Alignment, save_camera
from .iksolver import FitResult, IkConfig, extract_limits, restarts
from .skeleton import (
    canonical_hand_topology,
    graph_to_dict,
    pose_from_dict,
    pose_to_dict,
    save_skeleton,
    skeleton_hash,
)
from .training import load_pose_models, train_denoiser, train_temporal


def deterministic_mode() -> bool:
    return os.environ.get("HANDKIN_DETERMINISTIC") == "1"


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    doc = config_to_dict(cfg)
    changed = False
    if args.seed is not None:
        # one flag reseeds the whole pipeline, not just the top-level stream
        doc["seed"] = args.seed
        doc["data"]["seed"] = args.seed
        doc["train"]["seed"] = args.seed
        changed = True
    if args.threads is not None:
        doc["threads"] = args.threads
        changed = True
    if deterministic_mode() and doc["threads"] != 1:
        doc["threads"] = 1
        changed = True
    return config_from_dict(doc) if changed else cfg


def _persist_inputs(out_dir: str, cfg: RunConfig, graph) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(os.path.join(out_dir, "config.json"), cfg)
    save_skeleton(os.path.join(out_dir, "skeleton.json"), graph)
    save_camera(os.path.join(out_dir, "camera.json"), camera_from_config(cfg))


def _check_dataset_skeleton(header: dict, graph) -> None:
    if header.get("skeleton_hash") != skeleton_hash(graph):
        raise ValidationError(
            "dataset was generated against a different skeleton "
            f"({header.get('skeleton_hash', 'missing')[:12]}...)"
        )


def cmd_gen_data(args, cfg: RunConfig) -> int:
    overrides = {}
    if args.n_poses is not None:
        overrides["n_poses"] = args.n_poses
    if args.n_sequences is not None:
        overrides["n_sequences"] = args.n_sequences
    if args.seq_len is not None:
        overrides["seq_len"] = args.seq_len
    if overrides:
        doc = config_to_dict(cfg)
        doc["data"].update(overrides)
        cfg = config_from_dict(doc)

    graph = canonical_hand_topology()
    _persist_inputs(args.out_dir, cfg, graph)

    header, records = gen_poses(cfg, graph)
    pose_path = os.path.join(args.out_dir, "poses.jsonl")
    save_dataset(pose_path, header, records)
    print(f"wrote {len(records)} poses to {pose_path}")

    if cfg.data.n_sequences > 0:
        sheader, srecords = gen_sequences(cfg, graph)
        seq_path = os.path.join(args.out_dir, "sequences.jsonl")
        save_dataset(seq_path, sheader, srecords)
        print(
            f"wrote {cfg.data.n_sequences} sequences "
            f"({len(srecords)} frames) to {seq_path}"
        )
    return 0


def cmd_fit_ik(args, cfg: RunConfig) -> int:
    graph = canonical_hand_topology()
    header, records = load_dataset(args.dataset)
    _check_dataset_skeleton(header, graph)
    if args.limit is not None:
        records = records[: args.limit]

    ik_cfg = IkConfig(max_iters=cfg.solver.max_iters)

    def fit_one(rec):
        rng = np.random.default_rng([cfg.seed, rec.index])
        return restarts(rec.positions, graph, cfg.solver.restarts, rng, config=ik_cfg)

    fits = [fit_one(r) for r in records]
    converged = sum(f.converged for f in fits)
    residuals = np.array([f.residual_mpjpe for f in fits])

    _persist_inputs(args.out_dir, cfg, graph)
    out_path = os.path.join(args.out_dir, "fits.jsonl")
    lines = [
        json.dumps(
            {
                "kind": "fits",
                "count": len(fits),
                "config_hash": config_hash(cfg),
                "skeleton_hash": skeleton_hash(graph),
            },
            sort_keys=True,
        )
    ]
    for rec, fit in zip(records, fits):
        lines.append(
            json.dumps(
                {
                    "index": rec.index,
                    "converged": bool(fit.converged),
                    "iterations": int(fit.iterations),
                    "residual_mpjpe": float(fit.residual_mpjpe),
                    "params": pose_to_dict(fit.params),
                },
                sort_keys=True,
            )
        )
    _atomic_text(out_path, "\n".join(lines) + "\n")
    print(
        f"fit {len(fits)} poses: {converged} converged, "
        f"median residual {float(np.median(residuals)):.2e} anchor units"
    )
    return 0


def _load_fits(path: str, graph) -> tuple[dict, list[FitResult]]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValidationError(f"{os.path.basename(path)} is empty")
    header = json.loads(lines[0])
    if header.get("kind") != "fits":
        raise ValidationError(f"{os.path.basename(path)} is not a fits file")
    fits = []
    for ln in lines[1:]:
        doc = json.loads(ln)
        fits.append(
            FitResult(
                params=pose_from_dict(doc["params"], graph),
                residual_mpjpe=doc["residual_mpjpe"],
                iterations=doc["iterations"],
                converged=doc["converged"],
            )
        )
    return header, fits


def cmd_extract_limits(args, cfg: RunConfig) -> int:
    graph = canonical_hand_topology()
    header, fits = _load_fits(args.fits, graph)
    _check_dataset_skeleton(header, graph)
    stats, fitted = extract_limits(
        fits, graph, percentile=cfg.solver.percentile, pad=cfg.solver.pad
    )
    _persist_inputs(args.out_dir, cfg, graph)
    doc = {
        "config_hash": config_hash(cfg),
        "source_skeleton_hash": skeleton_hash(graph),
        "fitted_skeleton_hash": skeleton_hash(fitted),
        "n_fits": len([f for f in fits if f.converged]),
        "angle_limits": stats.angle_limits.tolist(),
        "angle_mean": stats.angle_mean.tolist(),
        "angle_std": stats.angle_std.tolist(),
        "prop_limits": stats.prop_limits.tolist(),
        "prop_mean": stats.prop_mean.tolist(),
        "prop_std": stats.prop_std.tolist(),
    }
    _atomic_text(
        os.path.join(args.out_dir, "limits.json"),
        json.dumps(doc, indent=2, sort_keys=True) + "\n",
    )
    save_skeleton(os.path.join(args.out_dir, "skeleton_fitted.json"), fitted)
    print(
        f"extracted limits from {doc['n_fits']} converged fits; "
        f"wrote limits.json and skeleton_fitted.json"
    )
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    graph = canonical_hand_topology()
    header, records = load_dataset(args.dataset)
    _check_dataset_skeleton(header, graph)
    _persist_inputs(args.out_dir, cfg, graph)

    res = train_denoiser(
        cfg, graph, records, args.out_dir, resume=args.resume, epochs=args.epochs
    )
    best = "n/a" if res.best_val is None else f"{res.best_val:.4f}"
    print(
        f"pose model: {res.epochs_run} epochs, best val {best}, "
        f"final loss {res.final_loss:.4f}"
    )

    if args.sequences:
        sheader, srecords = load_dataset(args.sequences)
        _check_dataset_skeleton(sheader, graph)
        tres = train_temporal(
            cfg,
            graph,
            srecords,
            args.out_dir,
            resume=args.resume,
            epochs=args.temporal_epochs,
        )
        tbest = "n/a" if tres.best_val is None else f"{tres.best_val:.6f}"
        print(
            f"temporal model: {tres.epochs_run} epochs, best val {tbest}, "
            f"final loss {tres.final_loss:.6f}"
        )
    return 0


def cmd_sample(args, cfg: RunConfig) -> int:
    graph = canonical_hand_topology()
    header, records = load_dataset(args.dataset)
    _check_dataset_skeleton(header, graph)
    if args.n is not None:
        records = records[: args.n]
    den, ik, schedule, meta = load_pose_models(args.checkpoint, graph)

    from .diffusion import respace_schedule

    steps = cfg.schedule.sample_steps if args.steps is None else args.steps
    sched = respace_schedule(schedule, steps) if steps < schedule.T else schedule

    feats = np.stack([r.features for r in records])
    params, positions = sample_poses(
        den, ik, graph, sched, feats, cfg.seed, threads=cfg.threads
    )
    violations = sum(count_violations(graph, p) for p in params)

    os.makedirs(args.out_dir, exist_ok=True)
    _persist_inputs(args.out_dir, cfg, graph)
    out_path = os.path.join(args.out_dir, "samples.jsonl")
    lines = [
        json.dumps(
            {
                "kind": "samples",
                "count": len(params),
                "sample_steps": int(sched.T),
                "checkpoint_epoch": int(meta["epoch"]),
                "config_hash": config_hash(cfg),
                "skeleton_hash": skeleton_hash(graph),
            },
            sort_keys=True,
        )
    ]
    for rec, p, pos in zip(records, params, positions):
        lines.append(
            json.dumps(
                {
                    "index": rec.index,
                    "params": pose_to_dict(p),
                    "positions": [[float(v) for v in row] for row in pos],
                },
                sort_keys=True,
            )
        )
    _atomic_text(out_path, "\n".join(lines) + "\n")
    print(f"sampled {len(params)} poses ({violations} violations) to {out_path}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    graph = canonical_hand_topology()
    header, records = load_dataset(args.dataset)
    _persist_inputs(args.out_dir, cfg, graph)
    report = evaluate(
        cfg,
        graph,
        args.checkpoint,
        header,
        records,
        args.out_dir,
        alignment=Alignment(args.alignment),
        steps=args.steps,
        split=args.split,
        threads=cfg.threads,
    )
    print(
        f"MPJPE {report['mpjpe_mean_mm']:.2f} mm "
        f"(median {report['mpjpe_median_mm']:.2f} mm) over "
        f"{report['n_records']} records [{report['split']}]"
    )
    print(
        f"mean-pose baseline {report['baseline_mean_mm']:.2f} mm; "
        f"constraint violations {report['violations']}"
    )
    return 0


def cmd_smooth(args, cfg: RunConfig) -> int:
    graph = canonical_hand_topology()
    header, records = load_dataset(args.dataset)
    _persist_inputs(args.out_dir, cfg, graph)
    report = smooth_sequences(
        cfg,
        graph,
        args.pose_checkpoint,
        args.temporal_checkpoint,
        header,
        records,
        args.out_dir,
    )
    print(
        f"smoothed {report['n_sequences']} sequences: jitter "
        f"{report['jitter_raw']:.5f} -> {report['jitter_smoothed']:.5f} "
        f"({100.0 * report['jitter_reduction']:.1f}% reduction)"
    )
    print(
        f"MPJPE raw {report['mpjpe_raw_mm']:.2f} mm, smoothed "
        f"{report['mpjpe_smoothed_mm']:.2f} mm; bone length variance "
        f"{report['bone_length_variance_max']!r}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a config JSON file")
    common.add_argument("--seed", type=int, help="override every pipeline seed")
    common.add_argument("--out-dir", default="run", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for sharded work")

    p = argparse.ArgumentParser(prog="handkin", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate synthetic datasets")
    g.add_argument("--n-poses", type=int, help="override data.n_poses")
    g.add_argument("--n-sequences", type=int, help="override data.n_sequences")
    g.add_argument("--seq-len", type=int, help="override data.seq_len")
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("fit-ik", parents=[common], help="fit poses to 3D joint targets")
    f.add_argument("--dataset", required=True, help="pose dataset JSONL")
    f.add_argument("--limit", type=int, help="fit only the first N records")
    f.set_defaults(func=cmd_fit_ik)

    x = sub.add_parser(
        "extract-limits", parents=[common], help="derive joint limits from fits"
    )
    x.add_argument("--fits", required=True, help="fits JSONL from fit-ik")
    x.set_defaults(func=cmd_extract_limits)

    t = sub.add_parser("train", parents=[common], help="train the pose models")
    t.add_argument("--dataset", required=True, help="pose dataset JSONL")
    t.add_argument("--sequences", help="sequence dataset JSONL (trains the encoder)")
    t.add_argument("--resume", action="store_true", help="continue from last checkpoint")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--temporal-epochs", type=int, help="override train.temporal_epochs")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="sample poses from a checkpoint")
    s.add_argument("--checkpoint", required=True, help="checkpoint base path")
    s.add_argument("--dataset", required=True, help="dataset supplying features")
    s.add_argument("--n", type=int, help="sample only the first N records")
    s.add_argument("--steps", type=int, help="override schedule.sample_steps")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True, help="checkpoint base path")
    e.add_argument("--dataset", required=True, help="pose dataset JSONL")
    e.add_argument("--split", default="all", choices=["all", "train", "val"])
    e.add_argument("--steps", type=int, help="override schedule.sample_steps")
    e.add_argument(
        "--alignment",
        default=Alignment.ROOT_CENTERED_SCALE_NORMALIZED.value,
        choices=[a.value for a in Alignment],
    )
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("smooth", parents=[common], help="smooth noisy sequences")
    m.add_argument("--pose-checkpoint", required=True, help="pose checkpoint base")
    m.add_argument("--temporal-checkpoint", required=True, help="temporal checkpoint base")
    m.add_argument("--dataset", required=True, help="sequence dataset JSONL")
    m.set_defaults(func=cmd_smooth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except (ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
