"""Command-line surface: data generation, training phases, evaluation, reports.

Every training/eval command writes into a fresh run directory containing a
manifest (arguments, config hash, content hashes of inputs) so results can be
reproduced from the directory alone. Nothing ever writes into an existing
run directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .losses import LossWeights, TrainingError
from .scene import generate_dataset, load_dataset, save_dataset
from .training import (
    CheckpointError,
    CollabModel,
    TrainState,
    _derive_seed,
    adapt_phase2,
    config_hash,
    load_checkpoint,
    run_phase1,
    save_checkpoint,
    trainable_param_report,
)

USAGE_EXIT = 2
ERROR_EXIT = 1


class CliError(RuntimeError):
    pass


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _new_run_dir(path) -> Path:
    run = Path(path)
    if run.exists() and any(run.iterdir()):
        raise CliError(f"run directory {run} already exists and is not empty")
    run.mkdir(parents=True, exist_ok=True)
    return run


def _write_manifest(run: Path, command: str, args: argparse.Namespace,
                    cfg: dict | None, inputs: dict, outputs: list):
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "package_version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "inputs": {name: {"path": str(p), "sha256": _sha256_file(p)}
                   for name, p in inputs.items()},
        "outputs": outputs,
    }
    with open(run / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise CliError(f"dataset file not found: {path}") from None


def _neighbor_params(model, neighbor_id: str):
    total = 0
    if neighbor_id in model.prompts.specifics:
        total += model.prompts.get(neighbor_id).param_count()
    if neighbor_id in model.net.resizers:
        total += model.net.resizers[neighbor_id].count
    return total


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = load_config(args.config)
    n_objects = cfg["data"]["n_objects"] if args.objects is None else args.objects
    n_scenes = cfg["data"]["n_scenes"] if args.scenes is None else args.scenes
    ds = generate_dataset(args.seed, n_scenes, n_objects, cfg["extent"],
                          tuple(cfg["data"]["split_fracs"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {n_scenes} scenes ({n_objects} objects each) to {out}")
    return 0


def cmd_pretrain(args):
    from .encoders import pretrain_encoder

    cfg = load_config(args.config)
    run = _new_run_dir(args.out)
    data = _load_data(args.data)
    steps = cfg["training"]["pretrain_steps"] if args.steps is None else args.steps
    model = CollabModel(cfg, seed=args.seed)
    baselines = {}
    for eid in model.specs:
        _, _, ap50 = pretrain_encoder(
            model.encoders[eid], model.heads[eid], data, steps=steps,
            lr=cfg["training"]["pretrain_lr"],
            seed=_derive_seed(args.seed, "pretrain", eid),
            conf_threshold=cfg["detection"]["conf_threshold"],
            nms_iou=cfg["detection"]["nms_iou"],
        )
        baselines[eid] = ap50
        print(f"pretrained {eid}: homogeneous val AP@0.5 = {ap50:.3f}")
    model.meta["homogeneous_ap50"] = baselines
    state = TrainState(model=model, metrics={"baselines": baselines})
    save_checkpoint(state, run / "ckpt.bin")
    with open(run / "baselines.json", "w") as f:
        json.dump(baselines, f, indent=2, sort_keys=True)
    _write_manifest(run, "pretrain", args, cfg, {"data": args.data},
                    ["ckpt.bin", "baselines.json"])
    return 0


def cmd_phase1(args):
    cfg = load_config(args.config)
    run = _new_run_dir(args.out)
    data = _load_data(args.data)
    base = load_checkpoint(args.encoders, expect_config_hash=config_hash(cfg))
    model = base.model
    neighbors = args.neighbors.split(",") if args.neighbors else cfg["phase1_neighbors"]
    steps = cfg["training"]["phase1_steps"] if args.steps is None else args.steps
    weights = LossWeights(**cfg["losses"])
    state = run_phase1(model, data, neighbors, steps=steps, weights=weights,
                       seed=args.seed, log_path=run / "train_log.csv")
    save_checkpoint(state, run / "ckpt.bin")
    _write_manifest(run, "phase1", args, cfg,
                    {"data": args.data, "encoders": args.encoders},
                    ["ckpt.bin", "train_log.csv"])
    print(f"phase 1 done: {steps} steps over neighbors {neighbors}")
    return 0


def cmd_phase2(args):
    run = _new_run_dir(args.out)
    data = _load_data(args.data)
    expect = config_hash(load_config(args.config)) if args.config else None
    base = load_checkpoint(args.base, expect_config_hash=expect)
    cfg = base.model.config
    steps = cfg["training"]["phase2_steps"] if args.steps is None else args.steps
    weights = LossWeights(**cfg["losses"])
    state = adapt_phase2(base, args.neighbor, data, steps=steps, weights=weights,
                         seed=args.seed, prompt_init=args.prompt_init,
                         rank=args.rank, depth_factor=args.depth_factor,
                         log_path=run / "train_log.csv")
    save_checkpoint(state, run / "ckpt.bin")
    rows, totals = trainable_param_report(state.model, 2)
    trainable = {name: count for name, count, t in rows if t}
    summary = {
        "neighbor": args.neighbor,
        "prompt_init": args.prompt_init,
        "rank": args.rank,
        "depth_factor": args.depth_factor,
        "trainable": trainable,
        "trainable_total": totals["trainable"],
    }
    with open(run / "trainable.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    _write_manifest(run, "phase2", args, cfg,
                    {"data": args.data, "base": args.base},
                    ["ckpt.bin", "train_log.csv", "trainable.json"])
    print(f"phase 2 done: {steps} steps, trainable parameters = {totals['trainable']}")
    return 0


def cmd_eval(args):
    from .evaluation import evaluate_scenario

    run = _new_run_dir(args.out)
    data = _load_data(args.data)
    state = load_checkpoint(args.ckpt)
    model = state.model
    result = evaluate_scenario(model, data, args.neighbor, args.mode, split=args.split)
    record = {
        "scenario": f"{model.ego_id}-{args.neighbor}",
        "mode": args.mode,
        "ap50": result["ap50"],
        "ap70": result["ap70"],
        "n_scenes": result["n_scenes"],
        "neighbor_params": _neighbor_params(model, args.neighbor),
        "seed": model.seed,
        "split": args.split,
    }
    (run / "eval").mkdir()
    out_path = run / "eval" / f"{record['scenario']}_{args.mode}.json"
    with open(out_path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
    _write_manifest(run, "eval", args, model.config,
                    {"data": args.data, "ckpt": args.ckpt},
                    [str(out_path.relative_to(run))])
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_report(args):
    from .report import (
        collect_eval_results,
        render_scenario_figure,
        write_report_csv,
        write_report_markdown,
    )

    run = _new_run_dir(args.out)
    records = collect_eval_results(args.runs)
    if not records:
        raise CliError(f"no eval results found under {args.runs}")
    records.sort(key=lambda r: (r["scenario"], r["mode"]))
    write_report_markdown(records, run / "report.md")
    write_report_csv(records, run / "report.csv")
    (run / "figures").mkdir()
    render_scenario_figure(records, run / "figures" / "scenarios.png")
    _write_manifest(run, "report", args, None,
                    {f"run{i}": Path(r) / "manifest.json" for i, r in enumerate(args.runs)},
                    ["report.md", "report.csv", "figures/scenarios.png"])
    print((run / "report.md").read_text())
    return 0


def _parse_pairs(spec: str):
    pairs = []
    for part in spec.split(","):
        r, t = part.strip().split(":")
        pairs.append((int(r), int(t)))
    return pairs


def cmd_sweep_rank(args):
    from .evaluation import evaluate_scenario
    from .report import render_sweep_figure, write_sweep_csv

    run = _new_run_dir(args.out)
    data = _load_data(args.data)
    pairs = _parse_pairs(args.pairs)
    rows = []
    for r, t in pairs:
        base = load_checkpoint(args.base)   # fresh copy per point
        cfg = base.model.config
        steps = cfg["training"]["phase2_steps"] if args.steps is None else args.steps
        weights = LossWeights(**cfg["losses"])
        state = adapt_phase2(base, args.neighbor, data, steps=steps, weights=weights,
                             seed=args.seed, prompt_init="lowrank",
                             rank=r, depth_factor=t)
        result = evaluate_scenario(state.model, data, args.neighbor, "collab",
                                   split=args.split)
        rows.append({
            "rank": r, "depth_factor": t,
            "trainable_params": _neighbor_params(state.model, args.neighbor),
            "ap50": result["ap50"], "ap70": result["ap70"],
        })
        print(f"R={r} T={t}: trainable={rows[-1]['trainable_params']} "
              f"ap50={result['ap50']:.3f} ap70={result['ap70']:.3f}")
    rows.sort(key=lambda row: row["trainable_params"])
    write_sweep_csv(rows, run / "sweep.csv")
    render_sweep_figure(rows, run / "sweep.png")
    _write_manifest(run, "sweep-rank", args, None,
                    {"data": args.data, "base": args.base},
                    ["sweep.csv", "sweep.png"])
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevinterp",
        description="Prompt-tuned interpreter for heterogeneous BEV perception features",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain and freeze every encoder + head")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("phase1", help="base interpreter training with known neighbors")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--encoders", required=True, help="pretrain run checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--neighbors", default=None, help="comma-separated encoder ids")
    p.set_defaults(func=cmd_phase1)

    p = sub.add_parser("phase2", help="prompt-only adaptation to one new neighbor")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True, help="phase1 checkpoint")
    p.add_argument("--neighbor", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--prompt-init", choices=("sampling", "lowrank"), default="sampling")
    p.add_argument("--rank", type=int, default=1)
    p.add_argument("--depth-factor", type=int, default=1)
    p.set_defaults(func=cmd_phase2)

    p = sub.add_parser("eval", help="evaluate one scenario/mode on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--neighbor", required=True)
    p.add_argument("--mode", choices=("collab", "ego_only", "no_interp"),
                   default="collab")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate eval runs into markdown/CSV + figures")
    p.add_argument("--runs", nargs="+", required=True, help="eval run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep-rank", help="phase2+eval over (rank, depth) pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--neighbor", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--pairs", default="1:4,1:2,1:1,3:1,5:1,10:1,20:1")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_sweep_rank)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        return args.func(args)
    except (ConfigError, CliError, CheckpointError, TrainingError,
            FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return ERROR_EXIT


if __name__ == "__main__":
    sys.exit(main())
