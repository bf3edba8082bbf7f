"""Command-line orchestration.

Subcommands: generate, analyze, train, eval, sweep, print-defaults.
Exit codes: 0 success, 1 config/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import adapt, bev, dataset as ds, runner
from .config import (
    ConfigError,
    DatasetConfig,
    RunConfig,
    build_config,
    default_config_json,
    load_run_config,
)
from .dataset import ManifestError
from .nn import load_checkpoint


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simgap",
                                     description="Sim-to-real BEV segmentation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset directory from a config")
    p.add_argument("--config", required=True, help="JSON: {seed, dataset: {...}}")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("analyze", help="compare the label marginals of two datasets")
    p.add_argument("dataset_a")
    p.add_argument("dataset_b")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run the full experiment pipeline from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("--config", required=True,
                   help="JSON: {axis, values, seeds, base: RunConfig}")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("print-defaults", help="emit a fully defaulted run config")
    p.add_argument("--preset", default=None, choices=[None, "gap_standard", "sweep_light"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    return parser


def cmd_generate(args) -> int:
    with open(args.config) as f:
        raw = json.load(f)
    unknown = sorted(set(raw) - {"seed", "dataset"})
    if unknown:
        raise ConfigError(f"generate config: unknown keys {unknown}")
    if "dataset" not in raw:
        raise ConfigError("generate config: missing 'dataset'")
    cfg = build_config(DatasetConfig, raw["dataset"], "dataset")
    cfg.validate("dataset")
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    plan = runner.resolve_plan(cfg, seed)
    data = ds.generate_dataset(plan, workers=max(1, args.threads))
    manifest = ds.save_dataset(data, args.out)
    print(f"wrote {len(data)} scenes to {args.out} (manifest: {manifest})")
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"datasets": {}}
    marginals = []
    for key, path in (("a", args.dataset_a), ("b", args.dataset_b)):
        data = ds.load_dataset(path, load_observations=False)
        marginal = data.marginal()
        marginals.append(marginal)
        ds.save_marginal(out / f"marginal_{key}.f32", marginal)
        ds.write_pgm16(out / f"marginal_{key}.pgm", marginal.freq)
        counts = data.npc_counts()
        hist = np.bincount(counts, minlength=int(counts.max(initial=0)) + 1)
        report["datasets"][key] = {
            "path": str(path),
            "scene_count": len(data),
            "npc_count_histogram": hist.tolist(),
            "mean_npc_count": float(counts.mean()) if len(counts) else 0.0,
        }
    a, b = marginals
    if a.spec != b.spec:
        raise ConfigError("analyze: datasets use different grid specs")
    report["jsd"] = bev.jsd(a, b)
    report["jsd_bernoulli"] = bev.jsd(a, b, mode="bernoulli")
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"jsd = {report['jsd']:.6e} (report: {out / 'report.json'})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    result = runner.run_experiment(cfg, out_dir=args.out, resume_from=args.resume,
                                   checkpoint_every=args.checkpoint_every,
                                   workers=max(1, args.threads))
    print(f"final target IoU = {result.final_iou:.4f}  "
          f"jsd(source, reference) = {result.jsd_source_to_reference:.4e}")
    return 0


def cmd_eval(args) -> int:
    model, header, _ = load_checkpoint(args.checkpoint)
    data = ds.load_dataset(args.data)
    if data.observations is None:
        raise ConfigError("eval: dataset has no observations")
    grid_size = data.grid.size
    if header["architecture"]["grid_size"] != grid_size:
        raise ConfigError(
            f"eval: checkpoint grid {header['architecture']['grid_size']} "
            f"does not match dataset grid {grid_size}")
    mean_iou, per_scene = adapt.evaluate(model, data, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runner.write_eval_csv(out / "eval.csv", per_scene)
    (out / "eval_summary.json").write_text(json.dumps(
        {"mean_iou": mean_iou, "scenes": len(per_scene), "threshold": args.threshold},
        indent=1, sort_keys=True))
    print(f"mean IoU = {mean_iou:.4f} over {len(per_scene)} scenes")
    return 0


def cmd_sweep(args) -> int:
    with open(args.config) as f:
        raw = json.load(f)
    unknown = sorted(set(raw) - {"axis", "values", "seeds", "base"})
    if unknown:
        raise ConfigError(f"sweep config: unknown keys {unknown}")
    for key in ("axis", "values", "base"):
        if key not in raw:
            raise ConfigError(f"sweep config: missing '{key}'")
    base = build_config(RunConfig, raw["base"], "base")
    base.validate("base")
    seeds = [int(s) for s in raw.get("seeds", [0])]
    rows, summary = runner.run_sweep(base, raw["axis"], raw["values"], seeds,
                                     out_dir=args.out, workers=max(1, args.threads))
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_print_defaults(args) -> int:
    text = default_config_json(preset=args.preset, seed=args.seed)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "analyze": cmd_analyze,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "print-defaults": cmd_print_defaults,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ManifestError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
