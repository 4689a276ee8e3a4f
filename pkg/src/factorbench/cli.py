"""Command line entry point: ``factorbench <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import linalg

from .datasets import ContainerFormatError, save_container
from .factors import InvalidFactorError, PRESETS, UnknownPresetError
from .harness import (CACHE_ENV, ConfigError, DataError, RunConfig, emit_report, fit_predictor,
                      load_config, read_record, report_directory, resolve_dataset, resolve_space,
                      run_experiment, split_spec_for, _Features, _subsample)
from .metrics import MetricError, dci_disentanglement, r_squared
from .predictors import (KINDS, READOUT_HIDDEN, ShapeMismatchError, TrainConfig,
                         TrainingDivergedError, load_predictor, save_predictor)
from .splits import MODES, SplitError, format_stats, make_split, save_split, split_stats
from .sprites import RendererConfigError

log = logging.getLogger("factorbench")

DATA_ERRORS = (DataError, ContainerFormatError, SplitError, RendererConfigError, UnknownPresetError,
               InvalidFactorError, ShapeMismatchError, MetricError, TrainingDivergedError,
               linalg.LinAlgError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (sectioned key = value)")
    p.add_argument("--seed", type=int, help="seed (overrides the config's seed list)")
    p.add_argument("--out", help="output path")


def _dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help=f"dataset preset ({', '.join(PRESETS)}) or FVB1 container path")
    p.add_argument("--mode", choices=MODES, help="split mode")
    p.add_argument("--train-fraction", type=float, help="train fraction for random splits")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="factorbench", description="Systematic OOD splits and scoring for factor-grid datasets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="render a sprite preset into an FVB1 container")
    _common(g)
    g.add_argument("--preset", help="sprite preset")
    g.add_argument("--dtype", choices=("u8", "f32"), default="u8")
    g.add_argument("--resolution", type=int, default=64)

    s = sub.add_parser("split", help="build a split, write its sidecar, print stats")
    _common(s)
    _dataset_flags(s)

    t = sub.add_parser("train", help="fit one predictor on the train partition")
    _common(t)
    _dataset_flags(t)
    t.add_argument("--kind", choices=KINDS)
    t.add_argument("--iterations", type=int)
    t.add_argument("--max-train", type=int)

    e = sub.add_parser("eval", help="score a trained predictor, or DCI of imported latents")
    _common(e)
    _dataset_flags(e)
    e.add_argument("--model", help="predictor blob written by `train`")
    e.add_argument("--latents", help=".npy latent matrix to score with DCI")
    e.add_argument("--indices", help=".npy combination indices for the latent rows (default: all)")
    e.add_argument("--max-eval", type=int)

    r = sub.add_parser("run", help="end-to-end experiment from a config")
    _common(r)
    r.add_argument("--force", action="store_true", help="re-run even if the config already ran")
    r.add_argument("--figures", action="store_true", help="also render PNG figures")

    rp = sub.add_parser("report", help="aggregate records into leaderboard tables")
    _common(rp)
    rp.add_argument("--records", help="records directory (default: <out>/records)")
    rp.add_argument("--record", help="emit the tables of a single record file")
    rp.add_argument("--format", default="markdown,csv,json-lines",
                    help="comma list of markdown, csv, json-lines")
    rp.add_argument("--figures", action="store_true", help="also render PNG figures")
    rp.add_argument("--per-factor-similarity", action="store_true",
                    help="one similarity matrix per OOD axis instead of one flattened matrix")
    return parser


def _config_from(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = RunConfig(dataset=args.preset)
    else:
        raise UsageError("either --config or --preset is required")
    changes = {}
    if getattr(args, "preset", None) and args.config:
        changes["dataset"] = args.preset
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "train_fraction", None) is not None:
        changes["train_fraction"] = args.train_fraction
    if getattr(args, "kind", None):
        changes["predictor"] = args.kind
        if args.kind == "oracle-readout" and not args.config:
            changes["train"] = replace(cfg.train, hidden=READOUT_HIDDEN)
    if getattr(args, "iterations", None) is not None:
        changes["train"] = replace(changes.get("train", cfg.train), iterations=args.iterations)
    if getattr(args, "max_train", None) is not None:
        changes["max_train"] = args.max_train
    if getattr(args, "max_eval", None) is not None:
        changes["max_eval"] = args.max_eval
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    return replace(cfg, **changes) if changes else cfg


def cmd_generate(args) -> int:
    if args.config:
        preset = load_config(args.config).dataset
    elif args.preset:
        preset = args.preset
    else:
        raise UsageError("generate needs --preset")
    if preset.lower() not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    out = args.out
    if out is None:
        cache = os.environ.get(CACHE_ENV)
        if not cache:
            raise UsageError(f"--out is required when {CACHE_ENV} is not set")
        Path(cache).mkdir(parents=True, exist_ok=True)
        out = str(Path(cache) / f"{preset.lower()}-{args.resolution}.fvb")
    dataset = resolve_dataset(preset, args.resolution)
    path = save_container(dataset, out, dtype=args.dtype)
    print(f"wrote {dataset.space.total} images {dataset.image_shape} ({args.dtype}) to {path}")
    return 0


def cmd_split(args) -> int:
    cfg = _config_from(args)
    space = resolve_space(cfg.dataset)
    spec = split_spec_for(cfg, space, cfg.seeds[0])
    assignment = make_split(space, spec)
    stats = split_stats(space, assignment)
    if args.out:
        save_split(assignment, args.out)
    print(format_stats(space, stats))
    print(f"train fraction: {stats['train_fraction']:.3f}")
    if args.out:
        print(f"sidecar: {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    if not args.out:
        raise UsageError("train needs --out for the predictor blob")
    seed = cfg.seeds[0]
    space = resolve_space(cfg.dataset)
    dataset = resolve_dataset(cfg.dataset, cfg.resolution) if cfg.predictor in ("ridge", "mlp") else None
    assignment = make_split(space, split_spec_for(cfg, space, seed))
    train_idx = _subsample(assignment.train_indices, cfg.max_train, seed)
    features = _Features(cfg.predictor, space, dataset)
    pred = fit_predictor(cfg.predictor, features(train_idx), space.normalized_factors(train_idx),
                         replace(cfg.train, seed=seed))
    pred.meta.update({"dataset": cfg.dataset, "mode": cfg.mode, "seed": seed,
                      "space_fingerprint": space.fingerprint(), "n_train": int(train_idx.size)})
    save_predictor(pred, args.out)
    print(f"trained {cfg.predictor} on {train_idx.size} samples -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    space = resolve_space(cfg.dataset)
    if args.latents:
        latents = np.load(args.latents)
        idx = np.load(args.indices) if args.indices else np.arange(space.total)
        score, importance = dci_disentanglement(latents, space.normalized_factors(idx))
        result = {"dci_disentanglement": score, "importance": importance.tolist()}
        text = json.dumps(result, indent=1)
        if args.out:
            Path(args.out).write_text(text + "\n")
        print(text)
        return 0
    if not args.model:
        raise UsageError("eval needs --model or --latents")
    pred = load_predictor(args.model)
    fp = pred.meta.get("space_fingerprint")
    if fp and fp != space.fingerprint():
        raise DataError("predictor was trained on a different factor space")
    seed = cfg.seeds[0]
    assignment = make_split(space, split_spec_for(cfg, space, seed))
    eval_idx = _subsample(assignment.test_indices, cfg.max_eval, cfg.eval_seed)
    dataset = resolve_dataset(cfg.dataset, cfg.resolution) if pred.kind in ("ridge", "mlp") else None
    kind = pred.kind if pred.kind in KINDS else "mlp"
    preds = pred.predict(_Features(kind, space, dataset)(eval_idx))
    report = r_squared(preds, space.normalized_factors(eval_idx), space.variance_per_factor(),
                       space.names, "full-test", predictor=pred.kind, seed=seed)
    record = {"dataset": space.name or cfg.dataset, "mode": cfg.mode, "predictor": pred.kind,
              "seeds": [{"seed": seed, "status": "ok", "reports": [report.as_dict()],
                         "modularity": []}]}
    if args.out:
        emit_report(record, args.out)
    for name, v in zip(report.factor_names, report.r2):
        print(f"{name:<18} R2 {v: .4f}")
    print(f"{'mean':<18} R2 {report.mean: .4f}")
    return 0


def cmd_run(args) -> int:
    if not args.config:
        raise UsageError("run needs --config")
    cfg = _config_from(args)
    if args.out:
        cfg = replace(cfg, out=args.out)
    record = run_experiment(cfg, force=args.force)
    if args.figures:
        emit_report(record, Path(cfg.out) / "runs" / record["fingerprint"], figures=True)
    status = "reused existing record" if record.get("reused") else "completed"
    print(f"{status}: {Path(cfg.out) / 'records' / (record['fingerprint'] + '.json')}")
    for seed in record["seeds"]:
        if seed["status"] == "ok":
            r2 = seed["reports"][0]["mean"]
            print(f"  seed {seed['seed']}: aggregate R2 {r2:.4f}")
        else:
            print(f"  seed {seed['seed']}: FAILED {seed['error']}")
    return 0


def cmd_report(args) -> int:
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
    bad = set(formats) - {"markdown", "csv", "json-lines"}
    if bad:
        raise UsageError(f"unknown formats {sorted(bad)}")
    if args.record:
        rec = read_record(args.record)
        if rec is None:
            raise DataError(f"{args.record} is not a readable run record")
        out = args.out or str(Path(args.record).with_suffix(""))
        for p in emit_report(rec, out, formats, figures=args.figures):
            print(p)
        return 0
    records = args.records
    if records is None:
        base = args.out or (load_config(args.config).out if args.config else None)
        if base is None:
            raise UsageError("report needs --records or --out")
        records = str(Path(base) / "records")
    out = args.out or str(Path(records).parent)
    board, written = report_directory(records, Path(out) / "leaderboard", formats, args.figures,
                                      args.per_factor_similarity)
    for w in board.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for p in written:
        print(p)
    return 0


COMMANDS = {"generate": cmd_generate, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "run": cmd_run, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"factorbench: config error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"factorbench: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
