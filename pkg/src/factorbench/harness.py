"""Experiment orchestration: configs, runs, persisted records, leaderboards, reports."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datasets import Dataset, SyntheticDataset, load_container
from .factors import PRESETS, FactorSpace, get_preset
from .metrics import (RATIO_EDGES, EvalReport, MetricError, RatioResult, dci_disentanglement,
                      mean_regression_ratios, metric_correlation, modularity_eval,
                      prediction_similarity, r_squared)
from .predictors import (KINDS, READOUT_HIDDEN, Predictor, TrainConfig, TrainingDivergedError,
                         fit_mean, fit_mlp, fit_ridge, flip_signs)
from .splits import (MODES, SplitAssignment, SplitSpec, default_split_spec, make_random_split,
                     make_split, single_ood_subsets)
from .sprites import config_for_preset

log = logging.getLogger(__name__)

RECORD_FORMAT = "factorbench-record/1"
CACHE_ENV = "FACTORBENCH_CACHE"
SPRITE_PRESETS = ("dsprites", "dsprites-inj", "dsprites-ci", "dsprites-tiny")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset: str
    mode: str = "random"
    exclusive_sets: tuple[tuple[str, tuple[int, ...]], ...] = ()  # explicit override, by axis name
    train_fraction: float = 0.3
    predictor: str = "mean"
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    max_train: int | None = 4000
    max_eval: int | None = 2000
    eval_seed: int = 0
    reference: bool = True
    resolution: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown split mode {self.mode!r}; choose from {MODES}")
        if self.predictor not in KINDS:
            raise ConfigError(f"unknown predictor {self.predictor!r}; choose from {KINDS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {list(self.seeds)}")

    def identity(self) -> dict:
        """Everything that determines results; the output directory is excluded."""
        d = asdict(self)
        d.pop("out")
        d["train"] = self.train.to_dict()
        d["exclusive_sets"] = {k: list(v) for k, v in self.exclusive_sets}
        d["seeds"] = list(self.seeds)
        return d

    def fingerprint(self) -> str:
        payload = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def _bool(text: str) -> bool:
    if text.strip().lower() in ("1", "true", "yes", "on"):
        return True
    if text.strip().lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "all") else int(text)


_TRAIN_KEYS = {"learning_rate": float, "beta1": float, "beta2": float, "eps": float,
               "batch_size": int, "iterations": int, "ridge_lambda": float, "hidden": _ints,
               "early_stop": _bool, "window": int, "patience": int, "sign_flip": _bool,
               "random_flips": _bool}


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    """Parse the sectioned key = value config format.

    ::

        [dataset]
        name = dsprites-ci          ; preset name or path to an FVB1 container
        resolution = 64
        [split]
        mode = extrapolation
        train_fraction = 0.3        ; random mode only
        set.x-position = 12..15     ; optional explicit exclusive sets
        [predictor]
        kind = ridge
        ridge_lambda = 100
        [run]
        seeds = 0, 1, 2
        out = runs
        max_train = 4000
        max_eval = 2000
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"dataset", "split", "predictor", "run"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    try:
        ds = cp["dataset"] if cp.has_section("dataset") else {}
        name = ds.get("name")
        if not name:
            raise ConfigError("[dataset] name is required")
        if name.lower() not in PRESETS and base_dir is not None and not Path(name).is_absolute():
            name = str(base_dir / name)
        kwargs: dict = {"dataset": name}
        if "resolution" in ds:
            kwargs["resolution"] = int(ds["resolution"])
        sp = cp["split"] if cp.has_section("split") else {}
        if "mode" in sp:
            kwargs["mode"] = sp["mode"].strip()
        if "train_fraction" in sp:
            kwargs["train_fraction"] = float(sp["train_fraction"])
        sets = tuple(sorted((k[4:], _ints(v)) for k, v in sp.items() if k.startswith("set.")))
        if sets:
            kwargs["exclusive_sets"] = sets
        bad = [k for k in sp if k not in ("mode", "train_fraction") and not k.startswith("set.")]
        if bad:
            raise ConfigError(f"unknown [split] keys {bad}")
        pr = cp["predictor"] if cp.has_section("predictor") else {}
        train_kwargs = {}
        for key, value in pr.items():
            if key == "kind":
                kwargs["predictor"] = value.strip()
            elif key in _TRAIN_KEYS:
                train_kwargs[key] = _TRAIN_KEYS[key](value)
            else:
                raise ConfigError(f"unknown [predictor] key {key!r}")
        if kwargs.get("predictor") == "oracle-readout" and "hidden" not in train_kwargs:
            train_kwargs["hidden"] = READOUT_HIDDEN
        kwargs["train"] = TrainConfig(**train_kwargs)
        rn = cp["run"] if cp.has_section("run") else {}
        for key, value in rn.items():
            if key == "seeds":
                kwargs["seeds"] = _ints(value)
            elif key == "out":
                kwargs["out"] = value.strip()
            elif key in ("max_train", "max_eval"):
                kwargs[key] = _opt_int(value)
            elif key == "eval_seed":
                kwargs[key] = int(value)
            elif key == "reference":
                kwargs[key] = _bool(value)
            else:
                raise ConfigError(f"unknown [run] key {key!r}")
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)


def resolve_space(ref: str) -> FactorSpace:
    if ref.lower() in PRESETS:
        return get_preset(ref)
    path = Path(ref)
    if path.exists():
        return load_container(path).space
    raise DataError(f"dataset {ref!r} is neither a preset ({sorted(PRESETS)}) nor an existing file")


def resolve_dataset(ref: str, resolution: int = 64) -> Dataset:
    """Open a container path, a cached container, or a lazily rendered sprite preset."""
    key = ref.lower()
    if key not in PRESETS:
        path = Path(ref)
        if not path.exists():
            raise DataError(f"dataset {ref!r} is neither a preset nor an existing file")
        return load_container(path)
    cache = os.environ.get(CACHE_ENV)
    if cache:
        cached = Path(cache) / f"{key}-{resolution}.fvb"
        if cached.exists():
            return load_container(cached)
    if key not in SPRITE_PRESETS:
        raise DataError(f"preset {ref!r} has no renderer; import its images as an FVB1 container")
    return SyntheticDataset(get_preset(key), config_for_preset(key, resolution))


def split_spec_for(config: RunConfig, space: FactorSpace, seed: int) -> SplitSpec:
    if config.mode == "random":
        return SplitSpec("random", tuple(frozenset() for _ in space.axes), config.train_fraction, seed)
    if config.exclusive_sets:
        given = dict(config.exclusive_sets)
        unknown = set(given) - set(space.names)
        if unknown:
            raise ConfigError(f"exclusive sets name unknown axes {sorted(unknown)}")
        return SplitSpec(config.mode, tuple(frozenset(given.get(n, ())) for n in space.names), None, seed)
    return default_split_spec(space, config.mode, seed=seed)


def _subsample(indices: np.ndarray, limit: int | None, seed: int) -> np.ndarray:
    if limit is None or indices.size <= limit:
        return indices
    rng = np.random.Generator(np.random.PCG64(seed))
    return np.sort(rng.choice(indices, size=limit, replace=False))


class _Features:
    """Model inputs for a predictor kind: pixels, ground-truth factors, or nothing."""

    def __init__(self, kind: str, space: FactorSpace, dataset: Dataset | None):
        self.kind, self.space, self.dataset = kind, space, dataset

    def __call__(self, indices: np.ndarray) -> np.ndarray:
        if self.kind == "oracle-readout":
            return self.space.normalized_factors(indices)
        if self.kind == "mean":
            return np.zeros((indices.size, 0))
        return self.dataset.flat_images(indices)


def fit_predictor(kind: str, X: np.ndarray, Y: np.ndarray, train: TrainConfig) -> Predictor:
    if kind == "mean":
        return fit_mean(Y, input_dim=X.shape[1])
    if kind == "ridge":
        return fit_ridge(X, Y, train.ridge_lambda)
    if kind == "mlp":
        return fit_mlp(X, Y, train)
    signs = flip_signs(Y.shape[1], train)
    pred = fit_mlp(X if signs is None else X * signs, Y, train)
    pred.input_sign = signs
    pred.kind = "oracle-readout"
    return pred


def _train_and_score(config: RunConfig, space, features, assignment, seed, subset):
    train_cfg = replace(config.train, seed=seed)
    train_idx = _subsample(assignment.train_indices, config.max_train, seed)
    eval_idx = _subsample(assignment.test_indices, config.max_eval, config.eval_seed)
    y_train = space.normalized_factors(train_idx)
    pred = fit_predictor(config.predictor, features(train_idx), y_train, train_cfg)
    y_eval = space.normalized_factors(eval_idx)
    p_eval = pred.predict(features(eval_idx))
    report = r_squared(p_eval, y_eval, space.variance_per_factor(), space.names, subset,
                       predictor=config.predictor, seed=seed)
    return pred, train_idx, eval_idx, y_train, y_eval, p_eval, report


def run_seed(config: RunConfig, space: FactorSpace, dataset: Dataset | None, seed: int) -> dict:
    features = _Features(config.predictor, space, dataset)
    spec = split_spec_for(config, space, seed)
    assignment = make_split(space, spec)
    pred, train_idx, eval_idx, y_train, y_eval, p_eval, report = _train_and_score(
        config, space, features, assignment, seed, "random" if config.mode == "random" else "full-test")
    n_train, n_test = assignment.counts
    out = {"seed": seed, "status": "ok",
           "split": {"spec": spec.to_dict(), "train_count": n_train, "test_count": n_test,
                     "train_fraction": n_train / space.total},
           "n_train_used": int(train_idx.size), "n_eval": int(eval_idx.size),
           "iterations_run": pred.meta.get("iterations_run"),
           "train_means": y_train.mean(axis=0).tolist(),
           "reports": [report.as_dict()], "modularity": [], "ratios": None, "ood": None}
    try:
        out["dci"] = dci_disentanglement(p_eval, y_eval)[0]
    except (MetricError, np.linalg.LinAlgError):
        out["dci"] = None

    if config.mode in ("interpolation", "extrapolation"):
        reference = None
        if config.reference:
            ref_split = make_random_split(space, n_train / space.total, seed)
            reference = _train_and_score(config, space, features, ref_split, seed, "random")[-1]
            out["reports"].append(reference.as_dict())
        mods = modularity_eval(space, assignment, eval_idx, p_eval, y_eval, reference,
                               config.predictor, seed)
        out["modularity"] = [m.as_dict() for m in mods]
        means = y_train.mean(axis=0)
        parts, ood_rows, ood_axis = [], [], []
        for sub in single_ood_subsets(space, assignment):
            rows = np.flatnonzero(np.isin(eval_idx, sub.indices))
            if rows.size == 0:
                continue
            parts.append(mean_regression_ratios(p_eval[rows, sub.axis], y_eval[rows, sub.axis],
                                                means[sub.axis], [sub.axis]))
            ood_rows.append(rows)
            ood_axis.append(np.full(rows.size, sub.axis))
        if parts:
            ratios = RatioResult.concat(parts)
            rows = np.concatenate(ood_rows)
            axis = np.concatenate(ood_axis)
            out["ratios"] = {"edges": [None if np.isinf(e) else e for e in RATIO_EDGES],
                             "counts": ratios.counts.tolist(),
                             "n_unguarded": ratios.n_unguarded,
                             "n_guarded": int(ratios.guarded.sum()),
                             "fraction_below_1": ratios.fraction_below(1.0),
                             "per_factor": {space.names[j]: np.histogram(
                                 ratios.r[(ratios.factor == j) & ~ratios.guarded],
                                 bins=np.asarray(RATIO_EDGES))[0].tolist()
                                 for j in sorted(set(ratios.factor.tolist()))}}
            out["ood"] = {"indices": eval_idx[rows].tolist(), "axis": axis.tolist(),
                          "preds": p_eval[rows, axis].tolist(),
                          "targets": y_eval[rows, axis].tolist()}
    return out


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def record_path(config: RunConfig) -> Path:
    return Path(config.out) / "records" / f"{config.fingerprint()}.json"


def run_experiment(config: RunConfig, force: bool = False, emit: bool = True) -> dict:
    """Run every seed, persist the record atomically, and emit its reports.

    An existing record with the same fingerprint is returned unchanged unless ``force``.
    """
    path = record_path(config)
    if path.exists() and not force:
        existing = read_record(path)
        if existing is not None:
            log.info("config %s already ran; reusing %s", config.fingerprint(), path)
            existing["reused"] = True
            return existing
    space = resolve_space(config.dataset)
    dataset = None
    if config.predictor in ("ridge", "mlp"):
        dataset = resolve_dataset(config.dataset, config.resolution)
    started = time.time()
    seeds = []
    for seed in config.seeds:
        try:
            seeds.append(run_seed(config, space, dataset, seed))
        except (TrainingDivergedError, np.linalg.LinAlgError, MetricError, ValueError) as exc:
            log.warning("seed %d failed: %s", seed, exc)
            seeds.append({"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    record = {"format": RECORD_FORMAT, "fingerprint": config.fingerprint(),
              "config": config.identity(), "dataset": space.name or config.dataset,
              "space": space.describe(), "mode": config.mode, "predictor": config.predictor,
              "seeds": seeds,
              "timestamps": {"started": started, "finished": time.time()}}
    if emit:
        run_dir = Path(config.out) / "runs" / config.fingerprint()
        record["artifacts"] = [str(p) for p in emit_report(record, run_dir)]
    _atomic_write(path, json.dumps(record, sort_keys=True, indent=1).encode())
    return record


def read_record(path) -> dict | None:
    try:
        rec = json.loads(Path(path).read_text())
    except (OSError, ValueError):
        return None
    if not isinstance(rec, dict) or rec.get("format") != RECORD_FORMAT or "seeds" not in rec:
        return None
    return rec


def seed_score(seed: dict) -> float | None:
    if seed.get("status") != "ok":
        return None
    return EvalReport.from_dict(seed["reports"][0]).mean


@dataclass
class LeaderboardRow:
    dataset: str
    split: str
    predictor: str
    n_seeds: int
    mean: float
    std: float


@dataclass
class Leaderboard:
    rows: list[LeaderboardRow]
    warnings: list[str] = field(default_factory=list)
    correlation: dict | None = None

    CSV_FIELDS = ("dataset", "split", "predictor", "n_seeds", "mean_r2", "std_r2_population")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.dataset, r.split, r.predictor, r.n_seeds, repr(r.mean), repr(r.std)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Leaderboard":
        reader = csv.DictReader(io.StringIO(text))
        rows = [LeaderboardRow(d["dataset"], d["split"], d["predictor"], int(d["n_seeds"]),
                               float(d["mean_r2"]), float(d["std_r2_population"])) for d in reader]
        return cls(rows)


def _sort_key(row: LeaderboardRow):
    return (row.dataset, MODES.index(row.split), -row.mean, row.predictor)


def aggregate_leaderboard(records_dir) -> Leaderboard:
    records_dir = Path(records_dir)
    scores: dict[tuple[str, str, str], list[float]] = {}
    warnings = []
    pairs_dci, pairs_r2 = [], []
    paths = sorted(records_dir.glob("*.json")) if records_dir.is_dir() else []
    for path in paths:
        rec = read_record(path)
        if rec is None:
            warnings.append(f"skipped corrupt record {path.name}")
            continue
        key = (rec["dataset"], rec["mode"], rec["predictor"])
        for seed in rec["seeds"]:
            score = seed_score(seed)
            if score is None:
                continue
            scores.setdefault(key, []).append(score)
            if seed.get("dci") is not None:
                pairs_dci.append(seed["dci"])
                pairs_r2.append(score)
    rows = []
    for (ds, mode, kind), vals in scores.items():
        arr = np.asarray(vals)
        rows.append(LeaderboardRow(ds, mode, kind, arr.size, float(arr.mean()), float(arr.std())))
    rows.sort(key=_sort_key)
    corr = None
    if len(pairs_dci) >= 3:
        try:
            corr = metric_correlation(pairs_dci, pairs_r2)
        except MetricError:
            corr = None
    return Leaderboard(rows, warnings, corr)


# ---------------------------------------------------------------- reports

def _fmt(v: float) -> str:
    return f"{v:.3f}"


def record_rows(record: dict) -> list[dict]:
    """Flat per-{predictor, split, subset, factor, seed} rows of a record."""
    rows = []
    for seed in record["seeds"]:
        if seed.get("status") != "ok":
            continue
        reports = [EvalReport.from_dict(r) for r in seed["reports"]]
        for m in seed["modularity"]:
            reports.append(EvalReport.from_dict(m["ood"]))
            reports.append(EvalReport.from_dict(m["id"]))
        for rep in reports:
            for name, r2, mse in zip(rep.factor_names, rep.r2, rep.mse):
                rows.append({"dataset": record["dataset"], "split": record["mode"],
                             "predictor": record["predictor"], "seed": seed["seed"],
                             "subset": rep.subset, "axis": rep.axis or "", "factor": name,
                             "r2": r2, "r2_clipped": max(r2, 0.0), "mse": mse,
                             "n_samples": rep.n_samples})
    return rows


_ROW_FIELDS = ("dataset", "split", "predictor", "seed", "subset", "axis", "factor", "r2",
               "r2_clipped", "mse", "n_samples")


def _csv_text(rows: Iterable[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _record_markdown(record: dict, rows: list[dict]) -> str:
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r["subset"], r["axis"], r["factor"]), []).append(r["r2"])
    lines = [f"### {record['dataset']} / {record['mode']} / {record['predictor']}", "",
             "| subset | OOD axis | factor | R² (mean ± std, population) | clipped | seeds |",
             "|---|---|---|---|---|---|"]
    for (subset, axis, factor), vals in groups.items():
        arr = np.asarray(vals)
        lines.append(f"| {subset} | {axis or '-'} | {factor} | {_fmt(arr.mean())} ± {_fmt(arr.std())} "
                     f"| {_fmt(max(arr.mean(), 0.0))} | {arr.size} |")
    failed = [s for s in record["seeds"] if s.get("status") != "ok"]
    for s in failed:
        lines.append(f"\nseed {s['seed']} failed: {s.get('error', '')}")
    return "\n".join(lines) + "\n"


def _histogram_rows(record: dict) -> list[dict]:
    counts = np.zeros(len(RATIO_EDGES) - 1, dtype=np.int64)
    for seed in record["seeds"]:
        if seed.get("status") == "ok" and seed.get("ratios"):
            counts += np.asarray(seed["ratios"]["counts"], dtype=np.int64)
    return [{"bin_lo": lo, "bin_hi": "inf" if np.isinf(hi) else hi, "count": int(c)}
            for lo, hi, c in zip(RATIO_EDGES[:-1], RATIO_EDGES[1:], counts)]


def _leaderboard_table(board: Leaderboard) -> tuple[list[str], list[list[str]]]:
    header = ["dataset", "predictor"] + list(MODES)
    cells: dict[tuple[str, str], dict[str, str]] = {}
    for r in board.rows:
        cells.setdefault((r.dataset, r.predictor), {})[r.split] = f"{_fmt(r.mean)} ± {_fmt(r.std)}"
    body = [[ds, kind] + [cells[(ds, kind)].get(m, "") for m in MODES]
            for ds, kind in sorted(cells)]
    return header, body


def emit_report(obj, out_dir, formats: Sequence[str] = ("markdown", "csv", "json-lines"),
                figures: bool = False) -> list[Path]:
    """Write a record's or leaderboard's tables; figures are opt-in PNGs next to the data."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from None
    written: list[Path] = []

    def put(name: str, text: str):
        path = out_dir / name
        _atomic_write(path, text.encode())
        written.append(path)

    if isinstance(obj, Leaderboard):
        if "csv" in formats:
            put("leaderboard.csv", obj.to_csv())
            header, body = _leaderboard_table(obj)
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)
            put("leaderboard_table.csv", buf.getvalue())
        if "json-lines" in formats:
            put("leaderboard.jsonl", "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in obj.rows))
        if "markdown" in formats:
            header, body = _leaderboard_table(obj)
            lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
            lines += ["| " + " | ".join(c or "-" for c in row) + " |" for row in body]
            lines.append("\nCells: mean ± population std of aggregate test R² over seeds.")
            for wmsg in obj.warnings:
                lines.append(f"\nwarning: {wmsg}")
            put("leaderboard.md", "\n".join(lines) + "\n")
        if obj.correlation is not None:
            put("correlation.json", json.dumps(obj.correlation, sort_keys=True, indent=1) + "\n")
        if figures:
            from .plotting import plot_leaderboard
            written.append(plot_leaderboard(obj, out_dir / "leaderboard.png"))
        return written

    record = obj
    rows = record_rows(record)
    if "json-lines" in formats:
        put("report.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    if "csv" in formats:
        put("report.csv", _csv_text(rows, _ROW_FIELDS))
    if "markdown" in formats:
        put("report.md", _record_markdown(record, rows))
    hist = _histogram_rows(record)
    if any(h["count"] for h in hist):
        put("ratio_histogram.csv", _csv_text(hist, ("bin_lo", "bin_hi", "count")))
    sim = record_similarity(record)
    if sim is not None:
        put("similarity.json", json.dumps(sim.as_dict(), sort_keys=True, indent=1) + "\n")
    if figures:
        from .plotting import plot_ratio_histogram, plot_similarity
        if any(h["count"] for h in hist):
            written.append(plot_ratio_histogram(hist, out_dir / "ratio_histogram.png"))
        if sim is not None:
            written.append(plot_similarity(sim, out_dir / "similarity.png"))
    return written


def _ood_runs(record: dict) -> list[dict]:
    return [{"model": record["predictor"], "seed": s["seed"], "preds": s["ood"]["preds"],
             "targets": s["ood"]["targets"], "indices": s["ood"]["indices"], "axis": s["ood"]["axis"]}
            for s in record["seeds"] if s.get("status") == "ok" and s.get("ood")]


def similarity_across(records: Sequence[dict], per_factor: bool = False):
    """Similarity of OOD predictions over every ok seed of records sharing evaluation cells.

    Predictions are flattened across the OOD factors; ``per_factor`` instead returns
    ``{axis name: matrix}`` with one matrix per held-out axis.
    """
    runs = [r for rec in records for r in _ood_runs(rec)]
    if len(runs) < 2:
        return None
    ref = (runs[0]["indices"], runs[0]["axis"])
    runs = [r for r in runs if (r["indices"], r["axis"]) == ref]
    if len(runs) < 2:
        return None
    if not per_factor:
        return prediction_similarity(runs, runs[0]["targets"])
    names = records[0]["space"]["axes"] if "space" in records[0] else None
    axis = np.asarray(ref[1])
    out = {}
    for j in sorted(set(ref[1])):
        sel = axis == j
        label = names[j]["name"] if names else f"factor{j}"
        sub = [{**r, "preds": np.asarray(r["preds"])[sel]} for r in runs]
        out[label] = prediction_similarity(sub, np.asarray(runs[0]["targets"])[sel])
    return out


def record_similarity(record: dict):
    return similarity_across([record])


def report_directory(records_dir, out_dir, formats=("markdown", "csv", "json-lines"),
                     figures: bool = False, per_factor: bool = False) -> tuple[Leaderboard, list[Path]]:
    """Leaderboard over a records directory plus cross-model similarity per (dataset, split)."""
    board = aggregate_leaderboard(records_dir)
    written = emit_report(board, out_dir, formats, figures)
    groups: dict[tuple[str, str], list[dict]] = {}
    for path in sorted(Path(records_dir).glob("*.json")) if Path(records_dir).is_dir() else []:
        rec = read_record(path)
        if rec is not None and rec["mode"] in ("interpolation", "extrapolation"):
            groups.setdefault((rec["dataset"], rec["mode"]), []).append(rec)
    for (ds, mode), recs in sorted(groups.items()):
        sim = similarity_across(recs, per_factor)
        if sim is None:
            continue
        parts = sim.items() if per_factor else [("", sim)]
        for axis, matrix in parts:
            stem = f"similarity_{ds}_{mode}" + (f"_{axis}" if axis else "")
            path = Path(out_dir) / f"{stem}.json"
            _atomic_write(path, (json.dumps(matrix.as_dict(), sort_keys=True, indent=1) + "\n").encode())
            written.append(path)
            if figures:
                from .plotting import plot_similarity
                written.append(plot_similarity(matrix, Path(out_dir) / f"{stem}.png"))
    return board, written
