"""Scoring: per-factor R^2, ID/OOD modularity, mean-regression ratios, prediction
similarity, DCI disentanglement and metric correlations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .factors import FactorSpace
from .splits import SplitAssignment, single_ood_subsets

SUBSETS = ("random", "full-test", "id-factors", "ood-factors")
RATIO_EDGES = tuple(np.round(np.arange(0, 16) * 0.1, 10).tolist()) + (float("inf"),)
RATIO_GUARD = 1e-6


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    factor_names: list[str]
    r2: list[float]  # unclipped
    subset: str = "full-test"
    n_samples: int = 0
    predictor: str = ""
    seed: int | None = None
    skipped: list[str] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    axis: str | None = None  # the held-out axis for subset-tagged reports

    @property
    def r2_clipped(self) -> list[float]:
        return [max(v, 0.0) for v in self.r2]

    @property
    def mean(self) -> float:
        return float(np.mean(self.r2)) if self.r2 else float("nan")

    @property
    def mean_clipped(self) -> float:
        return float(np.mean(self.r2_clipped)) if self.r2 else float("nan")

    def as_dict(self) -> dict:
        return {"factor_names": list(self.factor_names), "r2": list(self.r2),
                "r2_clipped": self.r2_clipped, "mean": self.mean, "subset": self.subset,
                "n_samples": self.n_samples, "predictor": self.predictor, "seed": self.seed,
                "skipped": list(self.skipped), "mse": list(self.mse), "axis": self.axis}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(list(d["factor_names"]), [float(v) for v in d["r2"]], d["subset"],
                   int(d["n_samples"]), d.get("predictor", ""), d.get("seed"),
                   list(d.get("skipped", [])), [float(v) for v in d.get("mse", [])], d.get("axis"))


def r_squared(preds, targets, variances, factor_names: Sequence[str] | None = None,
              subset: str = "full-test", factors: Sequence[int] | None = None,
              predictor: str = "", seed: int | None = None) -> EvalReport:
    """R^2_i = 1 - MSE_i / var_i with var_i taken over the full dataset.

    ``factors`` restricts scoring to some columns; zero-variance factors are skipped.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if preds.shape != targets.shape:
        raise MetricError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    if preds.shape[0] == 0:
        raise MetricError("empty evaluation set")
    names = list(factor_names) if factor_names is not None else [f"f{i}" for i in range(preds.shape[1])]
    cols = list(range(preds.shape[1])) if factors is None else list(factors)
    scored = [j for j in cols if variances[j] > 0]
    skipped = [names[j] for j in cols if variances[j] <= 0]
    if not scored:
        raise MetricError("every requested factor has zero variance")
    mse = np.mean((preds[:, scored] - targets[:, scored]) ** 2, axis=0)
    r2 = 1.0 - mse / variances[scored]
    return EvalReport([names[j] for j in scored], r2.tolist(), subset, int(preds.shape[0]),
                      predictor, seed, skipped, mse.tolist())


@dataclass
class ModularityResult:
    axis: str
    ood: EvalReport
    id: EvalReport
    reference: EvalReport | None = None

    def as_dict(self) -> dict:
        return {"axis": self.axis, "ood": self.ood.as_dict(), "id": self.id.as_dict(),
                "reference": None if self.reference is None else self.reference.as_dict()}


def modularity_eval(space: FactorSpace, assignment: SplitAssignment, indices, preds, targets,
                    reference: EvalReport | None = None, predictor: str = "",
                    seed: int | None = None) -> list[ModularityResult]:
    """Split each single-OOD subset's error into the held-out axis (OOD) and the rest (ID).

    ``preds``/``targets`` are rows aligned with the combination ``indices`` that were
    evaluated; subsets are intersected with those indices.
    """
    indices = np.asarray(indices, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    var = space.variance_per_factor()
    out = []
    for sub in single_ood_subsets(space, assignment):
        rows = np.flatnonzero(np.isin(indices, sub.indices))
        if rows.size == 0:
            continue
        others = [j for j in range(space.n_factors) if j != sub.axis]
        ood = r_squared(preds[rows], targets[rows], var, space.names, "ood-factors",
                        [sub.axis], predictor, seed)
        idr = r_squared(preds[rows], targets[rows], var, space.names, "id-factors",
                        others, predictor, seed)
        ood.axis = idr.axis = sub.name
        out.append(ModularityResult(sub.name, ood, idr, reference))
    return out


@dataclass
class RatioResult:
    factor: np.ndarray  # factor id per sample
    r: np.ndarray
    guarded: np.ndarray
    edges: tuple[float, ...] = RATIO_EDGES

    @property
    def counts(self) -> np.ndarray:
        return np.histogram(self.r[~self.guarded], bins=np.asarray(self.edges))[0]

    @property
    def n_unguarded(self) -> int:
        return int((~self.guarded).sum())

    def fraction_below(self, bound: float = 1.0) -> float:
        r = self.r[~self.guarded]
        return float(np.mean((r >= 0) & (r < bound))) if r.size else float("nan")

    @classmethod
    def concat(cls, parts: Sequence["RatioResult"]) -> "RatioResult":
        if not parts:
            return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=bool))
        return cls(np.concatenate([p.factor for p in parts]), np.concatenate([p.r for p in parts]),
                   np.concatenate([p.guarded for p in parts]))


def mean_regression_ratios(preds, targets, train_means, factor_ids=None) -> RatioResult:
    """r = |f_j - mean_j| / |y_j - mean_j| per sample.

    Inputs are 1-D (one OOD factor) or 2-D (columns = factors listed in
    ``factor_ids``). Samples with |y - mean| below 1e-6 are flagged and kept out
    of the histogram.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.size == 0:
        raise MetricError("no samples for the ratio metric")
    if preds.ndim == 1:
        preds, targets = preds[:, None], targets[:, None]
    means = np.broadcast_to(np.asarray(train_means, dtype=np.float64), (preds.shape[1],))
    ids = np.arange(preds.shape[1]) if factor_ids is None else np.asarray(factor_ids)
    num = np.abs(preds - means)
    den = np.abs(targets - means)
    guarded = den < RATIO_GUARD
    r = num / np.where(guarded, 1.0, den)
    factor = np.broadcast_to(ids, preds.shape)
    return RatioResult(factor.T.ravel().copy(), r.T.ravel(), guarded.T.ravel())


@dataclass
class SimilarityMatrix:
    labels: list[str]  # one per run, then "ground-truth"
    values: np.ndarray  # NaN where masked
    mask: np.ndarray  # True = excluded

    def as_dict(self) -> dict:
        return {"labels": self.labels,
                "values": [[None if m else float(v) for v, m in zip(row, mrow)]
                           for row, mrow in zip(self.values, self.mask)]}


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if a.size == 0 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def prediction_similarity(runs: Sequence[dict], ground_truth) -> SimilarityMatrix:
    """Pearson correlation of flattened OOD-factor predictions between runs.

    Each run is ``{"model": str, "seed": int, "preds": array}``; all ``preds`` and
    ``ground_truth`` must cover the same evaluation cells. Pairs of the same model
    with the same seed, and zero-variance vectors, are masked.
    """
    if len(runs) < 2:
        raise MetricError("need at least two runs")
    gt = np.asarray(ground_truth, dtype=np.float64).ravel()
    vecs = [np.asarray(r["preds"], dtype=np.float64).ravel() for r in runs] + [gt]
    if any(v.shape != gt.shape for v in vecs):
        raise MetricError("runs do not share the same evaluation cells")
    keys = [(r["model"], r["seed"]) for r in runs] + [("ground-truth", None)]
    n = len(vecs)
    values = np.full((n, n), np.nan)
    mask = np.ones((n, n), dtype=bool)
    for a in range(n):
        for b in range(a, n):
            if keys[a] == keys[b]:
                continue
            rho = _pearson(vecs[a], vecs[b])
            if rho is None:
                continue
            values[a, b] = values[b, a] = rho
            mask[a, b] = mask[b, a] = False
    labels = [f"{r['model']}/seed{r['seed']}" for r in runs] + ["ground-truth"]
    return SimilarityMatrix(labels, values, mask)


def _standardize(a: np.ndarray) -> np.ndarray:
    sd = a.std(axis=0)
    return np.where(sd > 0, (a - a.mean(axis=0)) / np.where(sd > 0, sd, 1.0), 0.0)


def importance_matrix(latents, targets, lam: float = 1e-2) -> np.ndarray:
    """|standardized ridge coefficients|, rows = latents, columns = factors."""
    Z = _standardize(np.asarray(latents, dtype=np.float64))
    Y = _standardize(np.asarray(targets, dtype=np.float64))
    n = Z.shape[0]
    A = Z.T @ Z / n + lam * np.eye(Z.shape[1])
    coef = np.linalg.solve(A, Z.T @ Y / n)
    return np.abs(coef)


def dci_disentanglement(latents, targets, lam: float = 1e-2) -> tuple[float, np.ndarray]:
    latents = np.asarray(latents, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] < 1:
        raise MetricError("latents must be a (n, d) matrix with d >= 1")
    if latents.shape[0] != targets.shape[0]:
        raise MetricError("latents and targets need equal row counts")
    R = importance_matrix(latents, targets, lam)
    total = R.sum()
    if not np.isfinite(total) or total <= 0:
        raise MetricError("importance matrix is all zero; disentanglement is undefined")
    K = R.shape[1]
    row = R.sum(axis=1)
    P = np.divide(R, row[:, None], out=np.zeros_like(R), where=row[:, None] > 0)
    if K > 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(P > 0, np.log(P) / np.log(K), 0.0)
        d = 1.0 + np.sum(P * logs, axis=1)
    else:
        d = np.ones(R.shape[0])
    return float(np.sum(row / total * d)), R


def metric_correlation(x, y) -> dict:
    """Pearson and Spearman coefficients with two-sided t-approximation p-values."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("need two equal-length vectors")
    n = x.size
    if n < 3:
        raise MetricError("need at least 3 paired observations")
    out = {"n": n}
    for name, (a, b) in (("pearson", (x, y)),
                         ("spearman", (stats.rankdata(x), stats.rankdata(y)))):
        rho = _pearson(a, b)
        if rho is None:
            raise MetricError("constant input; correlation is undefined")
        out[name] = rho
        out[f"{name}_p"] = _t_pvalue(rho, n)
    return out


def _t_pvalue(rho: float, n: int) -> float:
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    return float(2.0 * stats.t.sf(abs(t), n - 2))
