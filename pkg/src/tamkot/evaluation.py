"""Prediction metrics, paired t-test and the student-level cross-validation driver."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .data import Dataset, chunk_dataset, split_validation, stratified_folds
from .errors import DegenerateTestError, UndefinedMetricError
from .model import EncodedBatch, Hyperparams, ModelParams, encode_batch, forward_batch


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (ties count 1/2)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length vectors, got {scores.shape} and {labels.shape}")
    if np.any((labels != 0) & (labels != 1)):
        raise UndefinedMetricError("AUC needs binary labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rmse(preds, targets) -> float:
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.shape != targets.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {targets.shape}")
    if preds.size == 0:
        raise UndefinedMetricError("RMSE of an empty prediction set")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test on ``a - b``; returns ``(t, p)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length vectors")
    n = len(a)
    if n < 2:
        raise DegenerateTestError("paired t-test needs at least two pairs")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateTestError("differences have zero variance")
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * special.stdtr(n - 1, -abs(t))
    return float(t), float(min(1.0, p))


def collect_predictions(params: ModelParams, batch: EncodedBatch, exclude_cold_start: bool = False,
                        batch_size: int = 256):
    """Pool every emitted prediction of ``batch`` (no gradients recorded).

    Returns ``(scores, targets, student_ids)`` as flat arrays in row-major
    (chunk, time) order.
    """
    scores, targets, owners = [], [], []
    B = batch.shape[0]
    for lo in range(0, B, batch_size):
        rows = np.arange(lo, min(B, lo + batch_size))
        sub = EncodedBatch(batch.d[rows], batch.qid[rows], batch.lid[rows], batch.resp[rows],
                           batch.valid[rows], [batch.student_ids[i] for i in rows])
        res = forward_batch(sub, params)
        keep = res.mask & ~res.cold_start if exclude_cold_start else res.mask
        scores.append(res.predictions.value[keep])
        targets.append(res.targets[keep])
        owners.extend(np.repeat(np.array(sub.student_ids, dtype=object), keep.sum(axis=1)))
    return np.concatenate(scores), np.concatenate(targets), np.array(owners, dtype=object)


def evaluate(params: ModelParams, dataset: Dataset, student_ids=None, exclude_cold_start: bool = False) -> dict:
    """Pooled AUC (when defined) and RMSE over the given students."""
    chunks = chunk_dataset(dataset, params.hyper.seq_len, student_ids)
    if not chunks:
        return {"n_predictions": 0, "students": []}
    scores, targets, owners = collect_predictions(
        params, encode_batch(chunks, dataset.Q, dataset.L), exclude_cold_start)
    out = {"n_predictions": int(len(scores)), "students": sorted(set(owners))}
    if len(scores):
        out["rmse"] = rmse(scores, targets)
        try:
            out["auc"] = auc(scores, targets)
        except UndefinedMetricError:
            pass
    return out


@dataclass
class FoldMetrics:
    fold_index: int
    metric_name: str
    value: float
    n_predictions: int


@dataclass
class CrossValResult:
    folds: list[FoldMetrics]
    summary: dict[str, tuple[float, float]]
    # (train ids, evaluated ids) per fold, kept for leakage audits
    audit: list[tuple[list[str], list[str]]] = field(default_factory=list)

    def values(self, metric: str) -> list[float]:
        return [f.value for f in self.folds if f.metric_name == metric]


def summarize(folds: Sequence[FoldMetrics]) -> dict[str, tuple[float, float]]:
    out = {}
    for name in sorted({f.metric_name for f in folds}):
        vals = np.array([f.value for f in folds if f.metric_name == name])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[name] = (float(vals.mean()), std)
    return out


def cross_validate(dataset: Dataset, hyper: Hyperparams, k: int = 5, seed: int = 0,
                   exclude_cold_start: bool = False, validation_fraction: float = 0.0) -> CrossValResult:
    """Train on each fold's 80 % of students and score its held-out students."""
    from .training import train

    folds = []
    audit = []
    for i, (train_ids, test_ids) in enumerate(stratified_folds(dataset, k, seed)):
        valid_ids = None
        if validation_fraction > 0:
            train_ids, valid_ids = split_validation(train_ids, validation_fraction, seed + i)
        params, _ = train(dataset, hyper, train_ids, valid_ids)
        res = evaluate(params, dataset, test_ids, exclude_cold_start)
        audit.append((list(train_ids), res["students"]))
        for name in ("auc", "rmse"):
            if name in res:
                folds.append(FoldMetrics(i, name, res[name], res["n_predictions"]))
    return CrossValResult(folds, summarize(folds), audit)


def write_metrics_report(result: CrossValResult, path) -> None:
    """CSV with one row per (fold, metric) and mean/std rows per metric."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fold", "metric", "value", "n_predictions"))
        for f in result.folds:
            w.writerow((f.fold_index, f.metric_name, repr(f.value), f.n_predictions))
        for name, (mean, std) in result.summary.items():
            w.writerow(("mean", name, repr(mean), ""))
            w.writerow(("std", name, repr(std), ""))


def read_metrics_report(path) -> CrossValResult:
    folds, summary = [], {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["fold"] in ("mean", "std"):
                mean, std = summary.get(row["metric"], (math.nan, math.nan))
                v = float(row["value"])
                summary[row["metric"]] = (v, std) if row["fold"] == "mean" else (mean, v)
            else:
                folds.append(FoldMetrics(int(row["fold"]), row["metric"], float(row["value"]),
                                         int(row["n_predictions"])))
    return CrossValResult(folds, summary)
