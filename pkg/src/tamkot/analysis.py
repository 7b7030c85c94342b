"""Rank-based comparison of learned transfer matrices and knowledge-state export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .data import StudentSequence
from .errors import DegenerateTestError
from .evaluation import average_ranks
from .model import GATES, TRANSITIONS, ModelParams, encode_batch, forward_batch

EXACT_MAX_N = 25


def zscore_normalize(m) -> np.ndarray:
    """Shift and scale all entries to mean 0 and (population) std 1."""
    m = np.asarray(m, dtype=float)
    if m.size < 2:
        raise DegenerateTestError("z-score needs at least two entries")
    std = m.std()
    if std == 0 or not np.isfinite(std):
        raise DegenerateTestError("z-score of a constant matrix")
    return (m - m.mean()) / std


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign patterns giving each value of 2*W+ (subset-sum recurrence)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts += shifted
    return counts


def wilcoxon_signed_rank(x, y, method: str = "auto") -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on ``x - y``.

    Zero differences are dropped, absolute differences get average ranks,
    and the statistic is ``W = min(W+, W-)``. The p-value is exact (the
    signed-rank null distribution for the observed ranks, ties included)
    for ``n <= 25`` and otherwise uses the tie-corrected normal
    approximation with continuity correction. ``method`` may force
    ``"exact"`` or ``"approx"``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    diff = x - y
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    if n < 5:
        raise DegenerateTestError(f"need at least 5 non-zero differences, got {n}")
    ranks = average_ranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    w = min(w_plus, w_minus)

    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        counts = _signed_rank_counts(np.rint(2 * ranks).astype(np.int64))
        tail = counts[: int(round(2 * w)) + 1].sum()
        p = 2.0 * tail / 2.0 ** n
    elif method == "approx":
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes ** 3 - tie_sizes) / 48.0
        z = (w - mean + 0.5) / math.sqrt(var)
        p = 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0))
    else:
        raise ValueError(f"unknown method {method!r}")
    return w, float(min(1.0, p))


def spearman(x, y) -> tuple[float, float]:
    """Spearman's rho with a two-sided p-value from the t approximation (n-2 df)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"samples must be equal-length vectors, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 3:
        raise DegenerateTestError(f"Spearman needs at least 3 pairs, got {n}")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        raise DegenerateTestError("one of the samples has constant ranks")
    rho = float(np.clip((rx @ ry) / denom, -1.0, 1.0))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * special.stdtr(n - 2, -abs(t)))


@dataclass
class TransferReport:
    gate: str
    pair: tuple[str, str]
    wilcoxon_W: float
    wilcoxon_p: float
    spearman_rho: float
    spearman_p: float
    zscored_matrices: tuple[np.ndarray, np.ndarray]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pair"] = list(self.pair)
        d["zscored_matrices"] = [m.tolist() for m in self.zscored_matrices]
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TransferReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d["pair"] = tuple(d["pair"])
        d["zscored_matrices"] = tuple(np.asarray(m) for m in d["zscored_matrices"])
        return cls(**d)


def compare_matrices(a, b, gate: str = "f", pair: tuple[str, str] = ("QL", "LQ")) -> TransferReport:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"matrices differ in shape: {a.shape} vs {b.shape}")
    w, wp = wilcoxon_signed_rank(a.ravel(), b.ravel())
    rho, rp = spearman(a.ravel(), b.ravel())
    return TransferReport(gate, tuple(pair), w, wp, rho, rp, (zscore_normalize(a), zscore_normalize(b)))


def compare_transfer_matrices(params: ModelParams, gate: str = "f",
                              pair: tuple[str, str] = ("QL", "LQ")) -> TransferReport:
    """Compare two transition matrices of one gate (row-major flattened)."""
    if gate not in GATES:
        raise ValueError(f"gate must be one of {GATES}, got {gate!r}")
    for tr in pair:
        if tr not in TRANSITIONS:
            raise ValueError(f"transition must be one of {TRANSITIONS}, got {tr!r}")
    a = params.transfer(gate, pair[0]).value
    b = params.transfer(gate, pair[1]).value
    return compare_matrices(a, b, gate, pair)


def knowledge_state_trajectory(params: ModelParams, seq: StudentSequence,
                               assessed_ids: Sequence[int]) -> np.ndarray:
    """Predicted success on each of ``assessed_ids`` after every real step.

    Row ``j`` belongs to ``assessed_ids[j]``; column ``t`` is the snapshot
    taken right after the ``t``-th non-padding activity. The whole sequence
    is unrolled in one piece.
    """
    ids = np.asarray(assessed_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= params.Q):
        bad = int(ids.min() if ids.min() < 0 else ids.max())
        raise IndexError(f"problem id {bad} out of range for Q={params.Q}")
    batch = encode_batch([seq], params.Q, params.L)
    res = forward_batch(batch, params, keep_hidden=True)
    real = batch.valid[0]
    hidden = np.array([h[0] for h, ok in zip(res.hidden, real) if ok]).reshape(-1, params.hyper.d_h)
    d_h = params.hyper.d_h
    w_p = params["W_p"].value
    item_term = params["A_q"].value[ids] @ w_p[d_h:]
    logits = hidden @ w_p[:d_h]
    return special.expit(item_term[:, None] + logits[None, :] + params["b_p"].value)


def _check_path(path) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"cannot write {path}: directory {path.parent} does not exist")
    return path


def export_heatmap_csv(matrix, path) -> None:
    """Write a matrix as CSV with column indices in the header and row indices first."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"heatmap needs a matrix, got shape {m.shape}")
    path = _check_path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + list(range(m.shape[1])))
            for i, row in enumerate(m):
                w.writerow([i] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_heatmap_csv(path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, -1)


def export_trajectory_csv(matrix, path, row_labels: Sequence[str], col_labels: Sequence[str]) -> None:
    """Write a knowledge-state matrix; rows are problems, columns activities."""
    m = np.asarray(matrix, dtype=float)
    path = _check_path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["problem"] + list(col_labels))
        for label, row in zip(row_labels, m):
            w.writerow([label] + [repr(float(v)) for v in row])
