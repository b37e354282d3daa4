"""Accuracy-matrix bookkeeping, continual-learning metrics and significance tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class MetricStateError(RuntimeError):
    """A metric was requested before the accuracy matrix holds what it needs."""


class AccuracyMatrix:
    """Lower-triangular record ``a[l][i]``: accuracy on position i after episode l.

    Indices are 1-based training positions.  Row ``l`` holds entries
    ``1..l`` and is written exactly once.
    """

    def __init__(self, n_domains: int):
        if n_domains < 1:
            raise ValueError("need at least one domain")
        self.D = n_domains
        self._a = np.full((n_domains, n_domains), np.nan)
        self._written = [False] * n_domains

    def set_row(self, episode: int, accuracies: Sequence[float]) -> None:
        if not 1 <= episode <= self.D:
            raise ValueError(f"episode {episode} outside 1..{self.D}")
        if self._written[episode - 1]:
            raise MetricStateError(f"row {episode} already written")
        if len(accuracies) != episode:
            raise ValueError(f"row {episode} needs {episode} entries, got {len(accuracies)}")
        vals = np.asarray(accuracies, dtype=float)
        if np.any((vals < 0) | (vals > 1)) or not np.all(np.isfinite(vals)):
            raise ValueError("accuracies must lie in [0, 1]")
        self._a[episode - 1, :episode] = vals
        self._written[episode - 1] = True

    def get(self, l: int, i: int) -> float:
        if not (1 <= i <= l <= self.D) or not self._written[l - 1]:
            raise MetricStateError(f"a[{l}][{i}] is undefined")
        return float(self._a[l - 1, i - 1])

    def row(self, l: int) -> list[float]:
        return [self.get(l, i) for i in range(1, l + 1)]

    @property
    def complete(self) -> bool:
        return all(self._written)

    def as_array(self) -> np.ndarray:
        return self._a.copy()

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        m = cls(len(rows))
        for l, r in enumerate(rows, start=1):
            m.set_row(l, list(r)[:l])
        return m

    def _require(self, rows: Iterable[int]) -> None:
        missing = [l for l in rows if not self._written[l - 1]]
        if missing:
            raise MetricStateError(f"accuracy matrix rows {missing} not written")


def acc(m: AccuracyMatrix) -> float:
    """Mean final accuracy over all domains."""
    m._require([m.D])
    return float(sum(m.get(m.D, i) for i in range(1, m.D + 1)) / m.D)


def la(m: AccuracyMatrix) -> float:
    """Mean accuracy on each domain right after it was learned."""
    m._require(range(1, m.D + 1))
    return float(sum(m.get(i, i) for i in range(1, m.D + 1)) / m.D)


def fm(m: AccuracyMatrix) -> float:
    """Mean over earlier domains of the largest drop from any intermediate row to the final row.

    Rows ``l < i`` hold no entry for domain ``i`` and are skipped.
    """
    if m.D < 2:
        raise MetricStateError("forgetting needs at least two domains")
    m._require(range(1, m.D + 1))
    total = 0.0
    for i in range(1, m.D):
        final = m.get(m.D, i)
        total += max(m.get(l, i) - final for l in range(i, m.D))
    return float(total / (m.D - 1))


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    degenerate_precision: np.ndarray
    degenerate_recall: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    def to_dict(self) -> dict:
        return {
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf(confusion: np.ndarray) -> ClassReport:
    """Per-class precision/recall/F1 from a confusion matrix (rows true, columns predicted).

    0/0 ratios are reported as 0 and flagged.
    """
    c = np.asarray(confusion, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or np.any(c < 0):
        raise ValueError("confusion must be a square non-negative matrix")
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    f1 = np.array([f1_score(p, r) for p, r in zip(precision, recall)])
    return ClassReport(precision, recall, f1, predicted == 0, actual == 0)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    c = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(c, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return c


# -- Wilcoxon signed-rank ------------------------------------------------------


def _signed_rank_null(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each attainable doubled W+ over all 2^n sign patterns."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def paired_test(a: Sequence[float], b: Sequence[float], exact_max_n: int = 20) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped.  Up to ``exact_max_n`` non-zero pairs the
    exact null distribution is enumerated (tie-averaged ranks included);
    beyond that a tie-corrected normal approximation is used.  If every
    difference is zero the p-value is 1.
    """
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    if len(x) < 5:
        raise ValueError("need at least 5 pairs")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_null(doubled)
        total = 2**n
        w2 = int(round(2 * w_plus))
        lower = sum(counts[: w2 + 1])
        upper = sum(counts[w2:])
        p = 2 * min(lower, upper) / total
        return float(min(1.0, p))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(min(1.0, math.erfc(abs(z) / math.sqrt(2.0))))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


# -- run results and aggregation -----------------------------------------------


@dataclass
class RunResult:
    seed: int
    acc: float
    la: float
    fm: float | None
    per_domain_final: dict[int, float] = field(default_factory=dict)
    per_domain_prf: dict[int, dict] = field(default_factory=dict)
    matrix: list[list[float]] = field(default_factory=list)
    failed: str | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "acc": self.acc,
            "la": self.la,
            "fm": self.fm,
            "per_domain_final": {str(k): v for k, v in self.per_domain_final.items()},
            "per_domain_prf": {str(k): v for k, v in self.per_domain_prf.items()},
            "matrix": self.matrix,
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(
            seed=d["seed"],
            acc=d["acc"],
            la=d["la"],
            fm=d["fm"],
            per_domain_final={int(k): v for k, v in d.get("per_domain_final", {}).items()},
            per_domain_prf={int(k): v for k, v in d.get("per_domain_prf", {}).items()},
            matrix=d.get("matrix", []),
            failed=d.get("failed"),
        )


def run_metrics(m: AccuracyMatrix) -> tuple[float, float, float | None]:
    return acc(m), la(m), (fm(m) if m.D >= 2 else None)


def aggregate(results: Sequence[RunResult]) -> dict[str, dict[str, float | int | None]]:
    """Mean and sample std of ACC/LA/FM over successful runs."""
    ok = [r for r in results if r.failed is None]
    out: dict[str, dict[str, float | int | None]] = {}
    for name in ("acc", "la", "fm"):
        vals = [getattr(r, name) for r in ok if getattr(r, name) is not None]
        if not vals:
            out[name] = {"mean": None, "std": None, "n": 0}
            continue
        arr = np.array(vals, dtype=float)
        out[name] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
            "n": len(arr),
        }
    return out


def write_accuracy_csv(path: str | Path, rows: Iterable[tuple[int, int, int, float]]) -> None:
    """One line per (seed, episode, eval position, accuracy)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "episode", "position", "accuracy"])
        for seed, episode, pos, value in rows:
            writer.writerow([seed, episode, pos, repr(float(value))])


def read_accuracy_csv(path: str | Path) -> dict[int, AccuracyMatrix]:
    """Rebuild one accuracy matrix per seed from an accuracy log."""
    cells: dict[int, dict[int, dict[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            cells.setdefault(int(row["seed"]), {}).setdefault(int(row["episode"]), {})[int(row["position"])] = float(
                row["accuracy"]
            )
    out = {}
    for seed, episodes in cells.items():
        n = max(episodes)
        m = AccuracyMatrix(n)
        for l in sorted(episodes):
            m.set_row(l, [episodes[l][i] for i in range(1, l + 1)])
        out[seed] = m
    return out
