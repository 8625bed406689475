"""Imbalance-aware classification metrics and multi-seed aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, EmptyError, LabelError

COMPOUND_RADICES = (2, 2, 3, 3)


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DomainError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise DomainError("confusion matrix has negative entries")
        if not self.classes:
            self.classes = tuple(str(i) for i in range(self.counts.shape[0]))

    @classmethod
    def from_labels(cls, truth, pred, n_classes: int, classes: Sequence[str] = ()) -> ConfusionMatrix:
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if truth.shape != pred.shape:
            raise DomainError("truth and prediction lengths differ")
        for arr in (truth, pred):
            if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
                raise LabelError(f"class index outside [0, {n_classes})")
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (truth, pred), 1)
        return cls(cm, tuple(classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_f1(self) -> np.ndarray:
        """F1 per class; NaN for classes with no true samples."""
        tp = np.diag(self.counts).astype(np.float64)
        support = self.counts.sum(axis=1)
        predicted = self.counts.sum(axis=0)
        denom = support + predicted  # 2TP + FP + FN
        f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
        return np.where(support > 0, f1, np.nan)

    def accuracy(self) -> float:
        if self.total == 0:
            raise EmptyError("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)


def macro_f1(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyError("macro F1 of an empty confusion matrix")
    return float(np.nanmean(cm.per_class_f1()))


def macro_f1_score(truth, pred, n_classes: int) -> float:
    return macro_f1(ConfusionMatrix.from_labels(truth, pred, n_classes))


def imbalance_ratio(counts) -> float:
    c = np.asarray(counts, dtype=np.float64)
    if c.size == 0:
        raise EmptyError("no class counts")
    if (c <= 0).any():
        raise DomainError("imbalance ratio needs every included class count >= 1")
    return float(c.max() / c.min())


def aggregate_compound(irf, orf, mis, unb) -> np.ndarray | int:
    """Mixed-radix compound index ``((irf*2 + orf)*3 + mis)*3 + unb``.

    Accepts scalars or equally shaped integer arrays.
    """
    parts = [np.asarray(v, dtype=np.int64) for v in (irf, orf, mis, unb)]
    for v, r, name in zip(parts, COMPOUND_RADICES, ("irf", "orf", "misalignment", "unbalance")):
        if v.size and (v.min() < 0 or v.max() >= r):
            raise LabelError(f"{name} index outside [0, {r})")
    out = ((parts[0] * 2 + parts[1]) * 3 + parts[2]) * 3 + parts[3]
    return int(out) if out.ndim == 0 else out


def split_compound(index) -> tuple:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= 36):
        raise LabelError("compound index outside [0, 36)")
    unb = idx % 3
    mis = (idx // 3) % 3
    orf = (idx // 9) % 2
    irf = idx // 18
    if idx.ndim == 0:
        return int(irf), int(orf), int(mis), int(unb)
    return irf, orf, mis, unb


@dataclass(frozen=True)
class RankRow:
    architecture: str
    score: float
    rank: int


def rank_table(scores: Mapping[str, float]) -> list[RankRow]:
    """Sort by score descending; dense ranks, ties share the better rank."""
    if len(scores) < 2:
        raise DomainError("ranking needs at least two architectures")
    for k, v in scores.items():
        if v is None or math.isnan(v):
            raise DomainError(f"score for {k!r} is NaN")
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    rows, rank, prev = [], 0, None
    for name, s in ordered:
        if s != prev:
            rank += 1
            prev = s
        rows.append(RankRow(name, float(s), rank))
    return rows


@dataclass
class RunReport:
    """Per-(architecture, seed, metric) scores plus seed means and ranks."""

    benchmark: str
    seeds: list[int]
    scores: dict[str, dict[int, dict[str, float]]] = field(default_factory=dict)
    headline: str = "macro_f1"
    failures: dict[str, str] = field(default_factory=dict)

    def add(self, arch: str, seed: int, metrics: Mapping[str, float]) -> None:
        self.scores.setdefault(arch, {})[seed] = dict(metrics)

    def mean(self, arch: str, metric: str | None = None) -> float:
        metric = metric or self.headline
        per_seed = self.scores.get(arch, {})
        missing = [s for s in self.seeds if s not in per_seed or metric not in per_seed[s]]
        if missing:  # incomplete seeds, or a metric this architecture does not produce
            return float("nan")
        return float(np.mean([per_seed[s][metric] for s in self.seeds]))

    def metrics(self) -> list[str]:
        names: list[str] = []
        for per_seed in self.scores.values():
            for m in per_seed.values():
                names.extend(k for k in m if k not in names)
        return names

    def means(self, metric: str | None = None) -> dict[str, float]:
        return {a: self.mean(a, metric) for a in self.scores}

    def ranks(self, metric: str | None = None) -> list[RankRow]:
        complete = {a: v for a, v in self.means(metric).items() if not math.isnan(v)}
        return rank_table(complete)

    def to_text(self) -> str:
        lines = [f"benchmark = {self.benchmark}", f"seeds = {','.join(map(str, self.seeds))}",
                 f"headline = {self.headline}", ""]
        lines.append("[per_seed]")
        for a, per_seed in self.scores.items():
            for s in sorted(per_seed):
                for m, v in per_seed[s].items():
                    lines.append(f"{a}.seed{s}.{m} = {v:.6f}")
        lines += ["", "[mean]"]
        for m in self.metrics():
            for a, v in self.means(m).items():
                if not math.isnan(v):
                    lines.append(f"{a}.{m} = {v:.6f}")
        if len(self.scores) >= 2:
            lines += ["", "[rank]"]
            for r in self.ranks():
                lines.append(f"{r.architecture} = {r.rank} ({r.score:.6f})")
        if self.failures:
            lines += ["", "[failures]"]
            lines += [f"{k} = {v}" for k, v in self.failures.items()]
        return "\n".join(lines) + "\n"
