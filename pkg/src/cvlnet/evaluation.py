"""Accuracy, AUROC and average-decision ensembling over prediction files.

Prediction files are CSV with the header ``id,proba,label``; ``label`` may
be empty for unlabeled samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import AlignmentError, ContractError, FormatError, UndefinedMetricError, ValidationError


@dataclass
class PredictionSet:
    ids: list[str]
    scores: np.ndarray
    labels: list[int | None]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("prediction ids must be unique")
        if len(self.ids) != len(self.scores) or len(self.ids) != len(self.labels):
            raise ValidationError("ids, scores and labels must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("prediction scores must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_batch(cls, batch, scores) -> "PredictionSet":
        labels = [None] * len(batch) if batch.labels is None else [None if l < 0 else int(l) for l in batch.labels]
        return cls(list(batch.ids), scores, labels)

    def labeled(self) -> bool:
        return all(l is not None for l in self.labels)

    def label_array(self) -> np.ndarray:
        if not self.labeled():
            missing = [i for i, l in zip(self.ids, self.labels) if l is None]
            raise ContractError(f"unlabeled samples: {missing[:5]}")
        return np.asarray(self.labels, dtype=np.int64)


@dataclass
class MetricsReport:
    accuracy: float
    auroc: float | None
    n: int
    n_pos: int
    n_neg: int

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("n", str(self.n)),
            ("n_pos", str(self.n_pos)),
            ("n_neg", str(self.n_neg)),
            ("accuracy", repr(self.accuracy)),
            ("auroc", "undefined" if self.auroc is None else repr(self.auroc)),
        ]


def accuracy(preds: PredictionSet, threshold: float = 0.5) -> float:
    """Fraction of samples where ``score >= threshold`` agrees with the label."""
    labels = preds.label_array()
    if labels.size == 0:
        raise ContractError("accuracy of an empty prediction set")
    return float(np.mean((preds.scores >= threshold).astype(np.int64) == labels))


def _check_classes(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")
    return n_pos, n_neg


def auroc(preds: PredictionSet) -> float:
    """Mann-Whitney estimate with midranks for ties."""
    labels = preds.label_array()
    n_pos, n_neg = _check_classes(labels)
    ranks = rankdata(preds.scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairwise(preds: PredictionSet) -> float:
    """O(n^2) reference: fraction of (pos, neg) pairs ranked correctly, ties half."""
    labels = preds.label_array()
    n_pos, n_neg = _check_classes(labels)
    pos = preds.scores[labels == 1]
    neg = preds.scores[labels == 0]
    credit = 0.0
    for s in pos:
        for t in neg:
            credit += 1.0 if s > t else 0.5 if s == t else 0.0
    return credit / (n_pos * n_neg)


def evaluate(preds: PredictionSet, threshold: float = 0.5) -> MetricsReport:
    labels = preds.label_array()
    n_pos, n_neg = int(np.sum(labels == 1)), int(np.sum(labels == 0))
    try:
        area = auroc(preds)
    except UndefinedMetricError:
        area = None
    return MetricsReport(accuracy(preds, threshold), area, len(preds), n_pos, n_neg)


def ensemble_average(model_preds: Sequence[PredictionSet]) -> PredictionSet:
    """Per-id unweighted mean of member scores, in the first member's id order."""
    if not model_preds:
        raise ContractError("ensemble needs at least one prediction set")
    first = model_preds[0]
    reference = set(first.ids)
    for k, member in enumerate(model_preds[1:], 1):
        if set(member.ids) != reference:
            diff = sorted(reference.symmetric_difference(member.ids))
            raise AlignmentError(f"member {k} ids differ from member 0: {diff[:10]}")
    lookups = [dict(zip(p.ids, p.scores)) for p in model_preds]
    label_of = {}
    for p in model_preds:
        for i, l in zip(p.ids, p.labels):
            if l is not None:
                label_of.setdefault(i, l)
    scores = []
    for i in first.ids:
        values = [float(lk[i]) for lk in lookups]
        # fsum is exactly rounded, so the mean does not depend on member order
        scores.append(values[0] if all(v == values[0] for v in values) else math.fsum(values) / len(values))
    return PredictionSet(list(first.ids), np.array(scores), [label_of.get(i) for i in first.ids])


def write_predictions(path, preds: PredictionSet) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "proba", "label"])
        for i, s, l in zip(preds.ids, preds.scores, preds.labels):
            writer.writerow([i, repr(float(s)), "" if l is None else l])


def load_predictions(path) -> PredictionSet:
    ids, scores, labels = [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "proba"]:
            raise FormatError(f"{path}: expected header id,proba[,label], got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                score = float(row[1])
                label = row[2].strip() if len(row) > 2 else ""
                label = int(label) if label else None
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed prediction row ({exc})") from None
            if not 0.0 <= score <= 1.0:
                raise FormatError(f"{path}:{lineno}: proba {score} outside [0, 1]")
            if label not in (None, 0, 1):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1")
            ids.append(row[0])
            scores.append(score)
            labels.append(label)
    return PredictionSet(ids, np.array(scores), labels)
