"""Pair-classification metrics: accuracy, AUC, precision, recall.

The positive class is "similar" (label 0) scored by s = 1 - d; a pair is
predicted similar iff d < threshold. Accuracy does not depend on which class
is called positive, precision and recall do.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class EvaluationReport:
    n_pairs: int
    accuracy: float
    auc: float | None
    precision: float
    recall: float
    threshold: float
    positive_class: str = "similar"
    average: str = "binary"
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def rank_auc(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float | None:
    """Mann-Whitney AUC from mid-ranks (ties count half)."""
    pos, neg = np.asarray(scores_pos, dtype=float), np.asarray(scores_neg, dtype=float)
    n_pos, n_neg = len(pos), len(neg)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _precision_recall(pred_pos: np.ndarray, true_pos: np.ndarray) -> tuple[float, float]:
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    # zero-denominator convention: 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def evaluate_scores(d: Sequence[float], labels: Sequence[int], threshold: float = 0.5,
                    average: str = "binary") -> EvaluationReport:
    """Metrics from model outputs ``d`` and pair labels (0 = similar).

    ``average="macro"`` reports the unweighted mean of per-class precision and
    recall over {similar, dissimilar}.
    """
    d = np.asarray(d, dtype=float)
    y = np.asarray(labels, dtype=int)
    if len(d) == 0 or len(d) != len(y):
        raise ValueError("need one label per score and at least one pair")
    if average not in ("binary", "macro"):
        raise ValueError(f"unknown average {average!r}")
    scores = 1.0 - d
    pred_similar = d < threshold
    true_similar = y == 0
    accuracy = float(np.mean(pred_similar == true_similar))
    if average == "binary":
        precision, recall = _precision_recall(pred_similar, true_similar)
    else:
        p1, r1 = _precision_recall(pred_similar, true_similar)
        p2, r2 = _precision_recall(~pred_similar, ~true_similar)
        precision, recall = (p1 + p2) / 2.0, (r1 + r2) / 2.0
    auc = rank_auc(scores[true_similar], scores[~true_similar])
    note = "" if auc is not None else "AUC undefined: all pairs share one label"
    return EvaluationReport(len(d), accuracy, auc, precision, recall, threshold,
                            average=average, note=note)


def evaluate(model, pairs, threshold: float = 0.5, cache=None, average: str = "binary") -> EvaluationReport:
    from .data import ImageCache
    from .train import predict_pairs

    if not pairs:
        raise ValueError("no pairs to evaluate")
    cache = cache or ImageCache(model.config.image_size)
    d = predict_pairs(model, pairs, cache)
    return evaluate_scores(d, [p.label for p in pairs], threshold, average)


def format_table(reports: dict[str, EvaluationReport]) -> str:
    """Rows of Dataset | Accuracy | AUC | Precision | Recall."""
    lines = [f"{'Dataset':<12}| {'Accuracy':>9} {'AUC':>7} {'Precision':>10} {'Recall':>7}",
             "-" * 12 + "+" + "-" * 37]
    for name, r in reports.items():
        auc = "n/a" if r.auc is None else f"{r.auc:.3f}"
        lines.append(f"{name:<12}| {100 * r.accuracy:>8.2f}% {auc:>7} {r.precision:>10.3f} {r.recall:>7.3f}")
    return "\n".join(lines)
