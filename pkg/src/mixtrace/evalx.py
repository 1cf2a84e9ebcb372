"""Pair scoring and the evaluation metric suite."""

from __future__ import annotations

import enum
import io
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError
from .ndcore import sigmoid_array

METRICS = ("auc", "recall", "precision", "f1", "mrr", "fpr", "fnr")


class Similarity(enum.Enum):
    INNER_PRODUCT = "inner"
    COSINE = "cosine"


def link_probability(zi, zj, scale: float = 1.0, mode: Similarity | str = Similarity.INNER_PRODUCT):
    """``sigmoid(scale * sim(z_i, z_j))`` row-wise; a zero vector has cosine 0."""
    mode = Similarity(mode)
    zi, zj = np.atleast_2d(zi).astype(float), np.atleast_2d(zj).astype(float)
    if zi.shape != zj.shape:
        raise ValidationError(f"embedding shapes differ: {zi.shape} vs {zj.shape}")
    sim = np.einsum("ij,ij->i", zi, zj)
    if mode is Similarity.COSINE:
        norm = np.linalg.norm(zi, axis=1) * np.linalg.norm(zj, axis=1)
        sim = np.divide(sim, norm, out=np.zeros_like(sim), where=norm > 0)
    p = sigmoid_array(scale * sim)
    return p if p.size > 1 else float(p[0])


def _check_classes(labels, metric):
    labels = np.asarray(labels)
    if not (labels == 1).any() or not (labels == 0).any():
        raise UndefinedMetricError(metric, "needs at least one positive and one negative")
    return labels


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores earn half credit."""
    labels = _check_classes(labels, "auc")
    scores = np.asarray(scores, dtype=float)
    ranks = rankdata(scores)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold_metrics(scores, labels, threshold: float = 0.5) -> dict:
    labels = np.asarray(labels)
    try:
        _check_classes(labels, "recall")
    except UndefinedMetricError:
        metric = "recall" if not (labels == 1).any() else "fpr"
        raise UndefinedMetricError(metric, "needs at least one positive and one negative")
    pred = np.asarray(scores, dtype=float) >= threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    tn = int((~pred & ~pos).sum())
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"recall": recall, "precision": precision, "f1": f1,
            "fpr": fp / (fp + tn), "fnr": fn / (fn + tp),
            "tp": tp, "fp": fp, "fn": fn, "tn": tn}


def mrr_from_ranks(ranks) -> float:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise UndefinedMetricError("mrr", "no queries")
    inv = np.where(np.isfinite(ranks), 1.0 / ranks, 0.0)
    return float(inv.mean())


def query_rank(pos_score: float, neg_scores) -> int:
    """1-based rank of the positive among its negatives; ties count against it."""
    return 1 + int((np.asarray(neg_scores, dtype=float) >= pos_score).sum())


def mrr(queries) -> float:
    """``queries`` is a list of (scores, relevance) pairs; the reciprocal rank of
    the first relevant candidate is averaged. A query without any relevant
    candidate contributes 0."""
    ranks = []
    for scores, rel in queries:
        scores, rel = np.asarray(scores, dtype=float), np.asarray(rel, dtype=bool)
        if scores.size == 0:
            raise ValidationError("mrr query without candidates")
        if not rel.any():
            ranks.append(np.inf)
            continue
        # stable descending order; among equal scores irrelevant ones come first
        order = np.lexsort((rel, -scores))
        ranks.append(1 + int(np.argmax(rel[order])))
    return mrr_from_ranks(ranks)


@dataclass
class PredictionReport:
    pairs: np.ndarray                # (P, 2) node indices
    scores: np.ndarray               # head probabilities
    labels: np.ndarray
    ranks: np.ndarray                # per positive query
    threshold: float = 0.5
    metrics: dict = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)  # same suite for the embedding scorer

    def to_json(self, **extra) -> dict:
        return {**extra, "threshold": self.threshold, "metrics": self.metrics,
                "similarity_metrics": self.similarity, "num_pairs": int(len(self.labels))}

    def scores_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "score", "label"])
        for (i, j), s, y in zip(self.pairs.tolist(), self.scores.tolist(), self.labels.tolist()):
            w.writerow([i, j, repr(float(s)), int(y)])
        return buf.getvalue()


def metric_suite(scores, labels, ranks, threshold: float = 0.5) -> dict:
    out = {"auc": auc(scores, labels), "mrr": mrr_from_ranks(ranks)}
    tm = threshold_metrics(scores, labels, threshold)
    out.update({k: tm[k] for k in ("recall", "precision", "f1", "fpr", "fnr")})
    return {k: out[k] for k in METRICS}
