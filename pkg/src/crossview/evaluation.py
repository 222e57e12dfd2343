"""Top-1 accuracy, multi-label mAP and exact cosine retrieval."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError

log = logging.getLogger(__name__)


def top1_accuracy(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape != gold.shape or pred.ndim != 1:
        raise ParameterError(f"prediction/gold shapes differ: {pred.shape} vs {gold.shape}")
    if pred.size == 0:
        raise ParameterError("accuracy over an empty set is undefined")
    return float(np.mean(pred == gold))


def _gold_matrix(gold, n, n_classes):
    if isinstance(gold, np.ndarray) and gold.ndim == 2:
        if gold.shape != (n, n_classes):
            raise ParameterError(f"gold matrix {gold.shape} does not match scores ({n}, {n_classes})")
        return gold.astype(bool)
    if len(gold) != n:
        raise ParameterError(f"{len(gold)} gold label sets for {n} score rows")
    mat = np.zeros((n, n_classes), dtype=bool)
    for i, labels in enumerate(gold):
        for c in labels:
            if not 0 <= int(c) < n_classes:
                raise ParameterError(f"gold label {c} out of range")
            mat[i, int(c)] = True
    return mat


def average_precision(scores, positives) -> float:
    """AP of one ranking: mean precision at the rank of each positive.
    Ties in ``scores`` are broken by lower index first."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    if not hits.any():
        raise ParameterError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


@dataclass
class MAPReport:
    value: float
    per_class: dict[int, float]
    skipped: list[int]

    def to_json(self):
        return {
            "mAP": self.value,
            "per_class_ap": {str(c): ap for c, ap in self.per_class.items()},
            "skipped_classes": self.skipped,
        }


def map_report(scores, gold) -> MAPReport:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ParameterError("scores must be a non-empty N x C matrix")
    n, n_classes = scores.shape
    pos = _gold_matrix(gold, n, n_classes)
    per_class, skipped = {}, []
    for c in range(n_classes):
        if not pos[:, c].any():
            skipped.append(c)
            continue
        per_class[c] = average_precision(scores[:, c], pos[:, c])
    if not per_class:
        raise ParameterError("no class has a positive example")
    if skipped:
        log.warning("mAP: skipped %d class(es) without positives: %s", len(skipped), skipped)
    return MAPReport(float(np.mean(list(per_class.values()))), per_class, skipped)


def mean_average_precision(scores, gold) -> float:
    """Mean over classes of per-class AP; ``gold`` is an N x C indicator
    matrix or a list of N label collections."""
    return map_report(scores, gold).value


@dataclass
class RetrievalResult:
    indices: np.ndarray  # (Q, k)
    similarities: np.ndarray  # (Q, k)

    def to_json(self, query_ids=None, gallery_ids=None):
        out = []
        for q in range(self.indices.shape[0]):
            hits = []
            for i, s in zip(self.indices[q], self.similarities[q]):
                hit = {"index": int(i), "similarity": float(s)}
                if gallery_ids is not None:
                    hit["id"] = gallery_ids[int(i)]
                hits.append(hit)
            rec = {"query": q, "neighbors": hits}
            if query_ids is not None:
                rec["id"] = query_ids[q]
            out.append(rec)
        return out


def retrieve_topk(queries, gallery, k) -> RetrievalResult:
    """Exact cosine top-k; equal similarities rank by gallery index."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    G = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if Q.shape[1] != G.shape[1]:
        raise ParameterError(f"query width {Q.shape[1]} != gallery width {G.shape[1]}")
    if not 1 <= k <= G.shape[0]:
        raise ParameterError(f"k={k} outside [1, {G.shape[0]}]")
    for what, m in (("queries", Q), ("gallery", G)):
        if np.any(np.abs(np.linalg.norm(m, axis=1) - 1.0) > 1e-6):
            raise ContractError(f"{what}: rows must be unit-norm")
    sims = Q @ G.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return RetrievalResult(order, np.take_along_axis(sims, order, axis=1))
