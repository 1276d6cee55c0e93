"""Ranking-based retrieval metrics over predicted relationship scores.

Candidates are all off-diagonal (predicate, subject, object) cells of the
score grid, ranked by score with a deterministic tie-break (ascending
predicate, subject, object). Recall@K is the fraction of ground-truth
triplets inside the top K; mean recall averages per-predicate recalls
over the images containing each predicate, then over predicates. The
zero-shot variants first restrict ground truth to triplets whose
(subject class, predicate, object class) combination was never seen in
training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RankedTriplet:
    predicate: int
    subject: int
    object: int
    score: float


def ranked_triplets(scores: np.ndarray, graph_constraint: bool = False) -> list:
    """Rank all off-diagonal candidates. With the graph constraint, only
    each ordered pair's best predicate (ties to the lowest index) enters
    the ranking."""
    P, n, _ = scores.shape
    if graph_constraint:
        best = scores.argmax(axis=0)  # n x n, first max wins
        pred = best[~np.eye(n, dtype=bool)]
        sub, obj = np.nonzero(~np.eye(n, dtype=bool))
        vals = scores[pred, sub, obj]
    else:
        pred, sub, obj = np.indices((P, n, n))
        keep = sub != obj
        pred, sub, obj = pred[keep], sub[keep], obj[keep]
        vals = scores[keep]
    order = np.lexsort((obj, sub, pred, -vals))
    return [RankedTriplet(int(pred[i]), int(sub[i]), int(obj[i]), float(vals[i]))
            for i in order]


def recall_at_k(ranked: list, gt_triplets: list, k: int) -> float | None:
    """Fraction of ground truth inside the top k; None when the image has
    no ground truth (excluded from aggregation)."""
    gt = {(s, p, o) for s, p, o in gt_triplets}
    if not gt:
        return None
    top = {(t.subject, t.predicate, t.object) for t in ranked[:k]}
    return len(gt & top) / len(gt)


def per_predicate_recall_at_k(ranked: list, gt_triplets: list, k: int, P: int) -> dict:
    """Recall@k split by predicate; only predicates with ground truth in
    this image appear."""
    by_pred: dict[int, list] = {}
    for s, p, o in gt_triplets:
        by_pred.setdefault(p, []).append((s, p, o))
    top = {(t.subject, t.predicate, t.object) for t in ranked[:k]}
    return {p: sum(1 for t in triples if t in top) / len(triples)
            for p, triples in by_pred.items()}


def aggregate_recall(per_image: list) -> float | None:
    """Mean over images, skipping images without ground truth."""
    vals = [v for v in per_image if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate_mean_recall(per_image_per_pred: list, P: int) -> float | None:
    """Average each predicate over the images containing it, then average
    over predicates with at least one ground-truth instance."""
    sums = np.zeros(P)
    counts = np.zeros(P)
    for rec in per_image_per_pred:
        for p, v in rec.items():
            sums[p] += v
            counts[p] += 1
    present = counts > 0
    if not present.any():
        return None
    return float((sums[present] / counts[present]).mean())


def zero_shot_filter(gt_triplets: list, entity_classes: list, seen_triples: set) -> list:
    """Keep triplets whose (subject class, predicate, object class) was
    never annotated in training."""
    return [(s, p, o) for s, p, o in gt_triplets
            if (entity_classes[s], p, entity_classes[o]) not in seen_triples]


# -- CSV output ----------------------------------------------------------

METRIC_COLUMNS = ("split", "task", "metric", "k", "predicate", "value")


def format_value(v) -> str:
    if v is None:
        return "na"
    return repr(float(v))


def write_metrics_csv(path, rows: list) -> None:
    """Rows are (split, task, metric, k, predicate, value) tuples; floats
    are serialized with full round-trip precision so identical runs give
    byte-identical files."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for split, task, metric, k, predicate, value in rows:
            writer.writerow([split, task, metric, k,
                             "" if predicate is None else predicate,
                             format_value(value)])
