"""Checkpoint evaluation: retrieval metrics over a dataset split."""

from __future__ import annotations

import os

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import Dataset, load_dataset
from .evalkit import aggregate_mean_recall, aggregate_recall, per_predicate_recall_at_k, \
    ranked_triplets, recall_at_k, write_metrics_csv, zero_shot_filter
from .features import class_signatures, scene_volume
from .model import RelationModel
from .tensor import no_grad

DEFAULT_KS = (20, 50, 100)


def load_model(checkpoint_path: str) -> tuple:
    """Rebuild the model recorded in a checkpoint. Returns (model, config)."""
    meta, state = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(meta["config"])
    model = RelationModel(cfg, np.random.default_rng([cfg.seed, 0]))
    model.registry.load_state_dict(state)
    return model, cfg


def evaluate_dataset(model: RelationModel, ds: Dataset, ks=DEFAULT_KS,
                     graph_constraint: bool = False) -> list:
    """Metric rows for one split: recall@K and mean recall@K over all
    ground truth and over the zero-shot subset, plus per-predicate
    recalls. Rows follow the metrics CSV column layout."""
    cfg = model.config
    signatures = class_signatures(ds.seed, cfg.C, cfg.d)
    split = ds.meta.get("split", "test")
    recalls = {k: [] for k in ks}
    zs_recalls = {k: [] for k in ks}
    per_pred = {k: [] for k in ks}
    zs_per_pred = {k: [] for k in ks}
    for scene in ds.scenes:
        volume = scene_volume(ds.seed, scene, signatures, cfg.feature_noise_std)
        with no_grad():
            output = model.forward(scene, volume, "infer")
        scores = output.prediction.scores.data
        ranked = ranked_triplets(scores, graph_constraint=graph_constraint)
        classes = [e.class_label for e in scene.entities]
        zs_gt = zero_shot_filter(scene.triplets, classes, ds.seen_triples)
        for k in ks:
            recalls[k].append(recall_at_k(ranked, scene.triplets, k))
            per_pred[k].append(per_predicate_recall_at_k(ranked, scene.triplets, k, cfg.P))
            if zs_gt:
                zs_recalls[k].append(recall_at_k(ranked, zs_gt, k))
                zs_per_pred[k].append(per_predicate_recall_at_k(ranked, zs_gt, k, cfg.P))

    rows = []
    for k in ks:
        rows.append((split, "predcls", "recall", k, None, aggregate_recall(recalls[k])))
        rows.append((split, "predcls", "mean_recall", k, None,
                     aggregate_mean_recall(per_pred[k], cfg.P)))
        rows.append((split, "predcls", "zs_recall", k, None, aggregate_recall(zs_recalls[k])))
        rows.append((split, "predcls", "zs_mean_recall", k, None,
                     aggregate_mean_recall(zs_per_pred[k], cfg.P)))
    for k in ks:
        sums = np.zeros(cfg.P)
        counts = np.zeros(cfg.P)
        for rec in per_pred[k]:
            for p, v in rec.items():
                sums[p] += v
                counts[p] += 1
        for p in range(cfg.P):
            if counts[p] > 0:
                rows.append((split, "predcls", "predicate_recall", k, p,
                             float(sums[p] / counts[p])))
    return rows


def evaluate(checkpoint_path: str, data_dir: str, split: str = "test", ks=DEFAULT_KS,
             graph_constraint: bool = False, out_csv: str | None = None) -> list:
    model, _cfg = load_model(checkpoint_path)
    ds = load_dataset(os.path.join(data_dir, f"{split}.json"))
    rows = evaluate_dataset(model, ds, ks=ks, graph_constraint=graph_constraint)
    if out_csv:
        write_metrics_csv(out_csv, rows)
    return rows


def metric_value(rows: list, metric: str, k: int) -> float | None:
    for _split, _task, name, kk, _pred, value in rows:
        if name == metric and kk == k:
            return value
    return None
