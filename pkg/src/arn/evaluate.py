"""Triplet ranking and image-wise Recall@K for the SGCls and PredCls protocols."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EmptyGroundTruth, InvalidConfig
from .model import ModelParams, PredictedGraph, check_compatible, predict_batch

log = logging.getLogger(__name__)

TASKS = ("sgcls", "predcls")


class Triplet(NamedTuple):
    score: float
    subject: int
    object: int
    predicate: int
    subject_label: int
    object_label: int


def rank_triplets(pred: PredictedGraph, mode="constrained", cap=None) -> list[Triplet]:
    """Score = P(subject label) * P(predicate) * P(object label); bg never ranks.

    Constrained keeps the best non-bg predicate per ordered pair; unconstrained
    keeps all of them, or the top ``cap`` per pair when ``cap`` is set.
    Ties break on (subject, object, predicate).
    """
    if mode not in ("constrained", "unconstrained"):
        raise InvalidConfig(f"unknown ranking mode {mode!r}")
    labels = pred.entity_probs.argmax(axis=1)
    conf = pred.entity_probs.max(axis=1)
    out = []
    for (s, o), probs in zip(pred.pairs, pred.rel_probs):
        s, o = int(s), int(o)
        non_bg = probs[1:]
        if mode == "constrained":
            keep = [int(np.argmax(non_bg)) + 1]
        else:
            order = np.argsort(-non_bg, kind="stable") + 1
            keep = order[:cap] if cap is not None else order
        for p in keep:
            # multiply in the documented order so equal products round identically
            score = float(conf[s] * probs[p] * conf[o])
            out.append(Triplet(score, s, o, int(p), int(labels[s]), int(labels[o])))
    out.sort(key=lambda t: (-t.score, t.subject, t.object, t.predicate))
    return out


def recall_at_k(ranked, gt_relations, k, gt_labels=None, task="predcls") -> float:
    """Fraction of ground-truth triplets hit in the top ``k``.

    A hit needs subject, object and predicate to agree; under SGCls the
    triplet's entity labels must also equal ``gt_labels``.
    """
    if task not in TASKS:
        raise InvalidConfig(f"unknown task {task!r}")
    gt = {(int(s), int(o), int(p)) for s, o, p in np.asarray(gt_relations).reshape(-1, 3)}
    if not gt:
        raise EmptyGroundTruth("image has no ground-truth relations")
    if task == "sgcls" and gt_labels is None:
        raise InvalidConfig("sgcls recall needs gt_labels")
    hit = set()
    for t in ranked[:k]:
        key = (t.subject, t.object, t.predicate)
        if key not in gt:
            continue
        if task == "sgcls" and (t.subject_label != gt_labels[t.subject] or t.object_label != gt_labels[t.object]):
            continue
        hit.add(key)
    return len(hit) / len(gt)


def per_predicate_recall(predictions, instances, k=5) -> dict:
    """Per predicate index: share of annotated pairs whose predicate is in the pair's top ``k``.

    All predicates, bg included, compete for the top ``k``. Predicates without
    annotations are left out of the table.
    """
    hits, counts = {}, {}
    for pred, inst in zip(predictions, instances):
        row_of = {(int(s), int(o)): r for r, (s, o) in enumerate(pred.pairs)}
        for s, o, p in inst.relations:
            probs = pred.rel_probs[row_of[(int(s), int(o))]]
            top = np.argsort(-probs, kind="stable")[:k]
            counts[int(p)] = counts.get(int(p), 0) + 1
            hits[int(p)] = hits.get(int(p), 0) + int(p in top)
    return {p: hits[p] / counts[p] for p in sorted(counts)}


@dataclass
class EvalResult:
    task: str
    recall: dict                  # {"constrained": {50: r, 100: r}, "unconstrained": {...}}
    per_predicate: dict
    n_images: int
    skipped: list = field(default_factory=list)
    per_image: list = field(default_factory=list)

    def r(self, k, mode="constrained"):
        return self.recall[mode][k]

    def to_dict(self, vocab=None):
        names = vocab.predicates if vocab is not None else None
        return {
            "task": self.task,
            "n_images": self.n_images,
            "skipped": list(self.skipped),
            "recall": {m: {f"R@{k}": v for k, v in d.items()} for m, d in self.recall.items()},
            "per_predicate_R@5": {(names[p] if names else str(p)): v for p, v in self.per_predicate.items()},
        }


def evaluate_predictions(predictions, instances, task="sgcls", ks=(50, 100), cap=None) -> EvalResult:
    if task not in TASKS:
        raise InvalidConfig(f"unknown task {task!r}")
    sums = {m: {k: 0.0 for k in ks} for m in ("constrained", "unconstrained")}
    used, skipped, per_image = 0, [], []
    for pred, inst in zip(predictions, instances):
        if len(inst.relations) == 0:
            log.info("skipping %s: no ground-truth relations", inst.image_id)
            skipped.append(inst.image_id)
            continue
        graph = pred.with_labels(inst.labels) if task == "predcls" else pred
        row = {"id": inst.image_id}
        for mode in ("constrained", "unconstrained"):
            ranked = rank_triplets(graph, mode, cap if mode == "unconstrained" else None)
            for k in ks:
                r = recall_at_k(ranked, inst.relations, k, inst.labels, task)
                sums[mode][k] += r
                row[f"{mode}@{k}"] = r
        per_image.append(row)
        used += 1
    recall = {m: {k: (v / used if used else 0.0) for k, v in d.items()} for m, d in sums.items()}
    per_pred = per_predicate_recall(predictions, instances, k=5)
    return EvalResult(task, recall, per_pred, used, skipped, per_image)


def evaluate(instances, params: ModelParams, task="sgcls", ks=(50, 100), cap=None, batch_size=50) -> EvalResult:
    check_compatible(params.config, instances)
    preds = []
    for b0 in range(0, len(instances), batch_size):
        preds.extend(predict_batch(params, instances[b0:b0 + batch_size]))
    return evaluate_predictions(preds, instances, task, ks, cap)
