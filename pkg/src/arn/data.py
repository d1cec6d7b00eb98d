"""Scene instances standing in for detector output: boxes, features, scores, labels.

Coordinates are normalised to [0, 1] in (x1, y1, x2, y2) corner order, so the
image diagonal is always sqrt(2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, ParseError, ValidationError

DIST_EPS = 1e-6
SYNTHETIC_PREDICATES = ("bg", "inside", "contains", "above", "below", "near")


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def of(cls, coords):
        return cls(*(float(c) for c in coords))

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2])

    def is_valid(self):
        inside = all(0.0 <= c <= 1.0 for c in (self.x1, self.y1, self.x2, self.y2))
        return inside and self.x1 < self.x2 and self.y1 < self.y2

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def contains(self, other: "Box") -> bool:
        """Non-strict containment on all four edges."""
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)


def union_box(a: Box, b: Box, margin: float = 0.05) -> Box:
    """Smallest box covering ``a`` and ``b``, grown by ``margin`` of its size per side."""
    if margin < 0:
        raise InvalidConfig(f"margin must be >= 0, got {margin}")
    x1, y1 = min(a.x1, b.x1), min(a.y1, b.y1)
    x2, y2 = max(a.x2, b.x2), max(a.y2, b.y2)
    dx, dy = margin * (x2 - x1), margin * (y2 - y1)
    return Box(max(0.0, x1 - dx), max(0.0, y1 - dy), min(1.0, x2 + dx), min(1.0, y2 + dy))


def spatial_feature(b: Box) -> np.ndarray:
    cx, cy = b.center
    return np.array([b.x1, b.y1, b.x2, b.y2, cx, cy, b.x2 - b.x1, b.y2 - b.y1])


def spatial_features(boxes: np.ndarray) -> np.ndarray:
    """Row-wise ``spatial_feature`` for an (n, 4) coordinate array."""
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = boxes.T
    return np.stack([x1, y1, x2, y2, 0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1], axis=1)


def union_boxes(a: np.ndarray, b: np.ndarray, margin: float = 0.05) -> np.ndarray:
    lo = np.minimum(a[:, :2], b[:, :2])
    hi = np.maximum(a[:, 2:], b[:, 2:])
    pad = margin * (hi - lo)
    return np.concatenate([np.maximum(lo - pad, 0.0), np.minimum(hi + pad, 1.0)], axis=1)


def initial_scores(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Vocab:
    entities: tuple
    predicates: tuple

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        if len(set(self.entities)) != len(self.entities):
            raise InvalidConfig("entity names must be unique")
        if len(set(self.predicates)) != len(self.predicates):
            raise InvalidConfig("predicate names must be unique")
        if not self.predicates or self.predicates[0] != "bg":
            raise InvalidConfig("predicate 0 must be 'bg'")
        if not self.entities:
            raise InvalidConfig("need at least one entity category")

    @property
    def n_classes(self):
        return len(self.entities)

    @property
    def n_predicates(self):
        return len(self.predicates)

    @classmethod
    def default(cls, n_classes=150, n_predicates=51):
        """Placeholder names; the first predicates follow the synthetic rules."""
        if n_classes < 1 or n_predicates < 2:
            raise InvalidConfig("need >= 1 entity class and >= 2 predicates (bg plus one)")
        preds = list(SYNTHETIC_PREDICATES[:n_predicates])
        preds += [f"pred{k}" for k in range(len(preds), n_predicates)]
        return cls(tuple(f"obj{k}" for k in range(n_classes)), tuple(preds))

    def to_dict(self):
        return {"entities": list(self.entities), "predicates": list(self.predicates)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["entities"]), tuple(d["predicates"]))


def _frozen(a, dtype, n=None):
    a = np.array(a, dtype=dtype)
    if n is not None:
        # reshape(0, -1) is ambiguous, so keep the trailing width of empty arrays
        a = a.reshape(n, a.shape[-1] if a.ndim > 1 else (a.size // n if n else 0))
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SceneInstance:
    """One image: n entity boxes with features, detector scores and labels."""

    image_id: object
    boxes: np.ndarray          # (n, 4)
    feats: np.ndarray          # (n, D)
    scores: np.ndarray         # (n, |C|)
    labels: np.ndarray         # (n,)
    relations: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "boxes", _frozen(self.boxes, np.float64).reshape(-1, 4))
        n = self.boxes.shape[0]
        object.__setattr__(self, "feats", _frozen(self.feats, np.float64, n))
        object.__setattr__(self, "scores", _frozen(self.scores, np.float64, n))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64).reshape(n))
        object.__setattr__(self, "relations", _frozen(self.relations, np.int64).reshape(-1, 3))

    @property
    def n(self):
        return self.boxes.shape[0]

    def box(self, i) -> Box:
        return Box.of(self.boxes[i])

    def relation_map(self):
        """{(subject, object): predicate} for annotated pairs; every other pair is bg."""
        return {(int(s), int(o)): int(p) for s, o, p in self.relations}

    def ordered_pairs(self):
        idx = np.arange(self.n)
        s, o = np.meshgrid(idx, idx, indexing="ij")
        keep = s != o
        return np.stack([s[keep], o[keep]], axis=1)

    def pair_labels(self, pairs):
        rel = self.relation_map()
        return np.array([rel.get((int(s), int(o)), 0) for s, o in pairs], dtype=np.int64)

    def validate(self, vocab: Vocab | None = None, feat_dim: int | None = None):
        iid = self.image_id
        if self.n == 0:
            raise ValidationError(iid, "no entities")
        for k, b in enumerate(self.boxes):
            if not Box.of(b).is_valid():
                raise ValidationError(iid, f"entity {k}: box {list(b)} must satisfy 0<=x1<x2<=1, 0<=y1<y2<=1")
        if not (np.all(np.isfinite(self.feats)) and np.all(np.isfinite(self.scores))):
            raise ValidationError(iid, "non-finite feature or score")
        if feat_dim is not None and self.feats.shape[1] != feat_dim:
            raise ValidationError(iid, f"feature dim {self.feats.shape[1]} != {feat_dim}")
        sums = self.scores.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(self.scores < 0):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValidationError(iid, f"entity {bad}: scores sum to {sums[bad]:.6g}, not 1")
        if vocab is not None:
            if self.scores.shape[1] != vocab.n_classes:
                raise ValidationError(iid, f"score vectors have {self.scores.shape[1]} entries, vocab has {vocab.n_classes}")
            if np.any(self.labels < 0) or np.any(self.labels >= vocab.n_classes):
                raise ValidationError(iid, "gt_label out of range")
        seen = set()
        for s, o, p in self.relations:
            if not (0 <= s < self.n and 0 <= o < self.n):
                raise ValidationError(iid, f"relation ({s},{o},{p}) refers to a missing entity")
            if s == o:
                raise ValidationError(iid, f"self-relation on entity {s}")
            if p == 0:
                raise ValidationError(iid, "relations list bg (0) explicitly")
            if p < 0 or (vocab is not None and p >= vocab.n_predicates):
                raise ValidationError(iid, f"predicate {p} out of range")
            if (s, o) in seen:
                raise ValidationError(iid, f"pair ({s},{o}) annotated twice")
            seen.add((s, o))
        return self

    def to_record(self):
        return {
            "id": self.image_id,
            "entities": [
                {"box": b.tolist(), "feat": f.tolist(), "scores": s.tolist(), "gt_label": int(l)}
                for b, f, s, l in zip(self.boxes, self.feats, self.scores, self.labels)
            ],
            "relations": self.relations.tolist(),
        }


def _dedupe(relations):
    out, seen = [], set()
    for r in relations:
        t = tuple(int(v) for v in r)
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def instance_from_record(rec, vocab=None, line=None) -> SceneInstance:
    where = line if line is not None else 0
    if not isinstance(rec, dict):
        raise ParseError(where, "record must be a JSON object")
    missing = {"id", "entities", "relations"} - rec.keys()
    if missing:
        raise ParseError(where, f"missing fields {sorted(missing)}")
    extra = rec.keys() - {"id", "entities", "relations"}
    if extra:
        raise ParseError(where, f"unexpected fields {sorted(extra)}")
    ents = rec["entities"]
    if not isinstance(ents, list) or not ents:
        raise ValidationError(rec["id"], "entities must be a non-empty list")
    try:
        boxes = [e["box"] for e in ents]
        feats = [e["feat"] for e in ents]
        scores = [e["scores"] for e in ents]
        labels = [e["gt_label"] for e in ents]
        for e in ents:
            if set(e) != {"box", "feat", "scores", "gt_label"}:
                raise ParseError(where, f"entity fields must be box/feat/scores/gt_label, got {sorted(e)}")
            if len(e["box"]) != 4:
                raise ValidationError(rec["id"], "box needs 4 coordinates")
        rels = rec["relations"]
        if any(len(r) != 3 for r in rels):
            raise ValidationError(rec["id"], "relations must be [subj, obj, pred] triples")
        if len({len(f) for f in feats}) != 1 or len({len(s) for s in scores}) != 1:
            raise ValidationError(rec["id"], "ragged feat or scores")
        inst = SceneInstance(rec["id"], boxes, feats, scores, labels, _dedupe(rels) or np.zeros((0, 3)))
    except (KeyError, TypeError) as e:
        raise ParseError(where, f"malformed entity or relation: {e}") from e
    return inst.validate(vocab)


def load_dataset(path, vocab: Vocab | None = None) -> list[SceneInstance]:
    """Read line-delimited JSON, one image per line; blank lines are skipped."""
    out = []
    feat_dim = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(lineno, f"invalid JSON: {e.msg}") from e
            inst = instance_from_record(rec, vocab, line=lineno)
            if feat_dim is None:
                feat_dim = inst.feats.shape[1]
            elif inst.feats.shape[1] != feat_dim:
                raise ValidationError(inst.image_id, f"feature dim {inst.feats.shape[1]} != {feat_dim}")
            out.append(inst)
    return out


def save_dataset(instances, path):
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record()))
            fh.write("\n")


# ---------------------------------------------------------------------------
# relation context


@dataclass(frozen=True)
class RelationContext:
    union: Box
    scores: np.ndarray
    feature: np.ndarray


def relation_contexts(inst: SceneInstance, pairs, n_predicates: int, margin: float = 0.05):
    """Vectorised relation context for ordered ``pairs`` (P, 2).

    Returns ``(union_boxes, scores, features)``. The file format carries no
    per-relation detector output, so the appearance feature is synthesised as
    the mean of the two entity features followed by the subject and object
    spatial features, and the predicate scores are uniform.
    """
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    s, o = pairs[:, 0], pairs[:, 1]
    ub = union_boxes(inst.boxes[s], inst.boxes[o], margin)
    sp = spatial_features(inst.boxes)
    feat = np.concatenate([0.5 * (inst.feats[s] + inst.feats[o]), sp[s], sp[o]], axis=1)
    scores = np.full((len(pairs), n_predicates), 1.0 / n_predicates)
    return ub, scores, feat


def relation_context(inst, i, j, n_predicates, margin=0.05) -> RelationContext:
    ub, sc, ft = relation_contexts(inst, [[i, j]], n_predicates, margin)
    return RelationContext(Box.of(ub[0]), sc[0], ft[0])


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticConfig:
    n_images: int = 200
    entities_per_image: int = 5
    n_classes: int = 10
    n_predicates: int = 6
    feat_dim: int = 32
    seed: int = 0
    feat_noise: float = 0.3
    classifier_accuracy: float = 0.8
    score_confidence: float = 0.7
    nest_prob: float = 0.3
    # pairs closer than this to a rule threshold are re-drawn so labels are separable
    rule_margin: float = 0.03
    max_tries: int = 200

    def validate(self):
        for name in ("n_images", "entities_per_image", "n_classes", "n_predicates", "feat_dim"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.n_predicates < 2:
            raise InvalidConfig("n_predicates must include bg and at least one predicate")
        if not 0.0 <= self.classifier_accuracy <= 1.0:
            raise InvalidConfig("classifier_accuracy must lie in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known).validate()


ABOVE_GAP = 0.2
NEAR_DIST = 0.3


def rule_predicate(sub: Box, obj: Box, n_predicates: int = 6) -> int:
    """Predicate index the synthetic world assigns to (subject, object); 0 is bg."""
    names = SYNTHETIC_PREDICATES[:n_predicates]
    (sx, sy), (ox, oy) = sub.center, obj.center
    checks = {
        "inside": obj.contains(sub),
        "contains": sub.contains(obj),
        "above": sy < oy - ABOVE_GAP,
        "below": sy > oy + ABOVE_GAP,
        "near": math.hypot(sx - ox, sy - oy) < NEAR_DIST,
    }
    for k, name in enumerate(names[1:], start=1):
        if checks[name]:
            return k
    return 0


def _near_threshold(a: Box, b: Box, margin: float) -> bool:
    (ax, ay), (bx, by) = a.center, b.center
    dy = abs(ay - by)
    if abs(dy - ABOVE_GAP) < margin:
        return True
    if abs(math.hypot(ax - bx, ay - by) - NEAR_DIST) < margin:
        return True
    for outer, inner in ((a, b), (b, a)):
        if outer.contains(inner):
            continue
        slack = max(outer.x1 - inner.x1, outer.y1 - inner.y1, inner.x2 - outer.x2, inner.y2 - outer.y2)
        if slack < margin:
            return True
    return False


def _draw_box(rng, placed, cfg):
    if placed and rng.random() < cfg.nest_prob:
        parent = placed[rng.integers(len(placed))]
        pw, ph = parent.x2 - parent.x1, parent.y2 - parent.y1
        w, h = pw * rng.uniform(0.3, 0.6), ph * rng.uniform(0.3, 0.6)
        x1 = parent.x1 + rng.uniform(0.1 * pw, pw - w - 0.1 * pw)
        y1 = parent.y1 + rng.uniform(0.1 * ph, ph - h - 0.1 * ph)
        return Box(x1, y1, x1 + w, y1 + h)
    w, h = rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)
    x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
    return Box(x1, y1, x1 + w, y1 + h)


def _place_boxes(rng, cfg):
    placed = []
    for _ in range(cfg.entities_per_image):
        for _ in range(cfg.max_tries):
            b = _draw_box(rng, placed, cfg)
            if not any(_near_threshold(b, p, cfg.rule_margin) for p in placed):
                break
        placed.append(b)
    return placed


def gen_synthetic(config: SyntheticConfig | dict):
    """Deterministic synthetic scenes whose predicates follow spatial rules.

    Returns ``(instances, vocab)``. Each class owns a Gaussian prototype and an
    entity's feature is its prototype plus noise. Scores come from a simulated
    classifier that is right with probability ``classifier_accuracy`` and puts
    ``score_confidence`` on its pick.
    """
    cfg = SyntheticConfig.from_dict(config) if isinstance(config, dict) else config.validate()
    rng = np.random.default_rng(cfg.seed)
    vocab = Vocab.default(cfg.n_classes, cfg.n_predicates)
    protos = rng.normal(size=(cfg.n_classes, cfg.feat_dim))
    C = cfg.n_classes
    off = (1.0 - cfg.score_confidence) / (C - 1) if C > 1 else 0.0
    out = []
    for img in range(cfg.n_images):
        boxes = _place_boxes(rng, cfg)
        n = len(boxes)
        labels = rng.integers(C, size=n)
        feats = protos[labels] + cfg.feat_noise * rng.normal(size=(n, cfg.feat_dim))
        scores = np.full((n, C), off)
        for k, lab in enumerate(labels):
            guess = lab
            if C > 1 and rng.random() >= cfg.classifier_accuracy:
                guess = (lab + rng.integers(1, C)) % C
            scores[k, guess] = cfg.score_confidence if C > 1 else 1.0
        scores /= scores.sum(axis=1, keepdims=True)
        rels = []
        for i in range(n):
            for j in range(n):
                if i != j:
                    p = rule_predicate(boxes[i], boxes[j], cfg.n_predicates)
                    if p:
                        rels.append((i, j, p))
        out.append(SceneInstance(
            f"syn{cfg.seed}_{img}",
            np.array([b.as_array() for b in boxes]),
            feats, scores, labels,
            np.array(rels, dtype=np.int64).reshape(-1, 3),
        ).validate(vocab))
    return out, vocab


# ---------------------------------------------------------------------------
# word embeddings


def load_embeddings(path, names, dim=300, seed=0, sigma=0.1):
    """Rows for ``names`` from a ``word v1 ... vE`` text file.

    Multi-word names average their tokens. Names with no known token get a
    Gaussian(0, sigma) row. Returns ``(matrix, found_mask)``.
    """
    table = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ParseError(lineno, f"expected a word and {dim} values, got {len(parts) - 1} values")
            try:
                table[parts[0]] = np.array([float(v) for v in parts[1:]])
            except ValueError as e:
                raise ParseError(lineno, f"non-numeric embedding value: {e}") from e
    rng = np.random.default_rng(seed)
    rows, found = [], []
    for name in names:
        vecs = [table[t] for t in name.replace("_", " ").split() if t in table]
        if vecs:
            rows.append(np.mean(vecs, axis=0))
            found.append(True)
        else:
            rows.append(sigma * rng.normal(size=dim))
            found.append(False)
    return np.array(rows), np.array(found)
