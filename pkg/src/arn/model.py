"""The full relational network: node context, graph representation, heads and losses.

Everything runs on a *batch*: several images stacked into one block-diagonal
graph. Entity rows, ordered pairs and attention edges carry global indices and
per-image sums are segment sums, so one tape covers a whole minibatch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .attention import AttentionHead, attention_coefficients, build_adjacency, gat_layer
from .autodiff import Tensor, concat, cross_entropy, gather_rows, l2_sq, segment_sum, softmax_rows
from .data import SceneInstance, Vocab, relation_contexts, spatial_features
from .errors import EmptyScene, IncompatibleCheckpoint, InvalidConfig, SizeMismatch
from .nn import MLP, Linear
from .semantic import EmbeddingTable, SemanticWeights, expected_embedding, translation_residual

CHECKPOINT_VERSION = 1
SPATIAL_DIM = 8


@dataclass
class ModelConfig:
    feat_dim: int = 32
    n_classes: int = 150
    n_predicates: int = 51
    embed_dim: int = 300
    word_hidden: int = 300
    word_layers: int = 3
    visual_dim: int = 500
    space_dim: int = 500
    heads: int = 8
    graph_dim: int = 500
    mlp_hidden: int = 500
    slope: float = 0.2
    lambdas: tuple = (4.0, 1.0, 1.0)
    weight_decay: float = 1e-5
    union_margin: float = 0.05
    iou_threshold: float = 0.5
    dist_ratio: float = 0.5
    use_semantic: bool = True
    use_attention: bool = True
    freeze_embeddings: bool = False

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        for name in ("feat_dim", "n_classes", "embed_dim", "word_hidden", "word_layers",
                     "visual_dim", "space_dim", "heads", "graph_dim", "mlp_hidden"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.n_predicates < 2:
            raise InvalidConfig("n_predicates must include bg")
        if self.graph_dim < self.heads:
            raise InvalidConfig("graph_dim must be at least the head count")
        if len(self.lambdas) != 3:
            raise InvalidConfig("lambdas needs three weights")

    @property
    def head_dim(self):
        return self.graph_dim // self.heads

    @property
    def node_dim(self):
        return self.visual_dim + 3 * self.space_dim

    def to_dict(self):
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams:
    """All learnable state. ``parameters()`` yields ``(name, tensor, decayed)``."""

    def __init__(self, config: ModelConfig, seed=0, embeddings=None):
        self.config = c = config
        rng = np.random.default_rng(seed)
        rel_in = c.feat_dim + 3 * SPATIAL_DIM
        self.ent_proj = Linear.init(rng, c.feat_dim + SPATIAL_DIM, c.visual_dim, "ent_proj")
        self.rel_proj = Linear.init(rng, rel_in, c.visual_dim, "rel_proj")
        if embeddings is None:
            self.embed = EmbeddingTable.random(rng, c.n_classes, c.n_predicates, c.embed_dim)
            self.embed.trainable = not c.freeze_embeddings
        else:
            ent, pred = embeddings
            self.embed = EmbeddingTable.frozen(ent, pred)
            if not c.freeze_embeddings:
                self.embed.entity.requires_grad = self.embed.predicate.requires_grad = True
                self.embed.entity.zero_grad()
                self.embed.predicate.zero_grad()
                self.embed.trainable = True
        sizes = [c.embed_dim] + [c.word_hidden] * c.word_layers
        self.word = MLP.init(rng, sizes, "word", c.slope, final_activation=True)
        self.sem = SemanticWeights.init(rng, c.visual_dim, c.word_hidden, c.space_dim)
        self.heads = [AttentionHead.init(rng, c.node_dim, c.head_dim, f"gat.{k}") for k in range(c.heads)]
        self.adapter = Linear.init(rng, c.head_dim * c.heads, c.graph_dim, "gat.adapter")
        self.ent_mlp = MLP.init(rng, [c.visual_dim + c.graph_dim, c.mlp_hidden, c.mlp_hidden, c.n_classes],
                                "ent_head", c.slope)
        self.rel_mlp = MLP.init(rng, [c.visual_dim + c.graph_dim, c.mlp_hidden, c.mlp_hidden, c.n_predicates],
                                "rel_head", c.slope)
        if not self.embed.trainable:
            self.embed.entity.requires_grad = self.embed.predicate.requires_grad = False
        # input standardisation, fitted on training data; identity until then
        self.norm = {
            "ent_mean": np.zeros(c.feat_dim + SPATIAL_DIM), "ent_std": np.ones(c.feat_dim + SPATIAL_DIM),
            "rel_mean": np.zeros(rel_in), "rel_std": np.ones(rel_in),
        }

    def fit_normalizer(self, prepared):
        ent = np.concatenate([p.ent_in for p in prepared])
        rel = np.concatenate([p.rel_in for p in prepared])
        for key, x in (("ent", ent), ("rel", rel)):
            if len(x):
                std = x.std(axis=0)
                self.norm[f"{key}_mean"] = x.mean(axis=0)
                self.norm[f"{key}_std"] = np.where(std > 1e-8, std, 1.0)

    def ent_input(self, batch):
        return Tensor((batch.ent_in - self.norm["ent_mean"]) / self.norm["ent_std"])

    def rel_input(self, batch):
        return Tensor((batch.rel_in - self.norm["rel_mean"]) / self.norm["rel_std"])

    def parameters(self):
        out = self.ent_proj.parameters() + self.rel_proj.parameters() + self.embed.parameters()
        out += self.word.parameters() + self.sem.parameters()
        for h in self.heads:
            out += h.parameters()
        out += self.adapter.parameters() + self.ent_mlp.parameters() + self.rel_mlp.parameters()
        return out

    def tensors(self):
        return [t for _, t, _ in self.parameters()]

    def named_arrays(self):
        """Every stored array, frozen embeddings included."""
        out = {name: t.data for name, t, _ in self.parameters()}
        out["embed.entity"] = self.embed.entity.data
        out["embed.predicate"] = self.embed.predicate.data
        out.update({f"norm.{k}": v for k, v in self.norm.items()})
        return out

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()

    def decay_term(self) -> Tensor:
        decayed = [t for _, t, d in self.parameters() if d]
        total = ad.total(concat([ad.reshape(l2_sq(t), (1,)) for t in decayed], axis=0))
        return total * self.config.weight_decay

    def save(self, path, vocab: Vocab | None = None, extra=None):
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "vocab": vocab.to_dict() if vocab else None,
            "embeddings_frozen": not self.embed.trainable,
            "extra": extra or {},
        }
        arrays = {f"p:{k}": v for k, v in self.named_arrays().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path, config: ModelConfig | None = None):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
        if meta.get("version") != CHECKPOINT_VERSION:
            raise IncompatibleCheckpoint(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        stored = ModelConfig.from_dict(meta["config"])
        if config is not None and config.to_dict() != stored.to_dict():
            raise IncompatibleCheckpoint("checkpoint config differs from the requested config")
        params = cls(stored, seed=0)
        if meta.get("embeddings_frozen"):
            params.embed.trainable = False
            params.embed.entity.requires_grad = params.embed.predicate.requires_grad = False
        expected = params.named_arrays()
        if set(expected) != set(arrays):
            raise IncompatibleCheckpoint(f"parameter names differ: {sorted(set(expected) ^ set(arrays))}")
        by_name = {t.name: t for t in [params.embed.entity, params.embed.predicate] + params.tensors()}
        for name, arr in arrays.items():
            if name.startswith("norm."):
                key = name[5:]
                if params.norm[key].shape != arr.shape:
                    raise IncompatibleCheckpoint(f"{name}: shape {arr.shape} != {params.norm[key].shape}")
                params.norm[key] = np.array(arr, dtype=np.float64)
                continue
            t = by_name[name]
            if t.data.shape != arr.shape:
                raise IncompatibleCheckpoint(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = np.array(arr, dtype=np.float64)
            t.zero_grad()
        vocab = Vocab.from_dict(meta["vocab"]) if meta.get("vocab") else None
        return params, vocab, meta


def check_compatible(config: ModelConfig, instances):
    for inst in instances:
        if inst.feats.shape[1] != config.feat_dim:
            raise IncompatibleCheckpoint(f"{inst.image_id}: feature dim {inst.feats.shape[1]} != {config.feat_dim}")
        if inst.scores.shape[1] != config.n_classes:
            raise IncompatibleCheckpoint(f"{inst.image_id}: {inst.scores.shape[1]} classes != {config.n_classes}")
        if len(inst.relations) and inst.relations[:, 2].max() >= config.n_predicates:
            raise IncompatibleCheckpoint(f"{inst.image_id}: predicate index beyond {config.n_predicates}")


# ---------------------------------------------------------------------------
# batching


@dataclass
class _Prepared:
    """Per-image arrays that do not change between epochs."""

    n: int
    ent_in: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    pairs: np.ndarray
    rel_in: np.ndarray
    rel_scores: np.ndarray
    pair_labels: np.ndarray
    edges: tuple


def prepare(inst: SceneInstance, config: ModelConfig) -> _Prepared:
    if inst.n == 0:
        raise EmptyScene(f"{inst.image_id}: no entities")
    sp = spatial_features(inst.boxes)
    pairs = inst.ordered_pairs()
    ub, rscores, rfeat = relation_contexts(inst, pairs, config.n_predicates, config.union_margin)
    rel_in = np.concatenate([rfeat, spatial_features(ub)], axis=1) if len(pairs) else np.zeros((0, config.feat_dim + 3 * SPATIAL_DIM))
    if config.use_attention:
        adj = build_adjacency(inst.boxes, config.iou_threshold, config.dist_ratio)
        edges = adj.edges()
    else:
        edges = (np.arange(inst.n), np.arange(inst.n))
    return _Prepared(
        n=inst.n,
        ent_in=np.concatenate([inst.feats, sp], axis=1),
        scores=inst.scores,
        labels=np.asarray(inst.labels),
        pairs=pairs.reshape(-1, 2),
        rel_in=rel_in,
        rel_scores=rscores,
        pair_labels=inst.pair_labels(pairs),
        edges=edges,
    )


@dataclass
class Batch:
    n_images: int
    ent_in: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    ent_image: np.ndarray
    pairs: np.ndarray          # global (subject, object)
    pair_image: np.ndarray
    rel_in: np.ndarray
    rel_scores: np.ndarray
    pair_labels: np.ndarray
    edges: tuple               # global (target, source)
    loss_pairs: np.ndarray     # pair rows entering the relation loss
    gt_pairs: np.ndarray       # pair rows with a non-bg annotation
    offsets: np.ndarray        # first entity row per image
    pair_offsets: np.ndarray   # first pair row per image


def sample_loss_pairs(pair_labels, bg_ratio, rng):
    pos = np.flatnonzero(pair_labels != 0)
    neg = np.flatnonzero(pair_labels == 0)
    if bg_ratio is None:
        return np.arange(len(pair_labels))
    k = min(len(neg), int(round(bg_ratio * len(pos))))
    if rng is not None and k < len(neg):
        neg = np.sort(rng.choice(neg, size=k, replace=False))
    else:
        neg = neg[:k]
    return np.sort(np.concatenate([pos, neg]))


def make_batch(prepared, bg_ratio=None, rng=None) -> Batch:
    """Stack prepared images. ``bg_ratio=None`` puts every ordered pair in the relation loss."""
    ent_off = np.cumsum([0] + [p.n for p in prepared])
    pair_off = np.cumsum([0] + [len(p.pairs) for p in prepared])
    dst = np.concatenate([p.edges[0] + o for p, o in zip(prepared, ent_off)])
    src = np.concatenate([p.edges[1] + o for p, o in zip(prepared, ent_off)])
    loss_pairs = np.concatenate(
        [sample_loss_pairs(p.pair_labels, bg_ratio, rng) + o for p, o in zip(prepared, pair_off)])
    pair_labels = np.concatenate([p.pair_labels for p in prepared])
    return Batch(
        n_images=len(prepared),
        ent_in=np.concatenate([p.ent_in for p in prepared]),
        scores=np.concatenate([p.scores for p in prepared]),
        labels=np.concatenate([p.labels for p in prepared]),
        ent_image=np.repeat(np.arange(len(prepared)), [p.n for p in prepared]),
        pairs=np.concatenate([p.pairs + o for p, o in zip(prepared, ent_off)]).astype(np.intp),
        pair_image=np.repeat(np.arange(len(prepared)), [len(p.pairs) for p in prepared]),
        rel_in=np.concatenate([p.rel_in for p in prepared]),
        rel_scores=np.concatenate([p.rel_scores for p in prepared]),
        pair_labels=pair_labels,
        edges=(dst.astype(np.intp), src.astype(np.intp)),
        loss_pairs=loss_pairs.astype(np.intp),
        gt_pairs=np.flatnonzero(pair_labels != 0),
        offsets=ent_off[:-1],
        pair_offsets=pair_off[:-1],
    )


def batch_of(instances, config, bg_ratio=None, rng=None) -> Batch:
    return make_batch([prepare(i, config) for i in instances], bg_ratio, rng)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class Forward:
    ent_visual: Tensor
    rel_visual: Tensor
    node_context: Tensor
    phi: Tensor
    omega: Tensor
    ent_probs: Tensor
    rel_probs: Tensor          # rows follow ``rel_rows``
    rel_rows: np.ndarray
    subj: Tensor | None = None
    pred: Tensor | None = None
    obj: Tensor | None = None


def _embed_rows(params, scores, table):
    # score vectors repeat a lot (uniform predicate scores); embed each distinct row once
    uniq, inverse = np.unique(scores, axis=0, return_inverse=True)
    emb = params.word(expected_embedding(Tensor(uniq), table))
    return gather_rows(emb, inverse.reshape(-1))


def relation_parts(params: ModelParams, batch: Batch, ent_visual, rel_visual):
    """Per-entity subject/object parts and per-pair predicate parts of the relation representation."""
    v_ent = _embed_rows(params, batch.scores, params.embed.entity)
    v_pred = _embed_rows(params, batch.rel_scores, params.embed.predicate)
    subj = params.sem.subject(ent_visual, v_ent)
    obj = params.sem.object(ent_visual, v_ent)
    pred = params.sem.predicate(rel_visual, v_pred)
    return subj, pred, obj


def node_context(params: ModelParams, batch: Batch, ent_visual=None, rel_visual=None):
    """``[f_i, sum_{j != i} Theta(f_ij)]`` per entity, width visual + 3 * space."""
    c = params.config
    if ent_visual is None:
        ent_visual = params.ent_proj(params.ent_input(batch))
    if rel_visual is None:
        rel_visual = params.rel_proj(params.rel_input(batch))
    n = batch.ent_in.shape[0]
    if not c.use_semantic or len(batch.pairs) == 0:
        zeros = Tensor(np.zeros((n, 3 * c.space_dim)))
        parts = relation_parts(params, batch, ent_visual, rel_visual) if c.use_semantic else (None, None, None)
        return concat([ent_visual, zeros], axis=1), parts
    subj, pred, obj = relation_parts(params, batch, ent_visual, rel_visual)
    s, o = batch.pairs[:, 0], batch.pairs[:, 1]
    theta = concat([gather_rows(subj, s), pred, gather_rows(obj, o)], axis=1)
    summary = segment_sum(theta, s, n)
    return concat([ent_visual, summary], axis=1), (subj, pred, obj)


def forward(params: ModelParams, batch: Batch, rel_rows=None) -> Forward:
    c = params.config
    if batch.ent_in.shape[0] == 0:
        raise EmptyScene("batch has no entities")
    if batch.ent_in.shape[1] != c.feat_dim + SPATIAL_DIM:
        raise SizeMismatch(f"entity input width {batch.ent_in.shape[1]} != {c.feat_dim + SPATIAL_DIM}")
    ent_visual = params.ent_proj(params.ent_input(batch))
    rel_visual = params.rel_proj(params.rel_input(batch))
    ctx, (subj, pred, obj) = node_context(params, batch, ent_visual, rel_visual)
    n = ctx.shape[0]
    gat = gat_layer(params.heads, ctx, (n, *batch.edges), slope=c.slope)
    phi = params.adapter(gat)
    omega = segment_sum(phi, batch.ent_image, batch.n_images)
    ent_logits = params.ent_mlp(concat([ent_visual, gather_rows(omega, batch.ent_image)], axis=1))
    rows = np.arange(len(batch.pairs)) if rel_rows is None else np.asarray(rel_rows, dtype=np.intp)
    rel_logits = params.rel_mlp(concat(
        [gather_rows(rel_visual, rows), gather_rows(omega, batch.pair_image[rows])], axis=1))
    return Forward(ent_visual, rel_visual, ctx, phi, omega,
                   softmax_rows(ent_logits), softmax_rows(rel_logits), rows, subj, pred, obj)


# ---------------------------------------------------------------------------
# losses


def entity_loss(probs, labels) -> Tensor:
    return cross_entropy(probs, labels)


def relation_loss(probs, labels) -> Tensor:
    return cross_entropy(probs, labels)


@dataclass
class LossParts:
    total: Tensor
    entity: float
    relation: float
    semantic: float
    decay: float

    def to_dict(self):
        return {"total": float(self.total.data), "entity": self.entity, "relation": self.relation,
                "semantic": self.semantic, "decay": self.decay}


def batch_semantic_loss(fwd: Forward, batch: Batch) -> Tensor:
    """Translation loss summed over annotated (non-bg) pairs."""
    rows = batch.gt_pairs
    if fwd.subj is None or len(rows) == 0:
        return Tensor(0.0)
    s, o = batch.pairs[rows, 0], batch.pairs[rows, 1]
    res = translation_residual(gather_rows(fwd.subj, s), gather_rows(fwd.pred, rows), gather_rows(fwd.obj, o))
    return l2_sq(res)


def joint_loss_batch(params: ModelParams, batch: Batch) -> LossParts:
    """Mean over images of ``l1*L_ent + l2*L_rel + l3*L_sem``, plus weight decay once."""
    c = params.config
    l1, l2, l3 = c.lambdas
    fwd = forward(params, batch, rel_rows=batch.loss_pairs)
    ent = entity_loss(fwd.ent_probs, batch.labels)
    rel = relation_loss(fwd.rel_probs, batch.pair_labels[batch.loss_pairs]) if len(batch.loss_pairs) else Tensor(0.0)
    sem = batch_semantic_loss(fwd, batch) if c.use_semantic else Tensor(0.0)
    data = ent * l1 + rel * l2
    if c.use_semantic:
        data = data + sem * l3
    data = data * (1.0 / batch.n_images)
    decay = params.decay_term() if c.weight_decay else Tensor(0.0)
    total = data + decay
    return LossParts(total, float(ent.data), float(rel.data), float(sem.data), float(decay.data))


def joint_loss(instances, params: ModelParams, bg_ratio=None, rng=None) -> Tensor:
    if isinstance(instances, SceneInstance):
        instances = [instances]
    return joint_loss_batch(params, batch_of(instances, params.config, bg_ratio, rng)).total


def global_representation(instance: SceneInstance, params: ModelParams) -> np.ndarray:
    fwd = forward(params, batch_of([instance], params.config))
    return fwd.omega.data[0]


# ---------------------------------------------------------------------------
# prediction


@dataclass
class PredictedGraph:
    image_id: object
    entity_probs: np.ndarray      # (n, |C|)
    pairs: np.ndarray             # (n(n-1), 2)
    rel_probs: np.ndarray         # (n(n-1), |R|)
    omega: np.ndarray
    attention: list = field(default_factory=list)

    @property
    def n(self):
        return self.entity_probs.shape[0]

    def with_labels(self, labels):
        """Copy whose entity distributions are one-hots on ``labels`` (PredCls)."""
        onehot = np.zeros_like(self.entity_probs)
        onehot[np.arange(self.n), np.asarray(labels)] = 1.0
        return PredictedGraph(self.image_id, onehot, self.pairs, self.rel_probs, self.omega)

    def triplets(self, mode="constrained", cap=None):
        from .evaluate import rank_triplets
        return rank_triplets(self, mode, cap)


def predict_batch(params: ModelParams, instances) -> list[PredictedGraph]:
    prepared = [prepare(i, params.config) for i in instances]
    batch = make_batch(prepared)
    with ad.no_tape():
        fwd = forward(params, batch)
    out = []
    for k, inst in enumerate(instances):
        e0, e1 = batch.offsets[k], batch.offsets[k] + inst.n
        p0 = batch.pair_offsets[k]
        p1 = p0 + len(prepared[k].pairs)
        out.append(PredictedGraph(
            inst.image_id,
            fwd.ent_probs.data[e0:e1],
            prepared[k].pairs,
            fwd.rel_probs.data[p0:p1],
            fwd.omega.data[k],
        ))
    return out


def predict(instance: SceneInstance, params: ModelParams) -> PredictedGraph:
    return predict_batch(params, [instance])[0]


def attention_maps(instance: SceneInstance, params: ModelParams) -> dict:
    """Adjacency with rule tags and every head's coefficient matrix for one image."""
    c = params.config
    batch = batch_of([instance], c)
    with ad.no_tape():
        ctx, _ = node_context(params, batch)
        n = ctx.shape[0]
        alphas = [attention_coefficients(h, ctx, (n, *batch.edges), c.slope) for h in params.heads]
    adj = build_adjacency(instance.boxes, c.iou_threshold, c.dist_ratio)
    return {
        "id": instance.image_id,
        "adjacency": adj.to_dict(),
        "attention_edges_used": "spatial" if c.use_attention else "self",
        "alpha": [a.tolist() for a in alphas],
    }
