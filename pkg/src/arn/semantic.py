"""Semantic transformation: visual features and label embeddings in one relation space.

Subject, predicate and object each get their own linear map from
``[visual, embedding]`` into the relation space; a relation is well translated
when ``object = subject + predicate`` there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, l2_sq, matmul, reshape, segment_sum, sub
from .errors import SizeMismatch
from .nn import Linear


@dataclass
class EmbeddingTable:
    entity: Tensor      # (|C|, E)
    predicate: Tensor   # (|R|, E)
    trainable: bool = True

    @classmethod
    def random(cls, rng, n_classes, n_predicates, dim=300, sigma=0.1):
        return cls(
            Tensor(sigma * rng.normal(size=(n_classes, dim)), requires_grad=True, name="embed.entity"),
            Tensor(sigma * rng.normal(size=(n_predicates, dim)), requires_grad=True, name="embed.predicate"),
        )

    @classmethod
    def frozen(cls, entity, predicate):
        return cls(Tensor(entity, name="embed.entity"), Tensor(predicate, name="embed.predicate"), trainable=False)

    @property
    def dim(self):
        return self.entity.shape[1]

    def parameters(self):
        if not self.trainable:
            return []
        return [(self.entity.name, self.entity, True), (self.predicate.name, self.predicate, True)]


def expected_embedding(scores, table) -> Tensor:
    """Score-weighted mixture of label embeddings; one row per score vector."""
    scores, table = as_tensor(scores), as_tensor(table)
    if scores.shape[-1] != table.shape[0]:
        raise SizeMismatch(f"{scores.shape[-1]} scores for {table.shape[0]} embeddings")
    if scores.data.ndim == 1:
        return reshape(matmul(reshape(scores, (1, -1)), table), (table.shape[1],))
    return matmul(scores, table)


class SemanticWeights:
    def __init__(self, w1: Linear, w2: Linear, w3: Linear):
        if not (w1.n_out == w2.n_out == w3.n_out):
            raise SizeMismatch("W1, W2, W3 must share the relation-space width")
        self.w1, self.w2, self.w3 = w1, w2, w3

    @classmethod
    def init(cls, rng, visual_dim, embed_dim, space_dim=500, rel_visual_dim=None):
        rel_visual_dim = visual_dim if rel_visual_dim is None else rel_visual_dim
        return cls(
            Linear.init(rng, visual_dim + embed_dim, space_dim, "sem.w1"),
            Linear.init(rng, rel_visual_dim + embed_dim, space_dim, "sem.w2"),
            Linear.init(rng, visual_dim + embed_dim, space_dim, "sem.w3"),
        )

    @property
    def space_dim(self):
        return self.w1.n_out

    def subject(self, f, v):
        return _apply(self.w1, f, v)

    def predicate(self, f, v):
        return _apply(self.w2, f, v)

    def object(self, f, v):
        return _apply(self.w3, f, v)

    def parameters(self):
        return self.w1.parameters() + self.w2.parameters() + self.w3.parameters()


def _rows(x):
    x = as_tensor(x)
    return (reshape(x, (1, -1)), True) if x.data.ndim == 1 else (x, False)


def _apply(layer, f, v):
    (f, single), (v, _) = _rows(f), _rows(v)
    if f.shape[0] != v.shape[0]:
        raise SizeMismatch(f"{f.shape[0]} visual rows vs {v.shape[0]} embedding rows")
    y = layer(concat([f, v], axis=1))
    return reshape(y, (y.shape[1],)) if single else y


def translation_residual(subj, pred, obj) -> Tensor:
    return sub(obj, subj + pred)


def semantic_loss(f_i, v_s, f_ij, v_p, f_j, v_o, weights: SemanticWeights) -> Tensor:
    """``||W3[f_j,v_o] - (W1[f_i,v_s] + W2[f_ij,v_p])||^2``, summed over rows."""
    return l2_sq(translation_residual(
        weights.subject(f_i, v_s), weights.predicate(f_ij, v_p), weights.object(f_j, v_o)))


def transform_relation(f_i, v_s, f_ij, v_p, f_j, v_o, weights: SemanticWeights) -> Tensor:
    """Relation representation ``[W1[f_i,v_s], W2[f_ij,v_p], W3[f_j,v_o]]`` (width 3S)."""
    parts = [weights.subject(f_i, v_s), weights.predicate(f_ij, v_p), weights.object(f_j, v_o)]
    return concat(parts, axis=parts[0].data.ndim - 1)


def relation_summary(thetas, width=None) -> Tensor:
    """Element-wise sum of one entity's relation representations; zeros when it has none."""
    if thetas is None or len(thetas) == 0:
        if width is None:
            raise SizeMismatch("width is required for an empty summary")
        return Tensor(np.zeros(width))
    rows = concat([reshape(as_tensor(t), (1, -1)) for t in thetas], axis=0)
    return reshape(segment_sum(rows, np.zeros(rows.shape[0], dtype=np.intp), 1), (rows.shape[1],))
