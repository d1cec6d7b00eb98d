"""Spatial neighbourhoods and multi-head graph self-attention over entity nodes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    concat,
    gather_rows,
    leaky_relu,
    matmul,
    mul,
    reshape,
    segment_softmax,
    segment_sum,
)
from .data import Box
from .errors import SizeMismatch
from .nn import uniform_init

DIAGONAL = np.sqrt(2.0)
RULES = ("inside", "cover", "overlap", "relative")


def iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(b[:, None, 2], b[None, :, 2]) - np.maximum(b[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(b[:, None, 3], b[None, :, 3]) - np.maximum(b[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area[:, None] + area[None, :] - inter)


@dataclass
class Adjacency:
    """``matrix[i, j]`` is True when j is a neighbour of i; the diagonal holds self-loops."""

    matrix: np.ndarray
    rules: dict = field(default_factory=dict)   # rule name -> (n, n) bool
    self_loops: bool = True

    @property
    def n(self):
        return self.matrix.shape[0]

    def edges(self):
        """(target, source) index arrays in row-major order."""
        dst, src = np.nonzero(self.matrix)
        return dst, src

    def tags(self, i, j):
        return [r for r in RULES if self.rules[r][i, j]]

    def to_dict(self):
        n = self.n
        return {
            "n": n,
            "self_loops": self.self_loops,
            "matrix": self.matrix.astype(int).tolist(),
            "edges": [
                {"i": int(i), "j": int(j), "rules": self.tags(i, j)}
                for i in range(n) for j in range(n) if i != j and self.matrix[i, j]
            ],
        }


def build_adjacency(boxes, iou_threshold=0.5, dist_ratio=0.5, self_loops=True) -> Adjacency:
    b = np.array([x.as_array() if isinstance(x, Box) else x for x in boxes], dtype=np.float64).reshape(-1, 4)
    lo, hi = b[:, :2], b[:, 2:]
    # inside[i, j]: box i completely includes box j
    inside = np.all(lo[:, None, :] <= lo[None, :, :], axis=2) & np.all(hi[:, None, :] >= hi[None, :, :], axis=2)
    cover = inside.T
    overlap = iou_matrix(b) > iou_threshold
    c = 0.5 * (lo + hi)
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))
    relative = d / DIAGONAL < dist_ratio
    mat = inside | cover | overlap | relative
    np.fill_diagonal(mat, self_loops)
    rules = {"inside": inside, "cover": cover, "overlap": overlap, "relative": relative}
    return Adjacency(mat, rules, self_loops)


class AttentionHead:
    """``proj`` is U stored (M, M'); ``attn`` is the length-2M' scoring vector."""

    def __init__(self, proj, attn, name="head"):
        self.proj = proj if isinstance(proj, Tensor) else Tensor(proj, requires_grad=True)
        self.attn = attn if isinstance(attn, Tensor) else Tensor(attn, requires_grad=True)
        self.proj.name, self.attn.name = f"{name}.U", f"{name}.attn"
        if self.attn.shape != (2 * self.out_dim,):
            raise SizeMismatch(f"attention vector {self.attn.shape} for per-head width {self.out_dim}")

    @classmethod
    def init(cls, rng, in_dim, out_dim, name="head"):
        return cls(uniform_init(rng, in_dim, out_dim), uniform_init(rng, 2 * out_dim, 1)[:, 0], name)

    @property
    def in_dim(self):
        return self.proj.shape[0]

    @property
    def out_dim(self):
        return self.proj.shape[1]

    def parameters(self):
        return [(self.proj.name, self.proj, True), (self.attn.name, self.attn, True)]


def _edge_index(adjacency):
    if isinstance(adjacency, Adjacency):
        return adjacency.n, *adjacency.edges()
    n, dst, src = adjacency
    return n, np.asarray(dst, dtype=np.intp), np.asarray(src, dtype=np.intp)


def _edge_alpha(head, projected, dst, src, n, slope):
    m = head.out_dim
    # halves of the scoring vector that see U f_i and U f_j
    score_i = matmul(projected, reshape(head.attn[:m], (m, 1)))
    score_j = matmul(projected, reshape(head.attn[m:], (m, 1)))
    e = leaky_relu(add(gather_rows(score_i, dst), gather_rows(score_j, src)), slope)
    return segment_softmax(reshape(e, (len(dst),)), dst, n)


def attention_coefficients(head: AttentionHead, features, adjacency, slope=0.2) -> np.ndarray:
    """Dense (n, n) coefficients; rows are distributions over neighbours, zero elsewhere."""
    features = as_tensor(features)
    n, dst, src = _edge_index(adjacency)
    if features.shape[0] != n or features.shape[1] != head.in_dim:
        raise SizeMismatch(f"features {features.shape} for {n} nodes and head input {head.in_dim}")
    alpha = _edge_alpha(head, matmul(features, head.proj), dst, src, n, slope)
    out = np.zeros((n, n))
    out[dst, src] = alpha.data
    return out


def attend(head: AttentionHead, features, adjacency, slope=0.2) -> Tensor:
    """One head before the output nonlinearity: ``sum_j alpha_ij U f_j``."""
    n, dst, src = _edge_index(adjacency)
    projected = matmul(features, head.proj)
    alpha = _edge_alpha(head, projected, dst, src, n, slope)
    messages = mul(reshape(alpha, (len(dst), 1)), gather_rows(projected, src))
    return segment_sum(messages, dst, n)


def gat_layer(heads, features, adjacency, sigma=None, slope=0.2) -> Tensor:
    """Concatenation of ``sigma(sum_j alpha^k_ij U^k f_j)`` over heads; width K*M'."""
    features = as_tensor(features)
    n, _, _ = _edge_index(adjacency)
    if features.shape[0] != n:
        raise SizeMismatch(f"{features.shape[0]} feature rows for {n} nodes")
    widths = {(h.in_dim, h.out_dim) for h in heads}
    if len(widths) != 1 or features.shape[1] != heads[0].in_dim:
        raise SizeMismatch(f"heads disagree or do not accept width {features.shape[1]}: {widths}")
    if sigma is None:
        sigma = lambda x: leaky_relu(x, slope)  # noqa: E731
    outs = [sigma(attend(h, features, adjacency, slope)) for h in heads]
    return concat(outs, axis=1) if len(outs) > 1 else outs[0]
