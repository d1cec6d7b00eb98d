import numpy as np
import pytest

from arn.autodiff import Tensor, grad_check
from arn.errors import SizeMismatch
from arn.nn import Linear
from arn.semantic import (
    EmbeddingTable,
    SemanticWeights,
    expected_embedding,
    relation_summary,
    semantic_loss,
    transform_relation,
)


def identity_weights(n):
    return SemanticWeights(*(Linear(np.eye(n), np.zeros(n), f"w{k}") for k in (1, 2, 3)))


def random_weights(rng, visual=4, embed=3, space=5):
    return SemanticWeights.init(rng, visual, embed, space)


# ---------------------------------------------------------------------------
# expected embedding


def test_expected_embedding_one_hot():
    table = np.arange(20.0).reshape(5, 4)
    np.testing.assert_array_equal(expected_embedding(np.eye(5)[3], table).data, table[3])


def test_expected_embedding_uniform_is_mean():
    table = np.array([[1.0, 5.0], [3.0, -1.0]])
    np.testing.assert_allclose(expected_embedding([0.5, 0.5], table).data, [2.0, 2.0])


def test_expected_embedding_hand_values():
    np.testing.assert_allclose(expected_embedding([0.9, 0.1], np.eye(2)).data, [0.9, 0.1])


def test_expected_embedding_rows_and_mismatch():
    table = np.random.default_rng(0).normal(size=(3, 4))
    scores = np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(expected_embedding(scores, table).data, scores @ table)
    with pytest.raises(SizeMismatch):
        expected_embedding([0.5, 0.5], table)


def test_random_and_frozen_tables():
    t = EmbeddingTable.random(np.random.default_rng(0), 10, 6, dim=300)
    assert t.entity.shape == (10, 300) and t.predicate.shape == (6, 300)
    assert abs(t.entity.data.std() - 0.1) < 0.01
    assert len(t.parameters()) == 2
    assert EmbeddingTable.frozen(t.entity.data, t.predicate.data).parameters() == []


# ---------------------------------------------------------------------------
# semantic loss


def test_semantic_loss_zero_when_aligned():
    w = identity_weights(3)
    f_i, v_s = np.array([0.3, -1.0]), np.array([2.0])
    f_ij, v_p = np.array([1.5, 0.25]), np.array([-0.5])
    f_j, v_o = f_i + f_ij, v_s + v_p
    assert semantic_loss(f_i, v_s, f_ij, v_p, f_j, v_o, w).item() == 0.0


def test_semantic_loss_hand_value():
    # object side maps to [1, 0]; subject plus predicate maps to [0, 1]
    w1 = Linear(np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros(2), "w1")
    w2 = Linear(np.zeros((2, 2)), np.zeros(2), "w2")
    w3 = Linear(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2), "w3")
    w = SemanticWeights(w1, w2, w3)
    one, zero = np.array([1.0]), np.array([0.0])
    assert semantic_loss(one, zero, one, zero, one, zero, w).item() == pytest.approx(2.0)


def test_semantic_loss_swap_symmetry():
    rng = np.random.default_rng(1)
    w = SemanticWeights.init(rng, 4, 3, 5, rel_visual_dim=4)
    swapped = SemanticWeights(w.w2, w.w1, w.w3)
    f_i, v_s, f_ij, v_p, f_j, v_o = (rng.normal(size=k) for k in (4, 3, 4, 3, 4, 3))
    a = semantic_loss(f_i, v_s, f_ij, v_p, f_j, v_o, w).item()
    b = semantic_loss(f_ij, v_p, f_i, v_s, f_j, v_o, swapped).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_semantic_loss_non_negative_and_zero_iff_identity():
    rng = np.random.default_rng(2)
    for _ in range(50):
        w = random_weights(rng)
        args = [rng.normal(size=k) for k in (4, 3, 4, 3, 4, 3)]
        assert semantic_loss(*args, w).item() > 0.0


def test_semantic_loss_size_mismatch():
    w = random_weights(np.random.default_rng(0))
    with pytest.raises(SizeMismatch):
        semantic_loss(np.zeros(5), np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(4), np.zeros(3), w)


def test_semantic_loss_grad_check_weights_and_inputs():
    rng = np.random.default_rng(4)
    w = random_weights(rng)
    inputs = [Tensor(rng.normal(size=k), requires_grad=True) for k in (4, 3, 4, 3, 4, 3)]
    weights = [t for _, t, _ in w.parameters()]
    report = grad_check(lambda: semantic_loss(*inputs, w), inputs + weights, h=1e-5)
    assert report.passed, report.to_dict()
    assert report.max_rel_error < 1e-4


# ---------------------------------------------------------------------------
# relation representation


def test_transform_relation_width_500():
    rng = np.random.default_rng(0)
    w = random_weights(rng, visual=6, embed=4, space=500)
    args = [rng.normal(size=k) for k in (6, 4, 6, 4, 6, 4)]
    theta = transform_relation(*args, w)
    assert theta.shape == (1500,)
    np.testing.assert_array_equal(theta.data[500:1000], w.predicate(args[2], args[3]).data)


def test_transform_relation_zero_inputs():
    w = random_weights(np.random.default_rng(0))
    zeros = [np.zeros(k) for k in (4, 3, 4, 3, 4, 3)]
    np.testing.assert_array_equal(transform_relation(*zeros, w).data, np.zeros(15))


def test_transform_relation_batched_rows_match_single():
    rng = np.random.default_rng(5)
    w = random_weights(rng)
    args = [rng.normal(size=(3, k)) for k in (4, 3, 4, 3, 4, 3)]
    batched = transform_relation(*args, w).data
    for r in range(3):
        np.testing.assert_allclose(batched[r], transform_relation(*[a[r] for a in args], w).data, atol=1e-14)


def test_relation_summary_cases():
    theta = np.arange(6.0)
    np.testing.assert_array_equal(relation_summary([theta]).data, theta)
    np.testing.assert_array_equal(relation_summary([theta, theta]).data, 2 * theta)
    np.testing.assert_array_equal(relation_summary([], width=6).data, np.zeros(6))


def test_relation_summary_order_invariant():
    rng = np.random.default_rng(8)
    thetas = list(rng.normal(size=(7, 15)))
    base = relation_summary(thetas).data
    for _ in range(20):
        perm = rng.permutation(7)
        np.testing.assert_allclose(relation_summary([thetas[k] for k in perm]).data, base, atol=1e-12)
