import dataclasses
import math

import numpy as np
import pytest

from arn import autodiff as ad
from arn.autodiff import grad_check
from arn.data import SceneInstance, SyntheticConfig, gen_synthetic
from arn.errors import EmptyScene, IncompatibleCheckpoint, IndexOutOfRange
from arn.model import (
    ModelConfig,
    ModelParams,
    attention_maps,
    batch_of,
    entity_loss,
    forward,
    global_representation,
    joint_loss,
    joint_loss_batch,
    node_context,
    predict,
    predict_batch,
    prepare,
    relation_loss,
)
from arn.train import OptimizerState, adam_step

SMALL = dict(feat_dim=6, n_classes=4, n_predicates=6, embed_dim=5, word_hidden=5, word_layers=3,
             visual_dim=7, space_dim=4, heads=2, graph_dim=6, mlp_hidden=8)


def small_config(**kw):
    return ModelConfig(**{**SMALL, **kw})


def scenes(n_images=4, n=3, feat_dim=6, n_classes=4, seed=0):
    data, _ = gen_synthetic(SyntheticConfig(n_images=n_images, entities_per_image=n, n_classes=n_classes,
                                            feat_dim=feat_dim, seed=seed))
    return data


def permuted(inst, perm):
    inv = np.argsort(perm)
    rel = inst.relations.copy()
    rel[:, :2] = inv[rel[:, :2]]
    return SceneInstance(inst.image_id, inst.boxes[perm], inst.feats[perm], inst.scores[perm],
                         inst.labels[perm], rel)


# ---------------------------------------------------------------------------
# node context and graph representation


def test_node_context_width_2000():
    cfg = ModelConfig(feat_dim=6, n_classes=4, n_predicates=6)
    params = ModelParams(cfg, seed=0)
    ctx, _ = node_context(params, batch_of(scenes(1, 3), cfg))
    assert ctx.shape == (3, 2000)


def test_node_context_single_entity_has_zero_summary():
    cfg = small_config()
    params = ModelParams(cfg, seed=0)
    inst = scenes(1, 1)[0]
    ctx, _ = node_context(params, batch_of([inst], cfg))
    assert np.all(ctx.data[0, cfg.visual_dim:] == 0.0)
    assert np.any(ctx.data[0, :cfg.visual_dim] != 0.0)


def test_node_context_local_to_its_image():
    cfg = small_config()
    params = ModelParams(cfg, seed=1)
    a, b = scenes(2, 3)
    b2 = SceneInstance(b.image_id, b.boxes, b.feats + 5.0, b.scores, b.labels, b.relations)
    ctx1, _ = node_context(params, batch_of([a, b], cfg))
    ctx2, _ = node_context(params, batch_of([a, b2], cfg))
    np.testing.assert_array_equal(ctx1.data[:3], ctx2.data[:3])
    assert not np.allclose(ctx1.data[3:], ctx2.data[3:])


def test_omega_single_entity_is_phi():
    cfg = small_config()
    params = ModelParams(cfg, seed=0)
    fwd = forward(params, batch_of(scenes(1, 1), cfg))
    np.testing.assert_array_equal(fwd.omega.data[0], fwd.phi.data[0])
    assert fwd.omega.shape == (1, cfg.graph_dim)


def test_omega_permutation_invariant():
    cfg = small_config()
    params = ModelParams(cfg, seed=2)
    rng = np.random.default_rng(0)
    for inst in scenes(5, 5, seed=3):
        base = global_representation(inst, params)
        perm = rng.permutation(inst.n)
        np.testing.assert_allclose(global_representation(permuted(inst, perm), params), base, atol=1e-10, rtol=0)


def test_joint_loss_permutation_invariant():
    cfg = small_config()
    params = ModelParams(cfg, seed=2)
    rng = np.random.default_rng(1)
    for inst in scenes(5, 4, seed=4):
        base = joint_loss(inst, params).item()
        other = joint_loss(permuted(inst, rng.permutation(inst.n)), params).item()
        assert abs(other - base) < 1e-8


def test_omega_doubles_for_duplicated_scene():
    # two copies of an image in one graph: duplicated nodes, block-diagonal adjacency and relations
    cfg = small_config()
    params = ModelParams(cfg, seed=5)
    inst = scenes(1, 4, seed=6)[0]
    single = forward(params, batch_of([inst], cfg)).omega.data[0]
    pair = batch_of([inst, inst], cfg)
    merged = dataclasses.replace(pair, n_images=1, ent_image=np.zeros_like(pair.ent_image),
                                 pair_image=np.zeros_like(pair.pair_image))
    doubled = forward(params, merged).omega.data[0]
    np.testing.assert_allclose(doubled, 2.0 * single, atol=1e-8, rtol=0)


def test_ablated_graph_attention_uses_self_edges_only():
    cfg = small_config(use_attention=False)
    batch = batch_of(scenes(1, 4), cfg)
    np.testing.assert_array_equal(batch.edges[0], batch.edges[1])


def test_ablated_semantics_zero_summary():
    cfg = small_config(use_semantic=False)
    params = ModelParams(cfg, seed=0)
    ctx, _ = node_context(params, batch_of(scenes(1, 3), cfg))
    assert np.all(ctx.data[:, cfg.visual_dim:] == 0.0)


# ---------------------------------------------------------------------------
# prediction


def test_predict_default_shapes():
    cfg = ModelConfig(feat_dim=6, n_classes=150, n_predicates=51)
    params = ModelParams(cfg, seed=0)
    inst = scenes(1, 4, n_classes=150)[0]
    pred = predict(inst, params)
    assert pred.entity_probs.shape == (4, 150)
    assert pred.rel_probs.shape == (12, 51)
    assert np.all(pred.pairs[:, 0] != pred.pairs[:, 1])
    np.testing.assert_allclose(pred.entity_probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(pred.rel_probs.sum(axis=1), 1.0, atol=1e-6)


def test_zero_parameters_give_uniform_outputs():
    cfg = small_config()
    params = ModelParams(cfg, seed=0)
    for t in params.tensors():
        t.data[...] = 0.0
    pred = predict(scenes(1, 3)[0], params)
    np.testing.assert_allclose(pred.entity_probs, 1 / cfg.n_classes)
    np.testing.assert_allclose(pred.rel_probs, 1 / cfg.n_predicates)


def test_predict_deterministic():
    cfg = small_config()
    inst = scenes(1, 4)[0]
    a = predict(inst, ModelParams(cfg, seed=3))
    b = predict(inst, ModelParams(cfg, seed=3))
    assert a.entity_probs.tobytes() == b.entity_probs.tobytes()
    assert a.rel_probs.tobytes() == b.rel_probs.tobytes()


def test_predict_batch_matches_single_image():
    cfg = small_config()
    params = ModelParams(cfg, seed=4)
    data = scenes(3, 4)
    together = predict_batch(params, data)
    for inst, pb in zip(data, together):
        alone = predict(inst, params)
        np.testing.assert_allclose(pb.rel_probs, alone.rel_probs, atol=1e-12)
        np.testing.assert_allclose(pb.omega, alone.omega, atol=1e-12)


def test_relation_argmax_invariant_to_logit_shift():
    cfg = small_config()
    params = ModelParams(cfg, seed=4)
    inst = scenes(1, 4)[0]
    before = predict(inst, params).rel_probs
    params.rel_mlp.layers[-1].bias.data += 3.7
    after = predict(inst, params).rel_probs
    np.testing.assert_array_equal(before[:, 1:].argmax(axis=1), after[:, 1:].argmax(axis=1))


def test_empty_scene():
    cfg = small_config()
    empty = SceneInstance("e", np.zeros((0, 4)), np.zeros((0, 6)), np.zeros((0, 4)), np.zeros(0))
    with pytest.raises(EmptyScene):
        predict(empty, ModelParams(cfg))


def test_attention_maps_rows_are_distributions():
    cfg = small_config()
    maps = attention_maps(scenes(1, 4)[0], ModelParams(cfg, seed=0))
    assert len(maps["alpha"]) == cfg.heads
    for a in maps["alpha"]:
        np.testing.assert_allclose(np.sum(a, axis=1), 1.0, atol=1e-9)
    assert maps["adjacency"]["n"] == 4


# ---------------------------------------------------------------------------
# losses


def test_uniform_relation_loss_is_log_51():
    probs = np.full((1, 51), 1 / 51)
    assert relation_loss(probs, [7]).item() == pytest.approx(math.log(51), abs=1e-12)
    assert math.log(51) == pytest.approx(3.9318, abs=1e-4)


def test_perfect_predictions_near_zero():
    assert entity_loss(np.eye(4), [0, 1, 2, 3]).item() == pytest.approx(0.0, abs=1e-12)


def test_losses_are_additive_over_items():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(6), size=2)
    both = relation_loss(probs, [1, 4]).item()
    assert both == pytest.approx(relation_loss(probs[:1], [1]).item() + relation_loss(probs[1:], [4]).item())


def test_loss_label_out_of_range():
    with pytest.raises(IndexOutOfRange):
        entity_loss(np.eye(4), [0, 1, 2, 9])


def test_joint_loss_combines_parts():
    cfg = small_config(weight_decay=1e-3)
    assert ModelConfig().lambdas == (4.0, 1.0, 1.0)
    params = ModelParams(cfg, seed=0)
    data = scenes(3, 4)
    parts = joint_loss_batch(params, batch_of(data, cfg))
    l1, l2, l3 = cfg.lambdas
    expected = (l1 * parts.entity + l2 * parts.relation + l3 * parts.semantic) / 3 + parts.decay
    assert parts.total.item() == pytest.approx(expected, rel=1e-12)
    manual = sum(float(np.sum(t.data ** 2)) for name, t, d in params.parameters() if d)
    assert parts.decay == pytest.approx(1e-3 * manual, rel=1e-12)


def test_decay_skips_biases_and_frozen_embeddings():
    frozen = ModelParams(small_config(freeze_embeddings=True), seed=0)
    names = {name for name, _, d in frozen.parameters() if d}
    assert not any(n.endswith(".bias") for n in names)
    assert "embed.entity" not in names
    trainable = ModelParams(small_config(), seed=0)
    assert "embed.entity" in {name for name, _, d in trainable.parameters() if d}


def test_loaded_embeddings_frozen_by_default():
    rng = np.random.default_rng(0)
    table = (rng.normal(size=(4, 5)), rng.normal(size=(6, 5)))
    params = ModelParams(small_config(freeze_embeddings=True), seed=0, embeddings=table)
    assert "embed.entity" not in {name for name, _, _ in params.parameters()}
    np.testing.assert_array_equal(params.embed.entity.data, table[0])


def test_joint_loss_grad_check_three_entities():
    cfg = small_config(weight_decay=1e-2)
    params = ModelParams(cfg, seed=0)
    batch = batch_of(scenes(1, 3), cfg)
    report = grad_check(lambda: joint_loss_batch(params, batch).total, params.tensors(), h=1e-5)
    assert report.passed, report.to_dict()


def test_loss_decreases_on_fixed_batch():
    monotone = 0
    for seed in range(20):
        cfg = small_config()
        params = ModelParams(cfg, seed=seed)
        batch = batch_of(scenes(4, 4, seed=seed), cfg)
        tensors = params.tensors()
        state = OptimizerState.for_params(tensors, lr=1e-3)
        losses = []
        for _ in range(51):
            params.zero_grad()
            with ad.Tape():
                loss = joint_loss_batch(params, batch).total
                ad.backward(loss)
            losses.append(loss.item())
            adam_step(tensors, [t.grad for t in tensors], state)
        monotone += all(b < a for a, b in zip(losses, losses[1:]))
    assert monotone >= 19


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = small_config()
    params = ModelParams(cfg, seed=7)
    params.fit_normalizer([prepare(i, cfg) for i in scenes(3, 3)])
    params.save(tmp_path / "m.npz", extra={"note": "x"})
    back, vocab, meta = ModelParams.load(tmp_path / "m.npz")
    assert vocab is None and meta["extra"] == {"note": "x"}
    a, b = params.named_arrays(), back.named_arrays()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k
    inst = scenes(1, 4)[0]
    assert predict(inst, params).rel_probs.tobytes() == predict(inst, back).rel_probs.tobytes()


def test_checkpoint_config_mismatch(tmp_path):
    ModelParams(small_config(), seed=0).save(tmp_path / "m.npz")
    with pytest.raises(IncompatibleCheckpoint):
        ModelParams.load(tmp_path / "m.npz", small_config(heads=3))


def test_checkpoint_incompatible_with_data(tmp_path):
    from arn.evaluate import evaluate
    params = ModelParams(small_config(), seed=0)
    with pytest.raises(IncompatibleCheckpoint):
        evaluate(scenes(2, 3, feat_dim=9), params, "sgcls")
