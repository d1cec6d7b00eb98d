"""Command line: ``arn <command> ...``.

Every command takes its settings from one JSON config file with optional
sections ``model``, ``train``, ``synthetic``, ``eval`` and ``grad_check``.
Results go to stdout (or the named output), and failures exit nonzero with a
one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import grad_check
from .data import SyntheticConfig, Vocab, gen_synthetic, load_dataset, load_embeddings, save_dataset
from .errors import ArnError, GradCheckFailed, InvalidConfig
from .evaluate import evaluate_predictions, rank_triplets
from .model import (
    ModelConfig,
    ModelParams,
    attention_maps,
    batch_of,
    check_compatible,
    joint_loss_batch,
    predict_batch,
)
from .train import TrainConfig, train

# small widths keep the finite-difference sweep over every entry cheap
GRAD_CHECK_MODEL = dict(embed_dim=6, word_hidden=6, visual_dim=8, space_dim=5, heads=2, graph_dim=6, mlp_hidden=8)
GRAD_CHECK_DATA = dict(n_images=1, entities_per_image=3, n_classes=4, n_predicates=6, feat_dim=5)


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(cfg, dict):
        raise InvalidConfig(f"{path}: config must be a JSON object")
    return cfg


def vocab_path(data_path) -> Path:
    return Path(f"{data_path}.vocab.json")


def resolve_vocab(cfg, data_path):
    """Vocab from the config, else the sidecar next to the dataset, else None."""
    if "vocab" in cfg:
        v = cfg["vocab"]
        return Vocab.from_dict(json.loads(Path(v).read_text()) if isinstance(v, str) else v)
    side = vocab_path(data_path)
    if side.exists():
        return Vocab.from_dict(json.loads(side.read_text()))
    return None


def model_config(cfg, instances, vocab) -> ModelConfig:
    """Config ``model`` section; data-dependent sizes default to the data."""
    section = dict(cfg.get("model", {}))
    section.setdefault("feat_dim", int(instances[0].feats.shape[1]))
    section.setdefault("n_classes", vocab.n_classes if vocab else int(instances[0].scores.shape[1]))
    if vocab is not None:
        section.setdefault("n_predicates", vocab.n_predicates)
    return ModelConfig.from_dict(section)


def write_json(obj, path=None):
    text = json.dumps(obj, indent=2)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args):
    cfg = read_config(args.config)
    data, vocab = gen_synthetic(SyntheticConfig.from_dict(cfg.get("synthetic", cfg)))
    save_dataset(data, args.out)
    write_json(vocab.to_dict(), vocab_path(args.out))
    write_json({"images": len(data), "relations": int(sum(len(d.relations) for d in data)),
                "out": str(args.out), "vocab": str(vocab_path(args.out))})


def cmd_train(args):
    cfg = read_config(args.config)
    vocab = resolve_vocab(cfg, args.data)
    data = load_dataset(args.data, vocab)
    mc = model_config(cfg, data, vocab)
    tc = TrainConfig.from_dict(cfg.get("train", {}))
    embeddings = None
    if "embeddings" in cfg:
        if vocab is None:
            raise InvalidConfig("loading embeddings needs a vocab")
        ent, _ = load_embeddings(cfg["embeddings"], vocab.entities, mc.embed_dim)
        pred, _ = load_embeddings(cfg["embeddings"], vocab.predicates, mc.embed_dim)
        embeddings = (ent, pred)
        if "freeze_embeddings" not in cfg.get("model", {}):
            mc.freeze_embeddings = True
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(data, mc, tc, out_dir=out, vocab=vocab, embeddings=embeddings)
    res.params.save(out / "model.npz", vocab, {"steps": res.steps, "train": tc.to_dict()})
    write_json({"step_loss": res.losses, "epoch_loss": res.epoch_losses}, out / "losses.json")
    write_json({"checkpoint": str(out / "model.npz"), "steps": res.steps, "seconds": round(res.seconds, 3),
                "initial_loss": res.losses[0] if res.losses else None,
                "final_epoch_loss": res.epoch_losses[-1] if res.epoch_losses else None,
                "periodic_checkpoints": res.checkpoints})


def _load_for_inference(args):
    params, vocab, _ = ModelParams.load(args.ckpt)
    data = load_dataset(args.data, vocab)
    check_compatible(params.config, data)
    return params, vocab, data


def _predictions(params, data, batch_size=50):
    out = []
    for b0 in range(0, len(data), batch_size):
        out.extend(predict_batch(params, data[b0:b0 + batch_size]))
    return out


def cmd_eval(args):
    cfg = read_config(args.config)
    section = cfg.get("eval", {})
    params, vocab, data = _load_for_inference(args)
    ks = tuple(section.get("ks", (50, 100)))
    cap = args.cap if args.cap is not None else section.get("cap")
    res = evaluate_predictions(_predictions(params, data), data, args.task, ks, cap)
    mode = "unconstrained" if args.unconstrained else "constrained"
    report = {"mode": mode, **{f"R@{k}": res.recall[mode][k] for k in ks}, **res.to_dict(vocab)}
    write_json(report, args.out)
    if args.out:
        write_json({f"R@{k}": res.recall[mode][k] for k in ks})


def cmd_infer(args):
    params, vocab, data = _load_for_inference(args)
    ents = vocab.entities if vocab else None
    preds_names = vocab.predicates if vocab else None
    mode = "unconstrained" if args.unconstrained else "constrained"
    with open(args.out_graphs, "w") as fh:
        for inst, g in zip(data, _predictions(params, data)):
            triplets = []
            for t in rank_triplets(g, mode)[:args.top]:
                row = {"subject": t.subject, "object": t.object, "predicate": t.predicate,
                       "subject_label": t.subject_label, "object_label": t.object_label, "score": t.score}
                if vocab:
                    row["names"] = [ents[t.subject_label], preds_names[t.predicate], ents[t.object_label]]
                triplets.append(row)
            rec = {"id": inst.image_id, "entity_labels": g.entity_probs.argmax(axis=1).tolist(),
                   "triplets": triplets}
            fh.write(json.dumps(rec) + "\n")
    write_json({"images": len(data), "out": str(args.out_graphs), "mode": mode})


def cmd_grad_check(args):
    cfg = read_config(args.config)
    section = {"h": 1e-5, "tol": 1e-4, "seed": 0, "max_entries": None, **cfg.get("grad_check", {})}
    data_cfg = {**GRAD_CHECK_DATA, "seed": section["seed"], **cfg.get("synthetic", {})}
    data, vocab = gen_synthetic(SyntheticConfig.from_dict(data_cfg))
    model = {**GRAD_CHECK_MODEL, **cfg.get("model", {})}
    mc = model_config({"model": model}, data, vocab)
    params = ModelParams(mc, seed=section["seed"])
    batch = batch_of(data, mc)
    report = grad_check(lambda: joint_loss_batch(params, batch).total, params.tensors(),
                        h=section["h"], tol=section["tol"], max_entries=section["max_entries"])
    write_json(report.to_dict())
    if not report.passed:
        raise GradCheckFailed(f"max relative error {report.max_rel_error:.3g} exceeds {report.tol}")


def cmd_dump_attention(args):
    params, _, data = _load_for_inference(args)
    write_json({"images": [attention_maps(inst, params) for inst in data]}, args.out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arn", description="Attentive relational network for scene graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train on a JSONL dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="Recall@K under SGCls or PredCls")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", choices=("sgcls", "predcls"), required=True)
    s.add_argument("--unconstrained", action="store_true")
    s.add_argument("--cap", type=int, help="predicates per pair kept in unconstrained ranking")
    s.add_argument("--config")
    s.add_argument("--out", help="write the JSON report here instead of stdout")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="write ranked triplets per image")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out-graphs", required=True)
    s.add_argument("--top", type=int, default=100)
    s.add_argument("--unconstrained", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gen-synthetic", help="write a synthetic dataset and its vocab")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("grad-check", help="finite-difference check of the joint loss")
    s.add_argument("--config")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("dump-attention", help="adjacency and attention coefficients per image")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_dump_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ArnError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 2
    except (OSError, KeyError, TypeError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
