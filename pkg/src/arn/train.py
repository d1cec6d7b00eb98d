"""Adam and the minibatch training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, NonFiniteLoss, ShapeMismatch
from .model import ModelConfig, ModelParams, check_compatible, joint_loss_batch, make_batch, prepare

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 20
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    bg_ratio: float = 3.0
    checkpoint_every: int = 0     # epochs; 0 disables periodic checkpoints
    standardize: bool = True

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs < 0 or self.lr <= 0:
            raise InvalidConfig("batch_size and lr must be positive, epochs non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(lr, beta1, beta2, eps, 0,
                   [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: OptimizerState):
    """Bias-corrected Adam update, in place on ``params[k].data``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeMismatch(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != g.shape or m.shape != g.shape:
            raise ShapeMismatch(f"{p.name}: param {p.data.shape}, grad {g.shape}, moment {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class TrainResult:
    params: ModelParams
    losses: list            # one entry per optimizer step
    epoch_losses: list      # mean step loss per epoch
    steps: int
    seconds: float
    checkpoints: list = field(default_factory=list)


def train(instances, model_config: ModelConfig, train_config: TrainConfig | None = None,
          out_dir=None, vocab=None, embeddings=None, on_step=None) -> TrainResult:
    """Shuffle by seed each epoch, average the joint loss over the batch, apply Adam."""
    tc = train_config or TrainConfig()
    if not instances:
        raise InvalidConfig("empty training set")
    check_compatible(model_config, instances)
    params = ModelParams(model_config, seed=tc.seed, embeddings=embeddings)
    tensors = params.tensors()
    state = OptimizerState.for_params(tensors, tc.lr, tc.beta1, tc.beta2, tc.eps)
    prepared = [prepare(i, model_config) for i in instances]
    if tc.standardize:
        params.fit_normalizer(prepared)
    rng = np.random.default_rng(tc.seed)
    losses, epoch_losses, ckpts = [], [], []
    start = time.perf_counter()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(len(prepared))
        epoch_sum, epoch_n = 0.0, 0
        for b0 in range(0, len(order), tc.batch_size):
            if tc.max_steps is not None and step >= tc.max_steps:
                break
            batch = make_batch([prepared[k] for k in order[b0:b0 + tc.batch_size]], tc.bg_ratio, rng)
            params.zero_grad()
            with ad.Tape():
                parts = joint_loss_batch(params, batch)
                value = float(parts.total.data)
                if not np.isfinite(value):
                    raise NonFiniteLoss(json.dumps({"epoch": epoch, "step": step, **parts.to_dict()}))
                ad.backward(parts.total)
            adam_step(tensors, [t.grad for t in tensors], state)
            losses.append(value)
            epoch_sum += value
            epoch_n += 1
            step += 1
            if on_step is not None:
                on_step(step, parts)
            log.debug("epoch %d step %d loss %.6f", epoch, step, value)
        if epoch_n:
            epoch_losses.append(epoch_sum / epoch_n)
            log.info("epoch %d mean loss %.6f", epoch, epoch_losses[-1])
        if out_dir is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            path = Path(out_dir) / f"epoch{epoch + 1:03d}.npz"
            params.save(path, vocab, {"epoch": epoch + 1, "step": step})
            ckpts.append(str(path))
        if tc.max_steps is not None and step >= tc.max_steps:
            break
    return TrainResult(params, losses, epoch_losses, step, time.perf_counter() - start, ckpts)
