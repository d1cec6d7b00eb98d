"""Attentive relational network for scene graph generation, on a numpy autodiff tape."""

from .autodiff import Tape, Tensor, backward, grad_check
from .data import Box, SceneInstance, SyntheticConfig, Vocab, gen_synthetic, load_dataset, save_dataset
from .evaluate import EvalResult, evaluate, rank_triplets, recall_at_k
from .model import ModelConfig, ModelParams, PredictedGraph, joint_loss, predict
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Box",
    "EvalResult",
    "ModelConfig",
    "ModelParams",
    "PredictedGraph",
    "SceneInstance",
    "SyntheticConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Vocab",
    "backward",
    "evaluate",
    "gen_synthetic",
    "grad_check",
    "joint_loss",
    "load_dataset",
    "predict",
    "rank_triplets",
    "recall_at_k",
    "save_dataset",
    "train",
]
