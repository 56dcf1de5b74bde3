"""Decoder-only transformers with per-token fast-weight plasticity:
neuromodulated Hebbian and gradient-based rules, the outer/inner
meta-training loop, episodic task generators, and an oracle suite."""

__version__ = "0.1.0"

from . import tensor
from .model import FastState, ModelConfig, StaticParams, StepOutput, \
    forward_step, init_fast_state
from .plasticity import (apply_update, compute_delta, compute_eta,
                         hebbian_increment, inner_gradients, internal_loss,
                         plastic_step)
from .tasks import (Episode, TaskConfig, gen_classification, gen_copying,
                    gen_cue_reward, gen_regression, generate)
from .meta_train import (EvalResult, OptimState, TrainConfig, evaluate,
                         metrics, outer_step, run_episode, train)
from .config import RunConfig, build_run_config

__all__ = [
    "tensor", "ModelConfig", "StaticParams", "FastState", "StepOutput",
    "forward_step", "init_fast_state",
    "hebbian_increment", "compute_delta", "compute_eta", "apply_update",
    "internal_loss", "inner_gradients", "plastic_step",
    "Episode", "TaskConfig", "generate", "gen_copying", "gen_cue_reward",
    "gen_regression", "gen_classification",
    "TrainConfig", "OptimState", "EvalResult", "run_episode", "outer_step",
    "evaluate", "metrics", "train",
    "RunConfig", "build_run_config",
]
