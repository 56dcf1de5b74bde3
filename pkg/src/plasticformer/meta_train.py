"""Two-timescale training: per-episode fast-weight evolution (inner loop)
and optimization of the static parameters and plasticity rates on the
accumulated meta-loss (outer loop).

The outer pass backpropagates through the full episode, including the
fast-weight recursion; an optional truncation length re-leafs the plastic
buffers every k steps for the documented stability trade-off.
"""

from __future__ import annotations

import contextlib
import math
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diagnostics
from . import tensor as T
from .tensor import Tensor
from .model import (ModelConfig, StaticParams, detach_cache, forward_step,
                    init_fast_state)
from .plasticity import PlasticityTracePoint, detach_fast, plastic_step
from .tasks import Episode, episode_seed, generate


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss or gradient is encountered; carries a
    diagnostic payload for the partial-log flush."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4      # 5e-4 for classification
    grad_clip: float = 5.0
    epochs: int = 2
    episodes_per_epoch: int = 50
    val_episodes: int = 20
    val_every: int | None = None    # None -> end of epoch only
    accumulate: int = 1             # episodes per outer step
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checked: bool = False           # engine NaN/Inf checking

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ValueError("learning rate and grad clip must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if min(self.epochs, self.episodes_per_epoch, self.accumulate) < 1:
            raise ValueError("epochs/episodes/accumulate must be >= 1")


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: StaticParams) -> "OptimState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
        )


@dataclass
class EvalResult:
    task_kind: str
    loss: float
    metric_name: str
    metric: float
    mean_eta: float
    mean_plastic_norm: float
    seed: int
    n_episodes: int = 1


METRIC_NAMES = {
    "copying": "recall_accuracy",
    "cue_reward": "query_mse",
    "regression": "query_mse",
    "classification": "accuracy",
}


def _step_loss(y: Tensor, target_row: np.ndarray, loss_type: str) -> Tensor:
    if loss_type == "cross_entropy":
        lsm = T.log_softmax_row(y)
        return T.neg(T.sum_all(T.mul(lsm, T.tensor(target_row))))
    if loss_type == "squared_error":
        diff = T.sub(y, T.tensor(target_row))
        return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / target_row.size)
    raise ValueError(f"unknown loss type {loss_type!r}")


def metrics(task_kind: str, outputs: np.ndarray, episode: Episode) -> float:
    """Task metric over the masked positions of one episode."""
    masked = episode.loss_mask == 1
    if not masked.any():
        raise ValueError("metrics on an episode with an empty loss mask")
    y = outputs[masked]
    t = episode.targets[masked]
    if episode.loss_type == "cross_entropy":
        return float(np.mean(y.argmax(axis=1) == t.argmax(axis=1)))
    return float(np.mean(np.sum((y - t) ** 2, axis=1) / t.shape[1]))


def run_episode(params: StaticParams, episode: Episode, mode: str,
                rng: np.random.Generator | None = None,
                record_arrays: bool = False
                ) -> tuple[Tensor | None, EvalResult, list[PlasticityTracePoint]]:
    """Drive one episode: forward step, masked loss accumulation, plastic
    update, per-step trace. In train mode the whole inner loop stays on the
    tape for the outer backward; in eval mode graph state is dropped as the
    episode advances.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    cfg = params.config
    if episode.inputs.shape[1] != cfg.input_dim:
        raise T.ShapeError(
            f"episode input dim {episode.inputs.shape[1]} != model "
            f"input_dim {cfg.input_dim}")
    train = mode == "train"
    # eval without inner gradients never needs the tape at all
    tape_free_eval = not train and cfg.rule in ("none", "hebbian")

    state = init_fast_state(cfg)
    loss_terms: list[Tensor] = []
    outputs = np.zeros((episode.length, cfg.output_dim))
    traces: list[PlasticityTracePoint] = []

    guard = T.no_grad() if tape_free_eval else contextlib.nullcontext()
    with guard:
        for t in range(episode.length):
            step, state = forward_step(params, state, episode.inputs[t],
                                       train=train, rng=rng)
            outputs[t] = step.y.data[0]
            if episode.loss_mask[t]:
                term = _step_loss(step.y, episode.targets[t:t + 1],
                                  episode.loss_type)
                if not math.isfinite(term.data[0, 0]):
                    raise TrainingAborted(
                        f"non-finite loss at step {t} of a "
                        f"{episode.task_kind} episode (seed {episode.seed})",
                        diagnostics={"step": t, "episode_seed": episode.seed})
                loss_terms.append(term)
            state, trace = plastic_step(params, state, step, train=train,
                                        record_arrays=record_arrays)
            traces.append(trace)
            if train and cfg.bptt_truncation and \
                    (t + 1) % cfg.bptt_truncation == 0:
                state = detach_fast(state)
            if not train and cfg.rule == "gradient":
                state = detach_fast(detach_cache(state))

    total = loss_terms[0]
    for term in loss_terms[1:]:
        total = T.add(total, term)
    meta_loss = T.scale(total, 1.0 / len(loss_terms))

    etas = [tr.eta for tr in traces]
    norm_means = [float(np.mean(list(tr.w_norms.values()))) if tr.w_norms
                  else 0.0 for tr in traces]
    result = EvalResult(
        task_kind=episode.task_kind,
        loss=float(meta_loss.data[0, 0]),
        metric_name=METRIC_NAMES[episode.task_kind],
        metric=metrics(episode.task_kind, outputs, episode),
        mean_eta=float(np.mean(etas)),
        mean_plastic_norm=float(np.mean(norm_means)),
        seed=episode.seed,
    )
    return (meta_loss if train else None), result, traces


def episode_gradients(meta_loss: Tensor, params: StaticParams
                      ) -> dict[str, np.ndarray]:
    """Outer gradients of the meta-loss for every trainable tensor."""
    names = params.names()
    grads = T.grad(meta_loss, [params[n] for n in names], allow_unused=True)
    return {n: g.data for n, g in zip(names, grads)}


def outer_step(params: StaticParams, opt: OptimState,
               grads: dict[str, np.ndarray], cfg: TrainConfig
               ) -> tuple[StaticParams, OptimState]:
    """Global-norm clipping followed by a decoupled-weight-decay adaptive
    update. Parameters are updated in place; the same objects are returned
    for call-site clarity."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for {name!r}")

    sq = sum(float((g * g).sum()) for g in grads.values())
    gnorm = math.sqrt(sq)
    scale = cfg.grad_clip / gnorm if gnorm > cfg.grad_clip else 1.0

    opt.step += 1
    bc1 = 1.0 - cfg.beta1 ** opt.step
    bc2 = 1.0 - cfg.beta2 ** opt.step
    for name, g in grads.items():
        g = g * scale
        m = opt.m[name] = cfg.beta1 * opt.m[name] + (1 - cfg.beta1) * g
        v = opt.v[name] = cfg.beta2 * opt.v[name] + (1 - cfg.beta2) * g * g
        p = params[name]
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data = p.data - cfg.learning_rate * (
            update + cfg.weight_decay * p.data)
    return params, opt


def evaluate(params: StaticParams, episodes: list[Episode],
             seed: int) -> EvalResult:
    """Mean EvalResult over a validation set (dropout disabled)."""
    results = []
    for ep in episodes:
        _, res, _ = run_episode(params, ep, mode="eval")
        results.append(res)
    return EvalResult(
        task_kind=results[0].task_kind,
        loss=float(np.mean([r.loss for r in results])),
        metric_name=results[0].metric_name,
        metric=float(np.mean([r.metric for r in results])),
        mean_eta=float(np.mean([r.mean_eta for r in results])),
        mean_plastic_norm=float(np.mean([r.mean_plastic_norm
                                         for r in results])),
        seed=seed,
        n_episodes=len(results),
    )


def train(run_cfg, out_root, downsample: int = 1,
          save_checkpoint: bool = True) -> Path:
    """Full training run for one seed; writes record.json, trace.csv and
    (optionally) a checkpoint into <out_root>/<task>/<rule>/<seed>.

    Deterministic per seed: data, parameter init and dropout masks all
    derive from the run seed. On a training abort the partial record and
    traces are still flushed before the exception propagates.
    """
    cfg: ModelConfig = run_cfg.model
    tcfg: TrainConfig = run_cfg.train
    tcfg.validate()
    t_start = time.time()

    params = StaticParams.init(cfg, run_cfg.seed)
    opt = OptimState.init(params)
    train_eps = [generate(run_cfg.task, run_cfg.tasks,
                          episode_seed(run_cfg.seed, "train", i))
                 for i in range(tcfg.episodes_per_epoch)]
    val_eps = [generate(run_cfg.task, run_cfg.tasks,
                        episode_seed(run_cfg.seed, "val", i))
               for i in range(tcfg.val_episodes)]
    dropout_rng = np.random.default_rng(
        np.random.SeedSequence([run_cfg.seed, zlib.crc32(b"dropout")]))

    rdir = diagnostics.run_dir(out_root, run_cfg.task, run_cfg.rule,
                               run_cfg.seed)
    rdir.mkdir(parents=True, exist_ok=True)
    tracer = diagnostics.TraceLogger(
        rdir / "trace.csv", cfg.plastic_layers, cfg.eta0, cfg.max_norm,
        downsample=downsample)

    cfg_dict = run_cfg.to_dict()
    record: dict = {
        "schema_version": diagnostics.SCHEMA_VERSION,
        "task": run_cfg.task,
        "rule": run_cfg.rule,
        "seed": run_cfg.seed,
        "config": cfg_dict,
        "config_hash": diagnostics.config_hash(cfg_dict),
        "parameter_count": params.parameter_count(),
        "optimizer": {
            "name": "adamw-decoupled",
            "learning_rate": tcfg.learning_rate,
            "weight_decay": tcfg.weight_decay,
            "beta1": tcfg.beta1, "beta2": tcfg.beta2,
            "eps": tcfg.adam_eps, "grad_clip": tcfg.grad_clip,
        },
        "train_history": [],
        "validations": [],
        "summary": {},
        "aborted": None,
    }

    T.set_checked(tcfg.checked)
    episodes_seen = 0
    acc_grads: dict[str, np.ndarray] | None = None
    acc_count = 0
    try:
        for epoch in range(tcfg.epochs):
            for ep in train_eps:
                meta_loss, res, traces = run_episode(
                    params, ep, mode="train", rng=dropout_rng)
                grads = episode_gradients(meta_loss, params)
                if acc_grads is None:
                    acc_grads = grads
                else:
                    acc_grads = {k: acc_grads[k] + grads[k] for k in grads}
                acc_count += 1
                if acc_count >= tcfg.accumulate:
                    mean_grads = {k: v / acc_count
                                  for k, v in acc_grads.items()}
                    outer_step(params, opt, mean_grads, tcfg)
                    if tcfg.checked and not params.all_finite():
                        raise TrainingAborted(
                            "non-finite parameter after outer step")
                    acc_grads, acc_count = None, 0
                for tr in traces:
                    tracer.log_step(episodes_seen, epoch, tr)
                record["train_history"].append({
                    "episode": episodes_seen, "epoch": epoch,
                    "loss": res.loss, "metric": res.metric,
                    "mean_eta": res.mean_eta,
                    "mean_plastic_norm": res.mean_plastic_norm,
                })
                episodes_seen += 1
                if tcfg.val_every and episodes_seen % tcfg.val_every == 0:
                    val = evaluate(params, val_eps, run_cfg.seed)
                    record["validations"].append(
                        dict(asdict(val), epoch=epoch,
                             episodes_seen=episodes_seen))
            last = record["validations"][-1] if record["validations"] else None
            if last is None or last["episodes_seen"] != episodes_seen:
                val = evaluate(params, val_eps, run_cfg.seed)
                record["validations"].append(
                    dict(asdict(val), epoch=epoch,
                         episodes_seen=episodes_seen))
    except TrainingAborted as exc:
        record["aborted"] = str(exc)
        tracer.flush()
        record["wall_clock_sec"] = time.time() - t_start
        diagnostics.write_record(record, rdir / "record.json")
        raise
    finally:
        T.set_checked(False)

    tracer.flush()
    final = record["validations"][-1]
    hist = record["train_history"]
    record["summary"] = {
        "loss": final["loss"],
        "metric": final["metric"],
        "metric_name": final["metric_name"],
        # mechanistic signals are averaged over the training episodes
        "mean_eta": float(np.mean([h["mean_eta"] for h in hist])),
        "mean_plastic_norm": float(np.mean([h["mean_plastic_norm"]
                                            for h in hist])),
        "final_val_mean_eta": final["mean_eta"],
        "train_episodes": episodes_seen,
    }
    record["wall_clock_sec"] = time.time() - t_start
    diagnostics.write_record(record, rdir / "record.json")
    if save_checkpoint:
        params.save(rdir / "checkpoint.json")
    return rdir
