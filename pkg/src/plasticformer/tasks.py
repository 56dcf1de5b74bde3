"""Seeded episode generators for the four desk-scale task families.

All generators are pure functions of (config, seed): replaying a seed
reproduces the episode bit for bit. Episode arrays are plain numpy; the
trainer wraps rows into engine tensors as it consumes them.

Input encodings (last channel is always the answer-phase indicator):
  copying        [one-hot symbol | recall flag]
  cue_reward     [cue | revealed reward | query flag]
  regression     [x | revealed target | query flag]
  classification [embedding | one-hot label (zeroed on queries)]
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

TASK_KINDS = ("copying", "cue_reward", "regression", "classification")

PHASE_PRESENT = "present"
PHASE_DELAY = "delay"
PHASE_RECALL = "recall"
PHASE_QUERY = "query"


class TaskError(ValueError):
    pass


@dataclass
class Episode:
    inputs: np.ndarray        # (T, input_dim)
    targets: np.ndarray       # (T, output_dim)
    loss_mask: np.ndarray     # (T,) 0/1
    phase_flags: list[str]
    task_kind: str
    seed: int
    loss_type: str            # "cross_entropy" | "squared_error"

    def __post_init__(self):
        T_len = self.inputs.shape[0]
        if not (self.targets.shape[0] == self.loss_mask.shape[0]
                == len(self.phase_flags) == T_len):
            raise TaskError("episode sequences have unequal lengths")
        masked = self.loss_mask == 1
        if not masked.any():
            raise TaskError("episode has no supervised positions")

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


@dataclass
class CopyingConfig:
    n: int = 5
    delay: int = 20
    vocab: int = 10
    dataset_size: int = 50

    @property
    def input_dim(self) -> int:
        return self.vocab + 1

    @property
    def output_dim(self) -> int:
        return self.vocab


@dataclass
class CueRewardConfig:
    pairs: int = 8          # appendix value; the main text's 5 is reachable by config
    cue_dim: int = 20
    episode_len: int = 20
    dataset_size: int = 100

    @property
    def input_dim(self) -> int:
        return self.cue_dim + 2

    @property
    def output_dim(self) -> int:
        return 1


@dataclass
class RegressionConfig:
    input_dim_x: int = 3
    k_support: int = 10
    k_query: int = 10
    weight_scale: float = 1.0
    noise_sigma: float = 0.1
    dataset_size: int = 150

    @property
    def input_dim(self) -> int:
        return self.input_dim_x + 2

    @property
    def output_dim(self) -> int:
        return 1


@dataclass
class ClassificationConfig:
    ways: int = 5
    shots: int = 1
    queries_per_class: int = 15
    embed_dim: int = 256
    # per-coordinate prototype-noise std; 5.0 puts the nearest-centroid
    # reference near 0.34 accuracy at embed_dim=256 instead of saturating
    noise_sigma: float = 5.0
    train_episodes: int = 80
    val_episodes: int = 50

    @property
    def input_dim(self) -> int:
        return self.embed_dim + self.ways

    @property
    def output_dim(self) -> int:
        return self.ways


@dataclass
class TaskConfig:
    copying: CopyingConfig = field(default_factory=CopyingConfig)
    cue_reward: CueRewardConfig = field(default_factory=CueRewardConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    classification: ClassificationConfig = field(
        default_factory=ClassificationConfig)

    def for_task(self, task_kind: str):
        if task_kind not in TASK_KINDS:
            raise TaskError(f"unknown task {task_kind!r}")
        return getattr(self, task_kind)


def _task_rng(task_kind: str, seed: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([zlib.crc32(task_kind.encode()), seed]))


def gen_copying(cfg: CopyingConfig, seed: int) -> Episode:
    """Present n one-hot symbols, wait through a blank delay, then recall
    them in order while the indicator channel is high."""
    if cfg.vocab < 2:
        raise TaskError("copying needs vocab >= 2")
    rng = _task_rng("copying", seed)
    symbols = rng.integers(0, cfg.vocab, size=cfg.n)
    length = cfg.n + cfg.delay + cfg.n
    inputs = np.zeros((length, cfg.input_dim))
    targets = np.zeros((length, cfg.output_dim))
    mask = np.zeros(length, dtype=np.int64)
    flags: list[str] = []
    for i, s in enumerate(symbols):
        inputs[i, s] = 1.0
        flags.append(PHASE_PRESENT)
    flags.extend([PHASE_DELAY] * cfg.delay)
    for i, s in enumerate(symbols):
        pos = cfg.n + cfg.delay + i
        inputs[pos, cfg.vocab] = 1.0
        targets[pos, s] = 1.0
        mask[pos] = 1
        flags.append(PHASE_RECALL)
    return Episode(inputs, targets, mask, flags, "copying", seed,
                   "cross_entropy")


def gen_cue_reward(cfg: CueRewardConfig, seed: int) -> Episode:
    """Reveal cue/reward pairs for the first half of the episode, then
    query rewards for revealed cues in the second half."""
    reveal_steps = cfg.episode_len // 2
    query_steps = cfg.episode_len - reveal_steps
    if cfg.pairs > reveal_steps:
        raise TaskError(
            f"{cfg.pairs} pairs exceed {reveal_steps} presentation slots")
    if query_steps < 1:
        raise TaskError("episode too short for a query phase")
    rng = _task_rng("cue_reward", seed)
    cues = rng.uniform(0.0, 1.0, size=(cfg.pairs, cfg.cue_dim))
    rewards = rng.uniform(0.0, 1.0, size=cfg.pairs)

    reveal_order = rng.permutation(cfg.pairs)
    extra = rng.integers(0, cfg.pairs, size=reveal_steps - cfg.pairs)
    reveal_idx = np.concatenate([reveal_order, extra])
    query_idx = rng.integers(0, cfg.pairs, size=query_steps)

    length = cfg.episode_len
    inputs = np.zeros((length, cfg.input_dim))
    targets = np.zeros((length, 1))
    mask = np.zeros(length, dtype=np.int64)
    flags: list[str] = []
    for t, j in enumerate(reveal_idx):
        inputs[t, :cfg.cue_dim] = cues[j]
        inputs[t, cfg.cue_dim] = rewards[j]
        flags.append(PHASE_PRESENT)
    for i, j in enumerate(query_idx):
        t = reveal_steps + i
        inputs[t, :cfg.cue_dim] = cues[j]
        inputs[t, cfg.cue_dim + 1] = 1.0
        targets[t, 0] = rewards[j]
        mask[t] = 1
        flags.append(PHASE_QUERY)
    return Episode(inputs, targets, mask, flags, "cue_reward", seed,
                   "squared_error")


def gen_regression(cfg: RegressionConfig, seed: int) -> Episode:
    """Sample an affine map, reveal noisy support pairs, query noise-free
    function values on fresh points."""
    rng = _task_rng("regression", seed)
    w = rng.normal(0.0, cfg.weight_scale, size=cfg.input_dim_x)
    b = rng.normal(0.0, cfg.weight_scale)
    xs = rng.normal(size=(cfg.k_support + cfg.k_query, cfg.input_dim_x))
    noise = rng.normal(0.0, cfg.noise_sigma, size=cfg.k_support)

    length = cfg.k_support + cfg.k_query
    inputs = np.zeros((length, cfg.input_dim))
    targets = np.zeros((length, 1))
    mask = np.zeros(length, dtype=np.int64)
    flags: list[str] = []
    for i in range(cfg.k_support):
        inputs[i, :cfg.input_dim_x] = xs[i]
        inputs[i, cfg.input_dim_x] = xs[i] @ w + b + noise[i]
        flags.append(PHASE_PRESENT)
    for i in range(cfg.k_query):
        t = cfg.k_support + i
        x = xs[cfg.k_support + i]
        inputs[t, :cfg.input_dim_x] = x
        inputs[t, cfg.input_dim_x + 1] = 1.0
        targets[t, 0] = x @ w + b
        mask[t] = 1
        flags.append(PHASE_QUERY)
    return Episode(inputs, targets, mask, flags, "regression", seed,
                   "squared_error")


def gen_classification(cfg: ClassificationConfig, seed: int) -> Episode:
    """Synthetic episodic classification: gaussian class prototypes,
    one labelled support embedding per class, then shuffled queries with
    the label channel zeroed."""
    if cfg.ways > cfg.embed_dim:
        raise TaskError("ways must not exceed embed_dim")
    rng = _task_rng("classification", seed)
    protos = rng.normal(size=(cfg.ways, cfg.embed_dim))

    support_order = rng.permutation(cfg.ways)
    n_support = cfg.ways * cfg.shots
    n_query = cfg.ways * cfg.queries_per_class
    length = n_support + n_query
    inputs = np.zeros((length, cfg.input_dim))
    targets = np.zeros((length, cfg.ways))
    mask = np.zeros(length, dtype=np.int64)
    flags: list[str] = []

    t = 0
    for _ in range(cfg.shots):
        for c in support_order:
            emb = protos[c] + cfg.noise_sigma * rng.normal(size=cfg.embed_dim)
            inputs[t, :cfg.embed_dim] = emb
            inputs[t, cfg.embed_dim + c] = 1.0
            flags.append(PHASE_PRESENT)
            t += 1

    query_classes = np.repeat(np.arange(cfg.ways), cfg.queries_per_class)
    rng.shuffle(query_classes)
    for c in query_classes:
        emb = protos[c] + cfg.noise_sigma * rng.normal(size=cfg.embed_dim)
        inputs[t, :cfg.embed_dim] = emb
        targets[t, c] = 1.0
        mask[t] = 1
        flags.append(PHASE_QUERY)
        t += 1
    return Episode(inputs, targets, mask, flags, "classification", seed,
                   "cross_entropy")


_GENERATORS = {
    "copying": gen_copying,
    "cue_reward": gen_cue_reward,
    "regression": gen_regression,
    "classification": gen_classification,
}


def generate(task_kind: str, cfg: TaskConfig, seed: int) -> Episode:
    return _GENERATORS[task_kind](cfg.for_task(task_kind), seed)


def episode_seed(run_seed: int, split: str, index: int) -> int:
    """Derived episode seed; independent of the rule so every rule sees the
    same data for a given run seed."""
    salt = zlib.crc32(split.encode())
    return int(np.random.SeedSequence([run_seed, salt, index])
               .generate_state(1)[0])


def dump_episodes(episodes: list[Episode], path) -> None:
    """Line-delimited JSON dump for external inspection (schema: one object
    per line with inputs/targets/loss_mask/phase_flags/task_kind/seed)."""
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps({
                "task_kind": ep.task_kind,
                "seed": ep.seed,
                "loss_type": ep.loss_type,
                "inputs": ep.inputs.tolist(),
                "targets": ep.targets.tolist(),
                "loss_mask": ep.loss_mask.tolist(),
                "phase_flags": ep.phase_flags,
            }) + "\n")
