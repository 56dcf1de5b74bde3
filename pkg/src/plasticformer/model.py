"""Decoder-only transformer with plastic position-wise FFN layers.

The model runs token by token over a key/value cache so fast weights can
change between positions. Plastic layers are the individual linear maps
inside each block's FFN, indexed globally: layer l lives in block l // 2,
and l % 2 selects the first (d_model -> d_ff) or second (d_ff -> d_model)
matrix. Effective weights at position t are the static matrix plus the
fast buffer; updating the buffers is the plasticity module's job.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

RULES = ("none", "hebbian", "gradient")
INNER_GRAD_MODES = ("second_order", "first_order")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int
    output_dim: int
    d_model: int = 128
    d_ff: int = 256
    n_heads: int = 4
    n_layers: int = 2
    aux_dim: int = 4
    dropout: float = 0.1
    plastic_layers: tuple[int, ...] | None = None  # None -> all FFN matrices
    rule: str = "none"
    eta0: float = 0.2
    max_norm: float = 1.0
    inner_grad_mode: str = "second_order"
    layernorm_eps: float = 1e-5
    bptt_truncation: int | None = None

    def __post_init__(self):
        if self.plastic_layers is None:
            self.plastic_layers = tuple(range(2 * self.n_layers))
        else:
            self.plastic_layers = tuple(sorted(self.plastic_layers))
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.rule not in RULES:
            raise ConfigError(f"unknown rule {self.rule!r}")
        if self.inner_grad_mode not in INNER_GRAD_MODES:
            raise ConfigError(f"unknown inner_grad_mode {self.inner_grad_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.eta0 < 0:
            raise ConfigError("eta0 must be >= 0")
        if self.max_norm <= 0:
            raise ConfigError("max_norm must be > 0")
        if self.aux_dim < 0:
            raise ConfigError("aux_dim must be >= 0")
        if min(self.d_model, self.d_ff, self.n_heads, self.n_layers,
               self.input_dim, self.output_dim) <= 0:
            raise ConfigError("dimensions must be positive")
        for l in self.plastic_layers:
            if not 0 <= l < 2 * self.n_layers:
                raise ConfigError(f"plastic layer index {l} out of range")

    @property
    def head_width(self) -> int:
        # token prediction + auxiliary outputs + modulation pre-activation
        return self.output_dim + self.aux_dim + 1

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def plastic_shape(self, l: int) -> tuple[int, int]:
        """(d_in, d_out) of plastic layer l."""
        if l % 2 == 0:
            return (self.d_model, self.d_ff)
        return (self.d_ff, self.d_model)

    def plastic_bias_shape(self, l: int) -> tuple[int, int]:
        return (1, self.plastic_shape(l)[1])


def _param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter stream keyed by name, so the same seed yields the same
    shared weights regardless of which rule-specific tensors exist."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _linear_init(rng: np.random.Generator, fan_in: int,
                 shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


ALPHA_INIT_SCALE = 0.01


class StaticParams:
    """Slow (meta-trained) parameters, stored as named leaf tensors."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor],
                 seed: int):
        self.config = config
        self.tensors = tensors
        self.seed = seed

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "StaticParams":
        d, f, hw = config.d_model, config.d_ff, config.head_width
        specs: list[tuple[str, tuple[int, int], int]] = [
            ("embed.w", (config.input_dim, d), config.input_dim),
            ("embed.b", (1, d), config.input_dim),
        ]
        for i in range(config.n_layers):
            p = f"block{i}"
            specs += [
                (f"{p}.ln1.g", (1, d), 0), (f"{p}.ln1.b", (1, d), 0),
                (f"{p}.attn.wq", (d, d), d), (f"{p}.attn.bq", (1, d), d),
                (f"{p}.attn.wk", (d, d), d), (f"{p}.attn.bk", (1, d), d),
                (f"{p}.attn.wv", (d, d), d), (f"{p}.attn.bv", (1, d), d),
                (f"{p}.attn.wo", (d, d), d), (f"{p}.attn.bo", (1, d), d),
                (f"{p}.ln2.g", (1, d), 0), (f"{p}.ln2.b", (1, d), 0),
                (f"{p}.ff1.w", (d, f), d), (f"{p}.ff1.b", (1, f), d),
                (f"{p}.ff2.w", (f, d), f), (f"{p}.ff2.b", (1, d), f),
            ]
        specs += [
            ("final_ln.g", (1, d), 0), ("final_ln.b", (1, d), 0),
            ("head.w", (d, hw), d), ("head.b", (1, hw), d),
        ]
        if config.rule in ("hebbian", "gradient"):
            for l in config.plastic_layers:
                specs.append((f"alpha{l}", config.plastic_shape(l), -1))
        if config.rule == "gradient":
            for l in config.plastic_layers:
                specs.append((f"beta{l}", config.plastic_bias_shape(l), -1))

        tensors: dict[str, Tensor] = {}
        for name, shape, fan_in in specs:
            rng = _param_rng(seed, name)
            if fan_in == 0:  # layer-norm affine
                data = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
            elif fan_in == -1:  # plasticity rates
                data = rng.uniform(-ALPHA_INIT_SCALE, ALPHA_INIT_SCALE, shape)
            else:
                data = _linear_init(rng, fan_in, shape)
            tensors[name] = T.parameter(data, name=name)
        return cls(config, tensors, seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    # checkpoint format: one JSON object; tensors as nested lists keyed by
    # the names above (documented in the README)
    def save(self, path) -> None:
        payload = {
            "schema_version": 1,
            "config": asdict(self.config),
            "seed": self.seed,
            "params": {k: v.data.tolist() for k, v in self.tensors.items()},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "StaticParams":
        with open(path) as fh:
            payload = json.load(fh)
        cfg_dict = dict(payload["config"])
        if cfg_dict.get("plastic_layers") is not None:
            cfg_dict["plastic_layers"] = tuple(cfg_dict["plastic_layers"])
        if cfg_dict.get("bptt_truncation") is not None:
            cfg_dict["bptt_truncation"] = int(cfg_dict["bptt_truncation"])
        config = ModelConfig(**cfg_dict)
        tensors = {k: T.parameter(np.array(v), name=k)
                   for k, v in payload["params"].items()}
        return cls(config, tensors, int(payload["seed"]))


@dataclass
class FastState:
    """Per-sequence state: plastic buffers, step index, attention cache."""
    t: int
    w: dict[int, Tensor]
    b: dict[int, Tensor]
    # kv[layer][head] = (K, V) with K, V of shape (t, d_head), or None at t=0
    kv: list[list[tuple[Tensor, Tensor] | None]]


@dataclass
class StepOutput:
    y: Tensor                 # (1, output_dim) token prediction
    ybar: Tensor | None       # (1, aux_dim) auxiliary outputs; None if aux_dim=0
    eta_tilde: Tensor         # (1, 1) modulation pre-activation
    p: dict[int, Tensor]      # pre-synaptic activations per plastic layer
    q: dict[int, Tensor]      # post-synaptic activations per plastic layer


def init_fast_state(config: ModelConfig) -> FastState:
    """Zeroed buffers, empty cache. Buffers are grad-enabled leaves so the
    first step's inner gradients have a target."""
    w = {l: T.parameter(np.zeros(config.plastic_shape(l)))
         for l in config.plastic_layers}
    b = {l: T.parameter(np.zeros(config.plastic_bias_shape(l)))
         for l in config.plastic_layers}
    kv = [[None] * config.n_heads for _ in range(config.n_layers)]
    return FastState(t=0, w=w, b=b, kv=kv)


_POSENC_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(t: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of position t, shape (1, d_model)."""
    key = (t, d_model)
    pe = _POSENC_CACHE.get(key)
    if pe is None:
        i = np.arange(d_model // 2)
        angle = t / np.power(10000.0, 2 * i / d_model)
        pe = np.zeros((1, d_model))
        pe[0, 0::2] = np.sin(angle)
        pe[0, 1::2] = np.cos(angle)
        _POSENC_CACHE[key] = pe
    return pe


def _dropout(x: Tensor, rate: float, train: bool,
             rng: np.random.Generator | None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return T.cmul(x, mask)


def forward_step(params: StaticParams, state: FastState, x_t: np.ndarray,
                 *, train: bool = False,
                 rng: np.random.Generator | None = None
                 ) -> tuple[StepOutput, FastState]:
    """Process one token: causal attention over the cached prefix plus the
    current position, plastic FFNs with effective weights, output head.

    Fast weights are read, never written; the returned state carries the
    extended KV cache and t + 1.
    """
    cfg = params.config
    x_t = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    if x_t.shape[1] != cfg.input_dim:
        raise T.ShapeError(
            f"input width {x_t.shape[1]} != input_dim {cfg.input_dim}")
    t = state.t
    dh = cfg.d_head
    plastic_active = cfg.rule != "none"

    h = T.add(T.matmul(T.tensor(x_t), params["embed.w"]), params["embed.b"])
    h = T.add(h, T.tensor(positional_encoding(t, cfg.d_model)))

    new_kv: list[list[tuple[Tensor, Tensor] | None]] = []
    p_cap: dict[int, Tensor] = {}
    q_cap: dict[int, Tensor] = {}

    for i in range(cfg.n_layers):
        pre = f"block{i}"
        a_in = T.layernorm_rows(h, params[f"{pre}.ln1.g"],
                                params[f"{pre}.ln1.b"], cfg.layernorm_eps)
        q_row = T.add(T.matmul(a_in, params[f"{pre}.attn.wq"]),
                      params[f"{pre}.attn.bq"])
        k_row = T.add(T.matmul(a_in, params[f"{pre}.attn.wk"]),
                      params[f"{pre}.attn.bk"])
        v_row = T.add(T.matmul(a_in, params[f"{pre}.attn.wv"]),
                      params[f"{pre}.attn.bv"])

        heads = []
        layer_kv: list[tuple[Tensor, Tensor] | None] = []
        for hd in range(cfg.n_heads):
            lo, hi = hd * dh, (hd + 1) * dh
            q_h = T.block(q_row, 0, 1, lo, hi)
            k_h = T.block(k_row, 0, 1, lo, hi)
            v_h = T.block(v_row, 0, 1, lo, hi)
            prev = state.kv[i][hd]
            if prev is None:
                K, V = k_h, v_h
            else:
                K = T.concat([prev[0], k_h], axis=0)
                V = T.concat([prev[1], v_h], axis=0)
            layer_kv.append((K, V))
            scores = T.scale(T.matmul(q_h, T.transpose(K)), 1.0 / math.sqrt(dh))
            attn = T.softmax_rows(scores)
            heads.append(T.matmul(attn, V))
        new_kv.append(layer_kv)

        ctx = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
        attn_out = T.add(T.matmul(ctx, params[f"{pre}.attn.wo"]),
                         params[f"{pre}.attn.bo"])
        h = T.add(h, _dropout(attn_out, cfg.dropout, train, rng))

        f_in = T.layernorm_rows(h, params[f"{pre}.ln2.g"],
                                params[f"{pre}.ln2.b"], cfg.layernorm_eps)
        l1, l2 = 2 * i, 2 * i + 1

        w1 = params[f"{pre}.ff1.w"]
        b1 = params[f"{pre}.ff1.b"]
        if plastic_active and l1 in state.w:
            w1 = T.add(w1, state.w[l1])
            if cfg.rule == "gradient":
                b1 = T.add(b1, state.b[l1])
        act = T.relu(T.add(T.matmul(f_in, w1), b1))

        w2 = params[f"{pre}.ff2.w"]
        b2 = params[f"{pre}.ff2.b"]
        if plastic_active and l2 in state.w:
            w2 = T.add(w2, state.w[l2])
            if cfg.rule == "gradient":
                b2 = T.add(b2, state.b[l2])
        ff_out = T.add(T.matmul(act, w2), b2)

        if l1 in state.w:
            p_cap[l1] = f_in
            q_cap[l1] = act
        if l2 in state.w:
            p_cap[l2] = act
            q_cap[l2] = ff_out

        h = T.add(h, _dropout(ff_out, cfg.dropout, train, rng))

    h = T.layernorm_rows(h, params["final_ln.g"], params["final_ln.b"],
                         cfg.layernorm_eps)
    out = T.add(T.matmul(h, params["head.w"]), params["head.b"])

    d_o, aux = cfg.output_dim, cfg.aux_dim
    y = T.block(out, 0, 1, 0, d_o)
    ybar = T.block(out, 0, 1, d_o, d_o + aux) if aux > 0 else None
    eta_tilde = T.block(out, 0, 1, d_o + aux, d_o + aux + 1)

    step = StepOutput(y=y, ybar=ybar, eta_tilde=eta_tilde, p=p_cap, q=q_cap)
    new_state = FastState(t=t + 1, w=state.w, b=state.b, kv=new_kv)
    return step, new_state


def detach_cache(state: FastState) -> FastState:
    """Drop graph history from the KV cache (evaluation-time memory relief;
    values are unchanged)."""
    kv = [[(kv_h[0].detach(), kv_h[1].detach()) if kv_h else None
           for kv_h in layer] for layer in state.kv]
    return replace(state, kv=kv)
