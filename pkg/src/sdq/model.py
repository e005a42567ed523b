"""Toy transformer encoder with per-head attention capture.

Pre-projection multi-head attention: per head, softmax(Q K^T / sqrt(d_k)) V is
captured *before* the heads are concatenated and pushed through the output
projection — those per-head context tensors are what attention distillation
matches.  Word + learned position embeddings (no segment embeddings), erf
GELU, post-sublayer LayerNorm, CLS (first-position) pooling for sentence
classification or per-position logits for tagging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LayerKind(str, Enum):
    """Role tag carried by every parameter; drives quantization exclusions."""

    QUERY = "query"
    KEY = "key"
    VALUE = "value"
    ATTENTION_OUTPUT = "attention_output"
    INTERMEDIATE = "intermediate"
    OUTPUT = "output"
    EMBEDDING = "embedding"
    CLASSIFIER = "classifier"


# kinds whose tensors are never quantized, in any regime
EXCLUDED_KINDS = (LayerKind.EMBEDDING, LayerKind.CLASSIFIER)

TASKS = ("sentence", "token")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    hidden: int = 32
    ffn: int = 64
    vocab: int = 64
    max_len: int = 16
    classes: int = 2
    task: str = "sentence"
    dropout: float = 0.1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"model config: task must be one of {TASKS}, got {self.task!r}")
        for name in ("layers", "heads", "hidden", "ffn", "vocab", "max_len", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"model config: {name} must be >= 1")
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"model config: hidden ({self.hidden}) must divide evenly over "
                f"{self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"model config: dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


class ModelParams:
    """Named parameter tensors plus a kind tag for each name."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor],
                 kinds: dict[str, LayerKind], init_seed: int):
        missing = set(tensors) ^ set(kinds)
        if missing:
            raise ValueError(f"model params: names without kind tags (or vice versa): {missing}")
        self.config = config
        self.tensors = tensors
        self.kinds = kinds
        self.init_seed = init_seed

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def quantizable_names(self) -> list[str]:
        """2-D weight matrices outside the excluded kinds."""
        return [n for n, t in self.tensors.items()
                if t.ndim == 2 and self.kinds[n] not in EXCLUDED_KINDS]

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def freeze(self):
        for t in self.tensors.values():
            t.requires_grad = False
        return self


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within two sigma."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic init: truncated-normal weights, zero biases, unit gains."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    d, f = config.hidden, config.ffn
    tensors: dict[str, Tensor] = {}
    kinds: dict[str, LayerKind] = {}

    def put(name, kind, array):
        tensors[name] = Tensor(array, requires_grad=True)
        kinds[name] = kind

    put("embedding.word.weight", LayerKind.EMBEDDING, _truncated_normal(rng, (config.vocab, d)))
    put("embedding.position.weight", LayerKind.EMBEDDING, _truncated_normal(rng, (config.max_len, d)))
    for l in range(config.layers):
        p = f"layer{l}"
        for role, kind in (("query", LayerKind.QUERY), ("key", LayerKind.KEY),
                           ("value", LayerKind.VALUE)):
            put(f"{p}.{role}.weight", kind, _truncated_normal(rng, (d, d)))
            put(f"{p}.{role}.bias", kind, np.zeros(d, dtype=np.float32))
        put(f"{p}.attention_output.weight", LayerKind.ATTENTION_OUTPUT, _truncated_normal(rng, (d, d)))
        put(f"{p}.attention_output.bias", LayerKind.ATTENTION_OUTPUT, np.zeros(d, dtype=np.float32))
        put(f"{p}.attention_output.norm_gain", LayerKind.ATTENTION_OUTPUT, np.ones(d, dtype=np.float32))
        put(f"{p}.attention_output.norm_bias", LayerKind.ATTENTION_OUTPUT, np.zeros(d, dtype=np.float32))
        put(f"{p}.intermediate.weight", LayerKind.INTERMEDIATE, _truncated_normal(rng, (d, f)))
        put(f"{p}.intermediate.bias", LayerKind.INTERMEDIATE, np.zeros(f, dtype=np.float32))
        put(f"{p}.output.weight", LayerKind.OUTPUT, _truncated_normal(rng, (f, d)))
        put(f"{p}.output.bias", LayerKind.OUTPUT, np.zeros(d, dtype=np.float32))
        put(f"{p}.output.norm_gain", LayerKind.OUTPUT, np.ones(d, dtype=np.float32))
        put(f"{p}.output.norm_bias", LayerKind.OUTPUT, np.zeros(d, dtype=np.float32))
    put("classifier.weight", LayerKind.CLASSIFIER, _truncated_normal(rng, (d, config.classes)))
    put("classifier.bias", LayerKind.CLASSIFIER, np.zeros(config.classes, dtype=np.float32))
    return ModelParams(config, tensors, kinds, init_seed=int(seed))


def parameter_count(config: ModelConfig) -> int:
    """Closed form for the total parameter count."""
    d, f = config.hidden, config.ffn
    per_layer = 3 * (d * d + d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    return (config.vocab * d + config.max_len * d
            + config.layers * per_layer
            + d * config.classes + config.classes)


@dataclass
class ForwardResult:
    """Logits plus the taps distillation needs."""

    logits: Tensor
    attention_trace: list  # [layer][head] -> Tensor (batch, seq, head_dim), pre-concat
    attention_weights: list  # [layer] -> Tensor (batch, heads, seq, seq)
    hidden_states: list  # [layer] -> Tensor (batch, seq, hidden), post-LayerNorm


def encoder_forward(params: ModelParams, tokens: np.ndarray, train_mode: bool = False,
                    rng: np.random.Generator | None = None,
                    weight_view: dict[str, Tensor] | None = None) -> ForwardResult:
    """Run the encoder.

    `weight_view` substitutes named parameter tensors (noisy or reconstructed
    weights) without touching the stored ones.  Dropout masks are drawn from
    `rng` only when `train_mode` is set.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"encoder_forward: tokens must be (batch, seq), got {tokens.shape}")
    batch, seq = tokens.shape
    if seq > cfg.max_len:
        raise ValueError(f"encoder_forward: sequence length {seq} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"encoder_forward: token id out of range [0, {cfg.vocab})")
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ValueError("encoder_forward: train_mode with dropout needs an rng")

    view = weight_view or {}

    def p(name: str) -> Tensor:
        return view.get(name, params.tensors[name])

    def dropped(x: Tensor) -> Tensor:
        if not train_mode or cfg.dropout == 0.0:
            return x
        mask = (rng.random(x.shape) >= cfg.dropout).astype(np.float32)
        return T.dropout_mask(x, mask, cfg.dropout)

    # embeddings: word lookup + position lookup (positions gathered per row)
    positions = np.broadcast_to(np.arange(seq), (batch, seq))
    x = T.add(T.gather_rows(p("embedding.word.weight"), tokens),
              T.gather_rows(p("embedding.position.weight"), positions))
    x = dropped(x)

    H, dh = cfg.heads, cfg.head_dim
    inv_sqrt_dk = 1.0 / math.sqrt(dh)
    trace: list[list[Tensor]] = []
    att_weights: list[Tensor] = []
    hidden_states: list[Tensor] = []

    for l in range(cfg.layers):
        pre = f"layer{l}"

        def heads_of(name_root):
            proj = T.add_bias(T.matmul(x, p(f"{name_root}.weight")), p(f"{name_root}.bias"))
            return T.transpose(T.reshape(proj, (batch, seq, H, dh)), (0, 2, 1, 3))

        q = heads_of(f"{pre}.query")
        k = heads_of(f"{pre}.key")
        v = heads_of(f"{pre}.value")
        scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt_dk)
        att = T.softmax_t(scores, axis=-1)
        ctx = T.matmul(att, v)  # (batch, heads, seq, head_dim)
        att_weights.append(att)
        trace.append([T.select(ctx, axis=1, index=h) for h in range(H)])

        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch, seq, cfg.hidden))
        proj = T.add_bias(T.matmul(merged, p(f"{pre}.attention_output.weight")),
                          p(f"{pre}.attention_output.bias"))
        x = T.layer_norm(T.add(x, dropped(proj)),
                         p(f"{pre}.attention_output.norm_gain"),
                         p(f"{pre}.attention_output.norm_bias"))

        inner = T.gelu(T.add_bias(T.matmul(x, p(f"{pre}.intermediate.weight")),
                                  p(f"{pre}.intermediate.bias")))
        out = T.add_bias(T.matmul(inner, p(f"{pre}.output.weight")), p(f"{pre}.output.bias"))
        x = T.layer_norm(T.add(x, dropped(out)),
                         p(f"{pre}.output.norm_gain"), p(f"{pre}.output.norm_bias"))
        hidden_states.append(x)

    if cfg.task == "sentence":
        pooled = T.select(x, axis=1, index=0)  # CLS position
        logits = T.add_bias(T.matmul(pooled, p("classifier.weight")), p("classifier.bias"))
    else:
        logits = T.add_bias(T.matmul(x, p("classifier.weight")), p("classifier.bias"))

    return ForwardResult(logits=logits, attention_trace=trace,
                         attention_weights=att_weights, hidden_states=hidden_states)


def predict(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """Eval-mode class probabilities (softmax over the last axis)."""
    with T.no_grad():
        result = encoder_forward(params, tokens, train_mode=False)
        return T.softmax_t(result.logits, axis=-1).data
