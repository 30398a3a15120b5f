"""Byte-level pre-norm decoder.

Matrix names follow the usual HF layout (``layers.0.self_attn.v_proj``,
``layers.1.mlp.down_proj``) so per-matrix reports read the same way.
Weights are stored (out_features, in_features); column ``j`` of a
projection consumes input channel ``j``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor

PROJECTIONS = ("self_attn.q_proj", "self_attn.k_proj", "self_attn.v_proj", "self_attn.o_proj",
               "mlp.up_proj", "mlp.down_proj")


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 256
    layers: int = 2
    width: int = 128
    heads: int = 4
    context: int = 128
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab, self.layers, self.width, self.heads, self.context, self.mlp_ratio) < 1:
            raise ConfigError(f"model dimensions must be positive: {self}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


class ToyLM:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        c = config
        std = 0.02
        out_std = std / math.sqrt(2 * c.layers)

        def add(name, shape, scale=None, ones=False):
            data = np.ones(shape) if ones else rng.normal(0.0, scale, size=shape)
            self.params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)

        add("embed_tokens", (c.vocab, c.width), std)
        add("embed_positions", (c.context, c.width), std)
        hidden = c.mlp_ratio * c.width
        for i in range(c.layers):
            p = f"layers.{i}."
            add(p + "input_norm", (c.width,), ones=True)
            for proj in ("q_proj", "k_proj", "v_proj"):
                add(p + "self_attn." + proj, (c.width, c.width), std)
            add(p + "self_attn.o_proj", (c.width, c.width), out_std)
            add(p + "post_attention_norm", (c.width,), ones=True)
            add(p + "mlp.up_proj", (hidden, c.width), std)
            add(p + "mlp.down_proj", (c.width, hidden), out_std)
        add("norm", (c.width,), ones=True)
        add("lm_head", (c.vocab, c.width), std)

    # -- parameter helpers -----------------------------------------------------
    def weight_matrix_names(self) -> list[str]:
        """Projection matrices subject to quantization; embeddings and head excluded."""
        return [f"layers.{i}.{p}" for i in range(self.config.layers) for p in PROJECTIONS]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)}")
        for name, t in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ConfigError(f"{name}: shape {arr.shape} does not match model {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ------------------------------------------------------------------
    def logits(self, ids: np.ndarray, weights: Mapping[str, Tensor] | None = None,
               capture: dict | None = None) -> Tensor:
        """Logits for every position of ``ids`` (batch, time).

        ``weights`` substitutes tensors for named parameters (the QAT loop
        passes mixed-precision weights here). ``capture`` receives the input
        activations of every projection, keyed by matrix name.
        """
        c = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ConfigError(f"token batch must be 2-D, got shape {ids.shape}")
        b, t = ids.shape
        if b == 0 or t == 0:
            raise DataError("empty token batch")
        if t > c.context:
            raise ConfigError(f"sequence length {t} exceeds context {c.context}")
        w = dict(self.params)
        if weights:
            w.update(weights)

        def proj(name, x):
            if capture is not None:
                capture.setdefault(name, []).append(x.data)
            return T.linear(x, w[name])

        h_dim = c.width // c.heads
        x = T.embedding(w["embed_tokens"], ids) + T.embedding(w["embed_positions"], np.arange(t))
        for i in range(c.layers):
            p = f"layers.{i}."
            hn = T.rms_norm(x, w[p + "input_norm"])
            q = proj(p + "self_attn.q_proj", hn).reshape(b, t, c.heads, h_dim).transpose(0, 2, 1, 3)
            k = proj(p + "self_attn.k_proj", hn).reshape(b, t, c.heads, h_dim).transpose(0, 2, 3, 1)
            v = proj(p + "self_attn.v_proj", hn).reshape(b, t, c.heads, h_dim).transpose(0, 2, 1, 3)
            att = T.causal_softmax((q @ k) * (1.0 / math.sqrt(h_dim)))
            y = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, c.width)
            x = x + proj(p + "self_attn.o_proj", y)
            hn = T.rms_norm(x, w[p + "post_attention_norm"])
            x = x + proj(p + "mlp.down_proj", T.gelu(proj(p + "mlp.up_proj", hn)))
        x = T.rms_norm(x, w["norm"])
        return T.linear(x, w["lm_head"])

    def loss(self, batch: np.ndarray, weights: Mapping[str, Tensor] | None = None,
             capture: dict | None = None) -> Tensor:
        """Mean next-token NLL; each window of length L yields L-1 predictions."""
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[0] == 0 or batch.shape[1] < 2:
            raise DataError(f"loss needs a (batch>=1, seq>=2) token array, got shape {batch.shape}")
        logits = self.logits(batch[:, :-1], weights, capture)
        return T.cross_entropy(logits.reshape(-1, self.config.vocab), batch[:, 1:].reshape(-1))

    def token_nll(self, batch: np.ndarray, weights: Mapping[str, Tensor] | None = None) -> np.ndarray:
        """Per-token NLL (batch, seq-1), no graph recorded."""
        batch = np.asarray(batch)
        with T.no_grad():
            logits = self.logits(batch[:, :-1], weights)
            nll = T.cross_entropy(logits.reshape(-1, self.config.vocab), batch[:, 1:].reshape(-1),
                                  reduction="none")
        return nll.data.reshape(batch.shape[0], -1)


def perplexity(model: ToyLM, eval_batches, weights: Mapping[str, Tensor] | None = None) -> float:
    """``exp`` of the mean token NLL over every predicted position, summed in batch order."""
    total = 0.0
    tokens = 0
    for batch in eval_batches:
        nll = model.token_nll(batch, weights)
        total += float(nll.sum(dtype=np.float64))
        tokens += nll.size
    if tokens == 0:
        raise DataError("perplexity needs at least one evaluation batch")
    return math.exp(total / tokens)


def unigram_perplexity(train_ids, eval_batches, vocab: int = 256) -> float:
    """Perplexity of an add-one unigram model fitted on ``train_ids``, over the predicted positions."""
    counts = np.bincount(np.asarray(train_ids).reshape(-1), minlength=vocab).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    total, tokens = 0.0, 0
    for batch in eval_batches:
        targets = np.asarray(batch)[:, 1:].reshape(-1)
        total -= logp[targets].sum()
        tokens += targets.size
    if tokens == 0:
        raise DataError("perplexity needs at least one evaluation batch")
    return math.exp(total / tokens)
