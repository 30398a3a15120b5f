"""Mixed-precision quantization-aware training.

Each step the loss is computed on ``cherry columns ∪ fake_quant(normal
columns)``. Cherry columns receive their true gradient; normal columns keep
full-precision latent copies that receive the upstream gradient unchanged
(straight-through). Group scales are recomputed from the latent weights
every forward. Cherry sets and per-column trick scales are fixed before the
first step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .cherry import MixedMatrix, normal_columns, reconstruct, select_cherry_columns, split_weights
from .errors import ConfigError, NumericError
from .impact import activation_channel_means, activation_metric, estimate_impact, weight_metric
from .model import ModelConfig, ToyLM
from .optim import Adam, cosine_lr
from .quant import QuantConfig, fake_quant_grouped
from .tensor import Tensor

METRICS = ("impact", "weight", "activation")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup_frac: float = 0.05
    floor_frac: float = 0.1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be >= 0")


@dataclass
class QatConfig(TrainConfig):
    """Training settings plus the quantization recipe.

    ``quant=None`` turns fake quantization off (plain fine-tuning).
    ``floor_frac=None`` picks 25% of peak for 2/3-bit and 10% for 4-bit.
    """

    quant: QuantConfig | None = field(default_factory=QuantConfig)
    metric: str = "impact"
    ste: str = "identity"
    calib_sequences: int = 32
    search_tokens: int = 2048
    divergence_factor: float = 10.0
    steps: int = 200
    peak_lr: float = 5e-4
    floor_frac: float | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.ste not in ("identity", "clipped"):
            raise ConfigError(f"ste must be 'identity' or 'clipped', got {self.ste!r}")
        if self.floor_frac is None:
            self.floor_frac = 0.1 if self.quant is not None and self.quant.bits == 4 else 0.25

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quant"] = self.quant.to_dict() if self.quant else None
        return d


# -- straight-through fake quantization ------------------------------------------------

def _clip_mask(w: np.ndarray, k: int, group_size: int, eps: float) -> np.ndarray:
    """True where the value sits in the eps-clipped band of its group's range."""
    from .quant import _expand_groups, _grouped_view
    half = 1 << (k - 1)
    s = _expand_groups(np.abs(_grouped_view(w, group_size)).max(axis=2) / half, group_size, w.shape[1])
    ratio = np.abs(w) / np.where(s > 0, s, 1.0)
    return ratio > half - eps


def ste_fake_quant_backward(upstream_grad, latent_w, k: int, eps: float = 0.01, group_size: int | None = None,
                            variant: str = "identity") -> np.ndarray:
    """Gradient reaching the latent weight through the quantizer.

    ``identity`` passes ``upstream_grad`` through untouched; ``clipped`` zeros
    it where the latent value lies in the clip band.
    """
    g = np.asarray(upstream_grad)
    if variant == "identity":
        return g
    w = np.asarray(latent_w)
    w2 = w.reshape(w.shape[0], -1) if w.ndim > 1 else w.reshape(1, -1)
    mask = _clip_mask(w2, k, group_size or w2.shape[1], eps).reshape(w.shape)
    return np.where(mask, 0, g).astype(g.dtype)


def fake_quant_ste(x: Tensor, k: int, group_size: int, eps: float = 0.01, variant: str = "identity") -> Tensor:
    """Grouped symmetric fake quantization of a 2-D tensor with a straight-through backward."""
    xd = x.data
    out = fake_quant_grouped(xd, k, group_size, eps).astype(xd.dtype)
    return T.apply_op("fake_quant", out, (x,),
                      lambda g: (ste_fake_quant_backward(g, xd, k, eps, group_size, variant),))


def quantize_normal_part(w_normal: np.ndarray, quant: QuantConfig, trick_scales=None) -> np.ndarray:
    """Training-time ``Quant(N)`` with float32 scales: symmetric, or ``Q(w*s)/s`` with asymmetric Q."""
    if trick_scales is None:
        return fake_quant_grouped(w_normal, quant.bits, quant.group_size, quant.clip_eps)
    s = np.asarray(trick_scales, dtype=np.float32)
    deq = fake_quant_grouped(w_normal * s, quant.bits, quant.group_size, symmetric=False)
    return deq / s


def mixed_weight(latent: Tensor, cherry_idx: np.ndarray, quant: QuantConfig, trick_scales=None,
                 ste: str = "identity") -> Tensor:
    """Forward value ``C ∪ Quant(N)`` of one matrix, differentiable w.r.t. the latent weights."""
    w = latent.data
    normal_idx = normal_columns(w.shape[1], cherry_idx)
    out = w.copy()
    out[:, normal_idx] = quantize_normal_part(w[:, normal_idx], quant, trick_scales)

    def back(g):
        if ste == "identity":
            return (g,)
        gn = g[:, normal_idx]
        src = w[:, normal_idx] * (1.0 if trick_scales is None else np.asarray(trick_scales, np.float32))
        masked = g.copy()
        if trick_scales is None:
            masked[:, normal_idx] = ste_fake_quant_backward(gn, src, quant.bits, quant.clip_eps,
                                                            quant.group_size, "clipped")
        return (masked,)

    return T.apply_op("mixed_weight", out.astype(w.dtype), (latent,), back)


# -- per-column scale search ------------------------------------------------------------

@dataclass
class ScaleSearch:
    scales: np.ndarray      # float16, one per normal column
    alpha: float
    alphas: np.ndarray
    errors: np.ndarray


def candidate_scales(channel_mean: np.ndarray, alpha: float) -> np.ndarray:
    m = np.asarray(channel_mean, dtype=np.float64)
    s = np.where(m > 0, np.power(np.where(m > 0, m, 1.0), alpha), 1.0)
    return s.astype(np.float16)


def search_scales(w_normal, x_normal, k: int, grid_points: int = 20, group_size: int = 128) -> ScaleSearch:
    """Grid-search ``alpha`` in ``s_j = mean|x_j| ** alpha`` minimizing ``||W X - Q'(W) X||^2``.

    ``w_normal`` is (rows, n_normal); ``x_normal`` is (tokens, n_normal), the
    layer inputs restricted to normal columns. Ties keep the smaller alpha;
    columns with zero activation get ``s = 1``.
    """
    w = np.asarray(w_normal, dtype=np.float32)
    x = np.asarray(x_normal, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ConfigError(f"activations {x.shape} do not match weight columns {w.shape}")
    means = np.abs(x.astype(np.float64)).mean(axis=0)
    alphas = np.linspace(0.0, 1.0, grid_points) if grid_points > 1 else np.zeros(1)
    quant = QuantConfig(bits=k, group_size=group_size, scale_trick=True)
    errors = np.empty(len(alphas))
    ref = x.astype(np.float64) @ w.T.astype(np.float64)
    for i, a in enumerate(alphas):
        s = candidate_scales(means, a).astype(np.float32)
        wq = quantize_normal_part(w, quant, s)
        errors[i] = float(np.sum((ref - x.astype(np.float64) @ wq.T.astype(np.float64)) ** 2))
    best = int(np.argmin(errors))
    return ScaleSearch(candidate_scales(means, alphas[best]), float(alphas[best]), alphas, errors)


# -- training loops ------------------------------------------------------------------------

@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def to_dict(self) -> dict:
        return {"steps": self.steps}


def batch_stream(windows: np.ndarray, batch_size: int, seed: int):
    """Endless reshuffled epochs over ``windows``; order depends only on ``seed``."""
    rng = np.random.default_rng(seed)
    n = len(windows)
    if n == 0:
        raise ConfigError("no training windows")
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield windows[order[start:start + batch_size]]


def _train_loop(model: ToyLM, windows: np.ndarray, cfg: TrainConfig,
                weight_fn: Callable[[], Mapping[str, Tensor] | None] = lambda: None,
                divergence_factor: float | None = None,
                on_step: Callable[[int, float], None] | None = None) -> TrainLog:
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps_opt, cfg.weight_decay)
    stream = batch_stream(windows, cfg.batch_size, cfg.seed)
    log = TrainLog()
    first = None
    for step in range(cfg.steps):
        lr = cosine_lr(step + 1, cfg.steps, cfg.warmup_frac, cfg.floor_frac, cfg.peak_lr)
        batch = next(stream)
        opt.zero_grad()
        loss = model.loss(batch, weight_fn())
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        first = value if first is None else first
        if divergence_factor and value > divergence_factor * first:
            raise NumericError(f"training diverged at step {step}: loss {value:.4f} > "
                               f"{divergence_factor}x initial {first:.4f}")
        T.backward(loss)
        opt.step(lr)
        log.steps.append({"step": step, "loss": value, "lr": lr})
        if on_step:
            on_step(step, value)
    model.zero_grad()
    return log


@dataclass
class BaseRun:
    model: ToyLM
    log: TrainLog
    config: TrainConfig

    def checkpoint(self, manifest: dict | None = None) -> Checkpoint:
        m = {"kind": "base", "train_config": asdict(self.config),
             "final_loss": self.log.losses[-1] if self.log.steps else None}
        m.update(manifest or {})
        return Checkpoint.from_model(self.model, manifest=m)


def train_base(model_config: ModelConfig, windows: np.ndarray, cfg: TrainConfig, on_step=None) -> BaseRun:
    """Train the full-precision toy LM from its seeded initialization."""
    model = ToyLM(model_config)
    log = _train_loop(model, windows, cfg, on_step=on_step)
    return BaseRun(model, log, cfg)


@dataclass
class QatRun:
    model: ToyLM                                  # holds the final latent weights
    config: QatConfig
    cherry: dict[str, np.ndarray] = field(default_factory=dict)
    trick_scales: dict[str, np.ndarray] = field(default_factory=dict)
    searches: dict[str, ScaleSearch] = field(default_factory=dict)
    log: TrainLog = field(default_factory=TrainLog)

    def mixed_matrices(self) -> dict[str, MixedMatrix]:
        q = self.config.quant
        if q is None:
            return {}
        return {n: split_weights(self.model.params[n].data, idx, q, self.trick_scales.get(n))
                for n, idx in self.cherry.items()}

    def training_weights(self) -> dict[str, Tensor] | None:
        """The mixed-precision weights the next forward would use."""
        q = self.config.quant
        if q is None:
            return None
        return {n: mixed_weight(self.model.params[n], idx, q, self.trick_scales.get(n), self.config.ste)
                for n, idx in self.cherry.items()}

    def eval_weights(self) -> dict[str, Tensor] | None:
        """In-memory fake-quant weights at storage precision (float16 scales and cherries).

        These are what a saved checkpoint reconstructs to, so evaluating with
        them matches evaluating the loaded checkpoint exactly.
        """
        if self.config.quant is None:
            return None
        return {n: Tensor(reconstruct(m)) for n, m in self.mixed_matrices().items()}

    def checkpoint(self, manifest: dict | None = None) -> Checkpoint:
        from .quant import avg_bits
        m = {"kind": "cherryq" if self.config.quant else "finetune", "qat_config": self.config.to_dict(),
             "final_loss": self.log.losses[-1] if self.log.steps else None}
        if self.config.quant:
            m["avg_bits"] = {n: avg_bits(self.config.quant, *self.model.params[n].shape) for n in self.cherry}
        m.update(manifest or {})
        return Checkpoint.from_model(self.model, self.mixed_matrices(), self.config.quant, m)


def selection_scores(model: ToyLM, metric: str, calib: np.ndarray | None,
                     impacts: Mapping | None = None) -> dict[str, np.ndarray]:
    names = model.weight_matrix_names()
    if metric == "weight":
        return {n: weight_metric(model.params[n].data) for n in names}
    if metric == "impact" and impacts is not None:
        return {n: getattr(impacts[n], "values", impacts[n]) for n in names}
    if calib is None:
        raise ConfigError(f"no {metric} maps available: run `cherryq analyze` first or pass calibration data")
    if metric == "impact":
        return {n: m.values for n, m in estimate_impact(model, [calib], names).items()}
    return activation_metric(model, [calib], names)


def _capture_inputs(model: ToyLM, calib: np.ndarray, max_tokens: int) -> dict[str, np.ndarray]:
    capture: dict[str, list] = {}
    with T.no_grad():
        model.loss(calib, capture=capture)
    out = {}
    for n, xs in capture.items():
        x = np.concatenate([a.reshape(-1, a.shape[-1]) for a in xs])
        out[n] = x[:max_tokens]
    return out


def prepare_cherryq(base_model: ToyLM, windows: np.ndarray, config: QatConfig,
                    calib: np.ndarray | None = None, impacts: Mapping | None = None) -> QatRun:
    """Copy the base model, pick cherry columns and (k=2) search the per-column scales.

    Nothing is trained yet; ``run.checkpoint()`` at this point is the step-0 artifact.
    """
    model = ToyLM(base_model.config)
    model.load_state_dict(base_model.state_dict())
    run = QatRun(model, config)
    q = config.quant
    if calib is None and config.calib_sequences > 0:
        rng = np.random.default_rng(config.seed)
        pick = np.sort(rng.choice(len(windows), size=min(config.calib_sequences, len(windows)), replace=False))
        calib = windows[pick]
    if q is None:
        return run
    names = model.weight_matrix_names()
    if q.cherry_fraction > 0:
        scores = selection_scores(model, config.metric, calib, impacts)
        run.cherry = {n: select_cherry_columns(scores[n], q.cherry_fraction) for n in names}
    else:
        run.cherry = {n: np.zeros(0, dtype=np.uint16) for n in names}
    if q.scale_trick:
        if calib is None:
            raise ConfigError("the scale trick needs calibration data")
        inputs = _capture_inputs(model, calib, config.search_tokens)
        for n in names:
            w = model.params[n].data
            normal_idx = normal_columns(w.shape[1], run.cherry[n])
            res = search_scales(w[:, normal_idx], inputs[n][:, normal_idx], q.bits,
                                q.scale_grid_points, q.group_size)
            run.searches[n] = res
            run.trick_scales[n] = res.scales
    return run


def train_prepared(run: QatRun, windows: np.ndarray, on_step=None) -> QatRun:
    run.log = _train_loop(run.model, windows, run.config, run.training_weights,
                          run.config.divergence_factor, on_step)
    return run


def cherryq_train(base_model: ToyLM, windows: np.ndarray, config: QatConfig,
                  calib: np.ndarray | None = None, impacts: Mapping | None = None,
                  on_step=None) -> QatRun:
    """Mixed-precision QAT starting from ``base_model`` (left untouched).

    ``calib`` is a (n_seq, seq_len) array used for impact/activation maps and
    the scale search; by default ``calib_sequences`` seeded train windows.
    ``impacts`` may carry precomputed impact maps.
    """
    run = prepare_cherryq(base_model, windows, config, calib, impacts)
    return train_prepared(run, windows, on_step)


def finetune(base_model: ToyLM, windows: np.ndarray, cfg: TrainConfig, on_step=None) -> BaseRun:
    """Plain full-precision continuation of ``base_model`` (the no-quantization reference)."""
    model = ToyLM(base_model.config)
    model.load_state_dict(base_model.state_dict())
    log = _train_loop(model, windows, cfg, on_step=on_step)
    return BaseRun(model, log, cfg)
