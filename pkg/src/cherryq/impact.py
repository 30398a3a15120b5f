"""Per-parameter importance: Fisher-diagonal impact, weight and activation
magnitudes, heterogeneity scores, and cherry-set overlap.

Impact of weight ``w_i`` is ``F_ii = E[g_i**2]`` with one gradient sample per
calibration sequence (the gradient of that sequence's mean loss). Near a
converged point the loss rise from a perturbation ``delta`` is about
``0.5 * F_ii * delta**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import tensor as T
from .errors import DataError, NumericError


@dataclass
class ImpactMap:
    values: np.ndarray
    sample_count: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def _sequences(calib_batches: Iterable[np.ndarray]) -> Iterable[np.ndarray]:
    for batch in calib_batches:
        for seq in np.asarray(batch):
            yield seq[None]


def estimate_impact(model, calib_batches: Iterable[np.ndarray], names: Sequence[str] | None = None,
                    loss_scale: float = 1.0) -> dict[str, ImpactMap]:
    """Mean over calibration sequences of the squared per-sequence gradient.

    ``model`` needs ``params`` (name -> Tensor), ``loss(batch)`` and
    ``weight_matrix_names()``. Sequences are processed in iteration order,
    so regrouping the same sequences into different batches gives the same maps.
    """
    names = list(names) if names is not None else model.weight_matrix_names()
    sums = {n: np.zeros(model.params[n].shape, dtype=np.float64) for n in names}
    count = 0
    for seq in _sequences(calib_batches):
        model.zero_grad()
        loss = model.loss(seq)
        if loss_scale != 1.0:
            loss = loss * loss_scale
        T.backward(loss)
        for n in names:
            g = model.params[n].grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {n}")
            sums[n] += np.square(g, dtype=np.float64)
        count += 1
    model.zero_grad()
    if count == 0:
        raise DataError("impact estimation needs at least one calibration sequence")
    return {n: ImpactMap(s / count, count) for n, s in sums.items()}


def predicted_loss_delta(fisher, delta):
    return 0.5 * np.asarray(fisher) * np.square(delta)


def weight_metric(matrix) -> np.ndarray:
    return np.abs(np.asarray(matrix))


def activation_channel_means(model, calib_batches: Iterable[np.ndarray],
                             names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Mean |x_j| over all calibration tokens for every input channel of each matrix."""
    names = list(names) if names is not None else model.weight_matrix_names()
    sums = {n: np.zeros(model.params[n].shape[1], dtype=np.float64) for n in names}
    tokens = 0
    for batch in calib_batches:
        batch = np.asarray(batch)
        capture: dict[str, list] = {}
        with T.no_grad():
            model.loss(batch, capture=capture)
        for n in names:
            for x in capture.get(n, []):
                sums[n] += np.abs(x.reshape(-1, x.shape[-1])).sum(axis=0, dtype=np.float64)
        tokens += batch.shape[0] * (batch.shape[1] - 1)
    if tokens == 0:
        raise DataError("activation statistics need at least one calibration batch")
    return {n: s / tokens for n, s in sums.items()}


def activation_metric(model, calib_batches: Iterable[np.ndarray],
                      names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """``mean|x_j| * |w_ij|`` per weight (input-channel salience times magnitude)."""
    means = activation_channel_means(model, calib_batches, names)
    return {n: m[None, :] * np.abs(model.params[n].data.astype(np.float64)) for n, m in means.items()}


# -- heterogeneity -----------------------------------------------------------------

@dataclass
class HeterogeneityEntry:
    matrix: str
    metric: str
    score: float
    top_mean: float
    bottom_max: float
    n_top: int


@dataclass
class HeterogeneityReport:
    entries: list[HeterogeneityEntry] = field(default_factory=list)
    scatter: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def scores(self, metric: str) -> dict[str, float]:
        return {e.matrix: e.score for e in self.entries if e.metric == metric}

    def median_score(self, metric: str) -> float:
        return float(np.median(list(self.scores(metric).values())))


def heterogeneity_score(values, matrix: str = "", metric: str = "impact") -> HeterogeneityEntry:
    """Mean of the top 1% over max of the rest; top set has ``max(1, ceil(n/100))`` entries.

    A zero bottom max gives ``inf``.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))[::-1]
    n = v.size
    if n < 2:
        raise DataError("heterogeneity score needs at least 2 values")
    n_top = max(1, math.ceil(0.01 * n))
    n_top = min(n_top, n - 1)
    top_mean = float(v[:n_top].mean())
    bottom_max = float(v[n_top])
    score = top_mean / bottom_max if bottom_max > 0 else math.inf
    return HeterogeneityEntry(matrix, metric, score, top_mean, bottom_max, n_top)


def scatter_sample(values, n: int = 4096, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random subset of at most ``n`` (flat index, value) pairs, sorted by index."""
    flat = np.asarray(values).reshape(-1)
    if flat.size <= n:
        idx = np.arange(flat.size)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, size=n, replace=False))
    return idx, flat[idx]


def heterogeneity_report(metrics: Mapping[str, Mapping[str, np.ndarray]], scatter_metric: str = "impact",
                         scatter_n: int = 4096, seed: int = 0) -> HeterogeneityReport:
    """``metrics`` maps metric name -> {matrix name -> per-parameter values}."""
    report = HeterogeneityReport()
    for metric, per_matrix in metrics.items():
        for name, vals in per_matrix.items():
            report.entries.append(heterogeneity_score(vals, name, metric))
            if metric == scatter_metric:
                report.scatter[name] = scatter_sample(vals, scatter_n, seed)
    return report


def overlap_ratio(a, b) -> float:
    a, b = set(np.asarray(a).reshape(-1).tolist()), set(np.asarray(b).reshape(-1).tolist())
    if len(a) != len(b):
        raise DataError(f"overlap needs equal-size sets, got {len(a)} and {len(b)}")
    if not a:
        raise DataError("overlap of empty sets is undefined")
    return 100.0 * len(a & b) / len(a)


# -- second-order check ------------------------------------------------------------

@dataclass
class TaylorCheck:
    params: list[tuple[str, tuple[int, ...]]]
    predicted: np.ndarray
    measured: np.ndarray
    spearman: float


def mean_sequence_loss(model, sequences: np.ndarray) -> float:
    with T.no_grad():
        return float(np.mean([model.loss(s[None]).item() for s in sequences]))


def validate_taylor(model, sequences: np.ndarray, impacts: Mapping[str, ImpactMap], delta: float = 1e-2,
                    top_n: int = 100, symmetric: bool = False) -> TaylorCheck:
    """Perturb the ``top_n`` highest-impact weights one at a time by ``delta``
    and compare the measured loss change with ``0.5 * F * delta**2``.

    With ``symmetric`` the measurement is ``(L(w+d) + L(w-d))/2 - L(w)``,
    which cancels the first-order term left by an imperfect optimum.
    """
    flat = [(n, i, v) for n, m in impacts.items() for i, v in enumerate(m.values.reshape(-1))]
    flat.sort(key=lambda t: -t[2])
    chosen = flat[:top_n]
    base = mean_sequence_loss(model, sequences)
    measured, predicted, where = [], [], []
    for name, i, f in chosen:
        p = model.params[name]
        idx = np.unravel_index(i, p.shape)
        orig = p.data[idx].copy()
        p.data[idx] = orig + delta
        change = mean_sequence_loss(model, sequences) - base
        if symmetric:
            p.data[idx] = orig - delta
            change = 0.5 * (change + mean_sequence_loss(model, sequences) - base)
        measured.append(change)
        p.data[idx] = orig
        predicted.append(float(predicted_loss_delta(f, delta)))
        where.append((name, tuple(int(j) for j in idx)))
    rho = spearmanr(predicted, measured).statistic if len(chosen) > 1 else float("nan")
    return TaylorCheck(where, np.array(predicted), np.array(measured), float(rho))
