"""Define-by-run reverse-mode autodiff over numpy arrays.

Every op checks its output for NaN/Inf and raises :class:`NumericError`
naming the op. Training math runs in float32; float64 tensors are accepted
so finite-difference checks have enough precision to be meaningful.

Reductions go through numpy/BLAS calls with fixed shapes, so a given
machine and thread count reproduces results bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_grad_enabled = True


class no_grad:
    """Context manager: ops record nothing, for evaluation passes."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class Node:
    """One recorded operation: its inputs and how to push a gradient through."""

    __slots__ = ("op", "inputs", "backward", "consumed")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.consumed = False

    def __repr__(self) -> str:
        return f"Node({self.op}, consumed={self.consumed})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: Node | None = None
        self.name = name

    # -- basic accessors ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _raise_not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def apply_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap a forward result and register its backward closure.

    ``backward`` receives the upstream gradient and returns one gradient (or
    None) per input, each shaped like that input.
    """
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    inputs = tuple(inputs)
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    t = Tensor(out, dtype=out.dtype)
    t.requires_grad = req
    if req:
        t._node = Node(op, inputs, backward)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = a.dtype.type(b)
        return apply_op("scale", a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b),
                    lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return apply_op("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    inner = c * (xd + xd.dtype.type(0.044715) * xd ** 3)
    th = np.tanh(inner)
    y = 0.5 * xd * (1 + th)

    def back(g):
        dinner = c * (1 + xd.dtype.type(3 * 0.044715) * xd * xd)
        return (g * (0.5 * (1 + th) + 0.5 * xd * (1 - th * th) * dinner),)

    return apply_op("gelu", y, (x,), back)


# -- shape -------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return apply_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return apply_op("getitem", np.array(x.data[index]), (x,), back)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return apply_op("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


# -- reductions ----------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return apply_op("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if n == 0:
        raise DataError("mean over an empty tensor")
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("matmul", ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` with weight laid out (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ConfigError(f"linear: input width {x.shape[-1]} != weight columns {weight.shape[1]}")
    xd, wd = x.data, weight.data

    def back(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    return apply_op("linear", xd @ wd.T, (x, weight), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"token id out of range for vocabulary of {table.shape[0]}")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return apply_op("embedding", table.data[ids], (table,), back)


# -- normalisation / probability -------------------------------------------------

def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    xhat = xd * r

    def back(g):
        ggain = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        dxhat = g * gd
        gx = r * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain

    return apply_op("rms_norm", xhat * gd, (x, gain), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return apply_op("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with future positions (j > i) masked out."""
    t_q, t_k = scores.shape[-2:]
    mask = np.triu(np.ones((t_q, t_k), dtype=bool), k=1 + t_k - t_q)
    z = np.where(mask, -np.inf, scores.data)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return apply_op("causal_softmax", y, (scores,),
                    lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Mean (or per-row, ``reduction='none'``) negative log-likelihood.

    ``logits`` is (N, V); ``targets`` holds N class ids.
    """
    targets = np.asarray(targets).reshape(-1)
    ld = logits.data.reshape(-1, logits.shape[-1])
    n, v = ld.shape
    if n == 0:
        raise DataError("cross_entropy on an empty batch")
    if targets.shape[0] != n:
        raise ConfigError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    if targets.min() < 0 or targets.max() >= v:
        raise DataError(f"target id out of range for {v} classes")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    nll = -logp[rows, targets]
    shape = logits.shape

    def probs_minus_onehot():
        p = np.exp(logp)
        p[rows, targets] -= 1
        return p

    if reduction == "none":
        return apply_op("cross_entropy", nll, (logits,),
                        lambda g: ((probs_minus_onehot() * g[:, None]).reshape(shape),))
    if reduction != "mean":
        raise ConfigError(f"unknown reduction {reduction!r}")
    out = np.asarray(nll.mean(), dtype=ld.dtype)
    return apply_op("cross_entropy", out, (logits,),
                    lambda g: ((probs_minus_onehot() * (g / n)).reshape(shape),))


# -- graph + backward --------------------------------------------------------------

@dataclass
class Graph:
    """Recorded ops reachable from a root, in topological order (inputs first)."""

    tensors: list[Tensor] = field(default_factory=list)

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.tensors]

    def __len__(self) -> int:
        return len(self.tensors)


def build_graph(root: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in reversed(t._node.inputs):
            if inp._node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return Graph(order)


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every leaf that requires grad.

    The graph is consumed: saved activations are released and a second call
    raises :class:`UsageError`.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise UsageError("loss does not depend on any tensor requiring grad")
    if loss._node.consumed:
        raise UsageError("backward called twice on the same graph")
    graph = build_graph(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        node = t._node
        g = pending.pop(id(t), None)
        if g is None:
            node.consumed = True
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if not np.all(np.isfinite(ig)):
                raise NumericError(f"non-finite gradient in backward of op '{node.op}'")
            if inp._node is None:
                inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                pending[key] = ig if key not in pending else pending[key] + ig
        node.consumed = True
        node.backward = _consumed_backward


def _consumed_backward(g):
    raise UsageError("graph already consumed")


# -- numeric gradient check ----------------------------------------------------------

def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
               n_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between autodiff and central differences.

    Coordinates are sampled across all ``params``; error per coordinate is
    ``|a - n| / (|a| + |n| + 1e-8)``. Use float64 parameters: float32
    roundoff alone exceeds 1e-3 relative error at ``h=1e-3``.
    """
    if not h > 0:
        raise ConfigError(f"grad_check step must be positive, got {h}")
    for p in params:
        p.grad = None
    loss = loss_fn()
    first = loss.item()
    if loss_fn().item() != first:
        raise UsageError("loss_fn is not deterministic")
    backward(loss)

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[which]
        idx = np.unravel_index(flat - offsets[which], p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx].copy()
        p.data[idx] = orig + h
        up = loss_fn().item()
        p.data[idx] = orig - h
        down = loss_fn().item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8))
    return worst
