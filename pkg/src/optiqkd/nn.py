"""Minimal differentiable numeric kit shared by the forecaster and controller.

Reverse-mode automatic differentiation over float64 numpy arrays using a
define-by-run graph: every operation returns a :class:`Var` that records
its parents and the local gradient rule. Calling :func:`backward` on a
scalar loss fills ``.grad`` on every reachable node. A model instance
(parameters, graph, optimizer state) belongs to one thread at a time;
there is no global state.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """An optimizer step received NaN or Inf gradients and was rejected."""


class GraphStateError(RuntimeError):
    """Backward called twice on one graph, or on an unready graph."""


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node in the computation graph: value plus gradient accumulator."""

    __slots__ = ("data", "grad", "_parents", "_done")

    def __init__(self, data, parents: Sequence[Tuple["Var", Callable]] = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._done = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, leaf={not self._parents})"

    # -- operator sugar (constants are promoted) ------------------------
    def __add__(self, other):
        return add(self, _as_var(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_var(other)))

    def __rsub__(self, other):
        return add(_as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_var(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        backward(self)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def backward(loss: Var) -> None:
    """Reverse-mode sweep from a scalar loss; fills ``grad`` on all nodes."""
    if loss.data.size != 1:
        raise GraphStateError("backward requires a scalar loss node")
    if loss._done:
        raise GraphStateError("backward already ran on this graph; run forward again")
    if not loss._parents:
        raise GraphStateError("backward before forward: loss is not a computed node")
    topo: List[Var] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            stack.append((parent, False))
    for node in topo:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        for parent, fn in node._parents:
            parent.grad += _unbroadcast(np.asarray(fn(node.grad)), parent.data.shape)
    loss._done = True


# -- elementwise and reduction ops --------------------------------------

def add(a: Var, b: Var) -> Var:
    return Var(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def neg(a: Var) -> Var:
    return Var(-a.data, [(a, lambda g: -g)])


def mul(a: Var, b: Var) -> Var:
    return Var(a.data * b.data, [(a, lambda g: g * b.data), (b, lambda g: g * a.data)])


def relu(a: Var) -> Var:
    mask = a.data > 0
    return Var(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def tanh(a: Var) -> Var:
    out = np.tanh(a.data)
    return Var(out, [(a, lambda g: g * (1.0 - out * out))])


def exp(a: Var) -> Var:
    out = np.exp(a.data)
    return Var(out, [(a, lambda g: g * out)])


def log(a: Var) -> Var:
    return Var(np.log(a.data), [(a, lambda g: g / a.data)])


def square(a: Var) -> Var:
    return Var(a.data * a.data, [(a, lambda g: g * 2.0 * a.data)])


def vsum(a: Var, axis=None) -> Var:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape)

    return Var(out, [(a, bw)])


def vmean(a: Var, axis=None) -> Var:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def bw(g):
        if axis is None:
            return np.broadcast_to(g / n, a.data.shape)
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape) / n

    return Var(out, [(a, bw)])


def minimum(a: Var, b: Var) -> Var:
    take_a = a.data <= b.data
    return Var(
        np.where(take_a, a.data, b.data),
        [(a, lambda g: g * take_a), (b, lambda g: g * ~take_a)],
    )


def clip(a: Var, lo: float, hi: float) -> Var:
    inside = (a.data > lo) & (a.data < hi)
    return Var(np.clip(a.data, lo, hi), [(a, lambda g: g * inside)])


def index(a: Var, idx) -> Var:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return Var(a.data[idx], [(a, bw)])


# -- layer ops -----------------------------------------------------------

def dense(x: Var, w: Var, b: Var) -> Var:
    """Affine map: x (B, n_in) with w (n_out, n_in), b (n_out,)."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"dense shape mismatch: x {x.data.shape} vs w {w.data.shape}")
    out = x.data @ w.data.T + b.data
    return Var(out, [
        (x, lambda g: g @ w.data),
        (w, lambda g: g.T @ x.data),
        (b, lambda g: g.sum(axis=0)),
    ])


def residual_add(x: Var, y: Var) -> Var:
    if x.data.shape != y.data.shape:
        raise ValueError(f"residual shapes differ: {x.data.shape} vs {y.data.shape}")
    return add(x, y)


def conv1d_causal(x: Var, kernel: Var, bias: Var, dilation: int = 1) -> Var:
    """Dilated causal 1-D convolution with left zero-padding.

    x: (B, C_in, T), kernel: (C_out, C_in, k), bias: (C_out,).
    Output (B, C_out, T); the value at time t depends only on inputs
    at times <= t.
    """
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if x.data.ndim != 3:
        raise ValueError("conv input must be (batch, channels, time)")
    n_out, n_in, k = kernel.data.shape
    if x.data.shape[1] != n_in:
        raise ValueError(
            f"conv channel mismatch: input has {x.data.shape[1]}, kernel wants {n_in}")
    b_sz, _, t_len = x.data.shape
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((b_sz, n_in, pad)), x.data], axis=2)
    out = np.zeros((b_sz, n_out, t_len))
    for i in range(k):
        start = pad - i * dilation
        out += np.einsum("oc,bct->bot", kernel.data[:, :, i], xp[:, :, start:start + t_len])
    out += bias.data[None, :, None]

    def bw_x(g):
        gx = np.zeros_like(xp)
        for i in range(k):
            start = pad - i * dilation
            gx[:, :, start:start + t_len] += np.einsum(
                "oc,bot->bct", kernel.data[:, :, i], g)
        return gx[:, :, pad:]

    def bw_k(g):
        gk = np.zeros_like(kernel.data)
        for i in range(k):
            start = pad - i * dilation
            gk[:, :, i] = np.einsum("bot,bct->oc", g, xp[:, :, start:start + t_len])
        return gk

    return Var(out, [
        (x, bw_x),
        (kernel, bw_k),
        (bias, lambda g: g.sum(axis=(0, 2))),
    ])


# -- parameter containers ------------------------------------------------

def kaiming_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-limit, limit, size=shape)


class DenseLayer:
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = Var(w)
        self.b = Var(b)

    @classmethod
    def create(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "DenseLayer":
        return cls(kaiming_uniform((n_out, n_in), n_in, rng), np.zeros(n_out))

    def __call__(self, x: Var) -> Var:
        return dense(x, self.w, self.b)

    def params(self) -> List[Var]:
        return [self.w, self.b]


class Conv1dCausalLayer:
    def __init__(self, kernel: np.ndarray, bias: np.ndarray, dilation: int = 1):
        self.kernel = Var(kernel)
        self.bias = Var(bias)
        self.dilation = dilation

    @classmethod
    def create(cls, n_in: int, n_out: int, k: int, dilation: int,
               rng: np.random.Generator) -> "Conv1dCausalLayer":
        return cls(kaiming_uniform((n_out, n_in, k), n_in * k, rng),
                   np.zeros(n_out), dilation)

    def __call__(self, x: Var) -> Var:
        return conv1d_causal(x, self.kernel, self.bias, self.dilation)

    def params(self) -> List[Var]:
        return [self.kernel, self.bias]


# -- optimizer -----------------------------------------------------------

def init_adam_state(params: Sequence[Var]) -> Dict:
    return {
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
        "t": 0,
    }


def adam_step(
    params: Sequence[Var],
    grads: Sequence[np.ndarray],
    state: Dict,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Sequence[Var]:
    """Adaptive-moment update with bias correction, applied in place.

    Rejects the whole step (raising :class:`NonFiniteGradientError`) if any
    gradient entry is not finite, leaving parameters untouched.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; step rejected")
    state["t"] += 1
    t = state["t"]
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


class Adam:
    def __init__(self, params: Sequence[Var], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = init_adam_state(self.params)

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise GraphStateError("parameter has no gradient; run backward first")
            grads.append(p.grad)
        adam_step(self.params, grads, self.state, self.lr, self.beta1,
                  self.beta2, self.eps)


# -- checkpoint format ---------------------------------------------------

def save_checkpoint(path: str, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Structured text checkpoint: per-array shape metadata plus row-major
    values at full precision (value-exact round trip)."""
    doc = {
        "format": "optiqkd-checkpoint-v1",
        "meta": meta or {},
        "arrays": [
            {
                "name": name,
                "shape": list(np.asarray(arr).shape),
                "data": [float(x) for x in np.asarray(arr, dtype=np.float64).ravel()],
            }
            for name, arr in arrays.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "optiqkd-checkpoint-v1":
        raise ValueError(f"not a recognized checkpoint file: {path}")
    arrays = {
        entry["name"]: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for entry in doc["arrays"]
    }
    return arrays, doc.get("meta", {})
