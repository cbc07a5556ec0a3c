"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Value` that remembers its parents and a
closure propagating the output gradient back to them. ``backward`` orders the
graph topologically from a scalar loss and runs those closures in reverse.

Only what the models in this package need is here: elementwise arithmetic with
broadcasting, matrix products, a handful of activations, column slicing and
concatenation, reductions, dense layers, Adam, and closed-form densities / KL
terms for diagonal Gaussians and Bernoulli variables.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

LOG_SIGMA_MIN = -8.0
LOG_SIGMA_MAX = 5.0
PROB_FLOOR = 1e-6
LEAKY_SLOPE = 0.01
_LOG_2PI = math.log(2.0 * math.pi)

_node_ids = itertools.count()


class Value:
    """A node in the computation graph.

    Leaves (parameters, inputs) accumulate gradients across ``backward`` calls
    until :func:`zero_grad` is called; intermediate nodes are reset by every
    ``backward``.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "node_id")
    __array_ufunc__ = None  # make ndarray <op> Value defer to Value's reflected ops

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"Value supports rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self._parents = parents
        self._backward = backward
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, id={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _unary(x: Value, out: np.ndarray, local_grad: Callable[[np.ndarray], np.ndarray]) -> Value:
    def back(g):
        x.grad += local_grad(g)

    return Value(out, (x,), back)


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def back(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    return Value(a.data + b.data, (a, b), back)


def neg(a) -> Value:
    a = as_value(a)
    return _unary(a, -a.data, lambda g: -g)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def back(g):
        a.grad += _unbroadcast(g * b.data, a.shape)
        b.grad += _unbroadcast(g * a.data, b.shape)

    return Value(a.data * b.data, (a, b), back)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data / b.data

    def back(g):
        a.grad += _unbroadcast(g / b.data, a.shape)
        b.grad += _unbroadcast(-g * out / b.data, b.shape)

    return Value(out, (a, b), back)


def power(a, k: float) -> Value:
    a = as_value(a)
    return _unary(a, a.data**k, lambda g: g * k * a.data ** (k - 1))


def square(a) -> Value:
    a = as_value(a)
    return _unary(a, a.data * a.data, lambda g: 2.0 * g * a.data)


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape} do not chain")

    def back(g):
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    return Value(a.data @ b.data, (a, b), back)


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda g: g * out)


def log(a) -> Value:
    a = as_value(a)
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def sigmoid(a) -> Value:
    a = as_value(a)
    out = _np_sigmoid(a.data)
    return _unary(a, out, lambda g: g * out * (1.0 - out))


def log_sigmoid(a) -> Value:
    a = as_value(a)
    x = a.data
    out = -np.logaddexp(0.0, -x)
    return _unary(a, out, lambda g: g * _np_sigmoid(-x))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Value:
    a = as_value(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _unary(a, out, lambda g: g * np.where(pos, 1.0, slope))


def clip(a, lo: float, hi: float) -> Value:
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_value(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda g: g * inside)


def total(a, axis: int | None = None) -> Value:
    a = as_value(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            a.grad += np.broadcast_to(g, a.shape)
        else:
            a.grad += np.broadcast_to(np.expand_dims(g, axis), a.shape)

    return Value(out, (a,), back)


def mean(a, axis: int | None = None) -> Value:
    a = as_value(a)
    count = a.data.size if axis is None else a.shape[axis]
    return total(a, axis) * (1.0 / count)


def columns(a, start: int, stop: int) -> Value:
    a = as_value(a)

    def back(g):
        a.grad[:, start:stop] += g

    return Value(a.data[:, start:stop], (a,), back)


def concat(parts: Sequence, axis: int = 1) -> Value:
    parts = [as_value(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p.grad += np.take(g, np.arange(lo, hi), axis=axis)

    return Value(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def _topological(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value) -> None:
    """Populate ``grad`` of every node reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; call :func:`zero_grad` first for a
    fresh gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        if node._parents:
            node.grad = np.zeros_like(node.data)
    loss.grad = loss.grad + 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------
# dense networks

ACTIVATIONS = {
    "identity": lambda v: v,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
}

_NP_ACTIVATIONS = {
    "identity": lambda x: x,
    "leaky_relu": lambda x: np.where(x > 0, x, LEAKY_SLOPE * x),
    "sigmoid": _np_sigmoid,
}


@dataclass
class Dense:
    weight: Value
    bias: Value
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


class Mlp:
    """Stack of dense layers. Weights are ``[in, out]`` so ``y = act(x @ W + b)``."""

    def __init__(self, layers: list[Dense]):
        if not layers:
            raise ShapeError("an Mlp needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
        self.layers = layers

    @classmethod
    def build(cls, in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator,
              hidden_activation: str = "leaky_relu", out_activation: str = "identity",
              out_gain: float = 1.0) -> "Mlp":
        """Scaled-uniform fan-in initialisation, zero biases.

        ``out_gain`` shrinks the output layer, e.g. so log-sigma heads start near 0.
        """
        sizes = [in_dim, *hidden, out_dim]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            bound = math.sqrt((3.0 if last else 6.0) / fan_in) * (out_gain if last else 1.0)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append(Dense(Value(w), Value(np.zeros(fan_out)),
                                out_activation if last else hidden_activation))
        return cls(layers)

    @classmethod
    def from_arrays(cls, spec: Sequence[tuple]) -> "Mlp":
        return cls([Dense(Value(np.array(w, dtype=float)), Value(np.array(b, dtype=float)), act)
                    for w, b, act in spec])

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Value]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def _check(self, shape):
        if len(shape) != 2 or shape[1] != self.in_dim:
            raise ShapeError(f"Mlp expects input [batch x {self.in_dim}], got {tuple(shape)}")

    def __call__(self, x) -> Value:
        h = as_value(x)
        self._check(h.shape)
        for layer in self.layers:
            h = ACTIVATIONS[layer.activation](h @ layer.weight + layer.bias)
        return h

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on plain arrays, without recording a graph."""
        h = np.asarray(x, dtype=np.float64)
        self._check(h.shape)
        for layer in self.layers:
            h = _NP_ACTIVATIONS[layer.activation](h @ layer.weight.data + layer.bias.data)
        return h


def mlp_forward(net: Mlp, x) -> Value:
    return net(x)


# --------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Value], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i} at Adam step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Value], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


# --------------------------------------------------------------------------
# distributions

@dataclass
class DiagGaussian:
    """Diagonal Gaussian held as mean and log standard deviation.

    ``mu``/``log_sigma`` are ``[d]`` for a single distribution or ``[n, d]``
    for a batch of ``n`` independent ones.
    """

    mu: Value
    log_sigma: Value

    def __post_init__(self):
        self.mu = as_value(self.mu)
        self.log_sigma = as_value(self.log_sigma)
        if self.mu.shape != self.log_sigma.shape:
            raise ShapeError(f"mu shape {self.mu.shape} != log_sigma shape {self.log_sigma.shape}")
        if not np.all(np.isfinite(self.log_sigma.data)):
            raise DomainError("sigma must be positive and finite")

    @classmethod
    def from_sigma(cls, mu, sigma) -> "DiagGaussian":
        s = as_value(sigma)
        if np.any(~np.isfinite(s.data)) or np.any(s.data <= 0):
            raise DomainError("sigma must be strictly positive and finite")
        return cls(as_value(mu), log(s))

    @classmethod
    def from_net_output(cls, out: Value, dim: int) -> "DiagGaussian":
        """Split ``[n, 2*dim]`` network output into mean and clamped log-sigma."""
        if out.shape[1] != 2 * dim:
            raise ShapeError(f"expected {2 * dim} output columns, got {out.shape[1]}")
        return cls(columns(out, 0, dim), clip(columns(out, dim, 2 * dim), LOG_SIGMA_MIN, LOG_SIGMA_MAX))

    @property
    def sigma(self) -> Value:
        return exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def _rowsum(v: Value) -> Value:
    return total(v, axis=v.data.ndim - 1)


def kl_std_normal(q: DiagGaussian) -> Value:
    """KL(q || N(0, I)); scalar for one distribution, ``[n]`` for a batch."""
    var = exp(2.0 * q.log_sigma)
    return 0.5 * _rowsum(square(q.mu) + var - 1.0 - 2.0 * q.log_sigma)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Value:
    """KL(q || p) between diagonal Gaussians, summed over dimensions."""
    if q.mu.shape != p.mu.shape:
        raise ShapeError(f"KL between shapes {q.mu.shape} and {p.mu.shape}")
    ratio = exp(2.0 * (q.log_sigma - p.log_sigma))
    maha = square(q.mu - p.mu) / exp(2.0 * p.log_sigma)
    return 0.5 * _rowsum(ratio + maha - 1.0 - 2.0 * (q.log_sigma - p.log_sigma))


def reparameterize(q: DiagGaussian, noise: np.ndarray) -> Value:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.mu.shape:
        raise ShapeError(f"noise shape {noise.shape} != distribution shape {q.mu.shape}")
    return q.mu + q.sigma * noise


def gaussian_logpdf(x, mu, sigma) -> Value:
    """Elementwise log N(x; mu, sigma^2)."""
    x, mu, sigma = as_value(x), as_value(mu), as_value(sigma)
    if np.any(sigma.data <= 0):
        raise DomainError("sigma must be positive")
    return -0.5 * _LOG_2PI - log(sigma) - 0.5 * square((x - mu) / sigma)


def gaussian_logpdf_logsigma(x, mu, log_sigma) -> Value:
    """Elementwise log N(x; mu, exp(log_sigma)^2)."""
    x, mu, log_sigma = as_value(x), as_value(mu), as_value(log_sigma)
    return -0.5 * _LOG_2PI - log_sigma - 0.5 * square(x - mu) * exp(-2.0 * log_sigma)


def bernoulli_logpmf(p, k) -> Value:
    """Elementwise log Bern(k; p), with p floored to [PROB_FLOOR, 1 - PROB_FLOOR]."""
    k = np.asarray(k, dtype=np.float64)
    if np.any((k != 0) & (k != 1)):
        raise DomainError("Bernoulli outcome must be 0 or 1")
    p = clip(as_value(p), PROB_FLOOR, 1.0 - PROB_FLOOR)
    return k * log(p) + (1.0 - k) * log(1.0 - p)
