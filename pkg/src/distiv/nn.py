"""Small numpy MLP machinery with a reverse-mode tape and Adam.

The tape only knows the handful of operations needed to build energy-score
losses on top of multilayer perceptrons: affine maps, pointwise
activations, column concatenation/slicing, row norms and reductions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, NumericalError, ShapeError

ACTIVATIONS = ("relu", "softplus", "identity")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tensor:
    """A node on the gradient tape wrapping a floating point array."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

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

    def backward(self):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        if self.value.size != 1:
            raise ShapeError("backward() needs a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def _val(x):
    return x.value if isinstance(x, Tensor) else x


def _traced(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _accum(node, g):
    if not isinstance(node, Tensor):
        return
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    if not _traced(a, b):
        return a + b
    av, bv = _val(a), _val(b)
    out = Tensor(av + bv, tuple(x for x in (a, b) if isinstance(x, Tensor)))

    def backward(g):
        _accum(a, _unbroadcast(g, np.shape(av)))
        _accum(b, _unbroadcast(g, np.shape(bv)))

    out.backward_fn = backward
    return out


def sub(a, b):
    if not _traced(a, b):
        return a - b
    av, bv = _val(a), _val(b)
    out = Tensor(av - bv, tuple(x for x in (a, b) if isinstance(x, Tensor)))

    def backward(g):
        _accum(a, _unbroadcast(g, np.shape(av)))
        _accum(b, -_unbroadcast(g, np.shape(bv)))

    out.backward_fn = backward
    return out


def mul(a, b):
    if not _traced(a, b):
        return a * b
    av, bv = _val(a), _val(b)
    out = Tensor(av * bv, tuple(x for x in (a, b) if isinstance(x, Tensor)))

    def backward(g):
        _accum(a, _unbroadcast(g * bv, np.shape(av)))
        _accum(b, _unbroadcast(g * av, np.shape(bv)))

    out.backward_fn = backward
    return out


def affine(x, weight, bias=None):
    """``x @ weight.T + bias`` for row-major batches."""
    if not _traced(x, weight, bias):
        out = x @ weight.T
        return out if bias is None else out + bias
    xv, wv = _val(x), _val(weight)
    value = xv @ wv.T
    if bias is not None:
        value = value + _val(bias)
    out = Tensor(value, tuple(t for t in (x, weight, bias) if isinstance(t, Tensor)))

    def backward(g):
        if isinstance(x, Tensor):
            _accum(x, g @ wv)
        if isinstance(weight, Tensor):
            _accum(weight, g.T @ xv)
        if isinstance(bias, Tensor):
            _accum(bias, g.sum(axis=0))

    out.backward_fn = backward
    return out


def _softplus(v):
    return np.logaddexp(0.0, v)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def activate(x, kind):
    if kind == "identity":
        return x
    if kind == "relu":
        if not _traced(x):
            return np.maximum(x, 0.0)
        value = np.maximum(x.value, 0.0)
        out = Tensor(value, (x,))
        out.backward_fn = lambda g: _accum(x, g * (value > 0.0))
        return out
    if kind == "softplus":
        if not _traced(x):
            return _softplus(x)
        xv = x.value
        out = Tensor(_softplus(xv), (x,))
        out.backward_fn = lambda g: _accum(x, g * _sigmoid(xv))
        return out
    raise ConfigurationError(f"unknown activation {kind!r}")


def concat(parts):
    """Column-wise concatenation of 2-D blocks."""
    if not _traced(*parts):
        return np.concatenate(parts, axis=1)
    values = [_val(p) for p in parts]
    widths = np.cumsum([0] + [v.shape[1] for v in values])
    out = Tensor(np.concatenate(values, axis=1), tuple(p for p in parts if isinstance(p, Tensor)))

    def backward(g):
        for p, lo, hi in zip(parts, widths[:-1], widths[1:]):
            if isinstance(p, Tensor):
                _accum(p, g[:, lo:hi])

    out.backward_fn = backward
    return out


def take_cols(x, cols):
    if not _traced(x):
        return x[:, cols]
    out = Tensor(x.value[:, cols], (x,))

    def backward(g):
        full = np.zeros_like(x.value)
        full[:, cols] = g
        _accum(x, full)

    out.backward_fn = backward
    return out


def take_rows(x, rows):
    if not _traced(x):
        return x[rows]
    out = Tensor(x.value[rows], (x,))

    def backward(g):
        full = np.zeros_like(x.value)
        full[rows] = g
        _accum(x, full)

    out.backward_fn = backward
    return out


def row_norm(x):
    """Euclidean norm of each row; the subgradient at 0 is taken as 0."""
    if not _traced(x):
        return np.sqrt(np.sum(x * x, axis=1))
    xv = x.value
    norms = np.sqrt(np.sum(xv * xv, axis=1))
    out = Tensor(norms, (x,))

    def backward(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        scale = np.where(norms > 0.0, g / safe, 0.0)
        _accum(x, xv * scale[:, None])

    out.backward_fn = backward
    return out


def mean(x):
    if not _traced(x):
        return np.mean(x)
    size = x.value.size
    out = Tensor(np.mean(x.value), (x,))
    out.backward_fn = lambda g: _accum(x, np.full_like(x.value, g / size))
    return out


def straight_through_step(x, threshold, low, high):
    """Hard threshold in the forward pass, identity gradient backwards.

    ``low``/``high``/``threshold`` may be per-column arrays.
    """
    if not _traced(x):
        return np.where(x > threshold, high, low).astype(x.dtype, copy=False)
    value = np.broadcast_to(np.where(x.value > threshold, high, low), x.value.shape).astype(x.value.dtype)
    out = Tensor(value, (x,))
    out.backward_fn = lambda g: _accum(x, g)
    return out


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mlp:
    """Stack of affine layers; ``activation`` applies to hidden layers only."""

    layer_dims: tuple
    weights: tuple
    biases: tuple
    activation: str = "relu"
    use_bias: bool = True

    def __post_init__(self):
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("weights/biases do not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wshape = _val(w).shape
            if wshape != (self.layer_dims[i + 1], self.layer_dims[i]):
                raise ShapeError(f"layer {i}: weight shape {wshape} != {(self.layer_dims[i + 1], self.layer_dims[i])}")
            if _val(b).shape != (self.layer_dims[i + 1],):
                raise ShapeError(f"layer {i}: bias shape {_val(b).shape}")

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def params(self):
        return list(self.weights) + list(self.biases)

    def with_params(self, params):
        k = len(self.weights)
        return Mlp(self.layer_dims, tuple(params[:k]), tuple(params[k:]), self.activation, self.use_bias)

    def num_params(self):
        return sum(_val(p).size for p in self.params())


def init_mlp(layer_dims: Sequence[int], activation: str = "relu", rng=None, use_bias: bool = True) -> Mlp:
    """Uniform fan-in initialisation, W ~ U(-s, s) with s = sqrt(1/fan_in), b = 0."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ConfigurationError("an MLP needs at least an input and an output dimension")
    if any(d < 1 for d in dims):
        raise ConfigurationError(f"layer dims must be positive, got {dims}")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    if rng is None:
        rng = np.random.default_rng()
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(dims, tuple(weights), tuple(biases), activation, use_bias)


def mlp_forward(model: Mlp, inputs):
    """Evaluate the network on a batch of rows.

    Works on plain arrays and, inside :func:`value_and_grad`, on tape
    tensors.
    """
    if not _traced(inputs):
        inputs = np.asarray(inputs)
        if inputs.dtype.kind != "f":
            inputs = inputs.astype(np.float64)
        if inputs.ndim == 1:
            inputs = inputs[None, :]
        if not np.all(np.isfinite(inputs)):
            raise InputError("mlp_forward received non-finite inputs")
    shape = _val(inputs).shape
    if len(shape) != 2 or shape[1] != model.in_dim:
        raise ShapeError(f"expected inputs with {model.in_dim} columns, got shape {shape}")
    h = inputs
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = affine(h, w, b if model.use_bias else None)
        if i < last:
            h = activate(h, model.activation)
    return h


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


@dataclass
class GradBundle:
    loss_value: float
    grads: list  # one list of arrays per model, ordered like Mlp.params()
    aux: object = None


def value_and_grad(loss_fn: Callable, models: Sequence[Mlp], has_aux: bool = False) -> GradBundle:
    """Loss and exact reverse-mode gradients w.r.t. all parameters of ``models``.

    ``loss_fn`` receives a list of traced copies of ``models`` and returns a
    scalar (or ``(scalar, aux)`` when ``has_aux``).  The input models are
    never modified.
    """
    traced = []
    leaves = []
    for m in models:
        params = [Tensor(np.array(p, copy=True)) for p in m.params()]
        leaves.append(params)
        traced.append(m.with_params(params))
    result = loss_fn(traced)
    aux = None
    if has_aux:
        result, aux = result
    loss_value = float(np.squeeze(_val(result)))
    if not np.isfinite(loss_value):
        raise NumericalError(f"loss is not finite: {loss_value}", value=loss_value)
    if isinstance(result, Tensor):
        result.backward()
    grads = [[np.zeros_like(p.value) if p.grad is None else p.grad for p in params] for params in leaves]
    return GradBundle(loss_value, grads, aux)


def finite_diff_check(loss_fn: Callable, models: Sequence[Mlp], h: float = 1e-5) -> float:
    """Max over parameters of |analytic - numeric| / max(1, |numeric|)."""
    if h <= 0:
        raise ConfigurationError("finite difference step must be positive")
    bundle = value_and_grad(loss_fn, models)
    worst = 0.0
    models = list(models)
    for mi, m in enumerate(models):
        params = [np.array(p, dtype=np.float64, copy=True) for p in m.params()]
        for pi, p in enumerate(params):
            flat = p.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                plus = _eval(loss_fn, models, mi, m.with_params(params))
                flat[k] = orig - h
                minus = _eval(loss_fn, models, mi, m.with_params(params))
                flat[k] = orig
                numeric = (plus - minus) / (2.0 * h)
                analytic = bundle.grads[mi][pi].reshape(-1)[k]
                worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst


def _eval(loss_fn, models, index, replacement):
    ms = list(models)
    ms[index] = replacement
    return float(np.squeeze(_val(loss_fn(ms))))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_models(cls, models: Sequence[Mlp], **kwargs) -> "AdamState":
        params = [p for m in models for p in m.params()]
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adam_step(models: Sequence[Mlp], grads: GradBundle, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_models, new_state)``."""
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    flat_grads = [g for gs in grads.grads for g in gs]
    flat_params = [p for m in models for p in m.params()]
    if len(flat_grads) != len(flat_params) or len(flat_params) != len(state.first_moment):
        raise ShapeError("gradient bundle / Adam state do not match the models")
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, m1s, m2s = [], [], []
    for p, g, m1, m2 in zip(flat_params, flat_grads, state.first_moment, state.second_moment):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m1 = b1 * m1 + (1.0 - b1) * g
        m2 = b2 * m2 + (1.0 - b2) * (g * g)
        new_params.append(p - lr * (m1 / c1) / (np.sqrt(m2 / c2) + eps))
        m1s.append(m1)
        m2s.append(m2)
    out, i = [], 0
    for m in models:
        k = len(m.params())
        out.append(m.with_params(new_params[i : i + k]))
        i += k
    return out, AdamState(m1s, m2s, t, b1, b2, eps)
