"""Reverse-mode automatic differentiation on float64 numpy arrays.

A small tape-based engine sized for the networks in this repo: dense layers,
a GRU cell, masked softmax policies and squared-error critics. Design
constraints that shape the implementation:

* everything is float64, and forward passes are bit-deterministic;
* a batched matrix product is computed as a stack of single-row products
  (``np.matmul(x[:, None, :], w)``), so evaluating k stacked inputs yields
  bit-identical rows to k independent single-input calls -- several tests
  and the counterfactual critic rely on this;
* gradients accumulate in a fixed topological order, so whole-batch
  training is reproducible down to the last bit.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Tensor or parameter shapes do not line up."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


_grad_enabled: bool = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Skip graph construction; forward numerics are unchanged."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array with an optional gradient slot and backward closure."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed: Array | None = None) -> None:
        """Accumulate gradients of this (scalar) node into every ancestor."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() needs a scalar output, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        _accumulate(self, np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; constants (floats/ndarrays) are allowed on either side.
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def _data(x) -> Array:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _accumulate(t: Tensor, g: Array) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _result(data: Array, parents: tuple, backward) -> Tensor:
    if _grad_enabled and any(isinstance(p, Tensor) for p in parents):
        tens = tuple(p for p in parents if isinstance(p, Tensor))
        return Tensor(data, tens, backward)
    return Tensor(data)


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def backward(g: Array) -> None:
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(g, bd.shape))

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad - bd

    def backward(g: Array) -> None:
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(-g, bd.shape))

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def backward(g: Array) -> None:
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g * bd, ad.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(g * ad, bd.shape))

    return _result(out, (a, b), backward)


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad / bd

    def backward(g: Array) -> None:
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(g / bd, ad.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _result(out, (a, b), backward)


def matmul(x, w) -> Tensor:
    """2-D matrix product ``(k, n) @ (n, m)`` with row-exact batching.

    Computed as a stack of k single-row products so that every output row is
    bit-identical to the corresponding single-input product, regardless of k.
    """
    xd, wd = _data(x), _data(w)
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {xd.shape} @ {wd.shape}")
    out = np.matmul(xd[:, None, :], wd)[:, 0, :]

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, g @ wd.T)
        if isinstance(w, Tensor):
            _accumulate(w, xd.T @ g)

    return _result(out, (x, w), backward)


def relu(x) -> Tensor:
    xd = _data(x)
    out = np.maximum(xd, 0.0)

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, g * (xd > 0.0))

    return _result(out, (x,), backward)


def sigmoid(x) -> Tensor:
    xd = _data(x)
    out = 1.0 / (1.0 + np.exp(-xd))

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), backward)


def tanh(x) -> Tensor:
    xd = _data(x)
    out = np.tanh(xd)

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, g * (1.0 - out * out))

    return _result(out, (x,), backward)


def exp(x) -> Tensor:
    xd = _data(x)
    out = np.exp(xd)

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, g * out)

    return _result(out, (x,), backward)


def log(x) -> Tensor:
    xd = _data(x)
    out = np.log(xd)

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, g / xd)

    return _result(out, (x,), backward)


def square(x) -> Tensor:
    xd = _data(x)
    out = xd * xd

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, g * 2.0 * xd)

    return _result(out, (x,), backward)


def sum_all(x) -> Tensor:
    xd = _data(x)
    out = np.asarray(xd.sum())

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, np.broadcast_to(g, xd.shape).copy())

    return _result(out, (x,), backward)


def sum_last(x) -> Tensor:
    """Sum over the last axis, keeping it as size 1."""
    xd = _data(x)
    out = xd.sum(axis=-1, keepdims=True)

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            _accumulate(x, np.broadcast_to(g, xd.shape).copy())

    return _result(out, (x,), backward)


def gather_last(x, index) -> Tensor:
    """Pick ``x[i, index[i]]`` per row of a 2-D tensor; returns shape (k, 1)."""
    xd = _data(x)
    idx = np.asarray(index, dtype=np.int64).reshape(-1, 1)
    if xd.ndim != 2 or idx.shape[0] != xd.shape[0]:
        raise ShapeError(f"gather_last: x {xd.shape} vs index {idx.shape}")
    out = np.take_along_axis(xd, idx, axis=1)

    def backward(g: Array) -> None:
        if isinstance(x, Tensor):
            gx = np.zeros_like(xd)
            np.put_along_axis(gx, idx, g, axis=1)
            _accumulate(x, gx)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# Parameter containers


class ParamSet:
    """Named parameter tensors; the name set is fixed and iteration ordered."""

    __slots__ = ("_params",)

    def __init__(self, params: Mapping[str, Tensor | Array]):
        self._params: dict[str, Tensor] = {
            name: value if isinstance(value, Tensor) else Tensor(value)
            for name, value in params.items()
        }

    def names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.data.copy() for k, v in self._params.items()})

    def zero_grads(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def grad_set(self) -> "ParamSet":
        """Gradients as a ParamSet; parameters never touched read as zero."""
        return ParamSet(
            {
                k: (v.grad.copy() if v.grad is not None else np.zeros_like(v.data))
                for k, v in self._params.items()
            }
        )

    def equals(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self.names()
        )

    def scalar_count(self) -> int:
        return sum(v.data.size for v in self._params.values())


def merge(*sets: ParamSet) -> ParamSet:
    out: dict[str, Tensor] = {}
    for ps in sets:
        for name, tensor in ps.items():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            out[name] = tensor
    return ParamSet(out)


@dataclass
class OptimizerState:
    """RMSProp squared-gradient accumulators, keyed like the parameters."""

    acc: dict[str, Array] = field(default_factory=dict)
    steps: int = 0


def rmsprop_init(params: ParamSet) -> OptimizerState:
    return OptimizerState(acc={k: np.zeros_like(v.data) for k, v in params.items()})


def rmsprop_step(
    params: ParamSet,
    grads: ParamSet,
    state: OptimizerState,
    lr: float = 0.005,
    alpha: float = 0.99,
    eps: float = 1e-5,
) -> tuple[ParamSet, OptimizerState]:
    """One RMSProp update: acc' = a*acc + (1-a)*g^2, p' = p - lr*g/sqrt(acc'+eps)."""
    if not (lr > 0.0 and 0.0 < alpha < 1.0 and eps > 0.0):
        raise ValueError(f"bad RMSProp hyperparameters lr={lr} alpha={alpha} eps={eps}")
    if params.names() != grads.names():
        raise ValueError(
            f"gradient keys {grads.names()} do not match parameters {params.names()}"
        )
    new_params: dict[str, Array] = {}
    new_acc: dict[str, Array] = {}
    for name, tensor in params.items():
        g = grads[name].data
        acc = alpha * state.acc[name] + (1.0 - alpha) * g * g
        new_acc[name] = acc
        new_params[name] = tensor.data - lr * g / np.sqrt(acc + eps)
    return ParamSet(new_params), OptimizerState(acc=new_acc, steps=state.steps + 1)


# ---------------------------------------------------------------------------
# Network building blocks


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape)


def mlp_init(
    rng: np.random.Generator, sizes: Sequence[int], prefix: str = ""
) -> ParamSet:
    """Dense stack with the given layer widths, uniform(+-1/sqrt(fan_in)) init."""
    if len(sizes) < 2:
        raise ValueError("mlp_init needs at least an input and an output width")
    params: dict[str, Array] = {}
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        params[f"{prefix}w{i}"] = _uniform(rng, (sizes[i], sizes[i + 1]), fan_in)
        params[f"{prefix}b{i}"] = _uniform(rng, (sizes[i + 1],), fan_in)
    return ParamSet(params)


def mlp_layer_count(params: ParamSet, prefix: str = "") -> int:
    n = 0
    while f"{prefix}w{n}" in params:
        n += 1
    return n


def mlp_forward(params: ParamSet, x, prefix: str = "") -> Tensor:
    """Forward through the dense stack; ReLU between all but the final layer."""
    n_layers = mlp_layer_count(params, prefix)
    if n_layers == 0:
        raise ValueError(f"no layers found under prefix {prefix!r}")
    xd = _data(x)
    expected = params[f"{prefix}w0"].data.shape[0]
    if xd.ndim != 2 or xd.shape[1] != expected:
        raise ShapeError(
            f"mlp_forward: input shape {xd.shape} does not match first layer "
            f"width {expected}"
        )
    h = x if isinstance(x, Tensor) else Tensor(xd)
    for i in range(n_layers):
        h = add(matmul(h, params[f"{prefix}w{i}"]), params[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = relu(h)
    return h


def gru_init(
    rng: np.random.Generator, in_dim: int, hidden: int, prefix: str = ""
) -> ParamSet:
    params: dict[str, Array] = {}
    for gate in ("r", "z", "h"):
        params[f"{prefix}w{gate}"] = _uniform(rng, (in_dim, hidden), in_dim)
        params[f"{prefix}u{gate}"] = _uniform(rng, (hidden, hidden), hidden)
        params[f"{prefix}b{gate}"] = _uniform(rng, (hidden,), hidden)
    return ParamSet(params)


def gru_step(params: ParamSet, x, h, prefix: str = "") -> Tensor:
    """One GRU cell step.

    reset    r = sigmoid(x Wr + h Ur + br)
    update   z = sigmoid(x Wz + h Uz + bz)
    cand     c = tanh(x Wh + (r*h) Uh + bh)
    next     h' = (1 - z) * h + z * c
    """
    hd = _data(h)
    hidden = params[f"{prefix}ur"].data.shape[0]
    if hd.ndim != 2 or hd.shape[1] != hidden:
        raise ShapeError(f"gru_step: hidden state {hd.shape} vs width {hidden}")
    r = sigmoid(add(add(matmul(x, params[f"{prefix}wr"]), matmul(h, params[f"{prefix}ur"])), params[f"{prefix}br"]))
    z = sigmoid(add(add(matmul(x, params[f"{prefix}wz"]), matmul(h, params[f"{prefix}uz"])), params[f"{prefix}bz"]))
    c = tanh(add(add(matmul(x, params[f"{prefix}wh"]), matmul(mul(r, h), params[f"{prefix}uh"])), params[f"{prefix}bh"]))
    return add(mul(sub(1.0, z), h), mul(z, c))


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]


def finite_diff_check(
    loss: Callable[[ParamSet], Tensor],
    params: ParamSet,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar loss to central differences.

    Relative error per scalar is |fd - ad| / max(|fd|, |ad|, 1e-8). The loss
    callable must be deterministic; it is re-evaluated 2 * scalar_count times.
    """
    if step <= 0.0:
        raise ValueError("finite-difference step must be positive")
    params.zero_grads()
    out = loss(params)
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NumericError("loss must be a finite scalar")
    out.backward()
    analytic = {k: (v.grad.copy() if v.grad is not None else np.zeros_like(v.data))
                for k, v in params.items()}

    per_param: dict[str, float] = {}
    worst_name, worst = "", 0.0
    with no_grad():
        for name, tensor in params.items():
            flat = tensor.data.reshape(-1)
            an = analytic[name].reshape(-1)
            err = 0.0
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + step
                f_plus = float(loss(params).data)
                flat[i] = saved - step
                f_minus = float(loss(params).data)
                flat[i] = saved
                fd = (f_plus - f_minus) / (2.0 * step)
                rel = abs(fd - an[i]) / max(abs(fd), abs(an[i]), 1e-8)
                err = max(err, rel)
            per_param[name] = err
            if err >= worst:
                worst_name, worst = name, err
    return GradCheckReport(max_rel_error=worst, worst_param=worst_name, per_param=per_param)
