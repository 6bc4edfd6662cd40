"""Dense numpy tensors with reverse-mode differentiation and the layers the bidding model needs.

The engine is intentionally small: every op is a function that computes its
result eagerly and, when gradients are tracked, records a closure mapping the
output gradient to one gradient per parent. ``Tensor.backward`` walks the graph
in reverse topological order and frees it afterwards.

GELU uses the tanh approximation
``0.5 * x * (1 + tanh(sqrt(2 / pi) * (x + 0.044715 * x**3)))``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
from scipy.stats import truncnorm

from .errors import ConfigurationError, ContainerFormatError, DomainError, GraphStateError

logger = logging.getLogger(__name__)

GELU_COEFF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
INIT_STD = 0.02

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""

    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional array that can record the ops producing it."""

    __array_priority__ = 1000

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        dtype=None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ) -> None:
        array = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if array.dtype.kind not in "fc":
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self._released = False

    @classmethod
    def _wrap(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        track = is_grad_enabled() and any(parent.requires_grad for parent in parents)
        out = cls.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = track
        out.name = None
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        out._released = False
        return out

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DomainError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into the ``grad`` of every tracked leaf, then free the graph."""

        if self._released:
            raise GraphStateError("backward() already ran on this graph; recompute the forward pass")
        if not self.requires_grad:
            raise GraphStateError("tensor does not require gradients")
        if grad is None:
            if self.data.size != 1:
                raise DomainError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DomainError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True

    # ------------------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, first: int, second: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[first], axes[second] = axes[second], axes[first]
        return transpose(self, tuple(axes))

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: set[int] = set()
    stack: List[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else np.float64), requires_grad=False)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum *grad* down to *shape* after numpy broadcasting."""

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._wrap(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._wrap(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._wrap(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._wrap(
        a.data / b.data,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._wrap(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return Tensor._wrap(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


# ----------------------------------------------------------------------
# Shape ops
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DomainError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DomainError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray):
        grad_a = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return Tensor._wrap(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._wrap(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DomainError(f"cannot reshape {a.shape} into {tuple(shape)}") from exc
    return Tensor._wrap(data, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(tensor) for tensor in tensors]
    if not tensors:
        raise DomainError("concat needs at least one tensor")
    try:
        data = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError as exc:
        raise DomainError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._wrap(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(tensor) for tensor in tensors]
    try:
        data = np.stack([tensor.data for tensor in tensors], axis=axis)
    except ValueError as exc:
        raise DomainError(f"stack shape mismatch: {[t.shape for t in tensors]}") from exc

    def backward(g: np.ndarray):
        return tuple(np.take(g, index, axis=axis) for index in range(len(tensors)))

    return Tensor._wrap(data, tensors, backward)


def _has_array_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(part, (np.ndarray, list)) for part in parts)


def getitem(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""

    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    advanced = _has_array_index(index)

    def backward(g: np.ndarray):
        grad = np.zeros_like(a.data)
        if advanced:
            np.add.at(grad, index, g)
        else:
            grad[index] += g
        return (grad,)

    return Tensor._wrap(a.data[index], (a,), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._wrap(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) / float(count)


# ----------------------------------------------------------------------
# Nonlinearities
# ----------------------------------------------------------------------
def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._wrap(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._wrap(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return Tensor._wrap(np.where(positive, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * positive,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray):
        derivative = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
        return (g * derivative,)

    return Tensor._wrap(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along *axis*; entries where *mask* is False get probability exactly 0."""

    logits = a.data
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / np.sum(exp, axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._wrap(out.astype(a.dtype, copy=False), (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""

    width = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv_std
    out = normalized * gain.data + bias.data

    def backward(g: np.ndarray):
        d_norm = g * gain.data
        d_x = (
            inv_std
            / width
            * (
                width * d_norm
                - d_norm.sum(axis=-1, keepdims=True)
                - normalized * (d_norm * normalized).sum(axis=-1, keepdims=True)
            )
        )
        reduce_axes = tuple(range(g.ndim - 1))
        d_gain = (g * normalized).sum(axis=reduce_axes)
        d_bias = g.sum(axis=reduce_axes)
        return d_x, d_gain.reshape(gain.shape), d_bias.reshape(bias.shape)

    return Tensor._wrap(out, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise DomainError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._wrap(x.data * keep, (x,), lambda g: (g * keep,))


def masked_mse(prediction: Tensor, target, mask) -> Tensor:
    """``sum(m * (prediction - target)^2) / sum(m)``; zero when the mask is empty."""

    mask_array = np.asarray(mask, dtype=prediction.dtype)
    denominator = float(mask_array.sum())
    diff = prediction - as_tensor(np.asarray(target, dtype=prediction.dtype))
    weighted = (diff * diff * mask_array).sum()
    if denominator == 0.0:
        return weighted * 0.0
    return weighted / denominator


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def causal_multihead_attention(
    x: Tensor,
    qkv: "Linear",
    proj: "Linear",
    n_heads: int,
    mask: Optional[np.ndarray] = None,
    drop: Optional["Dropout"] = None,
) -> Tensor:
    """Multi-head self-attention over ``x`` of shape (batch, length, width).

    *mask* is a boolean (length, length) matrix of allowed key positions per
    query; by default the lower-triangular causal mask. *drop* applies to the
    attention-weighted values before the output projection.
    """

    if x.ndim != 3:
        raise DomainError(f"attention expects (batch, length, width), got {x.shape}")
    batch, length, width = x.shape
    if width % n_heads:
        raise ConfigurationError(f"{n_heads} heads do not divide model width {width}")
    head_dim = width // n_heads
    if mask is None:
        mask = causal_mask(length)
    elif mask.shape != (length, length):
        raise DomainError(f"attention mask shape {mask.shape} does not match length {length}")

    packed = qkv(x)

    def heads(start: int) -> Tensor:
        part = packed[..., start : start + width]
        return part.reshape(batch, length, n_heads, head_dim).transpose(0, 2, 1, 3)

    q, k, v = heads(0), heads(width), heads(2 * width)
    scores = (q @ k.swapaxes(-1, -2)) * (head_dim**-0.5)
    weights = softmax(scores, axis=-1, mask=mask)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, width)
    if drop is not None:
        context = drop(context)
    return proj(context)


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------
class Parameter(Tensor):
    def __init__(self, data, *, name: Optional[str] = None, dtype=np.float32) -> None:
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def truncated_normal(shape: Sequence[int], rng: np.random.Generator, std: float = INIT_STD) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=tuple(shape), random_state=rng)


class Module:
    """Container of parameters and sub-modules discovered through attributes."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{index}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{index}", item

    def parameters(self) -> List[Parameter]:
        return [parameter for _, parameter in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for parameter in self.parameters():
            parameter.grad = None

    def num_parameters(self) -> int:
        return sum(parameter.size for parameter in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: parameter.data.copy() for name, parameter in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigurationError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, parameter in own.items():
            value = np.asarray(state[name])
            if value.shape != parameter.shape:
                raise ConfigurationError(f"{name}: stored shape {value.shape} != {parameter.shape}")
            parameter.data = value.astype(parameter.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for parameter in self.parameters():
            parameter.data = parameter.data.astype(dtype)
            parameter.grad = None
        return self


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, *, bias: bool = True, dtype=np.float32) -> None:
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(truncated_normal((in_features, out_features), rng), dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5, dtype=np.float32) -> None:
        self.eps = eps
        self.gain = Parameter(np.ones(width), dtype=dtype)
        self.bias = Parameter(np.zeros(width), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, count: int, width: int, rng: np.random.Generator, dtype=np.float32) -> None:
        self.weight = Parameter(truncated_normal((count, width), rng), dtype=dtype)

    def forward(self, indices) -> Tensor:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.weight.shape[0]):
            raise DomainError(f"embedding index outside [0, {self.weight.shape[0]})")
        return getitem(self.weight, indices)


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None) -> None:
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.rng, self.training)


class MLP(Module):
    """Linear layers with GELU in between (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, dtype=np.float32) -> None:
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for index, layer in enumerate(self.layers):
            x = layer(x)
            if index < len(self.layers) - 1:
                x = gelu(x)
        return x


class MultiHeadAttention(Module):
    def __init__(
        self,
        width: int,
        n_heads: int,
        rng: np.random.Generator,
        dropout_rate: float = 0.0,
        dropout_rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ) -> None:
        if width % n_heads:
            raise ConfigurationError(f"{n_heads} heads do not divide model width {width}")
        self.n_heads = n_heads
        self.qkv = Linear(width, 3 * width, rng, dtype=dtype)
        self.proj = Linear(width, width, rng, dtype=dtype)
        self.drop = Dropout(dropout_rate, dropout_rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return causal_multihead_attention(x, self.qkv, self.proj, self.n_heads, mask, self.drop)


class TransformerBlock(Module):
    """Pre-LN block: ``x + attn(ln(x))`` then ``x + drop(ff(ln(x)))``; attention drops its weighted values."""

    def __init__(
        self,
        width: int,
        n_heads: int,
        ff_width: int,
        dropout_rate: float,
        rng: np.random.Generator,
        dropout_rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ) -> None:
        self.ln_attn = LayerNorm(width, dtype=dtype)
        self.attn = MultiHeadAttention(width, n_heads, rng, dropout_rate, dropout_rng, dtype=dtype)
        self.ln_ff = LayerNorm(width, dtype=dtype)
        self.ff = MLP((width, ff_width, width), rng, dtype=dtype)
        self.drop_ff = Dropout(dropout_rate, dropout_rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.ln_attn(x), mask)
        return x + self.drop_ff(self.ff(self.ln_ff(x)))


# ----------------------------------------------------------------------
# Optimization
# ----------------------------------------------------------------------
@dataclass
class OptimizerState:
    """AdamW moments and hyperparameters."""

    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if not all(0.0 <= beta < 1.0 for beta in self.betas):
            raise ConfigurationError("betas must lie in [0, 1)")


def adamw_step(parameters: Sequence[Parameter], state: OptimizerState) -> None:
    """One AdamW update with decoupled weight decay on matrices only."""

    if not state.first_moments:
        state.first_moments = [np.zeros_like(p.data) for p in parameters]
        state.second_moments = [np.zeros_like(p.data) for p in parameters]
    if len(state.first_moments) != len(parameters):
        raise ConfigurationError("optimizer state does not match the parameter list")

    state.step += 1
    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for index, parameter in enumerate(parameters):
        grad = parameter.grad
        if grad is None:
            continue
        m = beta1 * state.first_moments[index] + (1.0 - beta1) * grad
        v = beta2 * state.second_moments[index] + (1.0 - beta2) * grad * grad
        state.first_moments[index] = m
        state.second_moments[index] = v
        data = parameter.data
        if parameter.ndim >= 2 and state.weight_decay:
            data = data * (1.0 - state.lr * state.weight_decay)
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        parameter.data = (data - update).astype(parameter.dtype, copy=False)


class AdamW:
    def __init__(
        self,
        parameters: Sequence[Parameter],
        lr: float = 1e-4,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.parameters = list(parameters)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps)

    def step(self) -> None:
        adamw_step(self.parameters, self.state)

    def zero_grad(self) -> None:
        for parameter in self.parameters:
            parameter.grad = None


def clip_grad_norm(parameters: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most *max_norm*; returns the norm before clipping."""

    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total = float(math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for parameter in parameters:
            if parameter.grad is not None:
                parameter.grad = parameter.grad * scale
    return total


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------
CHECKPOINT_MAGIC = b"SBCK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sHI")


@dataclass
class Checkpoint:
    parameters: Dict[str, np.ndarray]
    optimizer: Optional[OptimizerState]
    metadata: dict


def save_checkpoint(
    path: str | Path,
    module: Module,
    optimizer: Optional[AdamW] = None,
    metadata: Optional[dict] = None,
) -> Path:
    """Write a versioned manifest followed by the raw little-endian buffers."""

    path = Path(path)
    named = list(module.named_parameters())
    dtype = np.dtype(named[0][1].dtype).newbyteorder("<") if named else np.dtype("<f4")
    buffers: List[bytes] = []
    entries = []
    offset = 0

    def push(name: str, array: np.ndarray) -> dict:
        nonlocal offset
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        entry = {"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)}
        buffers.append(raw)
        offset += len(raw)
        return entry

    for name, parameter in named:
        entries.append(push(name, parameter.data))
    param_digest = hashlib.sha256(b"".join(buffers)).hexdigest()

    optimizer_entry = None
    if optimizer is not None:
        state = optimizer.state
        moments = []
        for index, (first, second) in enumerate(zip(state.first_moments, state.second_moments)):
            moments.append(push(f"m.{index}", first))
            moments.append(push(f"v.{index}", second))
        optimizer_entry = {
            "lr": state.lr,
            "weight_decay": state.weight_decay,
            "betas": list(state.betas),
            "eps": state.eps,
            "step": state.step,
            "moments": moments,
        }

    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": dtype.str,
        "parameters": entries,
        "checksum": param_digest,
        "optimizer": optimizer_entry,
        "metadata": metadata or {},
    }
    header_json = json.dumps(manifest, sort_keys=True).encode("utf8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(
        _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_json)) + header_json + b"".join(buffers)
    )
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = path.read_bytes()
    if len(payload) < _CHECKPOINT_HEADER.size:
        raise ContainerFormatError("truncated checkpoint header", len(payload))
    magic, version, header_length = _CHECKPOINT_HEADER.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise ContainerFormatError(f"unsupported checkpoint version {version}", 4)
    start = _CHECKPOINT_HEADER.size
    try:
        manifest = json.loads(payload[start : start + header_length].decode("utf8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"unreadable manifest: {exc}", start) from None
    base = start + header_length
    dtype = np.dtype(manifest["dtype"])

    def read(entry: dict) -> np.ndarray:
        begin = base + entry["offset"]
        if begin + entry["nbytes"] > len(payload):
            raise ContainerFormatError(f"truncated buffer {entry['name']}", begin)
        array = np.frombuffer(payload, dtype=dtype, count=entry["nbytes"] // dtype.itemsize, offset=begin)
        return array.reshape(entry["shape"]).copy()

    parameters = {entry["name"]: read(entry) for entry in manifest["parameters"]}
    digest = hashlib.sha256(b"".join(np.ascontiguousarray(a).tobytes() for a in parameters.values())).hexdigest()
    if digest != manifest["checksum"]:
        raise ContainerFormatError("parameter checksum mismatch", base)

    optimizer = None
    if manifest.get("optimizer"):
        entry = manifest["optimizer"]
        moments = [read(item) for item in entry["moments"]]
        optimizer = OptimizerState(
            lr=entry["lr"],
            weight_decay=entry["weight_decay"],
            betas=tuple(entry["betas"]),
            eps=entry["eps"],
            step=entry["step"],
            first_moments=moments[0::2],
            second_moments=moments[1::2],
        )
    return Checkpoint(parameters=parameters, optimizer=optimizer, metadata=manifest.get("metadata", {}))


def restore_optimizer(optimizer: AdamW, state: OptimizerState) -> None:
    if state.first_moments and len(state.first_moments) != len(optimizer.parameters):
        raise ConfigurationError("stored optimizer moments do not match the parameter list")
    dtype = optimizer.parameters[0].dtype if optimizer.parameters else np.float32
    state.first_moments = [m.astype(dtype) for m in state.first_moments]
    state.second_moments = [v.astype(dtype) for v in state.second_moments]
    optimizer.state = state
