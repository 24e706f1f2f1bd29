"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Every operation builds the graph as it computes its forward value and
registers a closure with its backward rule; ``Tensor.backward`` walks the
graph in reverse topological order and accumulates gradients into every
reachable node.  Storage is float64 throughout: at desk scale speed is
irrelevant and double precision keeps finite-difference checks tight.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("_values", "grad", "_parents", "_backward")

    def __init__(self, values, _parents: tuple = (), _backward=None):
        self._values = _as_array(values)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = _backward

    @property
    def values(self) -> np.ndarray:
        return self._values

    @values.setter
    def values(self, new) -> None:
        self._values = _as_array(new)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += grad

    def backward(self) -> None:
        """Reverse-accumulate gradients from a scalar loss."""
        if self.values.size != 1:
            raise ShapeError(
                f"backward requires a scalar, got shape {self.values.shape}"
            )
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
        self._accumulate(np.ones_like(self.values))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    return Tensor(values)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(values, (a, b))

    def _backward(grad):
        a._accumulate(_unbroadcast(grad, a.shape))
        b._accumulate(_unbroadcast(grad, b.shape))

    out._backward = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(values, (a, b))

    def _backward(grad):
        a._accumulate(_unbroadcast(grad * b.values, a.shape))
        b._accumulate(_unbroadcast(grad * a.values, b.shape))

    out._backward = _backward
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(a.values * factor, (a,))

    def _backward(grad):
        a._accumulate(grad * factor)

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values, (a, b))

    def _backward(grad):
        a._accumulate(grad @ b.values.T)
        b._accumulate(a.values.T @ grad)

    out._backward = _backward
    return out


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    out = Tensor(a.values.T, (a,))

    def _backward(grad):
        a._accumulate(grad.T)

    out._backward = _backward
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    values = np.concatenate([p.values for p in parts], axis=axis)
    out = Tensor(values, tuple(parts))
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _backward(grad):
        for p, piece in zip(parts, np.split(grad, splits, axis=axis)):
            p._accumulate(piece)

    out._backward = _backward
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum(), (a,))

    def _backward(grad):
        a._accumulate(np.broadcast_to(grad, a.values.shape).copy())

    out._backward = _backward
    return out


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims), (a,))

    def _backward(grad):
        g = grad if keepdims else np.expand_dims(grad, axis)
        a._accumulate(np.broadcast_to(g, a.values.shape).copy())

    out._backward = _backward
    return out


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.values.shape[axis]
    out = Tensor(a.values.mean(axis=axis, keepdims=keepdims), (a,))

    def _backward(grad):
        g = grad if keepdims else np.expand_dims(grad, axis)
        a._accumulate(np.broadcast_to(g / n, a.values.shape).copy())

    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0), (a,))

    def _backward(grad):
        a._accumulate(grad * (a.values > 0.0))

    out._backward = _backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    values = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                      np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(values, (a,))

    def _backward(grad):
        a._accumulate(grad * values * (1.0 - values))

    out._backward = _backward
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.values), (a,))

    def _backward(grad):
        a._accumulate(grad / a.values)

    out._backward = _backward
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of a matrix."""
    if a.values.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {a.shape}")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    values = exp / exp.sum(axis=-1, keepdims=True)
    out = Tensor(values, (a,))

    def _backward(grad):
        inner = (grad * values).sum(axis=-1, keepdims=True)
        a._accumulate(values * (grad - inner))

    out._backward = _backward
    return out


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; gradient is
    blocked at filled cells."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.values.shape:
        raise ShapeError(
            f"masked_fill: mask shape {mask.shape} does not match {a.shape}"
        )
    out = Tensor(np.where(mask, value, a.values), (a,))

    def _backward(grad):
        a._accumulate(grad * ~mask)

    out._backward = _backward
    return out


def take_rows(table: Tensor, indices) -> Tensor:
    """Row gather (embedding lookup); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise ShapeError(
            f"take_rows: index out of range for table with "
            f"{table.values.shape[0]} rows"
        )
    out = Tensor(table.values[idx], (table,))

    def _backward(grad):
        g = np.zeros_like(table.values)
        np.add.at(g, idx, grad)
        table._accumulate(g)

    out._backward = _backward
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply
    an elementwise affine."""
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.values + bias.values, (a, gain, bias))

    def _backward(grad):
        dxhat = grad * gain.values
        # standard layer-norm backward, derived from the normalization chain
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        a._accumulate(dx)
        axes = tuple(range(grad.ndim - 1))
        gain._accumulate((grad * xhat).sum(axis=axes))
        bias._accumulate(grad.sum(axis=axes))

    out._backward = _backward
    return out


BCE_CLIP = 1e-7


def binary_cross_entropy(p: Tensor, targets) -> Tensor:
    """Elementwise cross entropy against 0/1 targets.

    Probabilities are clipped to [BCE_CLIP, 1 - BCE_CLIP]; the gradient is
    zero where the clip binds.
    """
    y = _as_array(targets)
    if y.shape != p.values.shape:
        raise ShapeError(
            f"binary_cross_entropy: target shape {y.shape} does not match "
            f"{p.shape}"
        )
    pc = np.clip(p.values, BCE_CLIP, 1.0 - BCE_CLIP)
    values = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    out = Tensor(values, (p,))
    unclipped = (p.values > BCE_CLIP) & (p.values < 1.0 - BCE_CLIP)

    def _backward(grad):
        dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * unclipped
        p._accumulate(grad * dp)

    out._backward = _backward
    return out


@dataclass
class Parameter:
    """A named trainable leaf."""

    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values


class ParameterStore:
    """Ordered, uniquely named parameter registry."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, values, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        param = Parameter(name, Tensor(values), trainable)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self:
            if p.name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {p.name!r}")
            incoming = np.asarray(arrays[p.name], dtype=np.float64)
            if incoming.shape != p.values.shape:
                raise ShapeError(
                    f"parameter {p.name!r}: checkpoint shape {incoming.shape} "
                    f"does not match model shape {p.values.shape}"
                )
            p.tensor.values = incoming.copy()


class Adam:
    """Adaptive moment estimation with bias correction.

    Moment state persists between steps and is keyed by parameter name so
    it can round-trip through checkpoints.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.values) for p in self.params}
        self.v = {p.name: np.zeros_like(p.values) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = np.zeros_like(p.values)

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                raise ValueError(
                    f"parameter {p.name!r} has no gradient; call backward first"
                )
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            p.tensor.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {"adam.t": np.array(float(self.t))}
        for name in self.m:
            state[f"adam.m.{name}"] = self.m[name].copy()
            state[f"adam.v.{name}"] = self.v[name].copy()
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "adam.t" in arrays:
            self.t = int(arrays["adam.t"])
        for p in self.params:
            mk, vk = f"adam.m.{p.name}", f"adam.v.{p.name}"
            if mk in arrays:
                self.m[p.name] = np.asarray(arrays[mk], dtype=np.float64).copy()
            if vk in arrays:
                self.v[p.name] = np.asarray(arrays[vk], dtype=np.float64).copy()


def grad_check(build: Callable[[], Tensor], params: Sequence[Parameter],
               step: float = 1e-6,
               max_elements_per_param: Optional[int] = None,
               seed: int = 0) -> float:
    """Compare analytic gradients with central finite differences.

    ``build`` must construct a fresh scalar loss from the parameters'
    current values.  Returns the max over checked elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    for p in params:
        p.tensor.grad = np.zeros_like(p.values)
    loss = build()
    loss.backward()
    analytic = {p.name: p.tensor.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.tensor.values.reshape(-1)
        n = flat.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            picks = rng.choice(n, size=max_elements_per_param, replace=False)
        else:
            picks = range(n)
        ana_flat = analytic[p.name].reshape(-1)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = float(build().values)
            flat[i] = orig - step
            down = float(build().values)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = ana_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


CHECKPOINT_MAGIC = b"SRELCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write a named-array archive: versioned header, then per entry the
    name, shape, and raw little-endian doubles."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(
                struct.unpack("<I", fh.read(4))[0] for _ in range(ndim)
            )
            n_items = int(np.prod(shape)) if shape else 1
            data = fh.read(n_items * 8)
            if len(data) != n_items * 8:
                raise ValueError(f"{path}: truncated data for entry {name!r}")
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return arrays
