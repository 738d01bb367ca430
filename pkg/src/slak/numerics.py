"""Dense float64 tensors with a small reverse-mode tape.

Only the handful of primitives the encoders, fusion and head need are
provided. Every op checks its output for non-finite values and names the
offending node. ``relu'(0) = 0``.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse


class NumericsError(RuntimeError):
    pass


class ShapeError(NumericsError, ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward, name: str) -> "Tensor":
        """Build a non-leaf node. ``backward(g)`` returns one gradient (or None) per parent."""
        data = _as_array(data)
        if not np.all(np.isfinite(data)):
            raise NumericsError(f"non-finite value produced by {name}")
        out = cls(data, requires_grad=any(p.requires_grad for p in parents), name=name)
        out._parents = tuple(parents)
        out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def _topo(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise NumericsError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): _as_array(grad)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def nodes(self) -> list["Tensor"]:
        """Every tensor this node depends on (itself included), in topological order."""
        return list(self._topo())

    def leaves(self) -> list["Tensor"]:
        """Trainable leaves reachable from this node."""
        return [n for n in self._topo() if not n._parents and n.requires_grad]


def constant(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=False, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    A, B = a.data, b.data
    return Tensor.from_op(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a single row broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.data.ndim == 2 and b.shape in ((1, a.shape[1]), (a.shape[1],)):
        bshape = b.shape
        return Tensor.from_op(
            a.data + b.data.reshape(1, -1), (a, b), lambda g: (g, g.sum(axis=0).reshape(bshape)), "add"
        )
    raise ShapeError(f"add shapes {a.shape} and {b.shape} are incompatible")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a fixed scalar."""
    c = float(c)
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_n(items: Sequence[Tensor]) -> Tensor:
    if not items:
        raise ShapeError("add_n of nothing")
    shape = items[0].shape
    for t in items:
        if t.shape != shape:
            raise ShapeError(f"add_n shapes {shape} and {t.shape} differ")
    total = np.sum([t.data for t in items], axis=0)
    return Tensor.from_op(total, tuple(items), lambda g: [g] * len(items), "add_n")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def row_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(s, (x,), back, "row_softmax")


def scaled_dot(values: Tensor, query: Tensor, scale: float) -> Tensor:
    """Per-row dot product with one query row: ``(values @ query.T) * scale``, shape (n, 1)."""
    if query.shape != (1, values.shape[1]):
        raise ShapeError(f"scaled_dot query {query.shape} does not match values {values.shape}")
    V, q = values.data, query.data
    return Tensor.from_op(
        (V @ q.T) * scale, (values, query), lambda g: ((g @ q) * scale, (g.T @ V) * scale), "scaled_dot"
    )


def take_row(x: Tensor, i: int) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[i] = g[0]
        return (out,)

    return Tensor.from_op(x.data[i : i + 1], (x,), back, "take_row")


def take_col(x: Tensor, j: int) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[:, j] = g[:, 0]
        return (out,)

    return Tensor.from_op(x.data[:, j : j + 1], (x,), back, "take_col")


def hstack(cols: Sequence[Tensor]) -> Tensor:
    widths = [c.shape[1] for c in cols]
    edges = np.cumsum([0] + widths)

    def back(g):
        return [g[:, edges[k] : edges[k + 1]] for k in range(len(cols))]

    return Tensor.from_op(np.hstack([c.data for c in cols]), tuple(cols), back, "hstack")


def mul_col(x: Tensor, c: Tensor) -> Tensor:
    """Scale each row of ``x`` by the matching entry of column ``c`` (n, 1)."""
    if c.shape != (x.shape[0], 1):
        raise ShapeError(f"mul_col column {c.shape} does not match rows of {x.shape}")
    X, C = x.data, c.data
    return Tensor.from_op(X * C, (x, c), lambda g: (g * C, (g * X).sum(axis=1, keepdims=True)), "mul_col")


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(x.data[idx], (x,), back, "gather_rows")


def spmm(A: sparse.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times tensor."""
    if A.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shapes {A.shape} and {x.shape} do not chain")
    return Tensor.from_op(A @ x.data, (x,), lambda g: (A.T @ g,), "spmm")


def mse(pred: Tensor, target) -> Tensor:
    t = _as_array(target).reshape(pred.shape)
    r = pred.data - t
    n = r.size
    return Tensor.from_op(np.array((r * r).sum() / n), (pred,), lambda g: (g * 2.0 * r / n,), "mse")


class ParameterSet:
    """Named trainable tensors. Gradients live on each tensor's ``grad``."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    @property
    def n_values(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            t.data = snap[k].copy()

    def save(self, path: str | Path) -> None:
        save_checkpoint({k: t.data for k, t in self._params.items()}, path)

    def load(self, path: str | Path) -> None:
        arrays = load_checkpoint(path)
        for k, t in self._params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint has no parameter {k!r}")
            if arrays[k].shape != t.shape:
                raise ShapeError(f"checkpoint shape {arrays[k].shape} != {t.shape} for {k!r}")
            t.data = arrays[k]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, state: AdamState) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise NumericsError(f"missing gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterSet,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-6,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences on every parameter entry.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params.zero_grad()
    loss_fn().backward()
    worst = (0.0, None, None)
    count = 0
    for name in names or list(params):
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            fp = loss_fn().item()
            flat[k] = old - h
            fm = loss_fn().item()
            flat[k] = old
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[k]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if rel > worst[0]:
                worst = (rel, name, tuple(int(i) for i in np.unravel_index(k, p.shape)))
    params.zero_grad()
    return GradCheckReport(worst[0], worst[1], worst[2], count, tolerance)


_MAGIC = b"SLAKPRM\x00"
_VERSION = 1


def save_checkpoint(arrays: dict[str, np.ndarray], path: str | Path) -> None:
    """Named tensors: magic, version, count, then per tensor name/shape header and raw <f8 data."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC:
        raise NumericsError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise NumericsError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out
