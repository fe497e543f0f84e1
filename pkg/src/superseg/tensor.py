"""Dense tensors with a dynamic reverse-mode differentiation tape.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = T.sum(T.mul(theta, theta))
    tape.backward(loss)

Outside a tape every op is evaluated eagerly and nothing is recorded, which
is how inference passes avoid building a graph.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the float type used for new tensors (float64 unless changed)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tensor:
    """An n-dimensional float array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_default_dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: int | None = None  # serial of the recording tape; no back-reference

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Thin operator sugar; all of it routes through the recorded ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def tensor_from(values: Sequence[float], shape: Sequence[int]) -> Tensor:
    """Build a tensor from a flat list of values laid out row-major."""
    shape = tuple(int(s) for s in shape)
    values = np.asarray(values, dtype=_default_dtype).reshape(-1)
    if int(np.prod(shape, dtype=np.int64)) != values.size:
        raise ValueError(
            f"cannot build shape {shape} from {values.size} values"
        )
    return Tensor(values.reshape(shape))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_serials = itertools.count(1)


@dataclass
class Tape:
    """Ordered record of the operations executed while the tape is active."""

    nodes: list[Node] = field(default_factory=list)
    serial: int = field(default_factory=lambda: next(_serials))

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, node: Node) -> None:
        node.output._tape = self.serial
        self.nodes.append(node)

    def backward(self, output: Tensor) -> None:
        backward(self, output)


_active: list[Tape] = []


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = _active[:]
    _active.clear()
    try:
        yield
    finally:
        _active.extend(saved)


def _current_tape() -> Tape | None:
    return _active[-1] if _active else None


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf needing it."""
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if output._tape != tape.serial:
        raise ValueError("output was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever is left belongs to leaves (tensors not produced on this tape)
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp._tape != tape.serial:
                leaves[id(inp)] = inp
    for key, g in grads.items():
        leaf = leaves.get(key)
        if leaf is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def record(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as a tensor and, if needed, put the op on the tape."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data)
    tape = _current_tape()
    if needs and tape is not None:
        out.requires_grad = True
        tape.record(Node(tuple(inputs), out, backward_fn, op))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return record("add_scalar", [a], a.data + float(b), lambda g: (g,))
    _check_same_shape("add", a, b)
    return record("add", [a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return record("sub_scalar", [a], a.data - float(b), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return record("sub", [a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", [a, b], out, lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scale", [a], a.data * s, lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return record("neg", [a], -a.data, lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", [a], ad * ad, lambda g: (2.0 * g * ad,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    out = np.where(keep, a.data, lo)
    return record("clamp_min", [a], out, lambda g: (g * keep,))


def log(a: Tensor) -> Tensor:
    """Natural log of ``max(a, 1e-12)``; clamped entries get zero gradient."""
    keep = a.data >= LOG_FLOOR
    safe = np.where(keep, a.data, LOG_FLOOR)
    return record("log", [a], np.log(safe), lambda g: (np.where(keep, g / safe, 0.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", [a], out, lambda g: (g * out,))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``b`` is a tensor, a scalar, or unused."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "div": div,
        "scale": scale,
        "clamp_min": clamp_min,
    }
    if op in ("neg", "log", "exp", "square"):
        return {"neg": neg, "log": log, "exp": exp, "square": square}[op](a)
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](a, b)


# ----------------------------------------------------------------- reductions


def _norm_axes(a: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(a.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    nd = a.data.ndim
    out = []
    for ax in axes:
        if not -nd <= ax < nd:
            raise ValueError(f"axis {ax} out of range for shape {a.shape}")
        out.append(ax % nd)
    return tuple(sorted(set(out)))


def sum(a: Tensor, axes=None) -> Tensor:  # noqa: A001
    axes = _norm_axes(a, axes)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def back(g):
        return (np.broadcast_to(np.reshape(g, kept), a.shape),)

    return record("sum", [a], out, back)


def mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(a, axes)
    count = int(np.prod([a.shape[i] for i in axes], dtype=np.int64))
    if count == 0:
        raise ValueError("mean over an empty extent")
    return scale(sum(a, axes), 1.0 / count)


def reduce(op: str, a: Tensor, axes=None) -> Tensor:
    if op == "sum":
        return sum(a, axes)
    if op == "mean":
        return mean(a, axes)
    raise ValueError(f"unknown reduction {op!r}")


# ------------------------------------------------------------------ structure


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record("reshape", [a], a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", [a], a.data.transpose(axes), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes; implicit broadcasting is not supported."""
    shape = tuple(shape)
    if a.data.ndim != len(shape):
        raise ValueError(f"broadcast_to needs equal rank, got {a.shape} -> {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    for i in axes:
        if a.shape[i] != 1:
            raise ValueError(f"cannot broadcast {a.shape} to {shape}")
    src = a.shape
    out = np.broadcast_to(a.data, shape)
    return record("broadcast_to", [a], out, lambda g: (g.sum(axis=axes).reshape(src),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return record("getitem", [a], np.array(out), back)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record("concat", list(tensors), out, lambda g: np.split(g, splits, axis=axis))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record("matmul", [a, b], ad @ bd, lambda g: (g @ bd.T, ad.T @ g))
