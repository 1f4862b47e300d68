"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside a ``with Tape() as tape:`` block are recorded on
that tape whenever one of their operands requires gradients. ``backward``
then walks the record in reverse and returns one gradient per leaf.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-dimensional array of 64-bit reals."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: adopt an op result without copying
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn, op: str) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._outputs:
                self._leaves.setdefault(id(t), t)
        out.requires_grad = True
        self.nodes.append(Node(out, inputs, fn, op))
        self._outputs.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def _make(arr: np.ndarray, inputs: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, fn, op)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(loss)/d(leaf) for every gradient-requiring leaf.

    Leaves that the loss does not depend on receive zero gradients. Each leaf's
    ``grad`` attribute is also set.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi
    result = {}
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result


# --- elementwise ---------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), fn, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient flows only where x exceeds the floor."""
    mask = x.data > floor
    return _make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clip_min")


# --- reductions and shape ------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(out, (x,), fn, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor, start_axis: int = 0) -> Tensor:
    """Row-major flatten of every axis from ``start_axis`` on."""
    return reshape(x, x.shape[:start_axis] + (-1,))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select x[i, index[i]] from a 2-D tensor."""
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ValueError(f"pick needs (n, k) data and n indices, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def fn(g):
        full = np.zeros(x.shape)
        full[rows, index] = g
        return (full,)

    return _make(x.data[rows, index], (x,), fn, "pick")


# --- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules for stacked operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), fn, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), fn, "softmax")


# --- convolution and pooling --------------------------------------------


def _pad_spec(padding, ndim_spatial=3):
    if isinstance(padding, int):
        return (padding,) * ndim_spatial
    padding = tuple(int(p) for p in padding)
    if len(padding) != ndim_spatial or min(padding) < 0:
        raise ValueError(f"padding must be {ndim_spatial} non-negative counts, got {padding}")
    return padding


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=0) -> Tensor:
    """Stride-1 valid 3-D cross-correlation with symmetric zero padding.

    ``x`` is (C_in, D, H, W) or batched (n, C_in, D, H, W); ``weight`` is
    (C_out, C_in, kd, kh, kw).
    """
    unbatched = x.ndim == 4
    if x.ndim not in (4, 5) or weight.ndim != 5:
        raise ValueError(f"conv3d expects input (C,D,H,W)/(n,C,D,H,W) and 5-D weights, got {x.shape} and {weight.shape}")
    xd = x.data[None] if unbatched else x.data
    if xd.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input {x.shape} has {xd.shape[1]} channels, "
            f"weights {weight.shape} expect {weight.shape[1]}"
        )
    pd, ph, pw = _pad_spec(padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    kd, kh, kw = weight.shape[2:]
    if kd > xp.shape[2] or kh > xp.shape[3] or kw > xp.shape[4]:
        raise ValueError(f"kernel {weight.shape[2:]} exceeds padded input extents {xp.shape[2:]}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    # win: (n, C_in, D', H', W', kd, kh, kw)
    out = np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[0]} filters")
        out = out + bias.data[None, :, None, None, None]
    od, oh, ow = out.shape[2:]

    def fn(g):
        g5 = g[None] if unbatched else g
        gw = np.tensordot(g5, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gxp = np.zeros(xp.shape)
        w = weight.data
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    gxp[:, :, i : i + od, j : j + oh, k : k + ow] += np.einsum(
                        "nodhw,oc->ncdhw", g5, w[:, :, i, j, k]
                    )
        gx = gxp[:, :, pd : pd + xd.shape[2], ph : ph + xd.shape[3], pw : pw + xd.shape[4]]
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g5.sum(axis=(0, 2, 3, 4)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if unbatched else out, inputs, fn, "conv3d")


def avg_pool3d(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping factor**3 blocks of the last three axes."""
    if factor < 1:
        raise ValueError(f"pooling factor must be positive, got {factor}")
    if x.ndim < 3:
        raise ValueError(f"avg_pool3d needs at least 3 axes, got shape {x.shape}")
    lead = x.shape[:-3]
    d, h, w = x.shape[-3:]
    for name, n in zip(("D", "H", "W"), (d, h, w)):
        if n % factor:
            raise ValueError(f"axis {name} of extent {n} is not divisible by pooling factor {factor}")
    f = factor
    blocks = x.data.reshape(lead + (d // f, f, h // f, f, w // f, f))
    nl = len(lead)
    out = blocks.mean(axis=(nl + 1, nl + 3, nl + 5))

    def fn(g):
        g = g / f**3
        g = np.repeat(np.repeat(np.repeat(g, f, axis=nl), f, axis=nl + 1), f, axis=nl + 2)
        return (g,)

    return _make(out, (x,), fn, "avg_pool3d")
