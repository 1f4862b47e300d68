"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tape, Tensor, backward


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float, coords) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x)).item()
        flat[i] = orig - eps
        lo = f(Tensor(x)).item()
        flat[i] = orig
        out[n] = (hi - lo) / (2 * eps)
    return out


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at ``x``
    and central differences, over ``coords`` (flat indices; default all)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    coords = list(range(x.size)) if coords is None else list(coords)
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
    analytic = backward(tape, loss)[leaf].reshape(-1)
    numeric = numeric_grad(f, x, eps, coords)
    errs = [relative_error(analytic[i], numeric[n]) for n, i in enumerate(coords)]
    return max(errs, default=0.0)
