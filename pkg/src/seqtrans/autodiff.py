"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array. While a Tape is active, every primitive
appends a node (output, inputs, backward rule) in application order, which
is already a topological order. backward() walks the tape once in reverse
and accumulates adjoints additively, so a value used k times receives the
sum of its k contributions.

Primitives compute with plain numpy; when no tape is active they are pure
functions, which is what inference code relies on.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ShapeError


class Tensor:
    """Immutable-by-convention float64 array node."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()


_ACTIVE: list[Tape] = []


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def record(out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Create an output Tensor, recording its backward rule on the active tape.

    `backward(out_grad)` must return one gradient per entry of `inputs`
    (entries for non-Tensor inputs are ignored).
    """
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None and any(isinstance(i, Tensor) for i in inputs):
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad + bd
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {ad.shape} and {bd.shape}")
    return record(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad - bd
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {ad.shape} and {bd.shape}")
    return record(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad * bd
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {ad.shape} and {bd.shape}")
    return record(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    """a @ b with a of rank 2 or 3 and b of rank 2."""
    ad, bd = _data(a), _data(b)
    if ad.ndim not in (2, 3) or bd.ndim != 2 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = ad @ bd

    def backward(g):
        ga = g @ bd.T
        if ad.ndim == 2:
            gb = ad.T @ g
        else:
            gb = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
        return ga, gb

    return record(out, (a, b), backward)


def tanh(a) -> Tensor:
    out = np.tanh(_data(a))
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-_data(a)))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    ad = _data(a)
    out = np.maximum(ad, 0.0)
    return record(out, (a,), lambda g: (g * (ad > 0.0),))


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    ad = _data(a)
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def softmax(a) -> Tensor:
    """Stable softmax along the last axis."""
    ad = _data(a)
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(a) -> Tensor:
    """Stable log-softmax (shift by the row max) along the last axis."""
    ad = _data(a)
    shifted = ad - ad.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return record(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize along the last axis, then scale and shift."""
    xd, gd, bd = _data(x), _data(gain), _data(bias)
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gd + bd

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return record(out, (x, gain, bias), backward)


def conv1d(x, w, b) -> Tensor:
    """Same-padded 1D convolution over time.

    x: (T, C_in), w: (K, C_in, C_out) with K odd, b: (C_out,).
    """
    xd, wd, bd = _data(x), _data(w), _data(b)
    if xd.ndim != 2 or wd.ndim != 3 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {xd.shape} and {wd.shape}")
    k = wd.shape[0]
    pad = (k - 1) // 2
    t = xd.shape[0]
    xp = np.pad(xd, ((pad, pad), (0, 0)))
    out = np.zeros((t, wd.shape[2]))
    for j in range(k):
        out += xp[j : j + t] @ wd[j]
    out += bd

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for j in range(k):
            dxp[j : j + t] += g @ wd[j].T
            dw[j] = xp[j : j + t].T @ g
        dx = dxp[pad : pad + t] if pad else dxp
        return dx, dw, g.sum(axis=0)

    return record(out, (x, w, b), backward)


def avg_pool1d(x, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling over time; trailing remainder dropped."""
    xd = _data(x)
    t_out = xd.shape[0] // kernel
    if t_out < 1:
        raise ShapeError(f"avg_pool1d: input shape {xd.shape} shorter than kernel ({kernel},)")
    trimmed = xd[: t_out * kernel]
    out = trimmed.reshape(t_out, kernel, -1).mean(axis=1)

    def backward(g):
        dx = np.zeros_like(xd)
        dx[: t_out * kernel] = np.repeat(g / kernel, kernel, axis=0)
        return (dx,)

    return record(out, (x,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]."""
    td = _data(table)
    idx = np.asarray(ids, dtype=np.intp)
    out = td[idx]

    def backward(g):
        dt = np.zeros_like(td)
        np.add.at(dt, idx, g)
        return (dt, None)

    return record(out, (table, ids), backward)


def dropout(x, mask) -> Tensor:
    """Apply a precomputed (already inverse-scaled) dropout mask."""
    return mul(x, np.asarray(mask, dtype=np.float64))


def sum_all(x) -> Tensor:
    xd = _data(x)
    return record(np.asarray(xd.sum()), (x,), lambda g: (np.broadcast_to(g, xd.shape).copy(),))


def mean_all(x) -> Tensor:
    xd = _data(x)
    n = xd.size
    return record(np.asarray(xd.mean()), (x,), lambda g: (np.broadcast_to(g / n, xd.shape).copy(),))


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along axis 0 or 1."""
    xd = _data(x)
    if axis not in (0, 1) or axis >= xd.ndim:
        raise ShapeError(f"narrow: axis {axis} invalid for shape {xd.shape}")
    sl = (slice(start, start + length),) if axis == 0 else (slice(None), slice(start, start + length))
    out = xd[sl].copy()

    def backward(g):
        dx = np.zeros_like(xd)
        dx[sl] = g
        return (dx,)

    return record(out, (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def backward(g):
        grads = []
        offset = 0
        for size in sizes:
            sl = (slice(offset, offset + size),) if axis == 0 else (slice(None), slice(offset, offset + size))
            grads.append(g[sl])
            offset += size
        return tuple(grads)

    return record(out, tuple(parts), backward)


def transpose(x) -> Tensor:
    xd = _data(x)
    if xd.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {xd.shape}")
    return record(xd.T.copy(), (x,), lambda g: (g.T.copy(),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    xd = _data(x)
    return record(xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


def gather_cols(x, col_ids) -> Tensor:
    """out[i] = x[i, col_ids[i]] for a rank-2 input."""
    xd = _data(x)
    idx = np.asarray(col_ids, dtype=np.intp)
    rows = np.arange(len(idx))
    out = xd[rows, idx]

    def backward(g):
        dx = np.zeros_like(xd)
        dx[rows, idx] = g
        return (dx, None)

    return record(out, (x, col_ids), backward)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "conv1d": conv1d,
    "avg_pool1d": avg_pool1d,
    "embedding": embedding,
    "dropout": dropout,
    "sum": sum_all,
    "mean": mean_all,
    "narrow": narrow,
    "concat": concat,
    "transpose": transpose,
    "reshape": reshape,
    "gather_cols": gather_cols,
}


def forward_primitive(name: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name (the dispatch surface used by tests)."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise ShapeError(f"unknown primitive {name!r}")
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# parameter trees and backward
# ---------------------------------------------------------------------------


class ParamTree:
    """Ordered, uniquely-named collection of parameter Tensors."""

    __slots__ = ("_items",)

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()) -> None:
        self._items: dict[str, Tensor] = {}
        for name, tensor in items:
            self.add(name, tensor)

    def add(self, name: str, tensor) -> None:
        if name in self._items:
            raise ShapeError(f"duplicate parameter name {name!r}")
        self._items[name] = tensor if isinstance(tensor, Tensor) else Tensor(tensor)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def n_values(self) -> int:
        return sum(t.data.size for t in self._items.values())

    def map(self, fn: Callable[[str, Tensor], np.ndarray]) -> "ParamTree":
        return ParamTree((name, Tensor(fn(name, t))) for name, t in self._items.items())

    def copy(self) -> "ParamTree":
        return self.map(lambda _, t: t.data.copy())


class Gradients:
    """Adjoints produced by one backward pass, addressable by tensor."""

    def __init__(self, table: dict[int, np.ndarray]) -> None:
        self._table = table

    def wrt(self, tensor: Tensor) -> np.ndarray:
        grad = self._table.get(id(tensor))
        return np.zeros_like(tensor.data) if grad is None else grad

    def tree(self, params: ParamTree) -> dict[str, np.ndarray]:
        return {name: self.wrt(t) for name, t in params.items()}


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep of the tape from a scalar loss."""
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    table: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for node in reversed(tape.nodes):
        out_grad = table.get(id(node.out))
        if out_grad is None:
            continue
        in_grads = node.backward(out_grad)
        for inp, grad in zip(node.inputs, in_grads):
            if not isinstance(inp, Tensor) or grad is None:
                continue
            key = id(inp)
            if key in table:
                table[key] = table[key] + grad
            else:
                table[key] = np.asarray(grad, dtype=np.float64)
    return Gradients(table)


def finite_difference_check(
    f: Callable[[ParamTree], Tensor],
    params: ParamTree,
    eps: float = 1e-5,
    max_components_per_leaf: int = 4,
    rng: np.random.Generator | None = None,
    grad_floor: float | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be deterministic (fixed masks, no fresh randomness). Components
    are subsampled per leaf when a leaf is larger than
    `max_components_per_leaf`. Components whose gradient magnitude sits below
    the central-difference noise floor carry no relative-error signal (the
    difference of two nearly equal objective values is pure roundoff there);
    those are held to an absolute bound of `grad_floor` instead and excluded
    from the relative maximum.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = f(params)
    base = loss.item()
    if not math.isfinite(base):
        raise NumericError(f"finite_difference_check: non-finite objective {base}")
    analytic = backward(tape, loss).tree(params)
    if grad_floor is None:
        # roundoff of (f+ - f-)/2eps is ~eps_mach*|f|/eps; 1e5 margin keeps
        # the surviving components' noise two orders below a 1e-4 target
        grad_floor = 1e5 * np.finfo(np.float64).eps * max(1.0, abs(base)) / (2.0 * eps)

    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        n = flat.size
        if n <= max_components_per_leaf:
            picks = np.arange(n)
        else:
            picks = rng.choice(n, size=max_components_per_leaf, replace=False)
        grad_flat = analytic[name].reshape(-1)
        for i in picks:
            orig = flat[i]
            try:
                flat[i] = orig + eps
                up = f(params).item()
                flat[i] = orig - eps
                down = f(params).item()
            finally:
                flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("finite_difference_check: non-finite objective at perturbed point")
            numeric = (up - down) / (2.0 * eps)
            a = grad_flat[i]
            if max(abs(a), abs(numeric)) < grad_floor:
                if abs(a - numeric) > grad_floor:
                    raise NumericError(
                        f"finite_difference_check: {name}[{i}] disagrees below the "
                        f"noise floor: analytic {a:.3e}, numeric {numeric:.3e}"
                    )
                continue
            rel = abs(a - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, rel)
    return worst
