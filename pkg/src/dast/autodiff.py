"""Minimal reverse-mode autodiff over dense float64 tensors.

Backward passes are themselves built from the same primitives, so gradients
can be differentiated again (needed for second-order meta-updates). The
engine is deliberately small: dense arrays, no fusion, no GPU.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """A dense float64 array plus the bookkeeping to reach it backwards."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = parents
        self._vjp: Callable | None = vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return slice_(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by primitive '{op}'")
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp, op=op)
    return Tensor(data, op=op)


def _check_finite(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite input to primitive '{name}'")


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcasted gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, (a, b), lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("sub", a, b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, (a, b), lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, (a, b), lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("div", a, b)
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda g: (_sum_to(div(g, b), a.shape), _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (neg(g),), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires 2-D or higher operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} disagree")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        return (_sum_to(matmul(g, transpose(b)), a.shape), _sum_to(matmul(transpose(a), g), b.shape))

    return _record(out, (a, b), vjp, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    return _record(np.reshape(a.data, shape), (a,), lambda g: (reshape(g, a.shape),), "reshape")


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_sum_to(g, a.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_finite("concat", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            outs.append(slice_(g, tuple(idx)))
        return tuple(outs)

    return _record(out, tensors, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def slice_(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        return (pad_slice(g, a.shape, idx),)

    return _record(out, (a,), vjp, "slice")


def pad_slice(g: Tensor, full_shape, idx) -> Tensor:
    """Embed `g` into zeros of `full_shape` at `idx` (adjoint of slicing)."""
    out = np.zeros(full_shape)
    out[idx] = g.data

    def vjp(gg):
        return (slice_(gg, idx),)

    return _record(out, (g,), vjp, "pad_slice")


def sigmoid(a: Tensor) -> Tensor:
    _check_finite("sigmoid", a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    y = _record(out, (a,), None, "sigmoid")
    y._vjp = lambda g: (mul(g, mul(y, sub(Tensor(1.0), y))),)
    return y


def tanh(a: Tensor) -> Tensor:
    _check_finite("tanh", a)
    y = _record(np.tanh(a.data), (a,), None, "tanh")
    y._vjp = lambda g: (mul(g, sub(Tensor(1.0), mul(y, y))),)
    return y


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return _record(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),), "relu")


def exp(a: Tensor) -> Tensor:
    _check_finite("exp", a)
    y = _record(np.exp(a.data), (a,), None, "exp")
    y._vjp = lambda g: (mul(g, y),)
    return y


def log(a: Tensor) -> Tensor:
    _check_finite("log", a)
    return _record(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a: Tensor) -> Tensor:
    y = _record(np.sqrt(a.data), (a,), None, "sqrt")
    y._vjp = lambda g: (div(g, mul(Tensor(2.0), y)),)
    return y


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)

    def vjp(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = reshape(g, shape)
        return (broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return div(sum_(a, axis=axis, keepdims=keepdims), Tensor(float(n)))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return sum_(mul(a, b))


def softmax_last(a: Tensor) -> Tensor:
    """Softmax along the last axis. The max-shift is treated as a constant,
    which is exact because softmax is shift invariant."""
    shift = sub(a, Tensor(np.max(a.data, axis=-1, keepdims=True)))
    e = exp(shift)
    return div(e, sum_(e, axis=-1, keepdims=True))


def softmax_rows(a: Tensor) -> Tensor:
    return softmax_last(a)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_gather: id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        return (scatter_rows(g, ids, table.shape[0]),)

    return _record(out, (table,), vjp, "embedding_gather")


def scatter_rows(g: Tensor, ids: np.ndarray, num_rows: int) -> Tensor:
    """Adjoint of row gather: sum rows of `g` into a (num_rows, d) table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((num_rows,) + g.shape[ids.ndim:])
    np.add.at(out, ids, g.data)

    def vjp(gg):
        return (embedding_gather(gg, ids),)

    return _record(out, (g,), vjp, "scatter_rows")


def scatter_add_last(values: Tensor, ids: np.ndarray, width: int) -> Tensor:
    """Scatter values (..., L) onto a (..., width) grid by last-axis ids.

    Used by the copy mechanism to project source-position probabilities
    onto vocabulary ids. Duplicate ids accumulate.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != values.shape:
        raise ShapeError(f"scatter_add_last: ids {ids.shape} vs values {values.shape}")
    out = np.zeros(values.shape[:-1] + (width,))
    idx = tuple(np.indices(ids.shape)[:-1]) + (ids,)
    np.add.at(out, idx, values.data)

    def vjp(g):
        return (take_along_last(g, ids),)

    return _record(out, (values,), vjp, "scatter_add_last")


def take_along_last(a: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.take_along_axis(a.data, ids, axis=-1)

    def vjp(g):
        return (scatter_add_last(g, ids, a.shape[-1]),)

    return _record(out, (a,), vjp, "take_along_last")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    cent = sub(x, mu)
    var = mean(mul(cent, cent), axis=-1, keepdims=True)
    normed = div(cent, sqrt(add(var, Tensor(eps))))
    return add(mul(normed, gain), bias)


def dropout_mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    return mul(x, Tensor(mask))


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "matmul": matmul,
    "concat": concat,
    "slice": slice_,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax-rows": softmax_rows,
    "embedding-gather": embedding_gather,
    "scatter-add": scatter_add_last,
    "sum": sum_,
    "mean": mean,
    "dot": dot,
    "layer-norm": layer_norm,
    "dropout-mask-apply": dropout_mask_apply,
}


def apply_primitive(kind: str, *operands):
    """Dispatch a primitive by name; the graph is recorded implicitly."""
    if kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive kind '{kind}'")
    return _PRIMITIVES[kind](*operands)


# ----------------------------------------------------------------- backward


def _topo(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    seed: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Reverse-mode gradients of `output` w.r.t. each tensor in `wrt`.

    With create_graph=True the returned gradients are themselves graph
    nodes, so they can be differentiated again.
    """
    if seed is None:
        seed = Tensor(np.ones(output.shape))
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
    grads: dict[int, Tensor] = {id(output): seed}
    wrt_ids = {id(w) for w in wrt}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(_topo(output)):
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and node._vjp is None:
                    grads[id(node)] = g  # leaf: keep for lookup below
                continue
            parts = node._vjp(g)
            for p, pg in zip(node._parents, parts):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else add(acc, pg)
            if id(node) in wrt_ids:
                grads[id(node)] = g  # non-leaf target (fast weights)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


def backward(output: Tensor, seed: Tensor | None = None, create_graph: bool = False) -> None:
    """Populate `.grad` on every requires_grad leaf reachable from `output`."""
    leaves = [n for n in _topo(output) if n._vjp is None and n.requires_grad]
    gs = grad(output, leaves, seed=seed, create_graph=create_graph)
    for leaf, g in zip(leaves, gs):
        leaf.grad = g if leaf.grad is None else add(leaf.grad, g)


# ----------------------------------------------------------------- ParamSet


class ParamSet:
    """Named tensor collection with stable iteration order."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        self.version = 0
        if params:
            for k, v in params.items():
                self[k] = v

    def __setitem__(self, name: str, t: Tensor) -> None:
        self._params[name] = t
        self.version += 1

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def clone(self) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.items()})

    def subset(self, predicate: Callable[[str], bool]) -> "ParamSet":
        return ParamSet({k: v for k, v in self.items() if predicate(k)})

    def update(self, other: "ParamSet") -> None:
        for k, v in other.items():
            self[k] = v


def fast_weight_clone(params: ParamSet) -> ParamSet:
    """Value-equal, independently mutable copy of a ParamSet."""
    return params.clone()


# --------------------------------------------------------------- grad check


def grad_check(
    builder: Callable[[ParamSet], Tensor],
    point: ParamSet,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `builder` must produce a scalar output from the ParamSet. With
    `max_coords` set, at most that many randomly chosen coordinates per
    parameter are probed (keeps large checks affordable).
    """
    if not (1e-8 < eps < 1e-2):
        raise ValueError("eps outside sensible central-difference range")
    out = builder(point)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    analytic = grad(out, point.tensors())
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, g in zip(point.tensors(), analytic):
        flat = t.data.reshape(-1)
        gflat = g.data.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = sorted(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = builder(point).item()
            flat[i] = orig - eps
            lo = builder(point).item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
