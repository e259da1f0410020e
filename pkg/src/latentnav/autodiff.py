"""Reverse-mode autodiff on dense float64 numpy arrays.

Dynamic tape: each op produces a Tensor holding its parents and a vjp closure
per parent. backward() walks the graph once, topologically, and accumulates
into .grad. Double precision everywhere; no broadcasting beyond numpy's rules.

Every differentiable op registers a probe in OPS so the finite-difference
property test covers the full op set automatically.
"""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class GraphReused(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward math)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar; constants get wrapped on the fly
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def lift(data: np.ndarray, parents) -> Tensor:
    """Build an interior node from (tensor, vjp) pairs. Extension point for
    custom ops defined outside this module; vjp(g) returns the parent's grad."""
    recorded = [(p, vjp) for p, vjp in parents if p.requires_grad]
    out = Tensor(data)
    if _grad_enabled and recorded:
        out.requires_grad = True
        out._parents = tuple(recorded)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"{opname}: {a.shape} vs {b.shape}") from e


# ---------------------------------------------------------------------------
# op registry for the finite-difference property test
# probe(rng) -> (list of leaf param Tensors, forward fn mapping them to a Tensor)

OPS: dict[str, Callable] = {}


def _probe(name):
    def deco(fn):
        OPS[name] = fn
        return fn

    return deco


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    return lift(a.data + b.data, [(a, lambda g: _unbroadcast(g, a.shape)),
                                  (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    return lift(a.data - b.data, [(a, lambda g: _unbroadcast(g, a.shape)),
                                  (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    return lift(a.data * b.data, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                                  (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "div")
    return lift(a.data / b.data,
                [(a, lambda g: _unbroadcast(g / b.data, a.shape)),
                 (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape))])


def neg(a: Tensor) -> Tensor:
    return lift(-a.data, [(a, lambda g: -g)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return lift(a.data @ b.data, [(a, lambda g: g @ b.data.T),
                                  (b, lambda g: a.data.T @ g)])


@_probe("add")
def _p_add(rng):
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(3, 4)))
    return [a, b], lambda a, b: add(a, b)


@_probe("add_broadcast")
def _p_addb(rng):
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(1, 4)))
    return [a, b], lambda a, b: add(a, b)


@_probe("sub")
def _p_sub(rng):
    a, b = param(rng.normal(size=(5,))), param(rng.normal(size=(5,)))
    return [a, b], lambda a, b: sub(a, b)


@_probe("mul")
def _p_mul(rng):
    a, b = param(rng.normal(size=(2, 3))), param(rng.normal(size=(2, 3)))
    return [a, b], lambda a, b: mul(a, b)


@_probe("mul_broadcast")
def _p_mulb(rng):
    a, b = param(rng.normal(size=(4, 3))), param(rng.normal(size=(4, 1)))
    return [a, b], lambda a, b: mul(a, b)


@_probe("div")
def _p_div(rng):
    a = param(rng.normal(size=(3, 2)))
    b = param(rng.uniform(0.5, 2.0, size=(3, 2)))
    return [a, b], lambda a, b: div(a, b)


@_probe("neg")
def _p_neg(rng):
    a = param(rng.normal(size=(4,)))
    return [a], neg


@_probe("matmul")
def _p_matmul(rng):
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    return [a, b], lambda a, b: matmul(a, b)


# -- elementwise nonlinearities ---------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return lift(a.data * mask, [(a, lambda g: g * mask)])


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # exp overflow saturates to exactly 0 or 1
        s = 1.0 / (1.0 + np.exp(-a.data))
    return lift(s, [(a, lambda g: g * s * (1.0 - s))])


def softplus(a: Tensor) -> Tensor:
    # overflow-safe: log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    return lift(out, [(a, lambda g: g * s)])


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return lift(t, [(a, lambda g: g * (1.0 - t * t))])


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return lift(e, [(a, lambda g: g * e)])


def log(a: Tensor) -> Tensor:
    return lift(np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return lift(r, [(a, lambda g: g * 0.5 / r)])


def sin(a: Tensor) -> Tensor:
    return lift(np.sin(a.data), [(a, lambda g: g * np.cos(a.data))])


def cos(a: Tensor) -> Tensor:
    return lift(np.cos(a.data), [(a, lambda g: -g * np.sin(a.data))])


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return lift(np.abs(a.data), [(a, lambda g: g * s)])


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "softplus":
        return softplus(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "none":
        return a
    raise ValueError(f"unknown activation {kind!r}")


@_probe("relu")
def _p_relu(rng):
    # keep values away from the kink; FD is invalid there
    a = param(rng.normal(size=(3, 3)) + np.sign(rng.normal(size=(3, 3))) * 0.2)
    return [a], relu


@_probe("sigmoid")
def _p_sigmoid(rng):
    return [param(rng.normal(size=(6,)))], sigmoid


@_probe("softplus")
def _p_softplus(rng):
    return [param(rng.normal(size=(6,)))], softplus


@_probe("tanh")
def _p_tanh(rng):
    return [param(rng.normal(size=(6,)))], tanh


@_probe("exp")
def _p_exp(rng):
    return [param(rng.normal(size=(5,)))], exp


@_probe("log")
def _p_log(rng):
    return [param(rng.uniform(0.2, 3.0, size=(5,)))], log


@_probe("sqrt")
def _p_sqrt(rng):
    return [param(rng.uniform(0.2, 3.0, size=(5,)))], sqrt


@_probe("sin")
def _p_sin(rng):
    return [param(rng.normal(size=(5,)))], sin


@_probe("cos")
def _p_cos(rng):
    return [param(rng.normal(size=(5,)))], cos


@_probe("absolute")
def _p_abs(rng):
    a = param(rng.normal(size=(7,)) + np.sign(rng.normal(size=(7,))) * 0.2)
    return [a], absolute


# -- shape / reduction -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return lift(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeMismatch(f"broadcast_to: {a.shape} -> {shape}") from e
    return lift(out, [(a, lambda g: _unbroadcast(g, a.shape))])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])
    parents = []
    for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
        idx = [slice(None)] * data.ndim
        idx[axis] = slice(int(lo), int(hi))
        parents.append((t, lambda g, idx=tuple(idx): g[idx]))
    return lift(data, parents)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return lift(out, [(a, vjp)])


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return lift(a.data[idx], [(a, vjp)])


@_probe("reshape")
def _p_reshape(rng):
    return [param(rng.normal(size=(3, 4)))], lambda a: reshape(a, (2, 6))


@_probe("broadcast_to")
def _p_bcast(rng):
    return [param(rng.normal(size=(3, 1)))], lambda a: broadcast_to(a, (3, 5))


@_probe("concat")
def _p_concat(rng):
    a, b = param(rng.normal(size=(2, 3))), param(rng.normal(size=(2, 2)))
    return [a, b], lambda a, b: concat([a, b], axis=1)


@_probe("reduce_sum")
def _p_rsum(rng):
    return [param(rng.normal(size=(3, 4)))], lambda a: reduce_sum(a, axis=1)


@_probe("reduce_sum_all")
def _p_rsum_all(rng):
    return [param(rng.normal(size=(3, 4)))], lambda a: reduce_sum(a)


@_probe("reduce_mean")
def _p_rmean(rng):
    return [param(rng.normal(size=(2, 5)))], lambda a: reduce_mean(a, axis=0, keepdims=True)


@_probe("gather_rows")
def _p_gather(rng):
    a = param(rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, size=8)
    return [a], lambda a: gather_rows(a, idx)


# -- composite losses ---------------------------------------------------------


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference, as one scalar."""
    return reduce_mean(absolute(sub(a, b)))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = sub(a, Tensor(a.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


@_probe("l1_distance")
def _p_l1(rng):
    a = param(rng.normal(size=(4, 3)))
    b = param(rng.normal(size=(4, 3)) + 1.0)  # keep |a-b| away from 0 kinks
    return [a, b], l1_distance


@_probe("softmax")
def _p_softmax(rng):
    return [param(rng.normal(size=(3, 5)))], lambda a: softmax(a, axis=1)


# -- structured ops for mapping and rendering ---------------------------------


def cumsum_exclusive(a: Tensor, axis: int = -1) -> Tensor:
    """y_i = sum_{j<i} x_j along `axis` (y_0 = 0)."""
    inc = np.cumsum(a.data, axis=axis)
    out = inc - a.data

    def vjp(g):
        suffix = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return suffix - g  # sum over strictly-later positions

    return lift(out, [(a, vjp)])


def scatter_mean(values: Tensor, cell_ids, num_cells: int) -> Tensor:
    """Average rows of `values` [N, D] into `num_cells` buckets; empty -> 0."""
    cell_ids = np.asarray(cell_ids, dtype=np.int64)
    if values.data.ndim != 2 or cell_ids.shape != (values.shape[0],):
        raise ShapeMismatch(f"scatter_mean: {values.shape} with ids {cell_ids.shape}")
    counts = np.bincount(cell_ids, minlength=num_cells).astype(np.float64)
    sums = np.zeros((num_cells, values.shape[1]))
    np.add.at(sums, cell_ids, values.data)
    safe = np.maximum(counts, 1.0)
    out = sums / safe[:, None]

    def vjp(g):
        return g[cell_ids] / safe[cell_ids, None]

    return lift(out, [(values, vjp)])


def scatter_sum(values: Tensor, cell_ids, num_cells: int) -> Tensor:
    """Sum rows of `values` [N, D] into `num_cells` buckets."""
    cell_ids = np.asarray(cell_ids, dtype=np.int64)
    if values.data.ndim != 2 or cell_ids.shape != (values.shape[0],):
        raise ShapeMismatch(f"scatter_sum: {values.shape} with ids {cell_ids.shape}")
    sums = np.zeros((num_cells, values.shape[1]))
    np.add.at(sums, cell_ids, values.data)
    return lift(sums, [(values, lambda g: g[cell_ids])])


def bilinear_sample_2d(grid: Tensor, coords: Tensor) -> Tensor:
    """Sample grid [U, V, C] at fractional coords [N, 2]; border-clamped.

    Differentiable in both the grid values and the sample coordinates (the
    coordinate gradient is what pose tracking rides on).
    """
    if grid.data.ndim != 3 or coords.data.ndim != 2 or coords.shape[1] != 2:
        raise ShapeMismatch(f"bilinear_sample_2d: grid {grid.shape}, coords {coords.shape}")
    U, V, C = grid.shape
    cu = np.clip(coords.data[:, 0], 0.0, U - 1.0)
    cv = np.clip(coords.data[:, 1], 0.0, V - 1.0)
    u0 = np.clip(np.floor(cu).astype(np.int64), 0, U - 2) if U > 1 else np.zeros(len(cu), np.int64)
    v0 = np.clip(np.floor(cv).astype(np.int64), 0, V - 2) if V > 1 else np.zeros(len(cv), np.int64)
    u1, v1 = u0 + (1 if U > 1 else 0), v0 + (1 if V > 1 else 0)
    fu = (cu - u0)[:, None]
    fv = (cv - v0)[:, None]
    g00 = grid.data[u0, v0]
    g01 = grid.data[u0, v1]
    g10 = grid.data[u1, v0]
    g11 = grid.data[u1, v1]
    out = (g00 * (1 - fu) * (1 - fv) + g01 * (1 - fu) * fv
           + g10 * fu * (1 - fv) + g11 * fu * fv)

    # clamped samples have zero coordinate gradient
    inside_u = ((coords.data[:, 0] > 0.0) & (coords.data[:, 0] < U - 1.0)).astype(np.float64)
    inside_v = ((coords.data[:, 1] > 0.0) & (coords.data[:, 1] < V - 1.0)).astype(np.float64)

    def vjp_grid(g):
        out = np.zeros_like(grid.data)
        np.add.at(out, (u0, v0), g * (1 - fu) * (1 - fv))
        np.add.at(out, (u0, v1), g * (1 - fu) * fv)
        np.add.at(out, (u1, v0), g * fu * (1 - fv))
        np.add.at(out, (u1, v1), g * fu * fv)
        return out

    def vjp_coords(g):
        du = ((g10 - g00) * (1 - fv) + (g11 - g01) * fv) * g
        dv = ((g01 - g00) * (1 - fu) + (g11 - g10) * fu) * g
        return np.stack([du.sum(axis=1) * inside_u, dv.sum(axis=1) * inside_v], axis=1)

    return lift(out, [(grid, vjp_grid), (coords, vjp_coords)])


@_probe("cumsum_exclusive")
def _p_cumsum(rng):
    return [param(rng.normal(size=(3, 6)))], lambda a: cumsum_exclusive(a, axis=1)


@_probe("scatter_mean")
def _p_scatter(rng):
    vals = param(rng.normal(size=(10, 3)))
    ids = rng.integers(0, 5, size=10)
    return [vals], lambda v: scatter_mean(v, ids, 6)


@_probe("scatter_sum")
def _p_scatter_sum(rng):
    vals = param(rng.normal(size=(10, 3)))
    ids = rng.integers(0, 5, size=10)
    return [vals], lambda v: scatter_sum(v, ids, 6)


@_probe("bilinear_sample_2d")
def _p_bilinear(rng):
    grid = param(rng.normal(size=(5, 6, 3)))
    # stay inside the border and off exact integers: coordinate FD breaks there
    coords = param(rng.uniform(0.6, 3.9, size=(7, 2)) + 0.013)
    return [grid, coords], lambda g, c: bilinear_sample_2d(g, c)


# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad over everything reachable from `loss`.

    Raises NotScalar for non-scalar losses and GraphReused if any interior
    node of this graph has already been consumed by a previous backward.
    """
    if loss.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        if node._parents and node._consumed:
            raise GraphReused("backward already ran through this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        if node._parents:
            node._consumed = True
            node.grad = g  # interior grads visible for debugging
        for parent, vjp in node._parents:
            pg = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------


class Mlp:
    """Fully-connected stack; `widths` chains layer sizes, `acts` tags each layer."""

    def __init__(self, widths, acts, rng: np.random.Generator):
        if len(acts) != len(widths) - 1:
            raise ShapeMismatch("need one activation tag per layer")
        self.widths = list(widths)
        self.acts = list(acts)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(param(rng.normal(0.0, scale, size=(fan_in, fan_out))))
            self.biases.append(param(np.zeros(fan_out)))

    def __call__(self, x: Tensor) -> Tensor:
        for W, b, act in zip(self.weights, self.biases, self.acts):
            x = activation(add(matmul(x, W), b), act)
        return x

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def named_parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = W.data
            out[f"{prefix}.b{i}"] = b.data
        return out

    def load_named(self, prefix: str, arrays: dict) -> None:
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            W.data = np.array(arrays[f"{prefix}.w{i}"], dtype=np.float64)
            b.data = np.array(arrays[f"{prefix}.b{i}"], dtype=np.float64)


class Adam:
    """Adam over a fixed parameter list; params with no grad are left untouched."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params, lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.BETA1 ** self.t
        b2t = 1.0 - self.BETA2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"grad {g.shape} vs param {p.data.shape}")
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.EPS)

    def zero_grad(self) -> None:
        zero_grad(self.params)
