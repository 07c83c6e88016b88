"""Dense grids with reverse-mode automatic differentiation.

A *grid* is a plain ``numpy.ndarray`` of rank <= 4 (batch, channel, row, col).
A :class:`Node` wraps a grid together with the information needed to
propagate gradients back to its inputs.  Only what a small convolutional
segmentation network and its losses need is provided.

Conventions:

* relu has subgradient 0 at 0.
* clamp passes gradient 1 strictly inside ``(lo, hi)`` and 0 at or outside.
* reductions over an empty set return 0 with zero gradient.
* broadcasting is limited to scalar-with-grid.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_RANK = 4


class GridError(Exception):
    """Base class for errors raised by grid operations."""


class ShapeError(GridError, ValueError):
    pass


class DomainError(GridError, ValueError):
    pass


class NonFiniteError(GridError, FloatingPointError):
    pass


class ContractError(GridError, RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_grid(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind not in "fiub":
        raise ShapeError(f"grid needs numeric data, got dtype {arr.dtype}")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"grid rank must be <= {MAX_RANK}, got shape {arr.shape}")
    return arr


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        idx = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise NonFiniteError(f"{op}: non-finite value at flat index {idx}")


class Node:
    """A value in a computation graph.

    ``grad`` has the shape of ``value`` and is zero until :func:`backward`
    runs.  Leaves accumulate across repeated backward passes; call
    :meth:`zero_grad` between optimizer steps.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "op")

    def __init__(self, value, parents: Sequence["Node"] = (), backward=None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = value if isinstance(value, np.ndarray) and value.dtype.kind == "f" else as_grid(value)
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad
        self.op = op
        self._grad = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = g

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Node":
        return Node(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)


def variable(data, dtype=np.float64) -> Node:
    """Leaf that collects gradients."""
    return Node(as_grid(data, dtype).copy(), requires_grad=True)


def constant(data, dtype=None) -> Node:
    return Node(as_grid(data, dtype))


def _lift(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return Node(as_grid(x, dtype))


def _make(op: str, value: np.ndarray, parents: Sequence[Node], backward) -> Node:
    _check_finite(op, value)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Node(value, op=op)
    return Node(value, parents, backward, requires_grad=True, op=op)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _make("relu", np.where(mask, x.value, 0).astype(x.dtype, copy=False),
                 (x,), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    v = x.value
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def log(x: Node) -> Node:
    v = x.value
    bad = ~(v > 0)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise DomainError(f"log: non-positive input {v.ravel()[idx]!r} at flat index {idx}")
    return _make("log", np.log(v), (x,), lambda g: (g / v,))


def clamp(x: Node, lo: float, hi: float) -> Node:
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    v = x.value
    inside = (v > lo) & (v < hi)
    return _make("clamp", np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


def neg(x: Node) -> Node:
    return _make("neg", -x.value, (x,), lambda g: (-g,))


def add_const(x: Node, c: float) -> Node:
    return _make("add_const", x.value + x.dtype.type(c), (x,), lambda g: (g,))


def mul_const(x: Node, c: float) -> Node:
    c = x.dtype.type(c)
    return _make("mul_const", x.value * c, (x,), lambda g: (g * c,))


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "log": log, "clamp": clamp,
                "neg": neg, "add-const": add_const, "mul-const": mul_const}


def elementwise(node: Node, fn: str, *args) -> Node:
    """Dispatch by name: ``elementwise(x, "clamp", lo, hi)``."""
    try:
        op = _ELEMENTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown elementwise fn {fn!r}; choose from {sorted(_ELEMENTWISE)}") from None
    return op(node, *args)


# ---------------------------------------------------------------------------
# binary


def _binary_shapes(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Node:
    a, b = _lift(a, b if isinstance(b, Node) else None), _lift(b, a if isinstance(a, Node) else None)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _lift(a, b if isinstance(b, Node) else None), _lift(b, a if isinstance(a, Node) else None)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = _lift(a, b if isinstance(b, Node) else None), _lift(b, a if isinstance(a, Node) else None)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


_BINARY = {"add": add, "sub": sub, "mul": mul}


def binary(a: Node, b: Node, fn: str) -> Node:
    try:
        op = _BINARY[fn]
    except KeyError:
        raise ValueError(f"unknown binary fn {fn!r}; choose from {sorted(_BINARY)}") from None
    return op(a, b)


# ---------------------------------------------------------------------------
# structural


def reshape(x: Node, shape: Sequence[int]) -> Node:
    src = x.shape
    return _make("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))


def reduce(node: Node, fn: str = "sum", over: str = "all") -> Node:
    """Sum or mean over every element (``over="all"``) or per image.

    ``over="image"`` keeps the leading batch axis and reduces the rest,
    returning a vector of shape ``(B,)``.
    """
    if fn not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {fn!r}")
    v = node.value
    if over == "all":
        axes = None
        n = v.size
    elif over == "image":
        if v.ndim < 1:
            raise ShapeError("per-image reduction needs a batch axis")
        axes = tuple(range(1, v.ndim))
        n = int(np.prod(v.shape[1:], dtype=np.int64))
    else:
        raise ValueError(f"unknown reduction extent {over!r}")
    if n == 0:
        shape = () if axes is None else v.shape[:1]
        return _make(f"{fn}[empty]", np.zeros(shape, v.dtype), (node,),
                     lambda g: (np.zeros_like(v),))
    out = v.sum(axis=axes)
    scale = v.dtype.type(1.0 / n) if fn == "mean" else v.dtype.type(1)
    if fn == "mean":
        out = out * scale
    out = np.asarray(out, dtype=v.dtype)

    def backward(g):
        if axes is not None:
            g = g.reshape(g.shape + (1,) * (v.ndim - 1))
        return (np.broadcast_to(g * scale, v.shape).astype(v.dtype),)

    return _make(fn, out, (node,), backward)


def sum_all(x: Node) -> Node:
    return reduce(x, "sum", "all")


def mean_all(x: Node) -> Node:
    return reduce(x, "mean", "all")


def upsample_nearest(node: Node, factor: int) -> Node:
    """Replicate each pixel of the last two axes into a factor x factor block."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive int, got {factor}")
    factor = int(factor)
    if factor == 1:
        return _make("upsample", node.value.copy(), (node,), lambda g: (g,))
    v = node.value
    out = np.repeat(np.repeat(v, factor, axis=-2), factor, axis=-1)

    def backward(g):
        h, w = v.shape[-2:]
        blocks = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (blocks.sum(axis=(-3, -1)),)

    return _make("upsample", out, (node,), backward)


def conv2d(x: Node, kernel: Node, bias: Node, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of a (B, C_in, H, W) input with (C_out, C_in, k, k) kernels."""
    xv, kv, bv = x.value, kernel.value, bias.value
    if xv.ndim != 4 or kv.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and kernel, got {xv.shape} and {kv.shape}")
    B, C, H, W = xv.shape
    Co, Ci, kh, kw = kv.shape
    if Ci != C:
        raise ShapeError(f"conv2d: channel mismatch, input {xv.shape} vs kernel {kv.shape}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kv.shape}")
    if bv.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {bv.shape} does not match {Co} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride {stride} / padding {padding}")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {xv.shape}, k={k}")

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (B, Ho, Wo, C, k, k) -> rows of C*k*k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = kv.reshape(Co, C * k * k)
    out = (cols @ wmat.T + bv).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gk = (gm.T @ cols).reshape(kv.shape)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gk, gb

    return _make("conv2d", out, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(value) into ``grad`` of every node feeding ``root``.

    Interior nodes hold the gradient of the latest pass only; leaves
    accumulate across passes.
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    for node in order:
        if node.parents:
            node.zero_grad()
    root.grad = root.grad + np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node._grad is None:
            continue
        grads = node._backward(node._grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent._grad is None:
                parent._grad = np.array(g, dtype=parent.dtype, copy=True).reshape(parent.shape)
            else:
                parent._grad += g


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    """Per-input maximum relative error of analytic vs central-difference grads."""

    max_rel_error: list[float]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e < self.tol for e in self.max_rel_error)


def finite_diff_check(builder: Callable[..., Node], inputs: Iterable, h: float = 1e-5,
                      tol: float = 1e-5) -> GradCheckReport:
    """Compare backward() against central differences for a scalar graph.

    ``builder(*nodes)`` must return a scalar Node.  Inputs are promoted to
    64-bit.  Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    grids = [as_grid(x, np.float64).copy() for x in inputs]
    nodes = [variable(g) for g in grids]
    try:
        root = builder(*nodes)
        backward(root)
    except GridError as exc:
        return GradCheckReport([float("inf")] * len(grids), tol, [f"analytic pass: {exc}"])
    analytic = [n.grad.copy() for n in nodes]

    def f(vals):
        with no_grad():
            return float(builder(*[constant(v) for v in vals]).value)

    errors, failures = [], []
    for i, g in enumerate(grids):
        num = np.zeros_like(g)
        for j in range(g.size):
            plus = [v.copy() for v in grids]
            minus = [v.copy() for v in grids]
            plus[i].flat[j] += h
            minus[i].flat[j] -= h
            try:
                fp, fm = f(plus), f(minus)
            except GridError as exc:
                failures.append(f"input {i} coord {j}: {exc}")
                continue
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append(f"input {i} coord {j}: non-finite loss")
                continue
            num.flat[j] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(num)), 1e-8)
        errors.append(float(np.max(np.abs(analytic[i] - num) / denom)) if g.size else 0.0)
    return GradCheckReport(errors, tol, failures)
