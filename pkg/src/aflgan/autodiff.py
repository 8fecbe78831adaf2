"""Reverse-mode automatic differentiation for small dense and conv graphs.

Design constraints, in order:

* 64-bit floats everywhere; tensors are 1- to 4-dimensional, row-major.
* The dense operation subset (matmul/affine, add, scale, concat, tanh, relu,
  leaky_relu, mean, norm2, ...) is *double differentiable*: its backward
  rules are themselves written in terms of traced operations, so a gradient
  obtained with ``grad(..., create_graph=True)`` is an ordinary graph node
  that can be differentiated again.  This is what makes a gradient-norm
  penalty on a dense critic trainable.
* Convolutions, transposed convolutions and nearest upsampling have plain
  numpy backward rules and are first-order only; asking for a second
  derivative through them fails fast with the offending node's name.
* Determinism: graph construction order is the program order, gradient
  accumulation follows reverse topological node order, and no operation is
  allowed to depend on iteration order of an unordered container.  Identical
  inputs therefore produce bit-identical outputs and gradients.
* NaN policy: fail fast.  The loss is checked on every backward; leaf
  gradients are checked by default, every intermediate gradient when
  ``set_nan_checks("all")`` is active.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonScalarLossError",
    "NanGradientError",
    "DoubleBackpropError",
    "MissingGradientError",
    "Tensor",
    "no_grad",
    "enable_grad",
    "set_nan_checks",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "pad_axis",
    "broadcast_to",
    "sum_axes",
    "sum_all",
    "mean_axes",
    "mean_all",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "exp",
    "log",
    "sqrt",
    "square",
    "softplus",
    "affine",
    "norm2",
    "norm2_rows",
    "conv2d",
    "conv2d_transpose",
    "upsample_nearest",
    "backward",
    "grad",
    "Adam",
    "AdamState",
    "adam_step",
    "finite_diff_check",
    "FiniteDiffReport",
    "OPS",
    "OpInfo",
]


class AutodiffError(Exception):
    """Base class for engine failures."""


class ShapeError(AutodiffError):
    pass


class NonScalarLossError(AutodiffError):
    pass


class NanGradientError(AutodiffError):
    pass


class DoubleBackpropError(AutodiffError):
    pass


class MissingGradientError(AutodiffError):
    pass


_node_ids = itertools.count()
_grad_enabled = True
_nan_checks = "leaves"  # "off" | "leaves" | "all"

# Operation kinds whose backward rules are themselves traced, i.e. safe to
# differentiate twice.  Everything else is first-order only.
_DOUBLE_DIFF_OPS = {
    "leaf", "add", "sub", "mul", "div", "neg", "scale", "add_scalar",
    "matmul", "transpose", "reshape", "concat", "narrow", "pad_axis",
    "broadcast_to", "sum", "mean", "tanh", "sigmoid", "relu", "leaky_relu",
    "exp", "log", "sqrt", "square", "softplus", "affine",
}


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class enable_grad:
    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = True
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_nan_checks(mode: str) -> None:
    """Select NaN checking granularity: "off", "leaves" (default) or "all"."""
    global _nan_checks
    if mode not in ("off", "leaves", "all"):
        raise ValueError(f"unknown nan-check mode {mode!r}")
    _nan_checks = mode


class Tensor:
    """A value node in the computation graph.

    Fuses the value (``data``: float64 ndarray, 1-4 dims) with its graph
    bookkeeping: the operation kind that produced it, its parent nodes and
    the backward rule.  Leaves have ``op == "leaf"`` and no parents; only
    leaves with ``requires_grad`` accumulate into ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "node_id",
                 "name", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise ShapeError(f"tensor must have 1..4 dims, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents: tuple = ()
        self.node_id = next(_node_ids)
        self.name = name
        self._vjp = None

    # -- GraphNode view ----------------------------------------------------
    @property
    def op_kind(self) -> str:
        return self.op

    @property
    def double_differentiable(self) -> bool:
        return self.op in _DOUBLE_DIFF_OPS

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def label(self) -> str:
        return self.name if self.name else f"{self.op}#{self.node_id}"

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor({self.label()}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; exact-shape semantics, scalars go through scale/add_scalar.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, op: str, parents: tuple, vjp) -> Tensor:
    """Internal fast constructor; trusts dtype/shape of ``data``."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.node_id = next(_node_ids)
    t.name = None
    rg = False
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                rg = True
                break
    if rg:
        t.requires_grad = True
        t.op = op
        t.parents = parents
        t._vjp = vjp
    else:
        t.requires_grad = False
        t.op = op
        t.parents = ()
        t._vjp = None
    return t


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ "
            f"(nodes {a.label()}, {b.label()})"
        )


# --------------------------------------------------------------------------
# Elementwise and structural operations.  Each backward rule is written with
# the traced ops themselves so it stays differentiable.
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    def vjp(g, needs):
        return (g if needs[0] else None, g if needs[1] else None)
    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    def vjp(g, needs):
        return (g if needs[0] else None, neg(g) if needs[1] else None)
    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    def vjp(g, needs):
        return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)
    return _make(a.data * b.data, "mul", (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    def vjp(g, needs):
        ga = div(g, b) if needs[0] else None
        gb = neg(div(mul(g, a), mul(b, b))) if needs[1] else None
        return (ga, gb)
    return _make(a.data / b.data, "div", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (neg(g),)
    return _make(-a.data, "neg", (a,), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    def vjp(g, needs):
        return (scale(g, c),)
    return _make(a.data * c, "scale", (a,), vjp)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def vjp(g, needs):
        return (g,)
    return _make(a.data + float(c), "add_scalar", (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape} "
            f"(nodes {a.label()}, {b.label()})"
        )
    def vjp(g, needs):
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
        return (ga, gb)
    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.data.shape} ({a.label()})")
    def vjp(g, needs):
        return (transpose(g),)
    return _make(np.ascontiguousarray(a.data.T), "transpose", (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    def vjp(g, needs):
        return (reshape(g, old),)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape {old} -> {shape} ({a.label()}): {e}") from None
    return _make(np.ascontiguousarray(out), "reshape", (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError(f"concat: rank mismatch ({t.label()})")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    def vjp(g, needs):
        outs = []
        for i, t in enumerate(tensors):
            if needs[i]:
                outs.append(narrow(g, axis, int(offsets[i]), sizes[i]))
            else:
                outs.append(None)
        return tuple(outs)
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 "concat", tensors, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    full = a.data.shape[axis]
    if start < 0 or start + length > full:
        raise ShapeError(f"narrow: [{start}:{start+length}] out of axis size {full}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    def vjp(g, needs):
        return (pad_axis(g, axis, start, full - start - length),)
    return _make(np.ascontiguousarray(a.data[tuple(idx)]), "narrow", (a,), vjp)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along a single axis (the adjoint of narrow)."""
    pads = [(0, 0)] * a.data.ndim
    pads[axis] = (before, after)
    length = a.data.shape[axis]
    def vjp(g, needs):
        return (narrow(g, axis, before, length),)
    return _make(np.pad(a.data, pads), "pad_axis", (a,), vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; expands singleton dims and/or prepends axes."""
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {old} -> {shape} ({a.label()})") from None
    ndiff = len(shape) - len(old)
    summed = tuple(range(ndiff)) + tuple(
        i + ndiff for i, s in enumerate(old) if s == 1 and shape[i + ndiff] != 1
    )
    def vjp(g, needs):
        r = sum_axes(g, summed, keepdims=False) if summed else g
        return (reshape(r, old),)
    return _make(np.ascontiguousarray(out), "broadcast_to", (a,), vjp)


def sum_axes(a: Tensor, axes: Sequence[int] | None = None,
             keepdims: bool = False) -> Tensor:
    nd = a.data.ndim
    axes = tuple(range(nd)) if axes is None else tuple(sorted(ax % nd for ax in axes))
    old = a.data.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(old))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    if out.ndim == 0:
        out = out.reshape(1)
    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept), old),)
    return _make(np.ascontiguousarray(out), "sum", (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    return sum_axes(a, None)


def mean_axes(a: Tensor, axes: Sequence[int] | None = None,
              keepdims: bool = False) -> Tensor:
    nd = a.data.ndim
    ax = tuple(range(nd)) if axes is None else tuple(ax % nd for ax in axes)
    n = 1
    for i in ax:
        n *= a.data.shape[i]
    s = sum_axes(a, axes, keepdims)
    out = scale(s, 1.0 / n)
    out.op = "mean"
    return out


def mean_all(a: Tensor) -> Tensor:
    return mean_axes(a, None)


# -- smooth nonlinearities: backward rules reuse the traced output node ----

def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), "tanh", (a,), None)
    if out._vjp is None and out.parents:
        def vjp(g, needs):
            return (mul(g, add_scalar(neg(square(out)), 1.0)),)
        out._vjp = vjp
    return out


def sigmoid(a: Tensor) -> Tensor:
    # exp-based form is stable in float64 for the |x| ranges seen here
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    data[~pos] = e / (1.0 + e)
    out = _make(data, "sigmoid", (a,), None)
    if out._vjp is None and out.parents:
        def vjp(g, needs):
            return (mul(g, mul(out, add_scalar(neg(out), 1.0))),)
        out._vjp = vjp
    return out


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0: strict comparison; the mask is built lazily so
    # untraced forwards pay for a single maximum pass only
    def vjp(g, needs):
        return (mul(g, constant((a.data > 0).astype(np.float64))),)
    return _make(np.maximum(a.data, 0.0), "relu", (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    def vjp(g, needs):
        return (mul(g, constant(np.where(a.data > 0, 1.0, slope))),)
    return _make(np.where(a.data > 0, a.data, a.data * slope),
                 "leaky_relu", (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), "exp", (a,), None)
    if out._vjp is None and out.parents:
        def vjp(g, needs):
            return (mul(g, out),)
        out._vjp = vjp
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (div(g, a),)
    return _make(np.log(a.data), "log", (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    out = _make(np.sqrt(a.data), "sqrt", (a,), None)
    if out._vjp is None and out.parents:
        def vjp(g, needs):
            return (scale(div(g, out), 0.5),)
        out._vjp = vjp
    return out


def square(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (scale(mul(g, a), 2.0),)
    return _make(a.data * a.data, "square", (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    def vjp(g, needs):
        return (mul(g, sigmoid(a)),)
    return _make(data, "softplus", (a,), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows; the dense-layer workhorse."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"affine: x {x.data.shape} @ w {w.data.shape} ({x.label()}, {w.label()})"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine: bias shape {b.data.shape} != ({w.data.shape[1]},)")
    def vjp(g, needs):
        gx = matmul(g, transpose(w)) if needs[0] else None
        gw = matmul(transpose(x), g) if needs[1] else None
        gb = sum_axes(g, (0,)) if needs[2] else None
        return (gx, gw, gb)
    return _make(x.data @ w.data + b.data, "affine", (x, w, b), vjp)


def norm2(a: Tensor) -> Tensor:
    """Euclidean norm of the whole tensor, as a traced scalar."""
    return sqrt(sum_all(square(a)))


def norm2_rows(a: Tensor, eps: float = 0.0) -> Tensor:
    """Per-row Euclidean norm of a 2-D tensor (batch of vectors).

    ``eps`` is added under the square root; a zero row otherwise has an
    unbounded derivative, which matters when the norm itself is being
    differentiated (the gradient-penalty case: a dead-ReLU region gives an
    exactly-zero input gradient)."""
    if a.data.ndim != 2:
        raise ShapeError(f"norm2_rows: expected 2-D, got {a.data.shape}")
    s = sum_axes(square(a), (1,))
    if eps:
        s = add_scalar(s, eps)
    return sqrt(s)


# --------------------------------------------------------------------------
# Convolution family: first-order only (numpy backward rules).
# --------------------------------------------------------------------------

def _conv_windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """NCHW convolution, square kernel.  First-order differentiable only."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D x and w, got {x.data.shape}, {w.data.shape}")
    B, Cin, H, W = x.data.shape
    Cout, Cin_w, k, k2 = w.data.shape
    if Cin != Cin_w or k != k2:
        raise ShapeError(f"conv2d: weight {w.data.shape} incompatible with input {x.data.shape}")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = _conv_windows(xp, k, s)                      # (B, Cin, Ho, Wo, k, k)
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, Cin * k * k)
    wmat = w.data.reshape(Cout, -1)
    out = (cols @ wmat.T + b.data).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def vjp(g, needs):
        gm = np.ascontiguousarray(g.data.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        gx = gw = gb = None
        if needs[1]:
            gw = constant((gm.T @ cols).reshape(Cout, Cin, k, k))
        if needs[2]:
            gb = constant(g.data.sum(axis=(0, 2, 3)))
        if needs[0]:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, Cin, k, k).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + s * Ho:s, kj:kj + s * Wo:s] += gcols[..., ki, kj]
            gx = constant(gxp[:, :, p:p + H, p:p + W])
        return (gx, gw, gb)

    return _make(np.ascontiguousarray(out), "conv2d", (x, w, b), vjp)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor, stride: int = 2,
                     padding: int = 1) -> Tensor:
    """NCHW transposed convolution; weight layout (Cin, Cout, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose: need 4-D x and w")
    B, Cin, H, W = x.data.shape
    Cin_w, Cout, k, k2 = w.data.shape
    if Cin != Cin_w or k != k2:
        raise ShapeError(
            f"conv2d_transpose: weight {w.data.shape} incompatible with input {x.data.shape}")
    p, s = padding, stride
    Hp, Wp = (H - 1) * s + k, (W - 1) * s + k
    out_pad = np.zeros((B, Cout, Hp, Wp))
    for ki in range(k):
        for kj in range(k):
            contrib = np.tensordot(x.data, w.data[:, :, ki, kj], axes=([1], [0]))
            out_pad[:, :, ki:ki + s * H:s, kj:kj + s * W:s] += contrib.transpose(0, 3, 1, 2)
    out = out_pad[:, :, p:Hp - p, p:Wp - p] + b.data[None, :, None, None]

    def vjp(g, needs):
        gp = np.pad(g.data, ((0, 0), (0, 0), (p, p), (p, p)))
        win = _conv_windows(gp, k, s)                  # (B, Cout, H, W, k, k)
        gx = gw = gb = None
        if needs[0]:
            gx = constant(np.einsum("bohwkl,iokl->bihw", win, w.data))
        if needs[1]:
            gw = constant(np.einsum("bihw,bohwkl->iokl", x.data, win))
        if needs[2]:
            gb = constant(g.data.sum(axis=(0, 2, 3)))
        return (gx, gw, gb)

    return _make(np.ascontiguousarray(out), "conv2d_transpose", (x, w, b), vjp)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest: need 4-D input")
    f = int(factor)
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)
    B, C, H, W = x.data.shape
    def vjp(g, needs):
        gr = g.data.reshape(B, C, H, f, W, f).sum(axis=(3, 5))
        return (constant(gr),)
    return _make(out, "upsample_nearest", (x,), vjp)


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Depth-first topological order of the traced subgraph under root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def _check_nan(g: Tensor, node: Tensor) -> None:
    if np.isnan(g.data).any() or np.isinf(g.data).any():
        raise NanGradientError(f"non-finite gradient at node {node.label()}")


def backward(loss: Tensor, create_graph: bool = False,
             wrt: Sequence[Tensor] | None = None) -> list[Tensor] | None:
    """Reverse-mode sweep from a scalar loss.

    Without ``wrt``: accumulates into ``.grad`` of every reachable
    requires_grad leaf (sum over paths) and returns None.  With ``wrt``:
    leaves ``.grad`` untouched and returns the gradient tensors for exactly
    those nodes, pruning graph branches that cannot reach them.  With
    ``create_graph`` the returned gradients are traced nodes that can be
    differentiated again; reaching a first-order-only operation then raises
    ``DoubleBackpropError``.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(
            f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data.reshape(-1)[0]):
        raise NanGradientError(f"non-finite loss at node {loss.label()}")
    if not loss.requires_grad:
        if wrt is not None:
            return [_zero_grad_like(t, create_graph) for t in wrt]
        return None

    order = _topo_order(loss)
    relevant: set[int] | None = None
    if wrt is not None:
        wrt_ids = {t.node_id for t in wrt}
        relevant = set()
        for node in order:  # parents precede children
            if node.node_id in wrt_ids or any(
                    p.node_id in relevant for p in node.parents):
                relevant.add(node.node_id)

    grads: dict[int, Tensor] = {}
    grads[loss.node_id] = constant(np.ones_like(loss.data))
    keep_ids = {t.node_id for t in wrt} if wrt is not None else None

    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            if node._vjp is None:
                continue  # leaf: entry stays for collection below
            if keep_ids is not None and node.node_id in keep_ids:
                g = grads.get(node.node_id)
            else:
                g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if relevant is not None and node.node_id not in relevant:
                continue
            if create_graph and node.op not in _DOUBLE_DIFF_OPS:
                raise DoubleBackpropError(
                    f"operation {node.op!r} (node {node.label()}) does not "
                    f"support double backpropagation")
            needs = tuple(
                p.requires_grad and (relevant is None or p.node_id in relevant)
                for p in node.parents
            )
            pgrads = node._vjp(g, needs)
            for p, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if _nan_checks == "all":
                    _check_nan(pg, p)
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else add(prev, pg)

    if wrt is not None:
        out = []
        for t in wrt:
            g = grads.get(t.node_id)
            if g is None:
                g = _zero_grad_like(t, create_graph)
            if _nan_checks != "off":
                _check_nan(g, t)
            out.append(g)
        return out

    for node in order:
        if node._vjp is None and node.requires_grad and node.op == "leaf":
            g = grads.get(node.node_id)
            if g is None:
                continue
            if _nan_checks != "off":
                _check_nan(g, node)
            if node.grad is None:
                node.grad = g.data.copy()
            else:
                node.grad += g.data
    return None


def _zero_grad_like(t: Tensor, create_graph: bool) -> Tensor:
    return constant(np.zeros_like(t.data))


def grad(output: Tensor, wrt: Sequence[Tensor],
         create_graph: bool = False) -> list[Tensor]:
    """Functional gradient: d(output)/d(wrt) without touching ``.grad``."""
    return backward(output, create_graph=create_graph, wrt=wrt)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moment estimates plus the shared step count."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.5, beta2: float = 0.9,
                 eps: float = 1e-8):
        if lr <= 0 or not (0 < beta1 < 1) or not (0 < beta2 < 1) or eps <= 0:
            raise ValueError("invalid Adam hyperparameters")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    for name in params:
        if name not in grads:
            raise MissingGradientError(f"no gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    step_size = state.lr / c1
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else g
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} != param shape "
                f"{p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= step_size * m / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Object wrapper over ``adam_step`` bound to a fixed parameter set."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------

class FiniteDiffReport:
    def __init__(self, max_rel_err: float, tol: float, per_input: list[float]):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.per_input = per_input
        self.passed = max_rel_err < tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"FiniteDiffReport({status}, max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.1e})"


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                      tol: float = 1e-4, h: float = 1e-6) -> FiniteDiffReport:
    """Compare reverse-mode gradients of a scalar function against central
    finite differences, coordinate by coordinate.

    Relative error uses |a - n| / max(|a| + |n|, 1e-6) so that near-zero
    gradients are compared absolutely.  Report-only: never raises on
    mismatch.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    inputs = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    out = fn(*inputs)
    gs = grad(out, inputs)
    per_input = []
    worst = 0.0
    for t, g in zip(inputs, gs):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = fn(*inputs).item()
            flat[i] = orig - h
            with no_grad():
                dn = fn(*inputs).item()
            flat[i] = orig
            num[i] = (up - dn) / (2 * h)
        ana = g.data.reshape(-1)
        denom = np.maximum(np.abs(ana) + np.abs(num), 1e-6)
        err = float(np.max(np.abs(ana - num) / denom)) if flat.size else 0.0
        per_input.append(err)
        worst = max(worst, err)
    return FiniteDiffReport(worst, tol, per_input)


# --------------------------------------------------------------------------
# Operation registry (powers the gradient-oracle sweep in the tests)
# --------------------------------------------------------------------------

class OpInfo:
    def __init__(self, fn: Callable, arity: int, double_differentiable: bool,
                 shapes: tuple, kinked: bool = False, positive_only: bool = False):
        self.fn = fn
        self.arity = arity
        self.double_differentiable = double_differentiable
        self.shapes = shapes
        self.kinked = kinked
        self.positive_only = positive_only


OPS: dict[str, OpInfo] = {
    "add": OpInfo(add, 2, True, ((3, 4), (3, 4))),
    "sub": OpInfo(sub, 2, True, ((3, 4), (3, 4))),
    "mul": OpInfo(mul, 2, True, ((3, 4), (3, 4))),
    "div": OpInfo(div, 2, True, ((3, 4), (3, 4)), positive_only=True),
    "neg": OpInfo(neg, 1, True, ((3, 4),)),
    "scale": OpInfo(lambda a: scale(a, 1.7), 1, True, ((3, 4),)),
    "add_scalar": OpInfo(lambda a: add_scalar(a, 0.3), 1, True, ((3, 4),)),
    "matmul": OpInfo(matmul, 2, True, ((3, 4), (4, 2))),
    "transpose": OpInfo(transpose, 1, True, ((3, 4),)),
    "reshape": OpInfo(lambda a: reshape(a, (4, 3)), 1, True, ((3, 4),)),
    "concat": OpInfo(lambda a, b: concat([a, b], axis=1), 2, True, ((3, 2), (3, 4))),
    "narrow": OpInfo(lambda a: narrow(a, 1, 1, 2), 1, True, ((3, 4),)),
    "pad_axis": OpInfo(lambda a: pad_axis(a, 0, 1, 2), 1, True, ((3, 4),)),
    "broadcast_to": OpInfo(lambda a: broadcast_to(a, (5, 3, 4)), 1, True, ((3, 4),)),
    "sum": OpInfo(lambda a: sum_axes(a, (0,)), 1, True, ((3, 4),)),
    "mean": OpInfo(mean_all, 1, True, ((3, 4),)),
    "tanh": OpInfo(tanh, 1, True, ((3, 4),)),
    "sigmoid": OpInfo(sigmoid, 1, True, ((3, 4),)),
    "relu": OpInfo(relu, 1, True, ((3, 4),), kinked=True),
    "leaky_relu": OpInfo(leaky_relu, 1, True, ((3, 4),), kinked=True),
    "exp": OpInfo(exp, 1, True, ((3, 4),)),
    "log": OpInfo(log, 1, True, ((3, 4),), positive_only=True),
    "sqrt": OpInfo(sqrt, 1, True, ((3, 4),), positive_only=True),
    "square": OpInfo(square, 1, True, ((3, 4),)),
    "softplus": OpInfo(softplus, 1, True, ((3, 4),)),
    "affine": OpInfo(affine, 3, True, ((3, 4), (4, 2), (2,))),
    "norm2": OpInfo(norm2, 1, True, ((3, 4),)),
    "norm2_rows": OpInfo(norm2_rows, 1, True, ((3, 4),)),
    "conv2d": OpInfo(lambda x, w, b: conv2d(x, w, b, stride=2, padding=1),
                     3, False, ((2, 3, 6, 6), (4, 3, 4, 4), (4,))),
    "conv2d_stride1": OpInfo(lambda x, w, b: conv2d(x, w, b, stride=1, padding=1),
                             3, False, ((2, 3, 5, 5), (4, 3, 3, 3), (4,))),
    "conv2d_transpose": OpInfo(
        lambda x, w, b: conv2d_transpose(x, w, b, stride=2, padding=1),
        3, False, ((2, 4, 3, 3), (4, 3, 4, 4), (3,))),
    "upsample_nearest": OpInfo(upsample_nearest, 1, False, ((2, 3, 4, 4),)),
}
