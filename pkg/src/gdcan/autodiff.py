"""Dense numpy tensors with reverse-mode differentiation.

Every primitive records a :class:`Node` holding its inputs and an adjoint
closure. ``Tensor.backward`` orders the reachable nodes into a :class:`Tape`
(inputs before outputs) and walks it in reverse exactly once.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True
DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Topologically ordered record of the primitives behind one output."""

    nodes: list[Node] = field(default_factory=list)
    outputs: list["Tensor"] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: "Tensor") -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        # iterative post-order DFS; deep graphs would overflow recursion
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        tape = cls()
        for t in order:
            if t._node is not None:
                tape.nodes.append(t._node)
                tape.outputs.append(t)
        return tape


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, op: str, inputs: tuple["Tensor", ...], backward) -> "Tensor":
        needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        out = cls(data, requires_grad=needs)
        if needs:
            out._node = Node(op, inputs, backward)
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

    @property
    def tape_node(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node, out in zip(reversed(tape.nodes), reversed(tape.outputs)):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g if out.grad is None else out.grad + g
            for parent, pg in zip(node.inputs, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        # whatever is left are leaves
        for t in _leaves(tape, self):
            g = grads.pop(id(t), None)
            if g is not None:
                t.grad = g if t.grad is None else t.grad + g

    # -- operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _leaves(tape: Tape, root: Tensor) -> list[Tensor]:
    produced = {id(t) for t in tape.outputs}
    leaves, seen = [], set()
    for node in tape.nodes:
        for p in node.inputs:
            if id(p) not in produced and id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                leaves.append(p)
    if root._node is None and root.requires_grad:
        leaves.append(root)
    return leaves


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor._make(
        ad**exponent, "pow", (a,),
        lambda g: (g * exponent * ad ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def xlogx(a: Tensor) -> Tensor:
    """Elementwise ``x * log(x)`` with the convention ``0 * log 0 = 0``."""
    ad = a.data
    safe = np.where(ad > 0, ad, 1.0)
    out = np.where(ad > 0, ad * np.log(safe), 0.0)
    tiny = np.finfo(ad.dtype).tiny
    return Tensor._make(out, "xlogx", (a,), lambda g: (g * (np.log(np.maximum(ad, tiny)) + 1.0),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return Tensor._make(np.clip(ad, lo, hi), "clip", (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    return Tensor._make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._make(
        out, "log_softmax", (a,),
        lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(
        out, "softmax", (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


# ----------------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, "sum", (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._make(
        np.transpose(a.data, axes), "transpose", (a,),
        lambda g: (np.transpose(g, inv),),
    )


def take(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(a.data[idx], "index", (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape (N, D_in), ``W`` of (D_out, D_in)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and as_tensor(b).shape != (W.shape[0],):
        raise ShapeError(f"linear: bias {as_tensor(b).shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    inputs: tuple[Tensor, ...] = (x, W)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, W, b)

    def back(g):
        grads = [g @ Wd, g.T @ xd]
        if len(inputs) == 3:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._make(out, "linear", inputs, back)


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # (N, C, OH, OW, k, k) view into the padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def conv2d(x: Tensor, W: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C_in, H, W) input with (C_out, C_in, k, k) kernels."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 4 or W.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d operands, got {x.shape} and {W.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = W.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {wcin}")
    if k != k2:
        raise ShapeError("conv2d: only square kernels are supported")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, k, stride, oh, ow)  # N, C, OH, OW, k, k
    cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * k * k)
    Wd = W.data.reshape(cout, cin * k * k)
    out = (cols2 @ Wd.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    inputs: tuple[Tensor, ...] = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")
        out = out + b.data[None, :, None, None]
        inputs = (x, W, b)
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
        dW = (g2.T @ cols2).reshape(W.shape)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ Wd).reshape(n, oh, ow, cin, k, k)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            hs, ws = (oh - 1) * stride + 1, (ow - 1) * stride + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        grads = [dx, dW]
        if len(inputs) == 3:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._make(out, "conv2d", inputs, back)


# ----------------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    kinks: list[tuple[int, int]] = field(default_factory=list)
    worst: tuple[int, int] | None = None

    def __bool__(self) -> bool:
        return self.passed


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` is re-evaluated after perturbing ``param.data`` in place, so it must
    read the parameters rather than copies. Coordinates whose one-sided
    slopes disagree are reported as kinks and excluded from the verdict.
    With ``max_coords`` only a seeded random subset of each tensor is probed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.grad = None
        p.data = np.ascontiguousarray(p.data)
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    f0 = out.item()
    rng = np.random.default_rng(seed)
    worst_err, worst, n_checked, kinks = 0.0, None, 0, []
    with no_grad():
        for pi, p in enumerate(params):
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)  # view: p.data is contiguous
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                fp = f().item()
                flat[c] = orig - step
                fm = f().item()
                flat[c] = orig
                numeric = (fp - fm) / (2 * step)
                right, left = (fp - f0) / step, (f0 - fm) / step
                scale = max(1.0, abs(right), abs(left))
                if abs(right - left) > 10 * np.sqrt(step) * scale:
                    kinks.append((pi, int(c)))
                    continue
                a = np.float64(analytic.reshape(-1)[c])
                err = float(rel_error(a, np.float64(numeric), floor))
                if err > tol:
                    # a kink inside [x-h, x+h] spoils the wide difference but not a narrow one
                    fine = step / 10
                    flat[c] = orig + fine
                    fp2 = f().item()
                    flat[c] = orig - fine
                    fm2 = f().item()
                    flat[c] = orig
                    numeric2 = (fp2 - fm2) / (2 * fine)
                    if rel_error(a, np.float64(numeric2), floor) <= tol < rel_error(np.float64(numeric), np.float64(numeric2), floor):
                        kinks.append((pi, int(c)))
                        continue
                n_checked += 1
                if err > worst_err:
                    worst_err, worst = err, (pi, int(c))
    return GradCheckReport(worst_err, worst_err <= tol, n_checked, kinks, worst)
