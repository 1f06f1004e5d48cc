"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Tensors are evaluated eagerly: building an expression computes its value and
records a backward rule. :func:`backward` walks the recorded graph in reverse
topological order and accumulates gradients for every leaf that requires them.

New differentiable primitives are added through :func:`custom_op`, which is
also how the quantizer and the estimator variants plug in their own gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "custom_op",
    "backward",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "relu6",
    "clip",
    "exp",
    "log",
    "square",
    "conv2d",
    "global_avg_pool",
    "log_softmax",
    "cross_entropy",
]

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operands of an operation have incompatible shapes."""

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardRule | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operators
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


def _raise_item(t: Tensor) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Wrap ``value`` as the output of a node with a hand-written backward rule.

    ``rule(g)`` receives the upstream gradient (same shape as ``value``) and
    returns one gradient (or ``None``) per entry of ``inputs``.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value, dtype=np.float64)
    out.grad = None
    out.name = None
    for t in inputs:
        if t.requires_grad:
            out.requires_grad = True
            out._parents = tuple(inputs)
            out._backward = rule
            return out
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape or b.data.ndim == 0 or a.data.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return custom_op(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return custom_op(out, (a, b), rule)


def power(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return custom_op(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return custom_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return custom_op(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return custom_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def relu6(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0) & (a.data < 6)
    return custom_op(np.clip(a.data, 0.0, 6.0), (a,), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes where ``lo <= a <= hi``."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return custom_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# reductions and shape ops

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy() if g.shape != shape else g,)

    return custom_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return custom_op(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, "expected (m, k) @ (k, n)")
    ad, bd = a.data, b.data

    def rule(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return custom_op(ad @ bd, (a, b), rule)


# convolution

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation, NCHW input and (O, C/groups, kh, kw) weights.

    ``groups == C`` gives a depth-wise convolution.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape, "expected 4-d input and weight")
    N, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if C % groups or O % groups or C // groups != Cg:
        raise ShapeError("conv2d", x.shape, w.shape, f"groups={groups}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    if Hp < kh or Wp < kw:
        raise ShapeError("conv2d", x.shape, w.shape, "kernel larger than padded input")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    G, Og = groups, O // groups
    if G == 1:
        out, rule = _conv_dense(x, w, xp, stride, Ho, Wo)
    elif Cg == 1 and Og == 1:
        out, rule = _conv_depthwise(x, w, xp, stride, Ho, Wo)
    else:
        out, rule = _conv_grouped(x, w, xp, stride, Ho, Wo, G)

    def crop(g):
        gx, gw = rule(g)
        if gx is not None and padding:
            gx = gx[:, :, padding : padding + H, padding : padding + W]
        return gx, gw

    return custom_op(out, (x, w), crop)


def _scatter_windows(gwin: np.ndarray, shape: tuple, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Sum per-offset window gradients (N, C, kh, kw, Ho, Wo) back onto the padded input."""
    gxp = np.zeros(shape)
    kh, kw = gwin.shape[2], gwin.shape[3]
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gwin[:, :, i, j]
    return gxp


def _conv_dense(x, w, xp, stride, Ho, Wo):
    # im2col against a (C*kh*kw, O) matrix so the heavy lifting is one BLAS call
    N, C = xp.shape[:2]
    O, _, kh, kw = w.shape
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def rule(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = gx = None
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(w.shape)
        if x.requires_grad:
            gcols = gm @ wm
            if kh == 1 and kw == 1 and stride == 1:
                gx = gcols.reshape(N, Ho, Wo, C).transpose(0, 3, 1, 2)
            else:
                gwin = gcols.reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
                gx = _scatter_windows(gwin, xp.shape, stride, Ho, Wo)
        return gx, gw

    return np.ascontiguousarray(out), rule


def _conv_depthwise(x, w, xp, stride, Ho, Wo):
    N, C = xp.shape[:2]
    _, _, kh, kw = w.shape
    wd = w.data[:, 0]
    taps = [(i, j, xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]) for i in range(kh) for j in range(kw)]
    out = np.zeros((N, C, Ho, Wo))
    for i, j, patch in taps:
        out += patch * wd[:, i, j][None, :, None, None]

    def rule(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.zeros(w.shape)
            for i, j, patch in taps:
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", patch, g)
        if x.requires_grad:
            gx = np.zeros(xp.shape)
            for i, j, _ in taps:
                gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * wd[:, i, j][None, :, None, None]
        return gx, gw

    return out, rule


def _conv_grouped(x, w, xp, stride, Ho, Wo, G):
    N, C = xp.shape[:2]
    O, Cg, kh, kw = w.shape
    Og = O // G
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(N, G, Cg, Ho, Wo, kh, kw)
    wg = w.data.reshape(G, Og, Cg, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True).reshape(N, O, Ho, Wo)

    def rule(g):
        gg = g.reshape(N, G, Og, Ho, Wo)
        gw = gx = None
        if w.requires_grad:
            gw = np.einsum("ngchwij,ngohw->gocij", win, gg, optimize=True).reshape(w.shape)
        if x.requires_grad:
            gwin = np.einsum("ngohw,gocij->ngcijhw", gg, wg, optimize=True).reshape(N, C, kh, kw, Ho, Wo)
            gx = _scatter_windows(gwin, xp.shape, stride, Ho, Wo)
        return gx, gw

    return out, rule


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW tensor, giving (N, C)."""
    N, C, H, W = x.shape
    inv = 1.0 / (H * W)
    return custom_op(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] * inv, (N, C, H, W)).copy(),),
    )


# classification losses

def log_softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return custom_op(out, (z,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def rule(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return custom_op(np.asarray(loss), (logits,), rule)


# reverse pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(root: Tensor, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(root) back to every trainable leaf.

    Returns a mapping leaf -> gradient and also stores each gradient in
    ``leaf.grad`` (overwriting). A non-scalar root needs an explicit ``seed``.
    """
    if seed is None:
        if root.size != 1:
            raise ValueError(f"backward from non-scalar root of shape {root.shape} needs a seed gradient")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.shape:
            raise ShapeError("backward", root.shape, seed.shape, "seed must match root")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to ``wrt``; zeros where unreachable."""
    wrt = list(wrt)
    found = backward(root) if root.requires_grad else {}
    return [found.get(t, np.zeros_like(t.data)) for t in wrt]
