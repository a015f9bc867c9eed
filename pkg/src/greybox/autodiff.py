"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the fixed set of operations needed by the backbones, heads, attacks and
pretext objectives is provided.  Every operation returns a new
:class:`Tensor`; when any input requires a gradient the output remembers its
parents and a backward rule, and :class:`GradTape` replays those rules in
exact reverse recording order.

Shapes must match exactly for elementwise operations (Python scalars are the
only broadcast operand).  Bias addition is fused into :func:`dense` and
:func:`conv2d` for that reason.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BackwardStateError, DimensionError, ValidationError

NORM_FLOOR = 1e-12

# Recording order only; never influences numerical results.
_recording_counter = itertools.count()

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardRule | None = None
        self._seq = -1
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar; a second call raises."""
        if self._tape is None:
            self._tape = GradTape(self)
        self._tape.backward()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """The ordered list of operations recorded while computing ``loss``.

    ``ops`` holds the non-leaf tensors reachable from the loss, sorted in
    recording order.  :meth:`backward` visits them in reverse and may only run
    once until :meth:`reset` is called.
    """

    def __init__(self, loss: Tensor):
        if loss.data.size != 1:
            raise ValidationError(f"backward requires a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.ops: list[Tensor] = []
        self.leaves: list[Tensor] = []
        seen: set[int] = set()
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if not node.requires_grad:
                # a stop-gradient output: its sources are reachable but receive nothing
                stack.extend(node._parents)
                continue
            if node.is_leaf:
                self.leaves.append(node)
            else:
                self.ops.append(node)
                stack.extend(node._parents)
        self.ops.sort(key=lambda t: t._seq)
        self._done = False

    def backward(self) -> None:
        if self._done:
            raise BackwardStateError("backward() already ran on this graph; call reset() first")
        self._done = True
        if not self.loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def reset(self) -> None:
        """Clear leaf gradients and allow another backward pass."""
        for leaf in self.leaves:
            leaf.grad = None
        self._done = False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
        out._seq = next(_recording_counter)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _record(a.data + float(b), (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _record(a.data - float(b), (a,), lambda g: (g,))
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    _same_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValidationError(f"clip bounds reversed: lo={lo} > hi={hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sign(a: Tensor) -> Tensor:
    # np.sign maps 0 to 0; the derivative is zero almost everywhere.
    return _record(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


def stop_gradient(a: Tensor) -> Tensor:
    """Value-identical copy through which no gradient flows.

    The copy keeps a link to its source so that leaves behind it still count
    as reachable (and end up with a zero gradient), but it has no backward
    rule and does not require gradients itself.
    """
    out = Tensor(a.data.copy())
    out._parents = (a,)
    return out


# ------------------------------------------------------------------ linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _record(a.data @ b.data, (a, b), rule)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias shape {b.shape} does not match {w.shape[1]} outputs")

    def rule(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _record(x.data @ w.data + b.data, (x, w, b), rule)


def _im2col(xpad: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    f = k.shape[0]
    if k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel must be 3x3, got {k.shape}")
    if k.shape[1] != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel {k.shape} expects {k.shape[1]}")
    if b is not None and b.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match {f} filters")

    xpad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xpad, h, w)
    kmat = k.data.reshape(f, c * 9)
    out = cols @ kmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, h, w, f).transpose(0, 3, 1, 2)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, f)
        gx = gk = gb = None
        if k.requires_grad:
            gk = (gmat.T @ cols).reshape(k.shape)
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(n, h, w, c, 3, 3)
            dpad = np.zeros_like(xpad)
            for i in range(3):
                for j in range(3):
                    dpad[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dpad[:, :, 1:-1, 1:-1]
        return (gx, gk) if b is None else (gx, gk, gb)

    parents = (x, k) if b is None else (x, k, b)
    return _record(np.ascontiguousarray(out), parents, rule)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"max_pool2d: need N x C x H x W with even H, W; got {x.shape}")
    n, c, h, w = x.shape
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record(out, (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {x.shape}")
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,))


# -------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    size = x.data.size
    return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / size),))


def _check_2d(x: Tensor, op: str) -> None:
    if x.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D (batch x classes) tensor, got {x.shape}")


def softmax(x: Tensor) -> Tensor:
    _check_2d(x, "softmax")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def _log_softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    _check_2d(x, "log_softmax")
    ls = _log_softmax_array(x.data)

    def rule(g):
        return (g - np.exp(ls) * g.sum(axis=1, keepdims=True),)

    return _record(ls, (x,), rule)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under ``logits`` (log-sum-exp form)."""
    _check_2d(logits, "cross_entropy")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} logit rows but labels have shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"cross_entropy: labels must be integers in [0, {k})")
    if reduction not in ("mean", "sum"):
        raise ValidationError(f"unknown reduction {reduction!r}")
    ls = _log_softmax_array(logits.data)
    rows = np.arange(n)
    losses = -ls[rows, labels]
    denom = n if reduction == "mean" else 1

    def rule(g):
        d = np.exp(ls)
        # p_y - 1 as minus the mass on the other classes: exact when p_y rounds to 1
        d[rows, labels] = 0.0
        d[rows, labels] = -d.sum(axis=1)
        return (d * (g / denom),)

    return _record(np.asarray(losses.sum() / denom), (logits,), rule)


# --------------------------------------------------------------- geometry


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity with norms floored at ``NORM_FLOOR``.

    1-D inputs give a scalar; 2-D inputs are compared row by row.
    """
    _same_shape(a, b, "cosine_similarity")
    if a.ndim not in (1, 2):
        raise DimensionError(f"cosine_similarity expects 1-D or 2-D inputs, got {a.shape}")
    ad = a.data if a.ndim == 2 else a.data[None]
    bd = b.data if b.ndim == 2 else b.data[None]
    ra = np.sqrt((ad * ad).sum(axis=1, keepdims=True))
    rb = np.sqrt((bd * bd).sum(axis=1, keepdims=True))
    na = np.maximum(ra, NORM_FLOOR)
    nb = np.maximum(rb, NORM_FLOOR)
    dot = (ad * bd).sum(axis=1, keepdims=True)
    cos = dot / (na * nb)

    def rule(g):
        g2 = g.reshape(-1, 1)
        ga = gb = None
        if a.requires_grad:
            ga = g2 * (bd / (na * nb) - np.where(ra > NORM_FLOOR, cos / (na * na), 0.0) * ad)
            ga = ga.reshape(a.shape)
        if b.requires_grad:
            gb = g2 * (ad / (na * nb) - np.where(rb > NORM_FLOOR, cos / (nb * nb), 0.0) * bd)
            gb = gb.reshape(b.shape)
        return ga, gb

    out = cos[:, 0] if a.ndim == 2 else np.asarray(cos[0, 0])
    return _record(out, (a, b), rule)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit L2 norm (norm floored at ``NORM_FLOOR``)."""
    _check_2d(x, "normalize_rows")
    r = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    n = np.maximum(r, NORM_FLOOR)
    y = x.data / n

    def rule(g):
        proj = np.where(r > NORM_FLOOR, (y * g).sum(axis=1, keepdims=True), 0.0)
        return ((g - y * proj) / n,)

    return _record(y, (x,), rule)
