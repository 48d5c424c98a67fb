"""Minimal float32 tensor and reverse-mode tape.

Only the operations the training graph needs are provided. A :class:`Tape`
records one forward pass; :meth:`Tape.backward` walks it once in reverse and
the tape is then spent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, kind: str, *shapes: tuple[int, ...]):
        self.kind = kind
        self.shapes = shapes
        super().__init__(f"{kind}: incompatible shapes {' vs '.join(map(str, shapes))}")


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar loss, foreign tensor, reuse after backward."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    backward: BackwardFn | None = None


@dataclass
class Tape:
    """Append-only record of one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    spent: bool = False

    def leaf(self, value, kind: str = "leaf") -> "Tensor":
        """Register ``value`` as a differentiable input."""
        data = np.ascontiguousarray(value, dtype=DTYPE)
        return Tensor(data, self, self._append(Node(kind, (), data.shape)))

    def _append(self, node: Node) -> int:
        if self.spent:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def record(self, kind: str, inputs: Sequence["Tensor"], out: np.ndarray,
               backward: BackwardFn) -> "Tensor":
        ids = tuple(t.grad_id for t in inputs)
        node_id = self._append(Node(kind, ids, out.shape, backward))
        return Tensor(out, self, node_id)

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if self.spent:
            raise TapeError("tape already consumed by backward()")
        self.spent = True
        grads: dict[int, np.ndarray] = {loss.grad_id: np.ones(loss.shape, DTYPE)}
        for nid in range(loss.grad_id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            fn, node.backward = node.backward, None  # closures hold the tape's arrays
            if g is None or fn is None:
                continue
            for src, gi in zip(node.inputs, fn(g)):
                if src is None or gi is None:
                    continue
                gi = np.asarray(gi, dtype=DTYPE)
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        for node in self.nodes:
            node.backward = None
        for nid, node in enumerate(self.nodes):
            if nid not in grads:
                grads[nid] = np.zeros(node.shape, DTYPE)
        self.gradients = grads
        return grads

    def grad(self, t: "Tensor") -> np.ndarray:
        return self.gradients[t.grad_id]


class Tensor:
    """A float32 array, optionally tied to a node on a live tape."""

    __slots__ = ("data", "tape", "grad_id")

    def __init__(self, data, tape: Tape | None = None, grad_id: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.grad_id = grad_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.grad_id})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
          backward: BackwardFn) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, backward)


def custom_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
              backward: BackwardFn) -> Tensor:
    """Record an externally computed forward value with its vector-Jacobian rule.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per input.
    """
    return _emit(kind, [as_tensor(t) for t in inputs],
                 np.asarray(out, dtype=DTYPE), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", [a, b], out, back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    a = as_tensor(a)
    c = DTYPE(c)
    return _emit("scale", [a], a.data * c, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", [a], np.where(mask, a.data, DTYPE(0)), lambda g: (g * mask,))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE).reshape(())
    return _emit("sum", [a], out, lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _emit("reshape", [a], out, lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", [a], np.ascontiguousarray(a.data.transpose(axes)),
                 lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("matmul", [a, b], ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out as ``(C, kh, kw, N, Ho, Wo)``."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and (out, in, kh, kw) kernel.

    Zero padding is symmetric; no dilation or groups.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw or stride < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        go = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (go @ cols.T).reshape(w.shape)
        gcols = (wmat.T @ go).reshape(c, kh, kw, n, ho, wo)
        gx = np.zeros((c, n, hp, wp), DTYPE)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gx[:, :, padding:hp - padding, padding:wp - padding]
        return gx.transpose(1, 0, 2, 3), gw

    return _emit("conv2d", [x, w], out, back)


# ---------------------------------------------------------------- pooling

def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling (stride == size)."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError("max-pool", x.shape, (size, size))
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // size, size, w // size, size)
    out = blocks.max(axis=(3, 5))
    # first maximal element of each window takes the gradient
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    arg = flat.argmax(axis=-1)

    def back(g):
        gflat = np.zeros(flat.shape, DTYPE)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _emit("max-pool", [x], out, back)


def mean_pool(x) -> Tensor:
    """Global average over the spatial axes: (N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("mean-pool", x.shape)
    n, c, h, w = x.shape
    inv = DTYPE(1.0 / (h * w))
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(DTYPE)

    def back(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).astype(DTYPE),)

    return _emit("mean-pool", [x], out, back)


# ---------------------------------------------------------------- normalization

@dataclass
class BatchNormState:
    """Running statistics, updated in place during training forwards."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE))


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch norm over axis 1 of a 2-D or 4-D input."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError("batch-norm", x.shape, gamma.shape)
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes, dtype=np.float64).astype(DTYPE)
        var = xd.var(axis=axes, dtype=np.float64).astype(DTYPE)
        m = DTYPE(state.momentum)
        state.mean = (m * state.mean + (1 - m) * mu).astype(DTYPE)
        state.var = (m * state.var + (1 - m) * var).astype(DTYPE)
    else:
        mu, var = state.mean, state.var
    inv_std = (1.0 / np.sqrt(var + DTYPE(state.eps))).astype(DTYPE)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data
    out = xhat * gd.reshape(bshape) + beta.data.reshape(bshape)
    count = xd.size // xd.shape[1]

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gd.reshape(bshape)
        if training:
            gx = (inv_std / count).reshape(bshape) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _emit("batch-norm", [x, gamma, beta], out.astype(DTYPE), back)


# ---------------------------------------------------------------- loss

def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax-cross-entropy", logits.shape, labels.shape)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=DTYPE).reshape(())
    probs = np.exp(logp)

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((d * (float(g) / n)).astype(DTYPE),)

    return _emit("softmax-cross-entropy", [logits], loss, back)


# ---------------------------------------------------------------- embedding

def gather_columns(table, index) -> Tensor:
    """Select columns of a (d, V) matrix: output shape ``index.shape + (d,)``.

    The backward pass scatter-adds output gradients into the selected columns.
    """
    table = as_tensor(table)
    index = np.asarray(index)
    if table.data.ndim != 2 or not np.issubdtype(index.dtype, np.integer):
        raise ShapeError("gather-columns", table.shape, index.shape)
    d, v = table.shape
    if index.size and (index.min() < 0 or index.max() >= v):
        raise IndexError(f"gather-columns: index out of range [0, {v})")
    out = table.data.T[index]
    flat = index.reshape(-1)

    def back(g):
        g2 = g.reshape(-1, d)
        gt = np.empty((d, v), DTYPE)
        for j in range(d):
            gt[j] = np.bincount(flat, weights=g2[:, j], minlength=v)
        return (gt,)

    return _emit("gather-columns", [table], out, back)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "sum": sum_all,
    "max-pool": max_pool2d,
    "mean-pool": mean_pool,
    "batch-norm": batch_norm,
    "softmax-cross-entropy": softmax_cross_entropy,
    "gather-columns": gather_columns,
    "reshape": reshape,
    "transpose": transpose,
}


def tape_op(kind: str, *inputs, **context) -> Tensor:
    """Dispatch an op by its kind name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **context)
