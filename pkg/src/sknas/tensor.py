"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records its inputs and a backward closure on the output tensor.
Tensors carry a monotonically increasing creation id, so the execution order
of the graph is recoverable without storing a separate tape: ``backward``
visits reachable nodes in descending id order, which is a valid reverse
topological order because an op's output is always created after its inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "abs_",
    "square",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "relu",
    "prelu",
    "sigmoid",
    "softmax",
    "conv2d",
    "global_avg_pool2d",
    "pixel_shuffle",
    "straight_through",
    "stop_gradient",
    "gumbel_noise",
    "GUMBEL_EPS",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __deepcopy__(self, memo):
        # graph history is not copied; the copy is a fresh leaf with a new id
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)
        if self.grad is not None:
            t.grad = self.grad.copy()
        memo[id(self)] = t
        return t

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into every reachable ``requires_grad`` node.

        Without an explicit seed the root must be a scalar (size 1).
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=np.float64)}
        for node in sorted(nodes, key=lambda t: t._id, reverse=True):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        if not t.requires_grad:
            continue
        out.append(t)
        stack.extend(t._parents)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# -- constructors --------------------------------------------------------

def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def prelu(a, slope) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1) or a broadcastable slope."""
    a, slope = _as_tensor(a), _as_tensor(slope)
    s = slope.data
    if a.ndim >= 2 and s.ndim == 1 and s.shape[0] == a.shape[1]:
        s = s.reshape((1, -1) + (1,) * (a.ndim - 2))
    pos = a.data > 0  # at 0 both branches give 0; gradient uses the slope side
    out = np.where(pos, a.data, s * a.data)

    def back(g):
        ga = g * np.where(pos, 1.0, s)
        gs = _unbroadcast(np.where(pos, 0.0, g * a.data), s.shape).reshape(slope.shape)
        return ga, gs

    return _make(out, (a, slope), back)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def straight_through(soft, hard) -> Tensor:
    """Forward the exact values of ``hard``; route gradients to ``soft`` unchanged."""
    soft = _as_tensor(soft)
    hard_data = hard.data if isinstance(hard, Tensor) else np.asarray(hard, dtype=np.float64)
    if hard_data.shape != soft.shape:
        raise ShapeError(f"straight_through shapes differ: {soft.shape} vs {hard_data.shape}")
    return _make(hard_data.astype(np.float64, copy=True), (soft,), lambda g: (g,))


def stop_gradient(a) -> Tensor:
    return Tensor(_as_tensor(a).data)


# -- linear algebra / reductions -----------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError("matmul supports 1-D and 2-D operands only")

    def back(g):
        A, B = a.data, b.data
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, B) if a.ndim == 2 else g * B
            else:
                ga = g @ B.T
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(A, g) if b.ndim == 2 else g * A
            elif b.ndim == 1:
                gb = A.T @ g
            else:
                gb = A.T @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back)


# -- shape manipulation --------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat shape mismatch on axis {axis}: {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, ts, back)


def getitem(a, idx) -> Tensor:
    """Basic and integer-array indexing; repeated indices accumulate in backward."""
    a = _as_tensor(a)
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), back)


# -- image ops -----------------------------------------------------------

def _im2col(xp: np.ndarray, K: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> contiguous (N, Ho, Wo, C*K*K) patch matrix."""
    N, C = xp.shape[:2]
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N, Ho, Wo, C * K * K)


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of a pre-padded input; returns (NCHW output, patch matrix)."""
    O, C, K, _ = w.shape
    cols = _im2col(xp, K, stride)
    out = cols @ w.reshape(O, C * K * K).T  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input with OIKK weights."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be OIKK, got shape {weight.shape}")
    O, I, KH, KW = weight.shape
    N, C, H, W = x.shape
    if C != I:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {I}")
    if KH != KW or KH % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {KH}x{KW}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or padding={padding}")
    K = KH
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < K or Wp < K:
        raise ShapeError(f"conv2d: padded input {Hp}x{Wp} smaller than kernel {K}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out, cols = _correlate(xp, weight.data, stride)
    Ho, Wo = out.shape[2:]
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def back(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gmat = g.transpose(0, 2, 3, 1).reshape(-1, O)
            gw = (gmat.T @ cols.reshape(-1, C * K * K)).reshape(O, C, K, K)
        if x.requires_grad:
            # input gradient = full correlation of the dilated output gradient with the flipped kernel
            if stride > 1:
                gd = np.zeros((N, O, (Ho - 1) * stride + 1, (Wo - 1) * stride + 1))
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            rh = (Hp - K) % stride
            rw = (Wp - K) % stride
            q = K - 1 - padding
            # a padding larger than K-1 shows up as a negative q: crop instead of pad
            gd = np.pad(gd, ((0, 0), (0, 0), (max(q, 0), max(q, 0) + rh), (max(q, 0), max(q, 0) + rw)))
            if q < 0:
                gd = gd[:, :, -q:gd.shape[2] + q, -q:gd.shape[3] + q]
            wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _correlate(gd, np.ascontiguousarray(wf), 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, back)


def global_avg_pool2d(x) -> Tensor:
    """NCHW -> NC1 1 spatial mean."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool2d expects NCHW, got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


def pixel_shuffle(x, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r) subpixel rearrangement."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle expects NCHW, got {x.shape}")
    N, C, H, W = x.shape
    if C % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {C} not divisible by r^2={r * r}")
    c = C // (r * r)
    out = x.data.reshape(N, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, c, H * r, W * r)

    def back(g):
        return (g.reshape(N, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, C, H, W),)

    return _make(out, (x,), back)


# -- randomness ----------------------------------------------------------

GUMBEL_EPS = 1e-10


class Rng:
    """Seeded counter-based generator (Philox) owned by the caller.

    Identical seed and call sequence give a bitwise-identical stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        return Rng(int(np.random.SeedSequence([self.seed, key]).generate_state(1, np.uint64)[0] >> 1))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state


def gumbel_noise(rng: Rng, shape) -> Tensor:
    """Standard Gumbel samples -log(-log U), U on (eps, 1 - eps). Leaf, no gradient."""
    u = rng.uniform(GUMBEL_EPS, 1.0 - GUMBEL_EPS, shape)
    return Tensor(-np.log(-np.log(u)))
