"""Dense float32 tensors with tape-based reverse-mode differentiation.

Ops record themselves on the active :class:`Tape` when at least one input
requires a gradient.  Outside a tape every op is a plain forward
computation, which is how inference runs::

    with Tape() as tape:
        loss = l1_loss(relu(conv3d(x, w, b)), target)
    tape.backward(loss)

Broadcasting is limited to operands of equal rank (size-1 axes stretch);
anything else needs an explicit :func:`reshape`.
"""

from __future__ import annotations

import builtins
import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

_BN_MODES = ("train", "eval", "use_batch_stats")


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a value or gradient."""


class Tensor:
    """An n-dimensional float32 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum(self)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working float type (e.g. float64 for oracles)."""
    global DTYPE
    previous = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = previous


def check_finite(t: Tensor | np.ndarray, what: str = "value") -> None:
    arr = _data(t)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "parents", "fn", "tape")

    def __init__(self, out, parents, fn, tape):
        self.out = out
        self.parents = parents
        self.fn = fn
        self.tape = tape


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops, consumed by one backward pass.

    Recording order is already topological, so the reverse sweep walks the
    list from the end.  Single-threaded; create one per optimisation step.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.exhausted = False

    def __enter__(self) -> "Tape":
        if self.exhausted:
            raise TapeError("tape already consumed; record a new one")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> None:
        out._node = _Node(out, parents, fn, self)
        out.requires_grad = True
        self.nodes.append(out._node)

    def backward(self, loss: Tensor) -> None:
        if self.exhausted:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    if not np.all(np.isfinite(pg)):
                        raise NonFiniteError(f"non-finite gradient reaching leaf {parent!r}")
                    pg = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        # drop saved activations; grads on leaves are all that survive
        for node in self.nodes:
            node.out._node = None
            node.fn = None
        self.nodes = []
        self.exhausted = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor ``loss`` depends on."""
    if loss._node is None:
        raise TapeError("loss is not the output of a recorded op (leaf, or tape already consumed)")
    loss._node.tape.backward(loss)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and builtins.any(p.requires_grad for p in parents):
        tape.record(out, tuple(parents), fn)
    return out


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}; reshape explicitly")
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: incompatible dims {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                -_unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    c32 = DTYPE(c)
    return _make(x.data * c32, (x,), lambda g: (g * c32,))


def abs(x: Tensor) -> Tensor:
    # subgradient 0 at x == 0
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible downstream
    return _make(np.maximum(x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def sum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE)
    return _make(total, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(DTYPE),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if x.data.size == 0:
        raise ShapeError("mean over an empty tensor")
    axes = tuple(range(x.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean over zero-extent axes {axes} of {x.shape}")
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / DTYPE(count), x.shape).astype(DTYPE),)

    return _make(out, (x,), fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                parts.append(g[tuple(sl)])
            else:
                parts.append(None)
        return tuple(parts)

    return _make(out, tuple(tensors), fn)


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int or 3 values, got {v}")
    return v


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation of ``x[N,C,T,H,W]`` with ``weight[O,C,kt,kh,kw]``.

    Implemented as im2col + one GEMM per sample.  The column buffer is kept
    for the weight gradient; the input gradient is scattered back with one
    strided add per kernel offset.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    N, C, T, H, W = x.shape
    O, Cw, kt, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv3d: input has {C} channels but weight expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} does not match {O} output channels")
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    if min(st, sh, sw) < 1 or min(pt, ph, pw) < 0:
        raise ShapeError(f"conv3d: invalid stride {stride} or padding {padding}")
    Tp, Hp, Wp = T + 2 * pt, H + 2 * ph, W + 2 * pw
    if kt > Tp or kh > Hp or kw > Wp:
        raise ShapeError(f"conv3d: kernel {(kt, kh, kw)} exceeds padded input {(Tp, Hp, Wp)}")
    To, Ho, Wo = (Tp - kt) // st + 1, (Hp - kh) // sh + 1, (Wp - kw) // sw + 1
    if st == sh == sw == 1:
        return _conv3d_unit_stride(x, weight, bias, (pt, ph, pw))
    K = kt * kh * kw
    P = To * Ho * Wo

    if pt or ph or pw:
        xp = np.zeros((N, C, Tp, Hp, Wp), dtype=DTYPE)
        xp[:, :, pt:pt + T, ph:ph + H, pw:pw + W] = x.data
    else:
        xp = x.data
    offsets = [(a, b, c) for a in range(kt) for b in range(kh) for c in range(kw)]
    cols = np.empty((N, C, K, To, Ho, Wo), dtype=DTYPE)
    for k, (a, b, c) in enumerate(offsets):
        cols[:, :, k] = xp[:, :, a:a + st * To:st, b:b + sh * Ho:sh, c:c + sw * Wo:sw]
    cols = cols.reshape(N, C * K, P)
    w2 = weight.data.reshape(O, C * K)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(N, O, To, Ho, Wo)

    def fn(g):
        g2 = g.reshape(N, O, P)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = g2[0] @ cols[0].T
            for n in range(1, N):
                gw += g2[n] @ cols[n].T
            gw = gw.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2), dtype=np.float64).astype(DTYPE)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(N, C, K, To, Ho, Wo)
            dxp = np.zeros((N, C, Tp, Hp, Wp), dtype=DTYPE)
            for k, (a, b, c) in enumerate(offsets):
                dxp[:, :, a:a + st * To:st, b:b + sh * Ho:sh, c:c + sw * Wo:sw] += dcols[:, :, k]
            gx = dxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, fn)


def _conv3d_unit_stride(x: Tensor, weight: Tensor, bias: Tensor | None, padding) -> Tensor:
    """Stride-1 conv3d in channels-last layout.

    Spatial offsets are unfolded into columns ``[N, Tp, Ho, Wo, kh*kw*C]``; the
    temporal offsets then become plain row shifts of that matrix, so the
    product is ``kt`` GEMMs on contiguous views.  Rows whose frame index is
    past ``To`` are scratch and get dropped.
    """
    N, C, T, H, W = x.shape
    O, _, kt, kh, kw = weight.shape
    pt, ph, pw = padding
    Tp, Hp, Wp = T + 2 * pt, H + 2 * ph, W + 2 * pw
    To, Ho, Wo = Tp - kt + 1, Hp - kh + 1, Wp - kw + 1
    F = Ho * Wo
    R = N * Tp * F
    L = R - (kt - 1) * F
    S = kh * kw * C

    xl = np.zeros((N, Tp, Hp, Wp, C), dtype=DTYPE)
    xl[:, pt:pt + T, ph:ph + H, pw:pw + W] = x.data.transpose(0, 2, 3, 4, 1)
    cols = np.empty((N, Tp, Ho, Wo, kh, kw, C), dtype=DTYPE)
    for b in range(kh):
        for c in range(kw):
            cols[:, :, :, :, b, c] = xl[:, :, b:b + Ho, c:c + Wo]
    cols = cols.reshape(R, S)
    del xl
    wk = weight.data.transpose(2, 3, 4, 1, 0).reshape(kt, S, O)
    acc = np.zeros((R, O), dtype=DTYPE)
    for a in range(kt):
        acc[:L] += cols[a * F:a * F + L] @ wk[a]
    if bias is not None:
        acc += bias.data
    out = np.ascontiguousarray(acc.reshape(N, Tp, Ho, Wo, O)[:, :To].transpose(0, 4, 1, 2, 3))

    def fn(g):
        gpad = np.zeros((N, Tp, Ho, Wo, O), dtype=DTYPE)
        gpad[:, :To] = g.transpose(0, 2, 3, 4, 1)
        gr = gpad.reshape(R, O)[:L]
        gx = gw = gb = None
        if weight.requires_grad:
            gwk = np.stack([cols[a * F:a * F + L].T @ gr for a in range(kt)])
            gw = np.ascontiguousarray(gwk.reshape(kt, kh, kw, C, O).transpose(4, 3, 0, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = _sum64(g, (0, 2, 3, 4)).astype(DTYPE)
        if x.requires_grad:
            dcols = np.zeros((R, S), dtype=DTYPE)
            for a in range(kt):
                dcols[a * F:a * F + L] += gr @ wk[a].T
            dcols = dcols.reshape(N, Tp, Ho, Wo, kh, kw, C)
            dxl = np.zeros((N, Tp, Hp, Wp, C), dtype=DTYPE)
            for b in range(kh):
                for c in range(kw):
                    dxl[:, :, b:b + Ho, c:c + Wo] += dcols[:, :, :, :, b, c]
            gx = np.ascontiguousarray(dxl[:, pt:pt + T, ph:ph + H, pw:pw + W].transpose(0, 4, 1, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, fn)


def _sum64(x: np.ndarray, axes: tuple[int, ...], keepdims: bool = False) -> np.ndarray:
    """float64 sum; the per-channel case runs as a contiguous inner reduction."""
    if x.ndim > 2 and tuple(axes) == (0,) + tuple(range(2, x.ndim)):
        N, C = x.shape[:2]
        s = np.ascontiguousarray(x).reshape(N, C, -1).sum(axis=2, dtype=np.float64).sum(axis=0)
        return _chan(s, x.ndim) if keepdims else s
    return x.sum(axis=axes, keepdims=keepdims, dtype=np.float64)


def _moments(x: np.ndarray, axes: tuple[int, ...]):
    """Mean and population variance with float64 accumulation."""
    n = math.prod(x.shape[a] for a in axes)
    m = _sum64(x, axes, True) / n
    d = x - m.astype(DTYPE)
    # second pass on the f32 residual, accumulated in f64, plus the rounding correction
    corr = _sum64(d, axes, True) / n
    v = _sum64(np.square(d, dtype=np.float64), axes, True) / n - corr * corr
    return m, np.maximum(v, 0.0)


def _norm_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes, n: int):
    s1 = _sum64(g_hat, axes, True)
    s2 = _sum64(g_hat * xhat, axes, True)
    return ((g_hat - (s1 / n).astype(DTYPE) - xhat * (s2 / n).astype(DTYPE)) * inv_std).astype(DTYPE)


def _chan(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, mode: str = "eval", eps: float = 1e-5,
               momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalisation over every axis except 1.

    ``train`` normalises with batch statistics and folds them into the
    running buffers in place (variance buffer gets the unbiased estimate);
    ``eval`` uses the buffers; ``use_batch_stats`` normalises with the
    current batch without touching the buffers.
    """
    if mode not in _BN_MODES:
        raise ValueError(f"batch_norm mode must be one of {_BN_MODES}, got {mode!r}")
    if eps <= 0:
        raise ValueError(f"batch_norm eps must be positive, got {eps}")
    if x.ndim < 2:
        raise ShapeError(f"batch_norm needs a channel axis, got {x.shape}")
    C = x.shape[1]
    for name, p in (("gamma", _data(gamma)), ("beta", _data(beta)),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if p.shape != (C,):
            raise ShapeError(f"batch_norm: {name} has shape {p.shape}, input has {C} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    g_ = _chan(gamma.data, x.ndim)

    if mode == "eval":
        inv_std = _chan((1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(DTYPE), x.ndim)
        xhat = (x.data - _chan(running_mean, x.ndim)) * inv_std
        out = xhat * g_ + _chan(beta.data, x.ndim)

        def fn(g):
            return (g * (g_ * inv_std) if x.requires_grad else None,
                    _sum64(g * xhat, axes).astype(DTYPE) if gamma.requires_grad else None,
                    _sum64(g, axes).astype(DTYPE) if beta.requires_grad else None)

        return _make(out, (x, gamma, beta), fn)

    n = x.data.size // C
    if n < 1:
        raise ShapeError("batch_norm over an empty batch")
    m, v = _moments(x.data, axes)
    inv_std = (1.0 / np.sqrt(v + eps)).astype(DTYPE)
    xhat = (x.data - m.astype(DTYPE)) * inv_std
    out = xhat * g_ + _chan(beta.data, x.ndim)
    if mode == "train":
        unbiased = v.reshape(C) * (n / builtins.max(n - 1, 1))
        running_mean *= (1.0 - momentum)
        running_mean += (momentum * m.reshape(C)).astype(DTYPE)
        running_var *= (1.0 - momentum)
        running_var += (momentum * unbiased).astype(DTYPE)

    def fn(g):
        gx = _norm_backward(g * g_, xhat, inv_std, axes, n) if x.requires_grad else None
        return (gx,
                _sum64(g * xhat, axes).astype(DTYPE) if gamma.requires_grad else None,
                _sum64(g, axes).astype(DTYPE) if beta.requires_grad else None)

    return _make(out, (x, gamma, beta), fn)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over channel groups; no running buffers."""
    if eps <= 0:
        raise ValueError(f"group_norm eps must be positive, got {eps}")
    N, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: affine params must have shape ({C},)")
    xg = x.data.reshape(N, groups, -1)
    n = xg.shape[2]
    m, v = _moments(xg, (2,))
    inv_std = (1.0 / np.sqrt(v + eps)).astype(DTYPE)
    xhat = ((xg - m.astype(DTYPE)) * inv_std).reshape(x.shape)
    g_ = _chan(gamma.data, x.ndim)
    out = xhat * g_ + _chan(beta.data, x.ndim)
    axes = (0,) + tuple(range(2, x.ndim))

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = (g * g_).reshape(N, groups, -1)
            gx = _norm_backward(gh, xhat.reshape(N, groups, -1), inv_std, (2,), n).reshape(x.shape)
        return (gx,
                _sum64(g * xhat, axes).astype(DTYPE) if gamma.requires_grad else None,
                _sum64(g, axes).astype(DTYPE) if beta.requires_grad else None)

    return _make(out, (x, gamma, beta), fn)


def channel_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel mean and population variance over every axis but 1.

    Both outputs are differentiable.  Accumulation is float64.
    """
    if x.ndim < 2:
        raise ShapeError(f"channel_stats needs a channel axis, got {x.shape}")
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    n = x.data.size // C if C else 0
    if n == 0 or C == 0:
        raise ShapeError(f"channel_stats over a zero-extent axis: {x.shape}")
    m, v = _moments(x.data, axes)
    centered = x.data - m.astype(DTYPE)
    mean_t = _make(m.reshape(C).astype(DTYPE), (x,),
                   lambda g: (np.broadcast_to(_chan(g, x.ndim) / DTYPE(n), x.shape).astype(DTYPE),))
    var_t = _make(v.reshape(C).astype(DTYPE), (x,),
                  lambda g: (centered * _chan(g * DTYPE(2.0 / n), x.ndim),))
    return mean_t, var_t


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data

    def fn(g):
        res = (g @ weight.data if x.requires_grad else None,
               g.T @ x.data if weight.requires_grad else None)
        if bias is not None:
            res += (g.sum(axis=0) if bias.requires_grad else None,)
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.astype(DTYPE), parents, fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N,C,...] -> [N,C]`` mean over all trailing axes."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs spatial axes, got {x.shape}")
    return mean(x, axis=tuple(range(2, x.ndim)))


def spatial_avg_pool(x: Tensor, k: int = 2) -> Tensor:
    """Average ``k x k`` spatial windows of ``[N,C,T,H,W]``; time is kept."""
    N, C, T, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"spatial_avg_pool: {H}x{W} not divisible by {k}")
    out = x.data.reshape(N, C, T, H // k, k, W // k, k).mean(axis=(4, 6), dtype=DTYPE)
    inv = DTYPE(1.0 / (k * k))

    def fn(g):
        gx = np.repeat(np.repeat(g * inv, k, axis=3), k, axis=4)
        return (gx,)

    return _make(out, (x,), fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data.astype(np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    y = (z / z.sum(axis=-1, keepdims=True)).astype(DTYPE)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), fn)


def log_softmax(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = (z - lse).astype(DTYPE)
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if logits.shape[0] == 0:
        raise ShapeError("cross_entropy over an empty batch")
    logp = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    onehot[np.arange(len(labels)), labels] = -1.0 / len(labels)
    return sum(mul(logp, Tensor(onehot)))


def entropy_loss(probs: Tensor) -> Tensor:
    """Mean over rows of the Shannon entropy ``-sum p log p`` (natural log)."""
    if probs.ndim != 2 or probs.shape[0] == 0 or probs.shape[1] == 0:
        raise ShapeError(f"entropy_loss expects a non-empty [N,K] tensor, got {probs.shape}")
    p = probs.data.astype(np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    rows = probs.shape[0]
    h = -(p * logp).sum() / rows
    tiny = np.log(np.finfo(np.float64).tiny)

    def fn(g):
        lp = np.where(p > 0, logp, tiny)
        return ((-(lp + 1.0) * (float(g) / rows)).astype(DTYPE),)

    return _make(np.asarray(h, dtype=DTYPE), (probs,), fn)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """``sum |a - b|`` (the vector l1 norm of the difference)."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    if a.data.size == 0:
        raise ShapeError("l1_loss over empty tensors")
    return sum(abs(sub(a, b)))
