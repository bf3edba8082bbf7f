"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the segmentation/critic architecture needs: conv2d,
dense, leaky_relu, sigmoid, softplus, nearest upsampling, elementwise
add/mul/clip/log/square, mean/sum reductions, and the gradient reversal
node. Graphs are built eagerly; `backward()` on a scalar runs the tape in
reverse topological order. Arrays keep whatever float dtype they come in
with (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A shaped float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'yes' if self.grad is not None else 'no'})"

    # Sugar used throughout the loss code.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _tracked(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(data, parents, backward_fn, tracked: bool) -> Tensor:
    out = Tensor(data)
    if tracked:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    tracked = _tracked(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward, tracked)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    tracked = _tracked(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward, tracked)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    tracked = _tracked(x)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), backward, tracked)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    tracked = _tracked(x)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (2.0 * x.data))

    return _make(x.data * x.data, (x,), backward, tracked)


def clip(x: Tensor, lo: float, hi: float, passthrough: bool = False) -> Tensor:
    """Clamp values into [lo, hi].

    By default the gradient is gated to the interior (the true derivative of
    the clamp). With passthrough=True the gradient flows unchanged, for
    numerical-protection clamps that must not stall saturated predictions.
    """
    x = _as_tensor(x)
    tracked = _tracked(x)
    inside = None if passthrough else ((x.data >= lo) & (x.data <= hi))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g if passthrough else g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward, tracked)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    tracked = _tracked(x)
    pos = x.data > 0

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.where(pos, 1.0, slope).astype(x.data.dtype))

    out = np.where(pos, x.data, x.data * slope)
    return _make(out, (x,), backward, tracked)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    tracked = _tracked(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (out * (1.0 - out)))

    return _make(out, (x,), backward, tracked)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = _as_tensor(x)
    tracked = _tracked(x)
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def backward(g):
        if x.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-np.clip(d, -60, 60)))
            x._accumulate(g * sig)

    return _make(out, (x,), backward, tracked)


# ---------------------------------------------------------------------------
# Reductions


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    tracked = _tracked(x)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return _make(np.asarray(x.data.sum(dtype=x.data.dtype)), (x,), backward, tracked)


def tmean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    tracked = _tracked(x)
    n = x.data.size

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype))

    return _make(np.asarray(x.data.mean(dtype=x.data.dtype)), (x,), backward, tracked)


# ---------------------------------------------------------------------------
# Linear layers


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) for x of shape (B, F), w of shape (F, O)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"dense: incompatible shapes {x.data.shape} @ {w.data.shape}")
    tensors = [x, w]
    out = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (w.data.shape[1],):
            raise ValueError(f"dense: bias shape {b.data.shape} != ({w.data.shape[1]},)")
        out = out + b.data
        tensors.append(b)
    tracked = _tracked(*tensors)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(out, tensors, backward, tracked)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, OH, OW, KH, KW)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation), NCHW inputs, OIHW weights."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes x{x.data.shape} w{w.data.shape}")
    bsz, c, h, wd = x.data.shape
    oc, _, kh, kw = w.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(oc, c * kh * kw)
    out = cols.reshape(-1, c * kh * kw) @ wmat.T
    out = out.reshape(bsz, oh, ow, oc).transpose(0, 3, 1, 2)
    tensors = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (oc,):
            raise ValueError(f"conv2d: bias shape {b.data.shape} != ({oc},)")
        out = out + b.data[None, :, None, None]
        tensors.append(b)
    out = np.ascontiguousarray(out)
    tracked = _tracked(*tensors)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, oc)  # (B*OH*OW, OC)
        if w.requires_grad:
            dw = gmat.T @ cols.reshape(-1, c * kh * kw)
            w._accumulate(dw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = gmat @ wmat  # (B*OH*OW, C*KH*KW)
            dcols = dcols.reshape(bsz, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            hp, wp = h + 2 * padding, wd + 2 * padding
            dxp = np.zeros((bsz, c, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, :, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
            x._accumulate(dxp)

    return _make(out, tensors, backward, tracked)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell factor x factor times, NCHW."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"nearest_upsample: expected NCHW, got {x.data.shape}")
    tracked = _tracked(x)
    b, c, h, w = x.data.shape
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None], (b, c, h, factor, w, factor)
    ).reshape(b, c, h * factor, w * factor)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(np.ascontiguousarray(out), (x,), backward, tracked)


def grl(z: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times -lam backward."""
    z = _as_tensor(z)
    tracked = _tracked(z)

    def backward(g):
        if z.requires_grad:
            z._accumulate(g * (-lam))

    out = Tensor(z.data)  # share the buffer: forward is bit-exact identity
    if tracked:
        out.requires_grad = True
        out._parents = (z,)
        out._backward = backward
    return out
