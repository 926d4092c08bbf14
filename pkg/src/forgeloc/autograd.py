"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Covers exactly the operations the localization network needs: strided/dilated
2-D convolution, 2x2 max pooling, nearest-neighbor upsampling, (batched)
matrix products, sigmoid, ReLU, channel concatenation, reshapes, and binary
cross-entropy.  Tensors wrap numpy arrays; the primary layout is rank-4
``(batch, channels, height, width)``, with rank-2/3 matrix views appearing
only between ``reshape``/``matmul`` calls.

Every op records its inputs and a backward closure on the output tensor.
Recording order is a topological order of the graph; ``backward`` replays the
recorded nodes in exact reverse order.  A graph is confined to the execution
context that recorded it; separate forward passes over disjoint data build
independent graphs and may run concurrently.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

_seq = itertools.count()

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Leaf tensors created with ``requires_grad=True`` get a zero-initialized
    ``grad`` buffer of identical shape; leaves never reached by ``backward``
    therefore report all-zero gradients.  Data is treated as immutable once
    the tensor has been consumed by an op (mutating ``data`` in place is only
    safe between forward passes, e.g. by the optimizer).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn",
                 "_order", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None
        self._order = next(_seq)
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires-grad leaf.

        ``self`` must be scalar (size 1).  Nodes are visited in exact reverse
        recording order, which is a valid reverse-topological order because
        every op is recorded after its inputs.  Re-running backward on the
        same recorded graph is rejected; record a fresh forward pass instead.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise RuntimeError("backward already ran on this graph; "
                               "re-record the forward pass first")
        self._backward_ran = True

        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if id(p) not in seen and p._grad_fn is not None:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._order, reverse=True)

        self.grad = np.ones_like(self.data)
        for t in nodes:
            if t._grad_fn is not None and t.grad is not None:
                t._grad_fn(t.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap an op output, recording parents and the backward closure."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._grad_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating on first touch."""
    if not (t.requires_grad or t._grad_fn is not None):
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# convolution

def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            padding: int):
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, dilation, padding)
    ow = conv_output_size(w, kw, stride, dilation, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: output dims {oh}x{ow} are not positive for "
                         f"input {h}x{w}, kernel {kh}x{kw}, stride {stride}, "
                         f"dilation {dilation}, padding {padding}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = x[:, :, hi:hi + (oh - 1) * stride + 1:stride,
                                 wj:wj + (ow - 1) * stride + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols: np.ndarray, in_shape, kh: int, kw: int, stride: int,
            dilation: int, padding: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = in_shape
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            gx[:, :, hi:hi + (oh - 1) * stride + 1:stride,
               wj:wj + (ow - 1) * stride + 1:stride] += g[:, :, i, j]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over rank-4 input, kernel (out_c, in_c, kh, kw).

    Differentiable w.r.t. input, kernel, and bias.  Output spatial dims follow
    ``floor((s + 2p - d*(k-1) - 1)/stride) + 1``.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be rank 4, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be rank 4, got shape {kernel.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if ic != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {ic}")
    if bias is not None and bias.shape != (oc,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {oc} output channels")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, dilation, padding)
    w2 = kernel.data.reshape(oc, -1)
    out = np.matmul(w2, cols)                          # (n, oc, oh*ow)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, oc, oh, ow)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(g):
        gf = g.reshape(n, oc, oh * ow)
        if kernel.requires_grad or kernel._grad_fn is not None:
            gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(kernel, gw.reshape(kernel.shape))
        if bias is not None:
            _accum(bias, gf.sum(axis=(0, 2)))
        if x.requires_grad or x._grad_fn is not None:
            gcols = np.matmul(w2.T, gf)
            _accum(x, _col2im(gcols, x.shape, kh, kw, stride, dilation,
                              padding, oh, ow))

    return _result(out, parents, grad_fn)


# ---------------------------------------------------------------------------
# pooling / upsampling

def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient routes to the first max in
    row-major window order.  Odd trailing dims are padded right/bottom with
    -inf so the pad never wins."""
    if window != 2:
        raise ValueError("maxpool2d supports window=2 only")
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)),
                    constant_values=-np.inf)
    oh, ow = xd.shape[2] // 2, xd.shape[3] // 2
    win = xd.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = gx.reshape(n, c, oh * 2, ow * 2)
        if ph or pw:
            gx = gx[:, :, :h, :w]
        _accum(x, gx)

    return _result(out, (x,), grad_fn)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate each cell into a factor x factor block; backward sums the block."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g):
        _accum(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _result(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# matrix views

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def grad_fn(g):
        _accum(x, g.reshape(x.shape))

    return _result(out, (x,), grad_fn)


def transpose_last2(x: Tensor) -> Tensor:
    out = np.swapaxes(x.data, -1, -2)

    def grad_fn(g):
        _accum(x, np.swapaxes(g, -1, -2))

    return _result(out, (x,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2 views, or batched over a shared leading dim
    for rank-3 views.  Differentiable w.r.t. both operands."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ValueError(f"matmul: expected two rank-2 or two rank-3 operands, "
                         f"got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree, {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = a.data + b.data

    def grad_fn(g):
        _accum(a, g)
        _accum(b, g)

    return _result(out, (a, b), grad_fn)


def scale_mul(s: Tensor, x: Tensor) -> Tensor:
    """Multiply a tensor by a learnable scalar (size-1 tensor)."""
    if s.size != 1:
        raise ValueError(f"scale_mul: scale must be a single value, got shape {s.shape}")
    sval = s.data.reshape(())
    out = sval * x.data

    def grad_fn(g):
        _accum(s, (g * x.data).sum().reshape(s.shape))
        _accum(x, sval * g)

    return _result(out, (s, x), grad_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def grad_fn(g):
        _accum(x, g * (x.data > 0))

    return _result(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; outputs pinned to the open interval (0, 1)
    even where the dtype would round to an endpoint."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    one = d.dtype.type(1.0)
    zero = d.dtype.type(0.0)
    np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero), out=out)

    def grad_fn(g):
        _accum(x, g * out * (1.0 - out))

    return _result(out, (x,), grad_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    for p in parts[1:]:
        if p.shape[0] != parts[0].shape[0] or p.shape[2:] != parts[0].shape[2:]:
            raise ValueError(f"concat_channels: spatial/batch dims differ, "
                             f"{parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]

    def grad_fn(g):
        off = 0
        for p, s in zip(parts, sizes):
            _accum(p, g[:, off:off + s])
            off += s

    return _result(out, tuple(parts), grad_fn)


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum().reshape(())

    def grad_fn(g):
        _accum(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))

    return _result(out, (x,), grad_fn)


BCE_CLAMP = 1e-7


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7].

    ``target`` must be strictly binary and carries no gradient.
    """
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"bce_loss: pred shape {pred.shape} != target shape {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss: target contains values outside {0, 1}")
    lo = pred.dtype.type(BCE_CLAMP)
    hi = pred.dtype.type(1.0 - BCE_CLAMP)
    p = np.clip(pred.data, lo, hi)
    out = np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))).reshape(())

    def grad_fn(g):
        inside = (pred.data > lo) & (pred.data < hi)
        gp = (p - t) / (p * (1.0 - p)) / p.size * g
        _accum(pred, np.where(inside, gp, 0.0))

    return _result(out, (pred,), grad_fn)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction over a named parameter list."""

    def __init__(self, params: Sequence[tuple], lr: float = 0.002,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if np.isnan(g).any():
                raise ValueError(f"adam: NaN gradient in parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
