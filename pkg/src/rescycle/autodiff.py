"""Minimal reverse-mode automatic differentiation on numpy arrays.

Only the operators the CycleGAN networks need are provided: 2-D convolution
and its transpose, instance/batch normalization, pointwise activations and a
handful of elementwise/reduction ops for the losses. Binary elementwise ops
require equal shapes (or a python scalar); there is no general broadcasting.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-d array that records the operations applied to it."""

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def abs(self):
        return absolute(self)

    def square(self):
        return square(self)

    def backward(self, grad=None):
        backward(self, grad)


def _node(data, parents, backward_fn):
    """Wrap an op result; keep the graph only when some parent needs grads."""
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor, grad=None):
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are not kept.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative post-order DFS; graphs of deep generators exceed recursion limits
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise / reductions ----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _node(a.data + np.asarray(b, dtype=a.dtype), (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        return _node(a.data * s, (a,), lambda g: (g * s,))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def absolute(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _node(out, (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return _node(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


# activations -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 <= slope < 1:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _node(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1 - y * y),))


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# padding ---------------------------------------------------------------------


def _pad(x, pad, mode):
    if pad == 0:
        return x
    width = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(x, width)
    if mode == "reflection":
        # extents <= pad reflect repeatedly (a single pixel is replicated)
        return np.pad(x, width, mode="reflect")
    raise ValueError(f"unknown pad mode {mode!r}")


def _unpad(g, pad, mode):
    """Adjoint of ``_pad``: fold the padded border back onto the interior."""
    if pad == 0:
        return g
    h, w = g.shape[2] - 2 * pad, g.shape[3] - 2 * pad
    if mode == "zero":
        return np.ascontiguousarray(g[:, :, pad:pad + h, pad:pad + w])
    if pad >= h or pad >= w:
        rows = np.zeros(g.shape[:2] + (h, g.shape[3]), dtype=g.dtype)
        np.add.at(rows, (slice(None), slice(None), np.pad(np.arange(h), pad, mode="reflect")), g)
        out = np.zeros(g.shape[:2] + (h, w), dtype=g.dtype)
        np.add.at(out, (slice(None), slice(None), slice(None), np.pad(np.arange(w), pad, mode="reflect")), rows)
        return out
    rows = g[:, :, pad:pad + h, :].copy()
    for k in range(1, pad + 1):
        rows[:, :, k, :] += g[:, :, pad - k, :]
        rows[:, :, h - 1 - k, :] += g[:, :, pad + h - 1 + k, :]
    out = rows[:, :, :, pad:pad + w].copy()
    for k in range(1, pad + 1):
        out[:, :, :, k] += rows[:, :, :, pad - k]
        out[:, :, :, w - 1 - k] += rows[:, :, :, pad + w - 1 + k]
    return out


# convolution -----------------------------------------------------------------


def _im2col(xp, kh, kw, stride, oh, ow):
    """(B, C, Hp, Wp) -> (B, C*kh*kw, oh*ow) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    b, c = xp.shape[:2]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)


def _col2im(cols, shape, kh, kw, stride, oh, ow):
    """Scatter-add a (B, C*kh*kw, oh*ow) patch matrix back onto a (B, C, Hp, Wp) canvas."""
    b, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    patches = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += patches[:, :, i, j]
    return out


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of a (B, Cin, H, W) input with a (Cout, Cin, kH, kW) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if min(x.shape) == 0:
        raise ValueError(f"conv2d: zero-extent input {x.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    xp = _pad(x.data, padding, pad_mode)
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, cout, oh, ow)

    def grad_fn(g):
        g3 = g.reshape(b, cout, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ g3, xp.shape, kh, kw, stride, oh, ow)
            gx = _unpad(gxp, padding, pad_mode)
        if weight.requires_grad:
            gw = (g3 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, grad_fn)


def conv_transpose_output_size(size, kernel, stride=1, padding=0, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (Cin, Cout, kH, kW).

    With tied weights this is the exact adjoint of :func:`conv2d` using zero
    padding, the same stride and padding, and a matching ``output_padding``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if min(x.shape) == 0:
        raise ValueError(f"conv_transpose2d: zero-extent input {x.shape}")
    if stride < 1:
        raise ValueError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    if not 0 <= output_padding < stride:
        raise ValueError(f"conv_transpose2d: output_padding ({output_padding}) must be < stride ({stride})")
    b, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv_transpose2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})")
    oh = conv_transpose_output_size(h, kh, stride, padding, output_padding)
    ow = conv_transpose_output_size(w, kw, stride, padding, output_padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv_transpose2d: non-positive output size {oh}x{ow}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")

    full = (b, cout, oh + 2 * padding, ow + 2 * padding)
    x3 = x.data.reshape(b, cin, h * w)
    wmat = weight.data.reshape(cin, -1)
    canvas = _col2im(wmat.T @ x3, full, kh, kw, stride, h, w)
    out = canvas[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gfull = np.zeros(full, dtype=g.dtype)
        gfull[:, :, padding:padding + oh, padding:padding + ow] = g
        gcols = _im2col(gfull, kh, kw, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wmat @ gcols).reshape(b, cin, h, w)
        if weight.requires_grad:
            gw = (x3 @ gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, grad_fn)


# normalization ---------------------------------------------------------------


def normalize(x: Tensor, kind: str, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
              running_mean=None, running_var=None, training: bool = True,
              momentum: float = 0.1) -> Tensor:
    """Instance or batch normalization followed by a per-channel affine map.

    ``instance`` normalizes each (sample, channel) over H, W; ``batch`` each
    channel over B, H, W. In batch kind, ``running_mean``/``running_var``
    (float arrays of shape (C,)) are updated in place while training and used
    instead of the batch statistics when ``training`` is false.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ValueError(f"normalize expects (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"normalize: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if kind == "instance":
        axes = (2, 3)
    elif kind == "batch":
        axes = (0, 2, 3)
    else:
        raise ValueError(f"unknown normalization kind {kind!r}")

    xd = x.data
    use_running = kind == "batch" and not training and running_mean is not None
    if use_running:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)
    else:
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
        if kind == "batch" and training and running_mean is not None:
            n = xd.size // c
            unbiased = var.reshape(c) * (n / (n - 1)) if n > 1 else var.reshape(c)
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * g4
            if use_running:
                gx = dxhat * inv
            else:
                m = dxhat.mean(axis=axes, keepdims=True)
                mx = (dxhat * xhat).mean(axis=axes, keepdims=True)
                gx = inv * (dxhat - m - xhat * mx)
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return _node(out.astype(xd.dtype, copy=False), (x, gamma, beta), grad_fn)
