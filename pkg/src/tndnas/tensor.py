"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op builds a node that remembers its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the graph in reverse
topological order, so each node is visited once and gradients of shared
inputs accumulate.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add([self, _lift(other)])

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def topological_order(root):
    """Nodes reachable from ``root``, each listed after all of its inputs."""
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------- elementwise


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def scale(x, c):
    return _make(x.data * c, (x,), lambda g: (g * c,))


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add(xs):
    xs = list(xs)
    if not xs:
        raise ValueError("add() needs at least one tensor")
    shape = xs[0].shape
    for i, x in enumerate(xs[1:], 1):
        if x.shape != shape:
            raise DimensionError(f"add: operand {i} has shape {x.shape}, expected {shape}")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return _make(out, xs, lambda g: tuple(g for _ in xs))


def zeros(shape):
    return Tensor(np.zeros(shape, dtype=DTYPE))


def concat(xs, axis=1):
    xs = list(xs)
    ref = xs[0].shape
    for i, x in enumerate(xs):
        if len(x.shape) != len(ref):
            raise DimensionError(f"concat: operand {i} has rank {len(x.shape)}, expected {len(ref)}")
        for ax in range(len(ref)):
            if ax != axis % len(ref) and x.shape[ax] != ref[ax]:
                raise DimensionError(
                    f"concat: operand {i} differs on axis {ax} ({x.shape[ax]} vs {ref[ax]})"
                )
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def getitem(x, idx):
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g) if _is_fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw)


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_all(x):
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def global_avg_pool(x):
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw)


def linear(x, w, b=None):
    """``x @ w.T + b`` with ``x`` of shape [N, in] and ``w`` of shape [out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        out = out + b.data
        parents.append(b)

    def bw(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw)


# -------------------------------------------------------------- convolution


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _pad(a, ph, pw, value=0.0):
    if ph == 0 and pw == 0:
        return a
    n, c, h, w = a.shape
    out = np.full((n, c, h + 2 * ph, w + 2 * pw), value, dtype=DTYPE)
    out[:, :, ph:ph + h, pw:pw + w] = a
    return out


def conv2d(x, w, stride=1, padding=0, dilation=1, groups=1):
    """Direct cross-correlation, accumulated one kernel tap at a time."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D [N,C,H,W], got rank {x.data.ndim}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups:
        raise DimensionError(f"conv2d: input channels (axis 1) = {cin} not divisible by groups={groups}")
    if cin // groups != cin_g:
        raise DimensionError(
            f"conv2d: weight axis 1 is {cin_g}, expected input channels/groups = {cin // groups}"
        )
    if cout % groups:
        raise DimensionError(f"conv2d: output channels (weight axis 0) = {cout} not divisible by groups={groups}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    hp, wp = h + 2 * ph, wd + 2 * pw
    if hp < dh * (kh - 1) + 1 or wp < dw * (kw - 1) + 1:
        raise DimensionError(f"conv2d: spatial axes {(h, wd)} too small for kernel {(kh, kw)}")
    ho = (hp - dh * (kh - 1) - 1) // sh + 1
    wo = (wp - dw * (kw - 1) - 1) // sw + 1
    xp = _pad(x.data, ph, pw)
    taps = [
        (i, j, (slice(None), slice(None),
                slice(i * dh, i * dh + sh * (ho - 1) + 1, sh),
                slice(j * dw, j * dw + sw * (wo - 1) + 1, sw)))
        for i in range(kh) for j in range(kw)
    ]
    depthwise = groups == cin and cin_g == 1 and cout == cin
    cout_g = cout // groups
    W = w.data

    if depthwise:
        out = np.zeros((n, cout, ho, wo), dtype=DTYPE)
        for i, j, sl in taps:
            out += xp[sl] * W[:, 0, i, j][None, :, None, None]
    elif groups == 1:
        # accumulate as [Cout, N, Ho, Wo]; one matmul per tap
        acc = np.zeros((cout, n, ho, wo), dtype=DTYPE)
        for i, j, sl in taps:
            acc += np.tensordot(W[:, :, i, j], xp[sl], axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    else:
        wg = W.reshape(groups, cout_g, cin_g, kh, kw)
        out = np.zeros((n, groups, cout_g, ho, wo), dtype=DTYPE)
        for i, j, sl in taps:
            xt = xp[sl].reshape(n, groups, cin_g, ho, wo)
            out += np.einsum("ngchw,goc->ngohw", xt, wg[..., i, j])
        out = out.reshape(n, cout, ho, wo)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(W)
        if depthwise:
            for i, j, sl in taps:
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                gxp[sl] += g * W[:, 0, i, j][None, :, None, None]
        elif groups == 1:
            for i, j, sl in taps:
                xt = xp[sl]
                gw[:, :, i, j] = np.tensordot(g, xt, axes=([0, 2, 3], [0, 2, 3]))
                gxp[sl] += np.tensordot(g, W[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        else:
            gg = g.reshape(n, groups, cout_g, ho, wo)
            wg_ = W.reshape(groups, cout_g, cin_g, kh, kw)
            gwg = gw.reshape(groups, cout_g, cin_g, kh, kw)
            for i, j, sl in taps:
                xt = xp[sl].reshape(n, groups, cin_g, ho, wo)
                gwg[..., i, j] = np.einsum("ngohw,ngchw->goc", gg, xt)
                gxp[sl] += np.einsum("ngohw,goc->ngchw", gg, wg_[..., i, j]).reshape(n, cin, ho, wo)
        return gxp[:, :, ph:ph + h, pw:pw + wd], gw

    return _make(out, (x, w), bw)


def pool2d(x, kind, k, stride=1, padding=None):
    if k % 2 == 0:
        raise ValueError(f"pool2d: kernel size must be odd, got {k}")
    return _pool(x, kind, k, stride, (k - 1) // 2 if padding is None else padding)


def _pool(x, kind, k, stride, padding):
    n, c, h, wd = x.shape
    p = padding
    xp = _pad(x.data, p, p, -np.inf if kind == "max" else 0.0)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]

    def scatter(gwin):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gwin[..., i, j]
        return gxp[:, :, p:p + h, p:p + wd]

    if kind == "max":
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            gwin = np.zeros((n, c, ho, wo, k * k), dtype=DTYPE)
            np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
            return (scatter(gwin.reshape(n, c, ho, wo, k, k)),)

    elif kind == "avg":
        # padded taps are excluded from the divisor
        ones = np.pad(np.ones((h, wd)), p)
        counts = sliding_window_view(ones, (k, k))[::stride, ::stride].sum(axis=(-1, -2))
        out = win.sum(axis=(-1, -2)) / counts

        def bw(g):
            gwin = np.broadcast_to((g / counts)[..., None, None], (n, c, ho, wo, k, k))
            return (scatter(gwin),)

    else:
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    return _make(np.ascontiguousarray(out), (x,), bw)


# ------------------------------------------------------------- normalization


class RunningStats:
    __slots__ = ("mean", "var")

    def __init__(self, channels):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)


def batchnorm2d(x, gamma=None, beta=None, running_stats=None, training=True, momentum=0.1, eps=1e-5):
    """Per-channel normalization of an [N,C,H,W] tensor.

    ``gamma``/``beta`` may be None for a non-affine norm. In training mode the
    batch statistics are used and, when ``running_stats`` is given, folded
    into it with ``momentum``; in eval mode the running statistics are used.
    """
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise DimensionError(f"batchnorm2d: {name} has shape {p.shape}, expected ({c},)")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_stats is not None:
            m = x.data.size // c
            unbiased = var * m / max(m - 1, 1)
            running_stats.mean *= 1 - momentum
            running_stats.mean += momentum * mean
            running_stats.var *= 1 - momentum
            running_stats.var += momentum * unbiased
    else:
        mean, var = running_stats.mean, running_stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat
    if gamma is not None:
        out = out * gamma.data[None, :, None, None]
    if beta is not None:
        out = out + beta.data[None, :, None, None]

    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def bw(g):
        gg = g if gamma is None else g * gamma.data[None, :, None, None]
        if training:
            m = x.data.size // c
            gx = inv[None, :, None, None] / m * (
                m * gg
                - gg.sum(axis=axes)[None, :, None, None]
                - xhat * (gg * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = gg * inv[None, :, None, None]
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes))
        if beta is not None:
            grads.append(g.sum(axis=axes))
        return tuple(grads)

    return _make(out, parents, bw)


# ---------------------------------------------------------------------- loss


def softmax_cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.array(loss), (logits,), bw)


# ----------------------------------------------------------------- optimizer


class SGD:
    """Momentum SGD: ``v = mu*v + grad + wd*param``; ``param -= lr*v``.

    With ``grad_clip`` the gradients are first rescaled so their global L2 norm
    is at most ``grad_clip``.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0, grad_clip=None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if grad_clip is not None and grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        self.grad_clip = grad_clip
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, skip_missing=False):
        """Apply one update. With ``skip_missing`` parameters without a gradient
        (unused by a sampled path) are left untouched, velocity included."""
        for i, (p, v) in enumerate(zip(self.params, self.velocity)):
            if p.grad is None and not skip_missing:
                raise ValueError(f"parameter {p.name or i} has no gradient")
        scale = 1.0
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float((p.grad**2).sum()) for p in self.params if p.grad is not None))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += scale * p.grad if scale != 1.0 else p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
