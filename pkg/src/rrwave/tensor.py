"""Minimal dense tensors with reverse-mode automatic differentiation.

Tensors are rank <= 3 and laid out as (batch, length, channels).  Every
primitive records its inputs and a closure that maps the output gradient to
input gradients; :func:`backward` replays those closures in reverse creation
order (the tape).  The operator set is exactly what the network needs.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DisconnectedGraph, ShapeMismatch

_counter = itertools.count()
_state = threading.local()

# im2col is used when a single output sample touches at most this many inputs.
_IM2COL_MAX = 256


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.ndim > 3:
            raise ShapeMismatch(f"rank {self.data.ndim} exceeds 3")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_counter)
        self.name = name

    @property
    def dims(self):
        return self.data.shape

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    parents = tuple(parents)
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def backward(loss: Tensor, wrt=None):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf ``t`` that requires it.

    Raises ``DisconnectedGraph`` if ``loss`` does not depend on any tensor that
    requires a gradient, or if a tensor listed in ``wrt`` is not reachable.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        raise DisconnectedGraph("loss is not connected to any tensor that requires grad")

    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    if wrt is not None:
        missing = [t for t in wrt if id(t) not in seen]
        if missing:
            raise DisconnectedGraph(f"{len(missing)} tensor(s) not reachable from loss")

    tape = sorted(seen.values(), key=lambda t: t._seq, reverse=True)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in tape:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeMismatch(f"add: {a.dims} vs {b.dims}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeMismatch(f"sub: {a.dims} vs {b.dims}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.dims != b.dims:
        raise ShapeMismatch(f"mul: {a.dims} vs {b.dims}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def square(x):
    x = _as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.dims).copy(),))


def mean(x):
    x = _as_tensor(x)
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(x.dims, g / n, dtype=x.data.dtype),))


# ---------------------------------------------------------------- convolution


def _same_padding(length, k, stride):
    out = -(-length // stride)
    total = max((out - 1) * stride + k - length, 0)
    return total // 2, total - total // 2


def conv1d(x, kernel, bias=None, stride=1, padding="same"):
    """Cross-correlation of ``x[B, L, Cin]`` with ``kernel[K, Cin, Cout]``.

    ``same`` zero-pads so the output length is ceil(L / stride); any odd
    sample of padding goes on the right.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeMismatch(f"conv1d expects x[B,L,C] and kernel[K,Cin,Cout], got {x.dims}, {kernel.dims}")
    B, L, cin = x.dims
    K, kcin, cout = kernel.dims
    if kcin != cin:
        raise ShapeMismatch(f"conv1d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1:
        raise ShapeMismatch("conv1d: stride must be >= 1")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.dims != (cout,):
            raise ShapeMismatch(f"conv1d: bias dims {bias.dims} != ({cout},)")
    if padding == "same":
        left, right = _same_padding(L, K, stride)
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Lp = L + left + right
    if K > Lp:
        raise ShapeMismatch(f"conv1d: kernel {K} longer than padded input {Lp}")
    lout = (Lp - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0))) if left or right else x.data
    w = kernel.data

    if cin * K <= _IM2COL_MAX or stride != 1:
        cols = sliding_window_view(xp, K, axis=1)[:, ::stride][:, :lout]  # (B, lout, Cin, K)
        cols2 = cols.reshape(B * lout, cin * K)
        wmat = w.transpose(1, 0, 2).reshape(cin * K, cout)
        y = (cols2 @ wmat).reshape(B, lout, cout)

        def grads_xw(g):
            g2 = g.reshape(B * lout, cout)
            dw = (cols2.T @ g2).reshape(cin, K, cout).transpose(1, 0, 2) if kernel.requires_grad else None
            dx = None
            if x.requires_grad:
                dcols = (g2 @ wmat.T).reshape(B, lout, cin, K)
                dxp = np.zeros_like(xp)
                span = stride * (lout - 1) + 1
                for k in range(K):
                    dxp[:, k:k + span:stride] += dcols[..., k]
                dx = dxp[:, left:left + L]
            return dx, dw
    else:
        # stride 1: one contiguous GEMM per tap over the flattened padded batch
        xflat = np.ascontiguousarray(xp).reshape(B * Lp, cin)
        y = np.zeros((B, lout, cout), dtype=np.result_type(xp, w))
        for k in range(K):
            y += (xflat @ w[k]).reshape(B, Lp, cout)[:, k:k + lout]

        def grads_xw(g):
            # g laid out on the padded grid; rows past each sample's lout stay zero
            gflat = np.zeros((B, Lp, cout), dtype=g.dtype)
            gflat[:, :lout] = g
            gflat = gflat.reshape(B * Lp, cout)
            n = B * Lp
            dw = np.empty_like(w) if kernel.requires_grad else None
            dxflat = np.zeros_like(xflat) if x.requires_grad else None
            for k in range(K):
                if dw is not None:
                    dw[k] = xflat[k:].T @ gflat[:n - k]
                if dxflat is not None:
                    dxflat[k:] += gflat[:n - k] @ w[k].T
            dx = dxflat.reshape(B, Lp, cin)[:, left:left + L] if dxflat is not None else None
            return dx, dw

    if bias is not None:
        y += bias.data
        parents = (x, kernel, bias)

        def back(g):
            dx, dw = grads_xw(g)
            return dx, dw, g.sum(axis=(0, 1))
    else:
        parents = (x, kernel)

        def back(g):
            return grads_xw(g)

    return _result(y, parents, back)


# ---------------------------------------------------------------- normalization


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over the (batch, length) axes.

    ``running_mean``/``running_var`` are plain arrays updated in place in
    training mode as ``(1 - momentum) * old + momentum * batch`` (the running
    variance uses the unbiased batch estimate).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    C = x.dims[-1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if np.shape(arr) != (C,):
            raise ShapeMismatch(f"batch_norm: {name} has dims {np.shape(arr)}, expected ({C},)")
    axes = tuple(range(x.data.ndim - 1))
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if momentum:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        n = None
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            else:
                dx = dxhat * inv
        return dx, dgamma, dbeta

    return _result(y, (x, gamma, beta), back)


# ---------------------------------------------------------------- pooling / head


def max_pool1d(x, k, stride=None):
    """Valid max pooling along the length axis; ties route to the earliest index."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    if x.data.ndim != 3:
        raise ShapeMismatch(f"max_pool1d expects [B,L,C], got {x.dims}")
    B, L, C = x.dims
    if k > L:
        raise ShapeMismatch(f"max_pool1d: window {k} longer than input {L}")
    lout = (L - k) // stride + 1
    win = sliding_window_view(x.data, k, axis=1)[:, ::stride][:, :lout]  # (B, lout, C, k)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        dx = np.zeros_like(x.data)
        span = stride * (lout - 1) + 1
        for j in range(k):
            dx[:, j:j + span:stride] += np.where(idx == j, g, 0.0)
        return (dx,)

    return _result(y, (x,), back)


def global_avg_pool(x):
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"global_avg_pool expects [B,L,C], got {x.dims}")
    L = x.dims[1]
    return _result(x.data.mean(axis=1), (x,),
                   lambda g: (np.repeat(g[:, None, :] / L, L, axis=1),))


def dense(x, w, b=None):
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.dims[1] != w.dims[0]:
        raise ShapeMismatch(f"dense: x{x.dims} @ W{w.dims}")
    y = x.data @ w.data
    if b is None:
        return _result(y, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    b = _as_tensor(b)
    if b.dims != (w.dims[1],):
        raise ShapeMismatch(f"dense: bias dims {b.dims} != ({w.dims[1]},)")
    return _result(y + b.data, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def concat_channels(xs):
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ShapeMismatch("concat_channels needs at least one tensor")
    lead = xs[0].dims[:-1]
    for t in xs[1:]:
        if t.dims[:-1] != lead:
            raise ShapeMismatch(f"concat_channels: {t.dims} incompatible with leading dims {lead}")
    widths = [t.dims[-1] for t in xs]
    bounds = np.cumsum([0] + widths)
    y = np.concatenate([t.data for t in xs], axis=-1)
    return _result(y, xs, lambda g: tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs))))


def slice_channels(x, start, stop):
    x = _as_tensor(x)
    C = x.dims[-1]
    if not 0 <= start < stop <= C:
        raise ShapeMismatch(f"slice_channels: [{start}, {stop}) outside {C} channels")

    def back(g):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = g
        return (dx,)

    return _result(x.data[..., start:stop].copy(), (x,), back)


def reshape(x, dims):
    x = _as_tensor(x)
    return _result(x.data.reshape(dims), (x,), lambda g: (g.reshape(x.dims),))
