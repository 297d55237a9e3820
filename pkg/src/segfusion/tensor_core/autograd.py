"""A small reverse-mode tape over the kernels in :mod:`kernels`.

Usage::

    tape = Tape()
    W = tape.param(np.eye(3), "W")
    y = linear(x, W, b)          # x, b may be plain arrays
    loss = sum_all(y)
    grads = tape.backward(loss)  # {"W": array, ...}

Only the operations defined in this module are differentiable. Plain
numpy arrays passed as operands are treated as constants.
"""

import numpy as np

from . import kernels as K

__all__ = [
    "Tape",
    "Node",
    "linear",
    "matmul",
    "add",
    "mul",
    "scale",
    "weighted_add",
    "conv1d",
    "adain",
    "adaptive_avg_pool1d",
    "adaptive_avg_pool2d",
    "concat",
    "swapaxes",
    "reshape",
    "repeat_tokens",
    "broadcast_to",
    "gelu",
    "mean",
    "sum_all",
    "gather_rows",
    "softmax_cross_entropy",
]


class Node:
    __slots__ = ("value", "tape", "requires_grad", "name")

    def __init__(self, value, tape, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed operations.

    Each record is ``(output, inputs, vjp)`` where ``vjp(g)`` maps the
    output cotangent to one cotangent per input (``None`` to skip).
    """

    def __init__(self):
        self.records = []
        self.params = {}

    def param(self, value, name, trainable=True):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = Node(K.as_tensor(value), self, requires_grad=trainable, name=name)
        self.params[name] = node
        return node

    def const(self, value):
        return Node(K.as_tensor(value), self)

    def record(self, value, inputs, vjp):
        out = Node(value, self, requires_grad=any(n.requires_grad for n in inputs))
        if out.requires_grad:
            self.records.append((out, inputs, vjp))
        return out

    def backward(self, loss):
        """Gradients of the scalar ``loss`` for every parameter on this tape.

        Frozen parameters receive an all-zero gradient so the result always
        has one entry per parameter, shaped like the parameter.
        """
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for node, gi in zip(inputs, vjp(g)):
                if gi is None or not node.requires_grad:
                    continue
                key = id(node)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for name, p in self.params.items():
            g = grads.get(id(p)) if p.requires_grad else None
            result[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.value.shape)
        return result


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _lift(tape, x):
    return x if isinstance(x, Node) else tape.const(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def linear(x, W, b):
    tape = _tape_of(x, W, b)
    x, W, b = (_lift(tape, v) for v in (x, W, b))
    out = K.linear_forward(x.value, W.value, b.value)
    xv, Wv = x.value, W.value

    def vjp(g):
        gx = g @ Wv.T if x.requires_grad else None
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return tape.record(out, (x, W, b), vjp)


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av @ bv

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return tape.record(out, (a, b), vjp)


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return tape.record(av * bv, (a, b), vjp)


def scale(x, c):
    """Multiply by a python constant."""
    return x.tape.record(x.value * c, (x,), lambda g: (g * c,))


def weighted_add(base, alpha, extra):
    """``base + alpha * extra`` with a scalar ``alpha``."""
    tape = _tape_of(base, alpha, extra)
    base, alpha, extra = (_lift(tape, v) for v in (base, alpha, extra))
    if base.value.shape != extra.value.shape:
        raise K.DimensionError(f"weighted_add: {base.value.shape} != {extra.value.shape}")
    av, ev = alpha.value, extra.value
    out = base.value + av * ev

    def vjp(g):
        ga = np.sum(g * ev).reshape(av.shape) if alpha.requires_grad else None
        ge = g * av if extra.requires_grad else None
        return g, ga, ge

    return tape.record(out, (base, alpha, extra), vjp)


def conv1d(x, Kw, bias, stride=1, pad=0):
    tape = _tape_of(x, Kw, bias)
    x, Kw, bias = (_lift(tape, v) for v in (x, Kw, bias))
    xv, kv = x.value, Kw.value
    out = K.conv1d_forward(xv, kv, bias.value, stride, pad)
    k = kv.shape[2]
    win = K.conv1d_windows(xv, k, stride, pad)
    L_out = out.shape[-1]

    def vjp(g):
        gK = None
        if Kw.requires_grad:
            w2 = win.reshape((-1,) + win.shape[-3:])
            gK = np.tensordot(g.reshape((-1,) + g.shape[-2:]), w2, axes=([0, 2], [0, 2]))
        gb = g.reshape(-1, g.shape[-2], g.shape[-1]).sum(axis=(0, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.swapaxes(np.tensordot(g, kv, axes=([-2], [0])), -3, -2)
            L = xv.shape[-1]
            gpad = np.zeros(xv.shape[:-1] + (L + 2 * pad,))
            span = stride * (L_out - 1) + 1
            for j in range(k):
                gpad[..., j : j + span : stride] += gwin[..., j]
            gx = gpad[..., pad : pad + L]
        return gx, gK, gb

    return tape.record(out, (x, Kw, bias), vjp)


def adain(content, style, eps=1e-5):
    tape = _tape_of(content, style)
    content, style = _lift(tape, content), _lift(tape, style)
    cv, sv = content.value, style.value
    out = K.adain(cv, sv, eps)
    T = cv.shape[-2]
    mu_c, sd_c = K.adain_stats(cv)
    mu_s, sd_s = K.adain_stats(sv)
    a = 1.0 / (sd_c + eps)
    xhat = (cv - mu_c) * a

    def vjp(g):
        gc = gs = None
        if content.requires_grad:
            gx = g * sd_s
            g_sd = -np.sum(gx * (cv - mu_c), axis=-2, keepdims=True) * a * a
            # d sd/d x_t = (x_t - mu) / (T sd); zero where sd == 0
            inv = np.divide(1.0, T * sd_c, out=np.zeros_like(sd_c), where=sd_c > 0)
            gc = a * (gx - gx.mean(axis=-2, keepdims=True)) + g_sd * (cv - mu_c) * inv
        if style.requires_grad:
            g_mu = g.sum(axis=-2, keepdims=True)
            g_sd = np.sum(g * xhat, axis=-2, keepdims=True)
            inv = np.divide(1.0, T * sd_s, out=np.zeros_like(sd_s), where=sd_s > 0)
            gs = g_mu / T + g_sd * (sv - mu_s) * inv
        return gc, gs

    return tape.record(out, (content, style), vjp)


def adaptive_avg_pool1d(x, out_len):
    M = K.pool_matrix(x.value.shape[-1], out_len)
    return x.tape.record(x.value @ M.T, (x,), lambda g: (g @ M,))


def adaptive_avg_pool2d(x, out_h, out_w=None):
    out_w = out_h if out_w is None else out_w
    Mh = K.pool_matrix(x.value.shape[-2], out_h)
    Mw = K.pool_matrix(x.value.shape[-1], out_w)
    return x.tape.record(K.adaptive_avg_pool2d(x.value, out_h, out_w), (x,), lambda g: (Mh.T @ g @ Mw,))


def concat(xs, axis):
    tape = _tape_of(*xs)
    xs = [_lift(tape, v) for v in xs]
    vals = [v.value for v in xs]
    ref = vals[0]
    ax = axis % ref.ndim
    for v in vals[1:]:
        if v.ndim != ref.ndim or any(
            v.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise K.DimensionError(
                f"concat along axis {axis}: shapes {[tuple(u.shape) for u in vals]}"
            )
    out = np.concatenate(vals, axis=ax)
    cuts = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return tape.record(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=ax)))


def swapaxes(x, a1, a2):
    return x.tape.record(np.swapaxes(x.value, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def reshape(x, shape):
    old = x.value.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def repeat_tokens(x, n):
    """``[..., d] -> [..., n, d]`` by repeating along a new token axis."""
    xv = x.value
    out = np.repeat(xv[..., None, :], n, axis=-2)
    return x.tape.record(out, (x,), lambda g: (g.sum(axis=-2),))


def broadcast_to(x, shape):
    xv = x.value
    return x.tape.record(np.broadcast_to(xv, shape).copy(), (x,), lambda g: (_unbroadcast(g, xv.shape),))


def gelu(x):
    xv = x.value
    return x.tape.record(K.gelu(xv), (x,), lambda g: (g * K.gelu_grad(xv),))


def mean(x, axis):
    xv = x.value
    n = xv.shape[axis]
    out = xv.mean(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape) / n,)

    return x.tape.record(out, (x,), vjp)


def sum_all(x):
    xv = x.value
    return x.tape.record(np.sum(xv).reshape(()), (x,), lambda g: (np.full(xv.shape, float(g)),))


def gather_rows(table, idx):
    """``table[idx]`` for an integer index array (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    tv = table.value

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (gt,)

    return table.tape.record(tv[idx], (table,), vjp)


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits[N, V]``."""
    targets = np.asarray(targets, dtype=np.int64)
    zv = logits.value
    if zv.ndim != 2 or targets.shape != (zv.shape[0],):
        raise K.DimensionError(f"cross-entropy: logits{zv.shape} vs targets{targets.shape}")
    logp = K.log_softmax(zv)
    N = zv.shape[0]
    loss = -logp[np.arange(N), targets].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(N), targets] -= 1.0
        return (p * (float(g) / N),)

    return logits.tape.record(np.asarray(loss).reshape(()), (logits,), vjp)
