"""Differentiable primitives recorded on a :class:`~sifdal.tape.Tape`.

Spatial ops accept a single feature map ``(C, H, W)`` or a batch
``(N, C, H, W)``; the channel axis is always ``ndim - 3``.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DimensionError
from .tape import Node, lift


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ContractError("at least one operand must be a tape node")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b):
    tape = _tape_of(a, b)
    a, b = lift(tape, a), lift(tape, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return tape, a, b


def add(a, b) -> Node:
    tape, a, b = _binary(a, b)
    return tape.record("add", (a, b), a.value + b.value,
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    tape, a, b = _binary(a, b)
    return tape.record("sub", (a, b), a.value - b.value,
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return tape.record("mul", (a, b), av * bv,
                       lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Node:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record("div", (a, b), out,
                       lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def neg(x: Node) -> Node:
    return x.tape.record("neg", (x,), -x.value, lambda g: (-g,))


def square(x: Node) -> Node:
    xv = x.value
    return x.tape.record("square", (x,), xv * xv, lambda g: (2.0 * g * xv,))


def sqrt(x: Node) -> Node:
    out = np.sqrt(x.value)
    return x.tape.record("sqrt", (x,), out, lambda g: (0.5 * g / out,))


def log(x: Node) -> Node:
    xv = x.value
    return x.tape.record("log", (x,), np.log(xv), lambda g: (g / xv,))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return x.tape.record("exp", (x,), out, lambda g: (g * out,))


def relu(x: Node) -> Node:
    # gradient at exactly 0 is 0
    mask = x.value > 0
    x.tape.kinks.append(mask)
    return x.tape.record("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def clip(x: Node, lo: float, hi: float) -> Node:
    # gradient passes inside [lo, hi] and is 0 where the value was clamped
    mask = (x.value >= lo) & (x.value <= hi)
    x.tape.kinks.append(mask)
    return x.tape.record("clip", (x,), np.clip(x.value, lo, hi), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return x.tape.record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softplus(x: Node) -> Node:
    """log(1 + exp(x)), evaluated without overflow."""
    xv = x.value
    out = np.logaddexp(0.0, xv)
    sig = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return x.tape.record("softplus", (x,), out, lambda g: (g * sig,))


def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.record("sum", (x,), out, vjp)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    shape = x.shape
    out = np.mean(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return x.tape.record("mean", (x,), out, vjp)


def reshape(x: Node, shape) -> Node:
    old = x.shape
    return x.tape.record("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Node, axes=None) -> Node:
    inv = None if axes is None else tuple(np.argsort(axes))
    return x.tape.record("transpose", (x,), np.transpose(x.value, axes), lambda g: (np.transpose(g, inv),))


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = lift(tape, a), lift(tape, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return tape.record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def softmax(x: Node, axis=-1) -> Node:
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return x.tape.record("softmax", (x,), out, vjp)


def log_softmax(x: Node, axis=-1) -> Node:
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return x.tape.record("log_softmax", (x,), out, vjp)


def _check_spatial(x: Node, op: str):
    if x.ndim not in (3, 4):
        raise DimensionError(f"{op}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def conv2d(x: Node, kernels_: Node, stride: int = 1) -> Node:
    """3x3 cross-correlation with zero padding 1; output size ceil(H/stride)."""
    _check_spatial(x, "conv2d")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv2d: stride must be 1 or 2, got {stride}")
    w = kernels_.value
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernels must be (C_out, C_in, 3, 3), got {w.shape}")
    single = x.ndim == 3
    xv = x.value[None] if single else x.value
    if xv.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input has {xv.shape[1]} channels, kernels expect {w.shape[1]} "
                             f"(input {x.shape}, kernels {w.shape})")
    h, wd = xv.shape[2], xv.shape[3]
    if h < 1 or wd < 1:
        raise DimensionError(f"conv2d: empty spatial size {h}x{wd}")
    xc = np.ascontiguousarray(xv)
    wc = np.ascontiguousarray(w)
    out = kernels.conv3x3_forward(xc, wc, stride)

    def vjp(g):
        gb = np.ascontiguousarray(g[None] if single else g)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv3x3_backward_input(gb, wc, stride, h, wd)
            gx = gx[0] if single else gx
        if kernels_.requires_grad:
            gw = kernels.conv3x3_backward_weight(gb, xc, stride)
        return gx, gw

    return x.tape.record("conv2d", (x, kernels_), out[0] if single else out, vjp)


def conv1x1(x: Node, weight: Node) -> Node:
    """Per-pixel channel mixing with ``weight`` of shape (C_out, C_in)."""
    _check_spatial(x, "conv1x1")
    w = weight.value
    ca = x.ndim - 3
    if w.ndim != 2 or w.shape[1] != x.shape[ca]:
        raise DimensionError(f"conv1x1: input {x.shape} incompatible with weight {w.shape}")
    xv = x.value
    sub = "nchw" if x.ndim == 4 else "chw"
    osub = sub.replace("c", "o")
    out = np.einsum(f"oc,{sub}->{osub}", w, xv, optimize=True)

    def vjp(g):
        gx = np.einsum(f"oc,{osub}->{sub}", w, g, optimize=True) if x.requires_grad else None
        gw = np.einsum(f"{osub},{sub}->oc", g, xv, optimize=True) if weight.requires_grad else None
        return gx, gw

    return x.tape.record("conv1x1", (x, weight), out, vjp)


def add_channel_bias(x: Node, bias: Node) -> Node:
    _check_spatial(x, "add_channel_bias")
    ca = x.ndim - 3
    if bias.shape != (x.shape[ca],):
        raise DimensionError(f"bias shape {bias.shape} does not match {x.shape[ca]} channels")
    shape = (-1, 1, 1)
    axes = (0, 2, 3) if x.ndim == 4 else (1, 2)
    return x.tape.record("add_channel_bias", (x, bias), x.value + bias.value.reshape(shape),
                         lambda g: (g, g.sum(axis=axes)))


def global_avg_pool(x: Node) -> Node:
    """Mean over the two spatial axes: (N,C,H,W) -> (N,C), (C,H,W) -> (C,)."""
    _check_spatial(x, "global_avg_pool")
    shape = x.shape
    hw = shape[-1] * shape[-2]
    return x.tape.record("global_avg_pool", (x,), x.value.mean(axis=(-2, -1)),
                         lambda g: (np.broadcast_to(g[..., None, None] / hw, shape).copy(),))


def max_pool2(x: Node) -> Node:
    """2x2 max pooling with stride 2; H and W must be even."""
    _check_spatial(x, "max_pool2")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2: spatial size must be even, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.value.reshape(*lead, h // 2, 2, w // 2, 2).swapaxes(-3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = np.argmax(blocks, axis=-1)
    x.tape.kinks.append(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(*lead, h // 2, w // 2, 2, 2).swapaxes(-3, -2).reshape(*lead, h, w)
        return (gx,)

    return x.tape.record("max_pool2", (x,), out, vjp)


def upsample2(x: Node) -> Node:
    """Nearest-neighbour 2x upsampling."""
    _check_spatial(x, "upsample2")
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    out = np.repeat(np.repeat(x.value, 2, axis=-2), 2, axis=-1)
    return x.tape.record("upsample2", (x,), out,
                         lambda g: (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),))


def split_channels(x: Node) -> tuple[Node, Node]:
    """Split the channel axis into equal first and second halves."""
    _check_spatial(x, "split_channels")
    ca = x.ndim - 3
    c = x.shape[ca]
    if c % 2:
        raise ConfigurationError(f"split_channels: channel count must be even, got {c}")
    half = c // 2
    first = np.take(x.value, np.arange(half), axis=ca)
    second = np.take(x.value, np.arange(half, c), axis=ca)
    zeros = np.zeros(first.shape)
    t = x.tape
    a = t.record("split_first", (x,), first, lambda g: (np.concatenate([g, zeros], axis=ca),))
    b = t.record("split_second", (x,), second, lambda g: (np.concatenate([zeros, g], axis=ca),))
    return a, b


def concat_channels(a: Node, b: Node) -> Node:
    _check_spatial(a, "concat_channels")
    ca = a.ndim - 3
    if a.ndim != b.ndim or a.shape[:ca] != b.shape[:ca] or a.shape[ca + 1:] != b.shape[ca + 1:]:
        raise DimensionError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    n = a.shape[ca]
    out = np.concatenate([a.value, b.value], axis=ca)
    return a.tape.record("concat_channels", (a, b), out,
                         lambda g: (np.take(g, np.arange(n), axis=ca),
                                    np.take(g, np.arange(n, g.shape[ca]), axis=ca)))


def scale_channels(x: Node, mask) -> Node:
    """Multiply each channel by a constant factor (used for ablation zeroing)."""
    m = np.asarray(mask, dtype=np.float64)
    shape = (-1, 1, 1)
    return x.tape.record("scale_channels", (x,), x.value * m.reshape(shape), lambda g: (g * m.reshape(shape),))


def grad_reverse(x: Node, scale: float = 1.0) -> Node:
    """Identity forward; backward multiplies the upstream gradient by ``-scale``."""
    if not scale > 0:
        raise ContractError(f"grad_reverse: scale must be positive, got {scale}")
    return x.tape.record("grad_reverse", (x,), x.value, lambda g: (-scale * g,))


def mean_of(nodes) -> Node:
    """Arithmetic mean of several same-shaped nodes."""
    nodes = list(nodes)
    acc = nodes[0]
    for n in nodes[1:]:
        acc = acc + n
    return acc / float(len(nodes))
