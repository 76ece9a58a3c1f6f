"""Primitive differentiable ops.

Every function takes Tensors and/or plain numpy arrays, computes the forward
value with numpy, and registers a backward closure on the active tape. Plain
arrays are constants: they never receive gradients. All image-like operands
are channel-first (C, H, W); matmul and the normalization ops also accept
2-D token matrices.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .engine import Tensor, make_node, value_of


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def stop_gradient(x) -> np.ndarray:
    """Detach: the returned array participates as a constant."""
    return np.array(value_of(x))


# ---------------------------------------------------------------------------
# elementwise and broadcasting arithmetic


def add(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    out = np.add(av, bv)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(_unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            b.accumulate(_unbroadcast(g, bv.shape))

    return make_node(out, bwd)


def sub(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    out = np.subtract(av, bv)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(_unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            b.accumulate(-_unbroadcast(g, bv.shape))

    return make_node(out, bwd)


def mul(a, b) -> Tensor:
    av, bv = value_of(a), value_of(b)
    out = np.multiply(av, bv)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Tensor):
            b.accumulate(_unbroadcast(g * av, bv.shape))

    return make_node(out, bwd)


def neg(a) -> Tensor:
    av = value_of(a)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(-g)

    return make_node(-av, bwd)


def scalar_mul(a, s: float) -> Tensor:
    av = value_of(a)
    s = float(s)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(g * s)

    return make_node(av * s, bwd)


def scalar_add(a, s: float) -> Tensor:
    av = value_of(a)
    s = float(s)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(g)

    return make_node(av + s, bwd)


def absolute(a) -> Tensor:
    av = value_of(a)
    sign = np.sign(av)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(g * sign)

    return make_node(np.abs(av), bwd)


def square(a) -> Tensor:
    av = value_of(a)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(g * (2.0 * av))

    return make_node(av * av, bwd)


def pow_const(a, exponent: float) -> Tensor:
    """x ** e for non-negative x; subgradient 0 where x == 0."""
    av = value_of(a)
    e = float(exponent)
    if av.min() < 0.0:
        raise FloatingPointError("pow_const requires non-negative input")
    with np.errstate(divide="ignore"):
        out = np.power(av, e)  # non-finite results are trapped by make_node

    def bwd(g):
        if isinstance(a, Tensor):
            deriv = np.where(av > 0.0, e * np.power(np.maximum(av, 1e-30), e - 1.0), 0.0)
            a.accumulate(g * deriv.astype(av.dtype))

    return make_node(out, bwd)


def clamp_min(a, floor: float) -> Tensor:
    av = value_of(a)
    floor = float(floor)
    keep = av >= floor

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(g * keep.astype(av.dtype))

    return make_node(np.maximum(av, floor), bwd)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    av = value_of(a)
    pos = av >= 0.0

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(g * np.where(pos, 1.0, slope).astype(av.dtype))

    return make_node(np.where(pos, av, slope * av), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if isinstance(a, Tensor):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a.accumulate(np.broadcast_to(gg, av.shape).astype(av.dtype))

    return make_node(np.asarray(out), bwd)


def mean_all(a) -> Tensor:
    av = value_of(a)
    inv = 1.0 / av.size

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(np.full(av.shape, float(g) * inv, dtype=av.dtype))

    return make_node(np.asarray(av.mean()), bwd)


def reshape(a, shape) -> Tensor:
    av = value_of(a)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(g.reshape(av.shape))

    return make_node(av.reshape(shape), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    vals = [value_of(p) for p in parts]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for part, piece in zip(parts, pieces):
            if isinstance(part, Tensor):
                part.accumulate(piece)

    return make_node(np.concatenate(vals, axis=axis), bwd)


def permute(a, axes) -> Tensor:
    """Reorder array axes; gradient applies the inverse ordering."""
    av = value_of(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(av, axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(np.ascontiguousarray(np.transpose(g, inverse)))

    return make_node(out, bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    av = value_of(a)
    idx = [slice(None)] * av.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        if isinstance(a, Tensor):
            full = np.zeros(av.shape, dtype=av.dtype)
            full[idx] = g
            a.accumulate(full)

    return make_node(av[idx].copy(), bwd)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    aeff = av.T if transpose_a else av
    beff = bv.T if transpose_b else bv
    out = aeff @ beff

    def bwd(g):
        if isinstance(a, Tensor):
            ga = g @ beff.T
            a.accumulate(ga.T if transpose_a else ga)
        if isinstance(b, Tensor):
            gb = aeff.T @ g
            b.accumulate(gb.T if transpose_b else gb)

    return make_node(out, bwd)


def softmax(a, axis: int = -1) -> Tensor:
    av = value_of(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if isinstance(a, Tensor):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate((y * (g - dot)).astype(av.dtype))

    return make_node(y, bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    av, gv, bv = value_of(a), value_of(gain), value_of(bias)
    mu = av.mean(axis=-1, keepdims=True)
    centered = av - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xn = centered * inv_std
    out = xn * gv + bv

    def bwd(g):
        if isinstance(gain, Tensor):
            gain.accumulate(_unbroadcast(g * xn, gv.shape))
        if isinstance(bias, Tensor):
            bias.accumulate(_unbroadcast(g, bv.shape))
        if isinstance(a, Tensor):
            gxn = g * gv
            term = gxn - gxn.mean(axis=-1, keepdims=True) \
                - xn * (gxn * xn).mean(axis=-1, keepdims=True)
            a.accumulate((term * inv_std).astype(av.dtype))

    return make_node(out, bwd)


# ---------------------------------------------------------------------------
# convolutions and resampling


def _fold_pad_edges(gpad: np.ndarray, p: int) -> np.ndarray:
    """Fold gradients of replicate padding back onto the border pixels."""
    if p == 0:
        return gpad
    gpad[:, :, p] += gpad[:, :, :p].sum(axis=2)
    gpad[:, :, -p - 1] += gpad[:, :, -p:].sum(axis=2)
    g = gpad[:, :, p:-p]
    g[:, p, :] += g[:, :p, :].sum(axis=1)
    g[:, -p - 1, :] += g[:, -p:, :].sum(axis=1)
    return g[:, p:-p, :].copy()


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 convolution with replicate padding, odd square kernels.

    x: (Cin, H, W); w: (Cout, Cin, k, k); b: (Cout,) or None.
    """
    xv, wv = value_of(x), value_of(w)
    cout, cin, k, k2 = wv.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd square, got {wv.shape}")
    if xv.ndim != 3 or xv.shape[0] != cin:
        raise ShapeError(f"conv2d input {xv.shape} does not match weight {wv.shape}")
    _, h, wd = xv.shape
    p = k // 2
    xp = np.pad(xv, ((0, 0), (p, p), (p, p)), mode="edge") if p else xv
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * k * k, h * wd)
    out = (wv.reshape(cout, -1) @ cols).reshape(cout, h, wd)
    if b is not None:
        out = out + value_of(b)[:, None, None]

    def bwd(g):
        g2 = g.reshape(cout, h * wd)
        if isinstance(w, Tensor):
            w.accumulate((g2 @ cols.T).reshape(wv.shape))
        if b is not None and isinstance(b, Tensor):
            b.accumulate(g.sum(axis=(1, 2)))
        if isinstance(x, Tensor):
            gcols = (wv.reshape(cout, -1).T @ g2).reshape(cin, k, k, h, wd)
            gpad = np.zeros(xp.shape, dtype=xv.dtype)
            for dy in range(k):
                for dx in range(k):
                    gpad[:, dy:dy + h, dx:dx + wd] += gcols[:, dy, dx]
            x.accumulate(_fold_pad_edges(gpad, p))

    return make_node(out, bwd)


def transposed_conv2d(x, w, b=None) -> Tensor:
    """2x upsampling transposed convolution, kernel 2, stride 2.

    x: (Cin, H, W); w: (Cin, Cout, 2, 2); b: (Cout,) or None. Output
    (Cout, 2H, 2W); with kernel == stride the taps do not overlap.
    """
    xv, wv = value_of(x), value_of(w)
    cin, cout, k, k2 = wv.shape
    if k != 2 or k2 != 2:
        raise ShapeError(f"transposed_conv2d expects 2x2 kernels, got {wv.shape}")
    if xv.ndim != 3 or xv.shape[0] != cin:
        raise ShapeError(f"transposed_conv2d input {xv.shape} does not match weight {wv.shape}")
    _, h, wd = xv.shape
    t = np.tensordot(xv, wv, axes=([0], [0]))          # (H, W, Cout, 2, 2)
    out = np.ascontiguousarray(t.transpose(2, 0, 3, 1, 4)).reshape(cout, 2 * h, 2 * wd)
    if b is not None:
        out = out + value_of(b)[:, None, None]

    def bwd(g):
        g5 = g.reshape(cout, h, 2, wd, 2).transpose(1, 3, 0, 2, 4)  # (H, W, Cout, 2, 2)
        if isinstance(w, Tensor):
            w.accumulate(np.tensordot(xv, g5, axes=([1, 2], [0, 1])))
        if b is not None and isinstance(b, Tensor):
            b.accumulate(g.sum(axis=(1, 2)))
        if isinstance(x, Tensor):
            gx = np.tensordot(g5, wv, axes=([2, 3, 4], [1, 2, 3]))  # (H, W, Cin)
            x.accumulate(np.ascontiguousarray(gx.transpose(2, 0, 1)))

    return make_node(out, bwd)


def avg_pool_2x2(x) -> Tensor:
    xv = value_of(x)
    c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x2 needs even spatial dims, got {xv.shape}")
    out = xv.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bwd(g):
        if isinstance(x, Tensor):
            gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
            x.accumulate(gx.astype(xv.dtype))

    return make_node(out, bwd)


def nearest_upsample_2x(x) -> Tensor:
    xv = value_of(x)
    c, h, w = xv.shape
    out = np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2)

    def bwd(g):
        if isinstance(x, Tensor):
            x.accumulate(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return make_node(out, bwd)


# ---------------------------------------------------------------------------
# losses


def masked_l1(pred, target, mask, normalize: bool = True) -> Tensor:
    """L1 summed over channels, averaged (or summed) over mask-selected pixels.

    pred, target: (C, H, W); mask: (H, W) or (1, H, W) of {0, 1}. In
    normalize mode the denominator is the masked-pixel count; an all-zero
    mask yields exactly zero loss.
    """
    pv, tv, mv = value_of(pred), value_of(target), value_of(mask)
    if mv.ndim == 2:
        mv = mv[None]
    if pv.shape != tv.shape:
        raise ShapeError(f"masked_l1 shapes differ: {pv.shape} vs {tv.shape}")
    if mv.shape != (1,) + pv.shape[1:]:
        raise ShapeError(f"mask shape {mv.shape} does not match image {pv.shape}")
    diff = pv - tv
    if normalize:
        count = float(mv.sum())
        denom = count if count > 0 else 1.0
    else:
        denom = 1.0
    loss = np.abs(diff * mv).sum() / denom
    sign = np.sign(diff) * mv

    def bwd(g):
        scale = float(g) / denom
        if isinstance(pred, Tensor):
            pred.accumulate((sign * scale).astype(pv.dtype))
        if isinstance(target, Tensor):
            target.accumulate((-sign * scale).astype(tv.dtype))

    return make_node(np.asarray(loss, dtype=pv.dtype), bwd)


def l1_mean(pred, target) -> Tensor:
    """Plain L1: mean over every element of |pred - target|."""
    return mean_all(absolute(sub(pred, target)))
