"""Differentiable kernels over NCHW tensors.

Every kernel computes in the dtype of its inputs, records a backward closure
through :func:`~p2at.tensor.make_node`, and reports its analytic FLOP count:
convolutions ``2*N*C_out*H_out*W_out*(C_in/groups)*kh*kw``, matmuls
``2*batch*M*K*N``, everything else one op per output element. Pure data
movement (reshape, transpose, concat, gather) is free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor, add_flops, as_tensor, branch, make_node

IGNORE_INDEX = 255


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class KernelSpec:
    """Window geometry shared by convolution and pooling."""

    kernel_size: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel_size", _pair(self.kernel_size))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if min(self.kernel_size) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError(f"invalid kernel spec {self}")
        if self.groups < 1:
            raise ConfigError(f"groups must be positive, got {self.groups}")

    def output_size(self, h, w):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph < kh or w + 2 * pw < kw or ho < 1 or wo < 1:
            raise DimensionError(
                f"kernel {self.kernel_size} does not fit input {h}x{w} with padding {self.padding}"
            )
        return ho, wo


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _operand(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _window(xp, i, j, ho, wo, sh, sw):
    return xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _unpad(x, ph, pw):
    h, w = x.shape[2], x.shape[3]
    return x[:, :, ph : h - ph, pw : w - pw]


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = as_tensor(a) if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    out = a.data + b.data
    add_flops("add", out.size)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(out, (a, b), back, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    out = a.data - b.data
    add_flops("sub", out.size)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(out, (a, b), back, "sub")


def mul(a, b):
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        out = a.data * c
        add_flops("mul", out.size)
        return make_node(out, (a,), lambda g: (g * c,), "scale")
    out = a.data * b.data
    add_flops("mul", out.size)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(out, (a, b), back, "mul")


def sum(x, axis=None, keepdims=False):  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (x,), back, "sum")


def mean(x, axis=None, keepdims=False):
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    shape = x.shape
    count = x.size // max(out.size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_node(out, (x,), back, "mean")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_node(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors, axis=1):
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"cannot concatenate shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_node(out, tensors, back, "concat")


def take(table, index, axis=-1):
    """Gather ``table`` entries along ``axis`` with an integer index array."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % table.ndim
    out = np.take(table.data, index, axis=axis)
    shape = table.shape

    def back(g):
        grad = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(grad, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (grad,)

    return make_node(out, (table,), back, "take")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x):
    xd = x.data
    active = branch("relu", lambda: xd > 0)
    out = xd * active
    add_flops("relu", out.size)
    return make_node(out, (x,), lambda g: (g * active,), "relu")


def sigmoid(x):
    xd = x.data
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + z), z / (1 + z)).astype(xd.dtype, copy=False)
    add_flops("sigmoid", out.size)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def hardswish(x):
    xd = x.data
    # 0: x < -3 (zero), 1: quadratic middle, 2: x > 3 (identity)
    region = branch("hardswish", lambda: (xd >= -3).astype(np.int8) + (xd > 3))
    out = np.where(region == 1, xd * (xd + 3) / 6, np.where(region == 2, xd, 0)).astype(xd.dtype, copy=False)
    add_flops("hardswish", out.size)

    def back(g):
        d = np.where(region == 1, (2 * xd + 3) / 6, np.where(region == 2, 1, 0))
        return (g * d.astype(xd.dtype, copy=False),)

    return make_node(out, (x,), back, "hardswish")


def softmax(x, axis=-1):
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    add_flops("softmax", out.size)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), back, "softmax")


def log_softmax(x, axis=-1):
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    add_flops("log_softmax", out.size)

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), back, "log_softmax")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Batched matrix product ``[..., M, K] @ [..., K, N]`` with broadcast batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    add_flops("matmul", 2 * math.prod(batch) * m * k * n)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_node(out, (a, b), back, "matmul")


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation over an NCHW input with an ``(O, C/groups, kh, kw)`` weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    spec = KernelSpec((kh, kw), stride, padding, groups)
    if c % groups or o % groups:
        raise ConfigError(f"groups={groups} must divide in={c} and out={o} channels")
    if cg != c // groups:
        raise DimensionError(f"weight expects {cg * groups} input channels, input has {c}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} does not match {o} output channels")
    ho, wo = spec.output_size(h, w)
    (sh, sw), (ph, pw) = spec.stride, spec.padding
    xd, wd = x.data, weight.data
    og = o // groups
    add_flops("conv2d", 2 * n * o * ho * wo * cg * kh * kw)

    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0 and groups == 1:
        x3 = xd.reshape(n, c, h * w)
        w2 = wd.reshape(o, c)
        out = np.matmul(w2, x3).reshape(n, o, h, w)

        def back_main(g):
            g3 = g.reshape(n, o, h * w)
            gx = np.matmul(w2.T, g3).reshape(xd.shape)
            gw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(wd.shape)
            return gx, gw

    elif cg == 1 and og == 1:
        xp = _pad(xd, ph, pw)
        out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, ho, wo, sh, sw) * wd[:, 0, i, j][:, None, None]

        def back_main(g):
            gxp = np.zeros_like(xp)
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    win = _window(xp, i, j, ho, wo, sh, sw)
                    gw[:, 0, i, j] = (g * win).sum(axis=(0, 2, 3))
                    _window(gxp, i, j, ho, wo, sh, sw)[...] += g * wd[:, 0, i, j][:, None, None]
            return _unpad(gxp, ph, pw), gw

    else:
        xp = _pad(xd, ph, pw)
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _window(xp, i, j, ho, wo, sh, sw)
        cols = cols.reshape(n, groups, cg * kh * kw, ho * wo)
        wr = wd.reshape(groups, og, cg * kh * kw)
        out = np.matmul(wr, cols).reshape(n, o, ho, wo)

        def back_main(g):
            g4 = g.reshape(n, groups, og, ho * wo)
            gw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wd.shape)
            gcols = np.matmul(wr.transpose(0, 2, 1), g4).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    _window(gxp, i, j, ho, wo, sh, sw)[...] += gcols[:, :, i, j]
            return _unpad(gxp, ph, pw), gw

    if bias is not None:
        out += bias.data[:, None, None]
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def back(g):
        gx, gw = back_main(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node(out, parents, back, "conv2d")


# ---------------------------------------------------------------------------
# pooling and resampling


def _valid_counts(size, k, s, p, n_out):
    starts = np.arange(n_out) * s - p
    return np.minimum(starts + k, size) - np.maximum(starts, 0)


def avg_pool2d(x, kernel_size, stride=None, padding=0):
    """Average pooling whose divisor counts only in-bounds elements."""
    spec = KernelSpec(kernel_size, stride if stride is not None else kernel_size, padding)
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel_size, spec.stride, spec.padding
    if 2 * ph > kh or 2 * pw > kw:
        raise ConfigError(f"padding {spec.padding} exceeds half of kernel {spec.kernel_size}")
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    xd = x.data
    xp = _pad(xd, ph, pw)
    # separable window sum: columns first, then rows; float32 inputs accumulate in float64
    # so a constant window sums and divides back to the same constant exactly
    acc = np.float64 if xd.dtype == np.float32 else xd.dtype
    rows = np.zeros((n, c, xp.shape[2], wo), dtype=acc)
    for j in range(kw):
        rows += xp[:, :, :, j : j + sw * (wo - 1) + 1 : sw]
    total = np.zeros((n, c, ho, wo), dtype=acc)
    for i in range(kh):
        total += rows[:, :, i : i + sh * (ho - 1) + 1 : sh, :]
    count = np.outer(_valid_counts(h, kh, sh, ph, ho), _valid_counts(w, kw, sw, pw, wo)).astype(acc)
    out = (total / count).astype(xd.dtype)
    add_flops("avg_pool2d", out.size)

    def back(g):
        gs = (g / count).astype(xd.dtype)
        grows = np.zeros(rows.shape, dtype=xd.dtype)
        for i in range(kh):
            grows[:, :, i : i + sh * (ho - 1) + 1 : sh, :] += gs
        gxp = np.zeros_like(xp)
        for j in range(kw):
            gxp[:, :, :, j : j + sw * (wo - 1) + 1 : sw] += grows
        return (np.ascontiguousarray(_unpad(gxp, ph, pw)),)

    return make_node(out, (x,), back, "avg_pool2d")


def global_avg_pool2d(x):
    """Mean over the spatial axes, keeping them as size 1."""
    xd = x.data
    out = xd.mean(axis=(2, 3), keepdims=True)
    add_flops("global_avg_pool2d", out.size)
    hw = xd.shape[2] * xd.shape[3]

    def back(g):
        return (np.broadcast_to(g / hw, xd.shape).copy(),)

    return make_node(out, (x,), back, "global_avg_pool2d")


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic ``(n_out, n_in)`` linear-interpolation matrix, half-pixel centers."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"interpolation sizes must be positive, got {n_in} -> {n_out}")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def bilinear_upsample(x, out_h, out_w):
    """Bilinear resize of an NCHW tensor to ``out_h x out_w``."""
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects NCHW, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    xd = x.data
    ah = interp_matrix(h, out_h, xd.dtype)
    aw = interp_matrix(w, out_w, xd.dtype)
    out = np.matmul(np.matmul(ah, xd), aw.T)
    add_flops("bilinear_upsample", out.size)

    def back(g):
        return (np.matmul(ah.T, np.matmul(g, aw)),)

    return make_node(out, (x,), back, "bilinear_upsample")


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over ``(N, H, W)``.

    In training mode the batch statistics normalize the input and the
    ``running_mean``/``running_var`` numpy arrays are updated in place
    (unbiased variance). In eval mode the running statistics are used.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise DimensionError(f"batch_norm parameters must have length {c}")
    m = n * h * w
    if m == 0:
        raise ConfigError("batch_norm over zero elements")
    xd = x.data
    gd = gamma.data[:, None, None]
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype, copy=False)
    xhat = (xd - mu[:, None, None]) * inv[:, None, None]
    out = xhat * gd + beta.data[:, None, None]
    add_flops("batch_norm", out.size)

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gd
        if training:
            gx = (
                gxhat
                - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            ) * inv[:, None, None]
        else:
            gx = gxhat * inv[:, None, None]
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), back, "batch_norm")


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits, mask, ignore_index=IGNORE_INDEX):
    """Mean per-pixel negative log-likelihood over non-ignored pixels.

    Returns an exact zero (with zero gradient) when every pixel is ignored.
    """
    if logits.ndim != 4:
        raise DimensionError(f"logits must be NxKxHxW, got {logits.shape}")
    n, k, h, w = logits.shape
    mask = np.asarray(mask)
    if mask.shape != (n, h, w):
        raise DimensionError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    valid = mask != ignore_index
    bad = valid & ((mask < 0) | (mask >= k))
    if bad.any():
        raise DataError(f"mask contains label {int(mask[bad][0])} outside [0, {k}) and != {ignore_index}")
    xd = logits.data
    count = int(valid.sum())
    if count == 0:
        return make_node(np.zeros((), dtype=xd.dtype), (logits,), lambda g: (np.zeros_like(xd),), "cross_entropy")
    shifted = xd - xd.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.where(valid, mask, 0).astype(np.intp)
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    loss = np.asarray(-(picked * valid).sum() / count, dtype=xd.dtype)

    def back(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1, axis=1)
        grad *= (valid / count)[:, None].astype(xd.dtype)
        return (grad * g,)

    return make_node(loss, (logits,), back, "cross_entropy")
