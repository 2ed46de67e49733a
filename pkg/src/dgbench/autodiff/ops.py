"""Op kinds understood by :class:`~dgbench.autodiff.core.Graph`.

Every op is a pure forward function on numpy arrays that also returns
whatever its vector-Jacobian product needs.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, register_op


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise ---------------------------------------------------------------


def _add_fwd(attrs, a, b):
    _broadcast_shape("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(attrs, ctx, g):
    return _unbroadcast(g, ctx[0]), _unbroadcast(g, ctx[1])


def _sub_fwd(attrs, a, b):
    _broadcast_shape("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(attrs, ctx, g):
    return _unbroadcast(g, ctx[0]), _unbroadcast(-g, ctx[1])


def _mul_fwd(attrs, a, b):
    _broadcast_shape("mul", a, b)
    return a * b, (a, b)


def _mul_bwd(attrs, ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(attrs, x):
    return attrs["c"] * x, None


def _scale_bwd(attrs, ctx, g):
    return (attrs["c"] * g,)


def _exp_fwd(attrs, x):
    out = np.exp(x)
    return out, out


def _exp_bwd(attrs, ctx, g):
    return (g * ctx,)


def _relu_fwd(attrs, x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def _relu_bwd(attrs, ctx, g):
    return (np.where(ctx, g, 0.0),)


def _dropout_fwd(attrs, x):
    p, mask = attrs["p"], attrs["mask"]
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    factor = np.where(mask, 1.0 / (1.0 - p), 0.0)
    return x * factor, factor


def _dropout_bwd(attrs, ctx, g):
    return (g * ctx,)


# linear algebra ------------------------------------------------------------


def _matmul_fwd(attrs, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _matmul_bwd(attrs, ctx, g):
    a, b = ctx
    return g @ b.T, a.T @ g


def _bias_add_fwd(attrs, x, b):
    axis = attrs["axis"] % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias_add: bias shape {b.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = b.shape[0]
    return x + b.reshape(shape), axis


def _bias_add_bwd(attrs, ctx, g):
    axes = tuple(i for i in range(g.ndim) if i != ctx)
    return g, g.sum(axis=axes)


def _transpose_fwd(attrs, x):
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return x.T.copy(), None


def _transpose_bwd(attrs, ctx, g):
    return (g.T,)


def _reshape_fwd(attrs, x):
    try:
        return x.reshape(attrs["shape"]), x.shape
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {attrs['shape']}") from None


def _reshape_bwd(attrs, ctx, g):
    return (g.reshape(ctx),)


# convolution ---------------------------------------------------------------


def same_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for "same" convolution.

    Output size is ``ceil(n / stride)``; when the total padding is odd the
    extra row/column goes before the input.
    """
    out = math.ceil(n / stride)
    total = max((out - 1) * stride + k - n, 0)
    before = total - total // 2
    return out, before, total - before


def _im2col(xp, kh, kw, s, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _conv2d_fwd(attrs, x, w):
    s = attrs["stride"]
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be (batch, channels, height, width), got {x.shape}")
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, top, bottom = same_padding(h, kh, s)
    wo, left, right = same_padding(wd, kw, s)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    out = _im2col(xp, kh, kw, s, ho, wo) @ w.reshape(o, -1).T
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    # keep the padded input rather than the columns: 9x less memory on the tape
    return np.ascontiguousarray(out), (xp, w, (top, left), (h, wd), (ho, wo))


def _conv2d_bwd(attrs, ctx, g):
    s = attrs["stride"]
    xp, w, (top, left), (h, wd), (ho, wo) = ctx
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g2.T @ _im2col(xp, kh, kw, s, ho, wo)).reshape(w.shape)
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros(xp.shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dxp[:, :, top : top + h, left : left + wd]), dw


# normalisation / pooling ---------------------------------------------------


def _group_norm_fwd(attrs, x, gamma, beta):
    groups, eps = attrs["groups"], attrs["eps"]
    if x.ndim < 2 or x.shape[1] % groups:
        raise ShapeError(f"group_norm: {x.shape[1] if x.ndim > 1 else '?'} channels not divisible into {groups} groups")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} != ({c},)")
    n = x.shape[0]
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (xhat, inv, gamma, bshape)


def _group_norm_bwd(attrs, ctx, g):
    xhat, inv, gamma, bshape = ctx
    groups = attrs["groups"]
    axes = tuple(i for i in range(g.ndim) if i != 1)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    n = g.shape[0]
    dxhat = (g * gamma.reshape(bshape)).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return dx.reshape(g.shape), dgamma, dbeta


def _gap_fwd(attrs, x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def _gap_bwd(attrs, ctx, g):
    n, c, h, w = ctx
    return (np.broadcast_to(g[:, :, None, None] / (h * w), ctx).copy(),)


# softmax family ------------------------------------------------------------


def _log_softmax(x):
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _log_softmax_fwd(attrs, x):
    out = _log_softmax(x)
    return out, out


def _log_softmax_bwd(attrs, ctx, g):
    return (g - np.exp(ctx) * g.sum(axis=-1, keepdims=True),)


def _cross_entropy_fwd(attrs, logits):
    labels, weights = attrs["labels"], attrs.get("weights")
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lsm = _log_softmax(logits)
    nll = -lsm[np.arange(len(labels)), labels]
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != labels.shape:
            raise ShapeError(f"cross_entropy: weights {weights.shape} vs labels {labels.shape}")
        nll = nll * weights
    return nll.mean(), (lsm, labels, weights)


def _cross_entropy_bwd(attrs, ctx, g):
    lsm, labels, weights = ctx
    n = len(labels)
    d = np.exp(lsm)
    d[np.arange(n), labels] -= 1.0
    if weights is not None:
        d *= weights[:, None]
    return (d * (g / n),)


# reductions and structure --------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape)


def _sum_fwd(attrs, x):
    return x.sum(axis=attrs["axis"], keepdims=attrs["keepdims"]), x.shape


def _sum_bwd(attrs, ctx, g):
    return (_expand_reduced(g, ctx, attrs["axis"], attrs["keepdims"]).copy(),)


def _mean_fwd(attrs, x):
    return x.mean(axis=attrs["axis"], keepdims=attrs["keepdims"]), x.shape


def _mean_bwd(attrs, ctx, g):
    axis = attrs["axis"]
    if axis is None:
        count = int(np.prod(ctx))
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([ctx[a] for a in axes]))
    return (_expand_reduced(g, ctx, axis, attrs["keepdims"]) / count,)


def _concat_fwd(attrs, *xs):
    try:
        out = np.concatenate(xs, axis=attrs["axis"])
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    return out, [x.shape[attrs["axis"]] for x in xs]


def _concat_bwd(attrs, ctx, g):
    bounds = np.cumsum(ctx)[:-1]
    return tuple(np.split(g, bounds, axis=attrs["axis"]))


def _rows_fwd(attrs, x):
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"rows: slice [{start}:{stop}] out of range for {x.shape}")
    return x[start:stop].copy(), x.shape


def _rows_bwd(attrs, ctx, g):
    dx = np.zeros(ctx)
    dx[attrs["start"] : attrs["stop"]] = g
    return (dx,)


def _sqf_fwd(attrs, x):
    return np.sum(x * x), x


def _sqf_bwd(attrs, ctx, g):
    return (2.0 * g * ctx,)


register_op("add", _add_fwd, _add_bwd)
register_op("sub", _sub_fwd, _sub_bwd)
register_op("mul", _mul_fwd, _mul_bwd)
register_op("scale", _scale_fwd, _scale_bwd)
register_op("exp", _exp_fwd, _exp_bwd)
register_op("relu", _relu_fwd, _relu_bwd)
register_op("dropout", _dropout_fwd, _dropout_bwd)
register_op("matmul", _matmul_fwd, _matmul_bwd)
register_op("bias_add", _bias_add_fwd, _bias_add_bwd)
register_op("transpose", _transpose_fwd, _transpose_bwd)
register_op("reshape", _reshape_fwd, _reshape_bwd)
register_op("conv2d", _conv2d_fwd, _conv2d_bwd)
register_op("group_norm", _group_norm_fwd, _group_norm_bwd)
register_op("global_avg_pool", _gap_fwd, _gap_bwd)
register_op("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
register_op("cross_entropy", _cross_entropy_fwd, _cross_entropy_bwd)
register_op("sum", _sum_fwd, _sum_bwd)
register_op("mean", _mean_fwd, _mean_bwd)
register_op("concat", _concat_fwd, _concat_bwd)
register_op("rows", _rows_fwd, _rows_bwd)
register_op("sq_frobenius", _sqf_fwd, _sqf_bwd)
