"""Differentiable operations.

Every op computes its forward with numpy and hands a closure for the vector-Jacobian
product to :func:`make_result`. Backward closures only compute gradients for inputs
that require them, so frozen weights cost nothing on the way back.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor, get_default_dtype, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data + b.data

    def backward(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return make_result("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data - b.data

    def backward(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return make_result("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    out = a.data * b.data

    def backward(g):
        return (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return make_result("mul", out, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    d2 = d * d  # d**3 via pow is ~30x slower than two multiplies
    inner = _SQRT_2_OVER_PI * (d + 0.044715 * d2 * d)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * d2)
        local = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner
        return (g * local,)

    return make_result("gelu", out.astype(d.dtype, copy=False), (x,), backward)


# --- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def _pad_pairs(padding) -> tuple[tuple[int, int], tuple[int, int]]:
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    (pt, pb), (pl, pr) = padding
    return (int(pt), int(pb)), (int(pl), int(pr))


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation (no kernel flip), NCHW layout, im2col formulation.

    ``padding`` is an int or ``((top, bottom), (left, right))``. The output size
    ``(H + pads - kh) / stride + 1`` must come out integral.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    (pt, pb), (pl, pr) = _pad_pairs(padding)
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigurationError(
            f"conv2d output size not integral: ({hp}-{kh})/{stride}, ({wp}-{kw})/{stride}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    padded = pt or pb or pl or pr
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if padded else x.data
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    cols2 = cols.reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols2 @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gx = gw = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            gw = (g2.T @ cols2).reshape(weight.shape)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt : pt + h, pl : pl + w] if padded else gxp
        return gx, gw

    return make_result("conv2d", np.ascontiguousarray(out), (x, weight), backward)


def depthwise_xcorr(kernel: Tensor, x: Tensor) -> Tensor:
    """Per-channel valid cross-correlation: ``kernel`` (N,C,kh,kw) slides over ``x`` (N,C,H,W)."""
    kernel, x = as_tensor(kernel), as_tensor(x)
    if kernel.ndim != 4 or x.ndim != 4:
        raise DimensionError(f"xcorr expects 4-D operands, got {kernel.shape} and {x.shape}")
    if kernel.shape[:2] != x.shape[:2]:
        raise DimensionError(f"xcorr batch/channel mismatch: {kernel.shape} vs {x.shape}")
    kh, kw = kernel.shape[2:]
    h, w = x.shape[2:]
    if kh > h or kw > w:
        raise DimensionError(f"xcorr kernel {kernel.shape} larger than search map {x.shape}")
    ho, wo = h - kh + 1, w - kw + 1
    kd, xd = kernel.data, x.data
    out = np.zeros(x.shape[:2] + (ho, wo), dtype=xd.dtype)
    for p in range(kh):
        for q in range(kw):
            out += kd[:, :, p : p + 1, q : q + 1] * xd[:, :, p : p + ho, q : q + wo]

    def backward(g):
        gk = gx = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for p in range(kh):
                for q in range(kw):
                    gk[:, :, p, q] = np.einsum("ncij,ncij->nc", g, xd[:, :, p : p + ho, q : q + wo])
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for p in range(kh):
                for q in range(kw):
                    gx[:, :, p : p + ho, q : q + wo] += kd[:, :, p : p + 1, q : q + 1] * g
        return gk, gx

    return make_result("xcorr", out, (kernel, x), backward)


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the interpolation weights for output sample i (half-pixel centers)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes (align_corners=False)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ry = _bilinear_matrix(h, out_h, x.dtype)
    rx = _bilinear_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return make_result("resize_bilinear", out, (x,), backward)


# --- normalisation / probabilities -------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result("layer_norm", out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", y, (x,), backward)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over every leading position.

    ``logits`` has shape (..., V); ``targets`` holds integer ids of shape (...).
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {t.shape} do not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    ft = t.reshape(-1)
    lsm = log_softmax(flat)
    count = max(ft.size, 1)
    loss = -lsm[np.arange(ft.size), ft].sum() / count
    out = np.asarray(loss, dtype=logits.dtype)

    def backward(g):
        p = np.exp(lsm)
        p[np.arange(ft.size), ft] -= 1.0
        return ((p * (g / count)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return make_result("cross_entropy", out, (logits,), backward)


# --- indexing / shape --------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return make_result("embedding", out, (table,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result("reshape", out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return make_result("transpose", out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return make_result("concat", out, tensors, backward)


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_result("slice", np.array(out, copy=True), (x,), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)
