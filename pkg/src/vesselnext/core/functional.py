"""Differentiable primitives over float64 arrays.

Each op validates its operand shapes, computes the forward value with
numpy, reports MACs for conv/matmul, and, when an input participates in
gradients and a tape is open, records a backward closure.

Broadcasting is deliberately restricted to python scalars and a last-axis
bias vector; everything else must match shapes exactly.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import meter
from .tensor import ShapeError, Tensor, active_tape

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _result(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if out.requires_grad and tape is not None:
        tape.record(out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    """a + b for same-shape tensors, a python scalar, or a last-axis bias."""
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        a, b = b, a
    if isinstance(b, (int, float)):
        c = float(b)

        def bwd(g):
            _accum(a, g)

        return _result(a.data + c, (a,), bwd)
    if a.shape == b.shape:

        def bwd(g):
            _accum(a, g)
            _accum(b, g)

        return _result(a.data + b.data, (a, b), bwd)
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n_lead = a.ndim - 1

        def bwd(g):
            _accum(a, g)
            _accum(b, g.sum(axis=tuple(range(n_lead))))

        return _result(a.data + b.data, (a, b), bwd)
    raise ShapeError(
        f"add supports equal shapes, scalars or last-axis bias; got {a.shape} and {b.shape}"
    )


def mul(a, b) -> Tensor:
    """a * b for same-shape tensors or a python scalar."""
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        a, b = b, a
    if isinstance(b, (int, float)):
        c = float(b)

        def bwd(g):
            _accum(a, g * c)

        return _result(a.data * c, (a,), bwd)
    if a.shape != b.shape:
        raise ShapeError(f"mul requires equal shapes or a scalar; got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _result(ad * bd, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _result(-a.data, (a,), bwd)


def sub(a, b) -> Tensor:
    if isinstance(a, (int, float)):
        return add(neg(b), a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    return add(a, neg(b))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.

    Either both operands share identical leading dimensions, or b is a
    plain matrix applied to every row of a (the linear-layer case).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        ad, bd = a.data, b.data
        meter.add_macs(int(np.prod(a.shape[:-1])) * b.shape[-1])

        def bwd(g):
            _accum(a, g @ bd.T)
            _accum(b, ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

        return _result(ad @ bd, (a, b), bwd)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    batch = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    meter.add_macs(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def bwd(g):
        _accum(a, g @ bd.swapaxes(-1, -2))
        _accum(b, ad.swapaxes(-1, -2) @ g)

    return _result(ad @ bd, (a, b), bwd)


def conv2d(x: Tensor, w: Tensor, bias=None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding and grouped channels.

    x: (B, Cin, H, W); w: (Cout, Cin/groups, kh, kw); bias: (Cout,) or None.
    groups == Cin gives a depthwise convolution.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape} and {w.shape}")
    B, cin, H, W = x.shape
    cout, cg, kh, kw = w.shape
    if groups < 1 or cin % groups != 0:
        raise ShapeError(f"channels {cin} not divisible by groups {groups}")
    if cout % groups != 0:
        raise ShapeError(f"output channels {cout} not divisible by groups {groups}")
    if cg != cin // groups:
        raise ShapeError(f"kernel expects {cg} channels/group, input provides {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    span_h, span_w = H + 2 * pad - kh, W + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"non-integral output extent for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    H2, W2 = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    wing = win.reshape(B, groups, cg, H2, W2, kh, kw)
    wg = w.data.reshape(groups, cout // groups, cg, kh, kw)
    out = np.einsum("bgihwkl,goikl->bgohw", wing, wg, optimize=True)
    out = np.ascontiguousarray(out.reshape(B, cout, H2, W2))
    if bias is not None:
        out += bias.data[None, :, None, None]
    meter.add_macs(B * cout * H2 * W2 * cg * kh * kw)

    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        gg = g.reshape(B, groups, cout // groups, H2, W2)
        if w.requires_grad:
            dw = np.einsum("bgihwkl,bgohw->goikl", wing, gg, optimize=True)
            _accum(w, dw.reshape(cout, cg, kh, kw))
        if x.requires_grad:
            dcols = np.einsum("goikl,bgohw->bgihwkl", wg, gg, optimize=True)
            dcols = dcols.reshape(B, cin, H2, W2, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * H2:stride, j:j + stride * W2:stride] += \
                        dcols[:, :, :, :, i, j]
            _accum(x, dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _result(out, inputs, bwd)


# ---------------------------------------------------------------------------
# normalization and activations


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channels {C}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _result(out, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF gelu: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    xd = x.data

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        _accum(x, g * (phi + xd * pdf))

    return _result(xd * phi, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(x, g * y * (1.0 - y))

    return _result(y, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    xd = x.data

    def bwd(g):
        _accum(x, g / xd)

    return _result(np.log(xd), (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the open interval."""
    inside = (x.data > lo) & (x.data < hi)

    def bwd(g):
        _accum(x, g * inside)

    return _result(np.clip(x.data, lo, hi), (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows form a probability simplex."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _result(y, (x,), bwd)


# ---------------------------------------------------------------------------
# spatial ops


def _resize_axis_plan(n_in: int, n_out: int):
    # half-pixel centers (align_corners=false), clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation of (B, C, H, W) maps to (B, C, out_h, out_w)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects (B,C,H,W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size {out_h}x{out_w} must be positive")
    B, C, H, W = x.shape
    r0, r1, fr = _resize_axis_plan(H, out_h)
    c0, c1, fc = _resize_axis_plan(W, out_w)
    fr_col, fc_row = fr[:, None], fc[None, :]
    w00 = (1 - fr_col) * (1 - fc_row)
    w01 = (1 - fr_col) * fc_row
    w10 = fr_col * (1 - fc_row)
    w11 = fr_col * fc_row
    xd = x.data
    out = (w00 * xd[:, :, r0[:, None], c0[None, :]]
           + w01 * xd[:, :, r0[:, None], c1[None, :]]
           + w10 * xd[:, :, r1[:, None], c0[None, :]]
           + w11 * xd[:, :, r1[:, None], c1[None, :]])

    corners = ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11))

    def bwd(g):
        gf = g.reshape(B * C, out_h * out_w)
        dxf = np.zeros((B * C, H * W))
        for ri, ci, wgt in corners:
            lin = (ri[:, None] * W + ci[None, :]).ravel()
            np.add.at(dxf, (slice(None), lin), gf * wgt.ravel())
        _accum(x, dxf.reshape(B, C, H, W))

    return _result(out, (x,), bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first element."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even extents, got {H}x{W}")
    xr = x.data.reshape(B, C, H // 2, 2, W // 2, 2)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        d4 = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(d4, idx[..., None], g[..., None], axis=-1)
        d4 = d4.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, d4.reshape(B, C, H, W))

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = x.shape

    def bwd(g):
        _accum(x, g.reshape(orig))

    return _result(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        dx = np.zeros(x.shape)
        dx[sl] = g
        _accum(x, dx)

    return _result(x.data[sl], (x,), bwd)


# ---------------------------------------------------------------------------
# reductions (always 64-bit accumulation)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the array-library idiom
    shape = x.shape

    def bwd(g):
        _accum(x, np.broadcast_to(g, shape))

    return _result(np.asarray(x.data.sum(dtype=np.float64)), (x,), bwd)


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def bwd(g):
        _accum(x, np.broadcast_to(g / n, shape))

    return _result(np.asarray(x.data.mean(dtype=np.float64)), (x,), bwd)
