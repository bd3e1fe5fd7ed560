"""Differentiable operations over :class:`~voxelweave.tensor.Tensor`.

Shape discipline is strict: elementwise binary ops require identical shapes
(use :func:`broadcast_to` explicitly), dtypes must match, and convolution
geometry is validated up front. Gradients for every op listed in
``DIFFERENTIABLE_OPS`` are covered by the finite-difference suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Tensor

# Every op with a registered gradient; the gradcheck suite must cover all of
# these (enforced by a test).
DIFFERENTIABLE_OPS = (
    "add", "sub", "mul", "div",
    "add_scalar", "mul_scalar", "pow_scalar",
    "log", "exp",
    "relu", "leaky_relu",
    "min_elem", "max_elem",
    "concat", "softmax",
    "sum", "mean",
    "reshape", "transpose", "broadcast_to",
    "conv2d", "conv3d", "conv3d_transposed",
    "bilinear_sample2d",
)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor.result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor.result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return Tensor.result(a.data * b.data, "mul", (a, b),
                         lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * out / b.data
        return ga, gb

    return Tensor.result(out, "div", (a, b), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return Tensor.result(a.data + s, "add_scalar", (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return Tensor.result(a.data * s, "mul_scalar", (a,), lambda g: (g * s,))


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    """a ** exponent for a scalar exponent. For exponent < 1 requires a > 0."""
    e = float(exponent)
    out = a.data ** a.data.dtype.type(e)

    def backward(g):
        if e == 0.0:
            return (np.zeros_like(a.data),)
        if e == 1.0:
            return (g,)
        return (g * e * a.data ** a.data.dtype.type(e - 1.0),)

    return Tensor.result(out, "pow_scalar", (a,), backward)


def log(a: Tensor) -> Tensor:
    return Tensor.result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.result(out, "exp", (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return Tensor.result(out, "relu", (a,),
                         lambda g: (g * (a.data > 0),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    s = a.data.dtype.type(slope)
    out = np.where(a.data > 0, a.data, a.data * s)

    def backward(g):
        return (g * np.where(a.data > 0, a.data.dtype.type(1), s),)

    return Tensor.result(out, "leaky_relu", (a,), backward)


def min_elem(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    _check_same(a, b, "min_elem")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        return g * take_a, g * ~take_a

    return Tensor.result(out, "min_elem", (a, b), backward)


def max_elem(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the second argument."""
    _check_same(a, b, "max_elem")
    take_a = a.data > b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        return g * take_a, g * ~take_a

    return Tensor.result(out, "max_elem", (a, b), backward)


# -- shape ops -----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.data.shape} as {shape}")
    out = a.data.reshape(shape)
    return Tensor.result(out, "reshape", (a,),
                         lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"transpose: bad axes {axes} for ndim {a.data.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return Tensor.result(out, "transpose", (a,),
                         lambda g: (np.transpose(g, inverse),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {a.data.shape} -> {shape}") from exc
    src = a.data.shape

    def backward(g):
        extra = len(shape) - len(src)
        axes = list(range(extra))
        for i, d in enumerate(src):
            if d == 1 and shape[extra + i] != 1:
                axes.append(extra + i)
        if axes:
            g = g.sum(axis=tuple(axes), keepdims=False)
        return (g.reshape(src),)

    return Tensor.result(out, "broadcast_to", (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise DimensionError("concat: rank mismatch")
        if t.data.dtype != tensors[0].data.dtype:
            raise ContractError("concat: dtype mismatch")
        for ax in range(ndim):
            if ax != axis and t.data.shape[ax] != tensors[0].data.shape[ax]:
                raise DimensionError(
                    f"concat: shapes {np.array([x.shape for x in tensors]).tolist()} "
                    f"differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.result(out, "concat", tuple(tensors), backward)


# -- reductions ----------------------------------------------------------------

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    if axis is not None:
        axis = (axis,) if isinstance(axis, int) else tuple(axis)
    out = np.add.reduce(a.data, axis=axis) if axis is not None else a.data.sum()
    out = np.asarray(out, dtype=a.data.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        keep = list(a.data.shape)
        for ax in axis:
            keep[ax % a.data.ndim] = 1
        return (np.broadcast_to(g.reshape(keep), a.data.shape).copy(),)

    return Tensor.result(out, "sum", (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype),)

    return Tensor.result(out, "mean", (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor.result(out, "softmax", (a,), backward)


# -- convolution geometry --------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise DimensionError(
            f"convolution output collapses: in={size} k={k} s={stride} p={padding}")
    return out


def _check_conv_args(stride: int, padding: int) -> tuple[int, int]:
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"padding must be >= 0, got {padding}")
    return stride, padding


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) with kernel (Co,C,kh,kw)."""
    stride, padding = _check_conv_args(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: ranks {x.data.ndim}/{kernel.data.ndim}, want 4/4")
    if x.data.dtype != kernel.data.dtype:
        raise ContractError("conv2d: dtype mismatch")
    n, c, h, w = x.data.shape
    co, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ck}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    out = np.tensordot(win, kernel.data, axes=((1, 4, 5), (1, 2, 3)))
    out = np.ascontiguousarray(np.moveaxis(out, 3, 1))

    def backward(g):
        gk = np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))
        gwin = np.tensordot(g, kernel.data, axes=((1,), (0,)))  # (N,Ho,Wo,C,kh,kw)
        gwin = np.moveaxis(gwin, 3, 1)  # (N,C,Ho,Wo,kh,kw)
        gxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                gxp[:, :, a:a + stride * (ho - 1) + 1:stride,
                    b:b + stride * (wo - 1) + 1:stride] += gwin[:, :, :, :, a, b]
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gk

    return Tensor.result(out, "conv2d", (x, kernel), backward)


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,D,H,W) with kernel (Co,C,kd,kh,kw)."""
    stride, padding = _check_conv_args(stride, padding)
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise DimensionError(f"conv3d: ranks {x.data.ndim}/{kernel.data.ndim}, want 5/5")
    if x.data.dtype != kernel.data.dtype:
        raise ContractError("conv3d: dtype mismatch")
    n, c, d, h, w = x.data.shape
    co, ck, kd, kh, kw = kernel.data.shape
    if ck != c:
        raise DimensionError(f"conv3d: input has {c} channels, kernel expects {ck}")
    do = _conv_out_size(d, kd, stride, padding)
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)

    pad = ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2)
    xp = np.pad(x.data, pad)
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :do, :ho, :wo]
    out = np.tensordot(win, kernel.data, axes=((1, 5, 6, 7), (1, 2, 3, 4)))
    out = np.ascontiguousarray(np.moveaxis(out, 4, 1))

    def backward(g):
        gk = np.tensordot(g, win, axes=((0, 2, 3, 4), (0, 2, 3, 4)))
        gwin = np.tensordot(g, kernel.data, axes=((1,), (0,)))  # (N,Do,Ho,Wo,C,kd,kh,kw)
        gwin = np.moveaxis(gwin, 4, 1)  # (N,C,Do,Ho,Wo,kd,kh,kw)
        gxp = np.zeros_like(xp)
        for a in range(kd):
            for b in range(kh):
                for cc in range(kw):
                    gxp[:, :,
                        a:a + stride * (do - 1) + 1:stride,
                        b:b + stride * (ho - 1) + 1:stride,
                        cc:cc + stride * (wo - 1) + 1:stride] += gwin[:, :, :, :, :, a, b, cc]
        gx = gxp[:, :, padding:padding + d, padding:padding + h, padding:padding + w]
        return gx, gk

    return Tensor.result(out, "conv3d", (x, kernel), backward)


def conv3d_transposed(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d`: (N,A,D,H,W) x (A,B,kd,kh,kw) -> (N,B,Dt,Ht,Wt).

    Output spatial size is (in-1)*stride - 2*padding + k. Forward here is the
    exact transpose of conv3d's input-gradient scatter, so the pair satisfies
    <conv3d(x,k), y> == <x, conv3d_transposed(y,k)> for matching geometry.
    """
    stride, padding = _check_conv_args(stride, padding)
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise DimensionError("conv3d_transposed: want rank-5 input and kernel")
    if x.data.dtype != kernel.data.dtype:
        raise ContractError("conv3d_transposed: dtype mismatch")
    n, a_ch, d, h, w = x.data.shape
    ak, b_ch, kd, kh, kw = kernel.data.shape
    if ak != a_ch:
        raise DimensionError(
            f"conv3d_transposed: input has {a_ch} channels, kernel expects {ak}")
    dt = (d - 1) * stride - 2 * padding + kd
    ht = (h - 1) * stride - 2 * padding + kh
    wt = (w - 1) * stride - 2 * padding + kw
    if min(dt, ht, wt) < 1:
        raise DimensionError("conv3d_transposed: output collapses")

    contrib = np.tensordot(x.data, kernel.data, axes=((1,), (0,)))  # (N,D,H,W,B,kd,kh,kw)
    contrib = np.moveaxis(contrib, 4, 1)  # (N,B,D,H,W,kd,kh,kw)
    ypad = np.zeros((n, b_ch, dt + 2 * padding, ht + 2 * padding, wt + 2 * padding),
                    dtype=x.data.dtype)
    for a in range(kd):
        for b in range(kh):
            for cc in range(kw):
                ypad[:, :,
                     a:a + stride * (d - 1) + 1:stride,
                     b:b + stride * (h - 1) + 1:stride,
                     cc:cc + stride * (w - 1) + 1:stride] += contrib[:, :, :, :, :, a, b, cc]
    out = np.ascontiguousarray(
        ypad[:, :, padding:padding + dt, padding:padding + ht, padding:padding + wt])

    def backward(g):
        pad = ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2)
        gp = np.pad(g, pad)
        win = sliding_window_view(gp, (kd, kh, kw), axis=(2, 3, 4))
        win = win[:, :, ::stride, ::stride, ::stride][:, :, :d, :h, :w]
        gx = np.tensordot(win, kernel.data, axes=((1, 5, 6, 7), (1, 2, 3, 4)))
        gx = np.ascontiguousarray(np.moveaxis(gx, 4, 1))
        gk = np.tensordot(x.data, win, axes=((0, 2, 3, 4), (0, 2, 3, 4)))
        return gx, gk

    return Tensor.result(out, "conv3d_transposed", (x, kernel), backward)


# -- sampling --------------------------------------------------------------------

def bilinear_sample2d(features: Tensor, coords: np.ndarray) -> Tensor:
    """Sample (C,H,W) features at (M,2) pixel coords (u along W, v along H).

    Coordinates outside [0, W-1] x [0, H-1] yield zeros. Gradients flow to the
    features only; coords are a constant.
    """
    if features.data.ndim != 3:
        raise DimensionError(f"bilinear_sample2d: features rank {features.data.ndim}, want 3")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"bilinear_sample2d: coords shape {coords.shape}, want (M,2)")
    if not np.all(np.isfinite(coords)):
        raise ContractError("bilinear_sample2d: non-finite coordinates")

    c, hgt, wid = features.data.shape
    u, v = coords[:, 0], coords[:, 1]
    valid = (u >= 0) & (u <= wid - 1) & (v >= 0) & (v <= hgt - 1)

    uc = np.clip(u, 0.0, wid - 1.0)
    vc = np.clip(v, 0.0, hgt - 1.0)
    u0 = np.clip(np.floor(uc).astype(np.int64), 0, max(wid - 2, 0))
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, max(hgt - 2, 0))
    u1 = np.minimum(u0 + 1, wid - 1)
    v1 = np.minimum(v0 + 1, hgt - 1)
    fu = (uc - u0).astype(features.data.dtype)
    fv = (vc - v0).astype(features.data.dtype)

    w00 = (1 - fu) * (1 - fv)
    w01 = fu * (1 - fv)
    w10 = (1 - fu) * fv
    w11 = fu * fv

    flat = features.data.reshape(c, hgt * wid)
    i00 = v0 * wid + u0
    i01 = v0 * wid + u1
    i10 = v1 * wid + u0
    i11 = v1 * wid + u1
    gathered = (flat[:, i00] * w00 + flat[:, i01] * w01
                + flat[:, i10] * w10 + flat[:, i11] * w11)  # (C,M)
    out = np.ascontiguousarray(gathered.T)
    out[~valid] = 0

    def backward(g):
        gv = g[valid]  # (Mv, C)
        idx = np.concatenate([i00[valid], i01[valid], i10[valid], i11[valid]])
        wts = np.concatenate([w00[valid], w01[valid], w10[valid], w11[valid]])
        gf = np.zeros((c, hgt * wid), dtype=features.data.dtype)
        for ch in range(c):
            vals = wts * np.tile(gv[:, ch], 4)
            gf[ch] = np.bincount(idx, weights=vals, minlength=hgt * wid)
        return (gf.reshape(c, hgt, wid),)

    return Tensor.result(out, "bilinear_sample2d", (features,), backward)
