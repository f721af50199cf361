"""Dense tensor kernels on float64 numpy arrays.

Tensors are plain ``numpy.ndarray`` objects in C x H x W layout (an optional
leading batch axis is accepted by ``conv2d`` and ``max_pool2d``).  Every
operation is a pure function; inputs are never modified in place.

Each differentiable kernel has a companion ``*_vjp`` that maps an output
cotangent back to its inputs.  The autodiff module builds on these.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "ShapeError",
    "as_tensor",
    "holes_to_dilation",
    "dilation_to_holes",
    "effective_kernel_size",
    "conv2d",
    "conv2d_vjp",
    "max_pool2d",
    "max_pool2d_vjp",
    "activation",
    "sigmoid",
    "softmax_spatial",
    "softmax_spatial_vjp",
    "elementwise",
    "bilinear_matrix",
    "bilinear_resize",
    "bilinear_resize_vjp",
    "concat_channels",
]


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def holes_to_dilation(holes: int) -> int:
    """``holes`` zeros between taps correspond to dilation ``holes + 1``."""
    if holes < 0:
        raise ValueError(f"holes must be >= 0, got {holes}")
    return holes + 1


def dilation_to_holes(dilation: int) -> int:
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    return dilation - 1


def effective_kernel_size(kernel: int, dilation: int) -> int:
    return kernel + (kernel - 1) * (dilation - 1)


def _same_pads(size: int, k_eff: int, stride: int) -> tuple[int, int]:
    # TF-style: output is ceil(size / stride); odd padding goes bottom/right.
    out = -(-size // stride)
    total = max((out - 1) * stride + k_eff - size, 0)
    return total // 2, total - total // 2


def _pads(h, w, kh, kw, stride, dilation, padding):
    ekh = effective_kernel_size(kh, dilation)
    ekw = effective_kernel_size(kw, dilation)
    if padding == "valid":
        return (0, 0), (0, 0), ekh, ekw
    if padding == "same":
        return _same_pads(h, ekh, stride), _same_pads(w, ekw, stride), ekh, ekw
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int):
    """Strided view of shape (N, C, kh, kw, ho, wo) over a padded batch."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a rank-3 or rank-4 tensor, got shape {x.shape}")


def _conv_geometry(x_shape, w_shape, stride, dilation, padding):
    n, c, h, w = x_shape
    if len(w_shape) != 4:
        raise ShapeError(f"kernel must be (C_out, C_in, kh, kw), got {w_shape}")
    c_out, c_in, kh, kw = w_shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels but kernel expects {c_in}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    (pt, pb), (pl, pr), ekh, ekw = _pads(h, w, kh, kw, stride, dilation, padding)
    hp, wp = h + pt + pb, w + pl + pr
    if ekh > hp or ekw > wp:
        raise ShapeError(
            f"effective kernel {ekh}x{ekw} does not fit padded input {hp}x{wp}"
        )
    ho = (hp - ekh) // stride + 1
    wo = (wp - ekw) // stride + 1
    return (pt, pb, pl, pr), ho, wo


def conv2d(x, kernel, bias=None, stride: int = 1, dilation: int = 1, padding: str = "valid"):
    """2-D cross-correlation with stride, dilation and zero padding.

    ``x`` is C x H x W (or N x C x H x W), ``kernel`` is C_out x C_in x kh x kw
    and ``bias`` has one entry per output channel.  ``padding='same'`` pads
    symmetrically with zeros (extra row/column at the bottom/right) so that
    the output extent is ``ceil(H / stride)``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    xb, squeeze = _as_batch(x)
    (pt, pb, pl, pr), ho, wo = _conv_geometry(xb.shape, kernel.shape, stride, dilation, padding)
    xp = np.pad(xb, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else xb
    xp = np.ascontiguousarray(xp)
    cols = _windows(xp, kernel.shape[2], kernel.shape[3], ho, wo, stride, dilation)
    out = np.einsum("nckluv,ockl->nouv", cols, kernel, optimize=True)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"bias must have shape ({kernel.shape[0]},), got {bias.shape}")
        out = out + bias[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_vjp(g, x, kernel, stride: int = 1, dilation: int = 1, padding: str = "valid"):
    """Cotangents ``(dx, dkernel, dbias)`` for ``conv2d`` given output cotangent ``g``."""
    x = np.asarray(x, dtype=np.float64)
    xb, squeeze = _as_batch(x)
    gb = g[None] if squeeze else g
    kh, kw = kernel.shape[2], kernel.shape[3]
    (pt, pb, pl, pr), ho, wo = _conv_geometry(xb.shape, kernel.shape, stride, dilation, padding)
    xp = np.ascontiguousarray(np.pad(xb, ((0, 0), (0, 0), (pt, pb), (pl, pr))))
    cols = _windows(xp, kh, kw, ho, wo, stride, dilation)
    dkernel = np.einsum("nckluv,nouv->ockl", cols, gb, optimize=True)
    dbias = gb.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for a in range(kh):
        for b in range(kw):
            contrib = np.einsum("oc,nouv->ncuv", kernel[:, :, a, b], gb)
            r0, c0 = a * dilation, b * dilation
            dxp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += contrib
    h, w = xb.shape[2], xb.shape[3]
    dx = dxp[:, :, pt:pt + h, pl:pl + w]
    return (dx[0] if squeeze else dx), dkernel, dbias


def _pool_setup(xb, kernel, stride, dilation, padding):
    n, c, h, w = xb.shape
    if kernel < 1 or stride < 1 or dilation < 1:
        raise ValueError("kernel, stride and dilation must be positive")
    (pt, pb), (pl, pr), ekh, ekw = _pads(h, w, kernel, kernel, stride, dilation, padding)
    xp = np.pad(xb, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    if ekh > xp.shape[2] or ekw > xp.shape[3]:
        raise ShapeError(f"pool window {ekh}x{ekw} larger than input {h}x{w}")
    ho = (xp.shape[2] - ekh) // stride + 1
    wo = (xp.shape[3] - ekw) // stride + 1
    return np.ascontiguousarray(xp), (pt, pl), ho, wo


def max_pool2d(x, kernel: int, stride: int, dilation: int = 1, padding: str = "valid"):
    """Max pooling over ``kernel`` x ``kernel`` windows.

    ``padding='same'`` pads with -inf, so padded cells never win.
    """
    x = np.asarray(x, dtype=np.float64)
    xb, squeeze = _as_batch(x)
    xp, _, ho, wo = _pool_setup(xb, kernel, stride, dilation, padding)
    win = _windows(xp, kernel, kernel, ho, wo, stride, dilation)
    out = win.max(axis=(2, 3))
    return out[0] if squeeze else out


def max_pool2d_argmax(x, kernel: int, stride: int, dilation: int = 1, padding: str = "valid"):
    """Index within the kernel x kernel window of each output's first maximum."""
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64))
    xp, _, ho, wo = _pool_setup(xb, kernel, stride, dilation, padding)
    win = _windows(xp, kernel, kernel, ho, wo, stride, dilation)
    arg = win.reshape(*xb.shape[:2], kernel * kernel, ho, wo).argmax(axis=2)
    return arg[0] if squeeze else arg


def max_pool2d_vjp(g, x, kernel: int, stride: int, dilation: int = 1, padding: str = "valid"):
    """Route ``g`` to the first maximal element of each window."""
    x = np.asarray(x, dtype=np.float64)
    xb, squeeze = _as_batch(x)
    gb = g[None] if squeeze else g
    xp, (pt, pl), ho, wo = _pool_setup(xb, kernel, stride, dilation, padding)
    n, c = xb.shape[:2]
    arg = max_pool2d_argmax(xb, kernel, stride, dilation, padding)
    da, db = np.divmod(arg, kernel)
    rows = da * dilation + (np.arange(ho) * stride)[:, None]
    cols = db * dilation + (np.arange(wo) * stride)[None, :]
    dxp = np.zeros_like(xp)
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dxp, (ni[..., None, None], ci[..., None, None], rows, cols), gb)
    dx = dxp[:, :, pt:pt + xb.shape[2], pl:pl + xb.shape[3]]
    return dx[0] if squeeze else dx


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # Two-branch form avoids overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str):
    """Elementwise ``sigmoid``, ``tanh`` or ``relu``."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_spatial(z):
    """Softmax over all spatial cells of a single-channel map (1 x H x W or H x W)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3 and z.shape[0] != 1:
        raise ShapeError(f"softmax_spatial expects a single channel, got {z.shape}")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_spatial_vjp(g, a):
    """Cotangent of ``softmax_spatial`` given its output ``a``."""
    return a * (g - np.sum(a * g))


def elementwise(a, b, op: str):
    """Elementwise ``add`` or ``mul``.

    For ``mul``, ``b`` may be a 1 x H x W mask applied to every channel of ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if op not in ("add", "mul"):
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        mask_ok = (
            op == "mul" and a.ndim == 3 and b.ndim == 3
            and b.shape[0] == 1 and b.shape[1:] == a.shape[1:]
        )
        if not mask_ok:
            raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} for {op}")
    return a + b if op == "add" else a * b


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out x n_in) with half-pixel centre alignment.

    Source coordinate of output index i is ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("extents must be positive")
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, out_h: int, out_w: int):
    """Resize every channel of a C x H x W tensor to ``out_h`` x ``out_w``."""
    x = np.asarray(x, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extent must be positive, got {out_h}x{out_w}")
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize expects C x H x W, got {x.shape}")
    h, w = x.shape[1:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry = bilinear_matrix(h, out_h)
    rx = bilinear_matrix(w, out_w)
    return np.einsum("ih,chw,jw->cij", ry, x, rx, optimize=True)


def bilinear_resize_vjp(g, in_h: int, in_w: int):
    out_h, out_w = g.shape[1:]
    if (in_h, in_w) == (out_h, out_w):
        return g.copy()
    ry = bilinear_matrix(in_h, out_h)
    rx = bilinear_matrix(in_w, out_w)
    return np.einsum("ih,cij,jw->chw", ry, g, rx, optimize=True)


def concat_channels(a, b):
    """Stack ``b``'s channels after ``a``'s.  An empty ``b`` (0 channels) is allowed."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"concat_channels expects C x H x W tensors, got {a.shape}, {b.shape}")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial extents differ: {a.shape[1:]} vs {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)
