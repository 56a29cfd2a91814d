"""2-d convolution and its transpose, NCHW layout, explicit zero padding.

``conv2d`` weight layout is (out_channels, in_channels, kh, kw).
``conv2d_transpose`` weight layout is (in_channels, out_channels, kh, kw);
its forward pass is exactly the adjoint (gradient-of-input) of ``conv2d``,
so the two ops share the raw kernels below.

Internally everything is arranged channel-major: the unrolled column
matrix is (C*kh*kw, N*oh*ow) and GEMM outputs are (channels, pixels), so
the unavoidable NCHW transposes are single axis swaps whose inner blocks
are whole feature maps, not per-element gathers.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import _accumulate, _node, as_tensor


def conv2d_output_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d_transpose_output_extent(extent, kernel, stride, padding):
    return (extent - 1) * stride - 2 * padding + kernel


def _tap_range(tap, padding, extent, n_out, stride):
    """Output index range [i0, i1] for which a kernel tap reads inside the
    unpadded input, plus the first input index it reads."""
    i0 = max(0, -(-(padding - tap) // stride))
    i1 = min(n_out - 1, (extent - 1 + padding - tap) // stride)
    return i0, i1, stride * i0 + tap - padding


def _col_matrix(x, kh, kw, stride, padding, oh, ow):
    """(N, C, H, W) -> (C*kh*kw, N*oh*ow); padding handled by zero fill."""
    n, c, h, w = x.shape
    col = np.zeros((c, kh, kw, n, oh, ow), dtype=np.float32)
    xt = x.transpose(1, 0, 2, 3)
    for u in range(kh):
        i0, i1, r0 = _tap_range(u, padding, h, oh, stride)
        if i1 < i0:
            continue
        for v in range(kw):
            j0, j1, c0 = _tap_range(v, padding, w, ow, stride)
            if j1 < j0:
                continue
            col[:, u, v, :, i0 : i1 + 1, j0 : j1 + 1] = xt[
                :,
                :,
                r0 : r0 + (i1 - i0) * stride + 1 : stride,
                c0 : c0 + (j1 - j0) * stride + 1 : stride,
            ]
    return col.reshape(c * kh * kw, n * oh * ow)


def _to_channel_major(t):
    """(N, C, H, W) -> contiguous (C, N*H*W)."""
    n, c, h, w = t.shape
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _to_nchw(m, n, c, h, w):
    """Contiguous (C, N*H*W) -> contiguous (N, C, H, W)."""
    return np.ascontiguousarray(m.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def _raw_conv2d(x, w, stride, padding, bias=None):
    """Cross-correlation forward. Returns (y, col, (oh, ow)); the column
    matrix is handed back so backward can reuse it for the weight grad."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {c} channels but weight "
            f"shape {w.shape} expects {ci}"
        )
    oh = conv2d_output_extent(h, kh, stride, padding)
    ow = conv2d_output_extent(wd, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: input shape {x.shape} too small for weight {w.shape} "
            f"with stride={stride} padding={padding}"
        )
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # Pointwise conv: one batched channel-mixing matmul, no col matrix.
        y = np.matmul(w.reshape(o, c), x.reshape(n, c, h * wd))
        if bias is not None:
            y += bias[None, :, None]
        return y.reshape(n, o, h, wd), None, (oh, ow)
    col = _col_matrix(x, kh, kw, stride, padding, oh, ow)
    y2 = w.reshape(o, -1) @ col
    if bias is not None:
        y2 += bias[:, None]
    return _to_nchw(y2, n, o, oh, ow), col, (oh, ow)


def _wgrad_from_col(gy, col, weight_shape):
    """Weight gradient given the forward input's column matrix."""
    o, c, kh, kw = weight_shape
    gy2 = _to_channel_major(gy)
    return (gy2 @ col.T).reshape(o, c, kh, kw)


def _phase_extent(residue, padded_extent, stride):
    """Number of non-negative i with residue + stride*i < padded_extent."""
    if padded_extent <= residue:
        return 0
    return (padded_extent - residue + stride - 1) // stride


def _phase_crop(residue, padding, extent, stride):
    """Index range (i0, i1) of phase rows landing inside the unpadded
    extent: padded row residue + stride*i maps to residue - padding + stride*i."""
    i0 = max(0, -(-(padding - residue) // stride))
    i1 = (extent - 1 + padding - residue) // stride
    return i0, i1


def _xgrad_scatter(out_cm, phase, a, b, stride, padding, h, wd):
    """Write phase grid (c, n, gh, gw) into its stride-phase of out_cm,
    dropping rows in the padding margin. Positions past the grid (the
    floor-division leftover of the forward conv) receive no taps: zero."""
    gh, gw = phase.shape[2:]
    ri0, ri1 = _phase_crop(a, padding, h, stride)
    rj0, rj1 = _phase_crop(b, padding, wd, stride)
    if ri1 < ri0 or rj1 < rj0:
        return
    row0 = a - padding + stride * ri0
    col0 = b - padding + stride * rj0
    view = out_cm[:, :, row0 : row0 + stride * (ri1 - ri0) + 1 : stride,
                  col0 : col0 + stride * (rj1 - rj0) + 1 : stride]
    ki1, kj1 = min(ri1, gh - 1), min(rj1, gw - 1)
    if ki1 < ri1 or kj1 < rj1:
        view[:] = 0
        view[:, :, : ki1 - ri0 + 1, : kj1 - rj0 + 1] = \
            phase[:, :, ri0 : ki1 + 1, rj0 : kj1 + 1]
    else:
        view[:] = phase[:, :, ri0 : ri1 + 1, rj0 : rj1 + 1]


def _xgrad_gemm(gy, w, stride, padding, h, wd):
    """Stride-phase input gradient as one stacked GEMM.

    Requires the kernel to split evenly into s x s sub-kernels (k % s == 0).
    Each phase of the result is the full correlation of gy with its flipped
    sub-kernel; all phases share one column matrix of gy, so the whole
    scatter collapses into a single GEMM plus s*s strided writes.
    """
    n, o, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    s = stride
    qh, qw = kh // s, kw // s
    gh, gw = oh + qh - 1, ow + qw - 1
    col = _col_matrix(gy, qh, qw, 1, qh - 1, gh, gw)
    # Sub-kernel stack: rows keyed (a, b, c), columns keyed (o, q, r),
    # with q/r flipped to turn the correlation into the needed convolution.
    wsub = w.reshape(o, c, qh, s, qw, s)[:, :, ::-1, :, ::-1, :]
    wstack = np.ascontiguousarray(wsub.transpose(3, 5, 1, 0, 2, 4)).reshape(
        s * s * c, o * qh * qw
    )
    grids = (wstack @ col).reshape(s, s, c, n, gh, gw)
    out_cm = np.empty((c, n, h, wd), dtype=np.float32)
    for a in range(s):
        for b in range(s):
            _xgrad_scatter(out_cm, grids[a, b], a, b, s, padding, h, wd)
    return out_cm


def _xgrad_loop(gy, w, stride, padding, h, wd):
    """Generic stride-phase input gradient for kernels that do not split
    evenly: taps sharing a residue accumulate into one contiguous buffer."""
    n, o, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    s = stride
    gy2 = _to_channel_major(gy)
    gcol = (w.reshape(o, -1).T @ gy2).reshape(c, kh, kw, n, oh, ow)
    out_cm = np.empty((c, n, h, wd), dtype=np.float32)
    for a in range(s):
        na = _phase_extent(a, hp, s)
        for b in range(s):
            nb = _phase_extent(b, wp, s)
            if na == 0 or nb == 0:
                continue
            phase = np.zeros((c, n, na, nb), dtype=np.float32)
            for u in range(a, kh, s):
                q = (u - a) // s
                for v in range(b, kw, s):
                    r = (v - b) // s
                    phase[:, :, q : q + oh, r : r + ow] += gcol[:, u, v]
            _xgrad_scatter(out_cm, phase, a, b, s, padding, h, wd)
    return out_cm


def _raw_conv2d_xgrad(gy, w, stride, padding, in_hw, bias=None):
    """Input gradient of conv2d == conv2d_transpose forward on gy.

    The computation is organized by stride phase (output positions sharing
    a residue modulo the stride); the phases partition the grid, so the
    result needs no zero fill.
    """
    n, o, oh, ow = gy.shape
    oc, c, kh, kw = w.shape
    if o != oc:
        raise ShapeError(
            f"conv2d adjoint: cotangent shape {gy.shape} has {o} channels "
            f"but weight shape {w.shape} expects {oc}"
        )
    h, wd = in_hw
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        gx = np.matmul(w.reshape(o, c).T, gy.reshape(n, o, oh * ow))
        if bias is not None:
            gx += bias[None, :, None]
        return gx.reshape(n, c, h, wd)
    if kh % stride == 0 and kw % stride == 0:
        out_cm = _xgrad_gemm(gy, w, stride, padding, h, wd)
    else:
        out_cm = _xgrad_loop(gy, w, stride, padding, h, wd)
    if bias is not None:
        out_cm += bias[:, None, None, None]
    return _to_nchw(out_cm.reshape(c, n * h * wd), n, c, h, wd)


def conv2d(x, w, stride=1, padding=0, bias=None):
    """Strided cross-correlation; output extent floor((H+2p-K)/s)+1.

    ``bias`` is an optional per-output-channel tensor added in place while
    the GEMM result is still channel-major (cheaper than a separate op).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-d input and weight, got {x.data.shape} "
            f"and {w.data.shape}"
        )
    parents = (x, w)
    bias_data = None
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (w.data.shape[0],):
            raise ShapeError(
                f"conv2d: weight {w.data.shape} with bias {bias.data.shape}"
            )
        parents = (x, w, bias)
        bias_data = bias.data
    y, col, (oh, ow) = _raw_conv2d(x.data, w.data, stride, padding, bias_data)
    if not w.requires_grad:
        col = None  # only the weight grad reads it

    def backward(gy, x=x, w=w, bias=bias, col=col, stride=stride,
                 padding=padding, oh=oh, ow=ow):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gy.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            if col is None:  # requires_grad flipped after the forward pass
                kh, kw = w.data.shape[2:]
                col = _col_matrix(x.data, kh, kw, stride, padding, oh, ow)
            _accumulate(w, _wgrad_from_col(gy, col, w.data.shape))
        if x.requires_grad:
            _accumulate(
                x, _raw_conv2d_xgrad(gy, w.data, stride, padding, x.data.shape[2:])
            )

    return _node(y, parents, backward)


def conv2d_transpose(x, w, stride=1, padding=0, bias=None):
    """Transposed convolution; output extent (H-1)*s - 2p + K.

    Weight layout (in_channels, out_channels, kh, kw): the op is the exact
    adjoint of a conv2d that maps out_channels -> in_channels. ``bias`` is
    per output channel, added while the result is still channel-major.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose: expected 4-d input and weight, got "
            f"{x.data.shape} and {w.data.shape}"
        )
    ci, co, kh, kw = w.data.shape
    if x.data.shape[1] != ci:
        raise ShapeError(
            f"conv2d_transpose: input shape {x.data.shape} has "
            f"{x.data.shape[1]} channels but weight shape {w.data.shape} "
            f"expects {ci}"
        )
    h, wd = x.data.shape[2:]
    out_h = conv2d_transpose_output_extent(h, kh, stride, padding)
    out_w = conv2d_transpose_output_extent(wd, kw, stride, padding)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(
            f"conv2d_transpose: input shape {x.data.shape} with weight "
            f"{w.data.shape}, stride={stride}, padding={padding} gives "
            f"empty output"
        )
    parents = (x, w)
    bias_data = None
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (co,):
            raise ShapeError(
                f"conv2d_transpose: weight {w.data.shape} with bias "
                f"{bias.data.shape}"
            )
        parents = (x, w, bias)
        bias_data = bias.data
    y = _raw_conv2d_xgrad(
        x.data, w.data, stride, padding, (out_h, out_w), bias_data
    )

    def backward(gy, x=x, w=w, bias=bias, stride=stride, padding=padding,
                 kh=kh, kw=kw):
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gy.sum(axis=(0, 2, 3)))
        # Treating the deconv weight (ci, co, kh, kw) as a conv weight maps
        # the cotangent's co channels back to ci: exactly the input grad.
        gx, col_gy, (gh, gw) = _raw_conv2d(gy, w.data, stride, padding)
        if x.requires_grad:
            _accumulate(x, gx)
        if w.requires_grad:
            if col_gy is None:  # pointwise fast path skips the col matrix
                col_gy = _col_matrix(gy, kh, kw, stride, padding, gh, gw)
            x2 = _to_channel_major(x.data)
            _accumulate(w, (x2 @ col_gy.T).reshape(w.data.shape))

    return _node(y, parents, backward)
