"""2D and 3D convolution with zero padding, vectorized via im2col + GEMM.

The patch matrix from the forward pass is retained in the backward closure,
trading memory for speed; at the patch sizes this project trains on that is
the right trade. The matching naive nested-loop oracles live in the test
suite, not here.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, from_op


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def _triple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def _out_extent(size, k, pad, stride):
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} exceeds padded extent {size + 2 * pad}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad=0) -> Tensor:
    """x[N,C,H,W] * w[O,C,kH,kW] + b[O] -> [N,O,H',W'], zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D x and w, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O, Cw, kH, kW = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    if b.shape != (O,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({O},)")
    if kH % 2 == 0 or kW % 2 == 0:
        raise ShapeError(f"conv2d kernels must be odd, got {kH}x{kW}")
    ph, pw = _pair(pad)
    Ho = _out_extent(H, kH, ph, stride)
    Wo = _out_extent(W, kW, pw, stride)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kH * kW)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out) + b.data.reshape(1, O, 1, 1)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = gm @ wm
        gwin = gcols.reshape(N, Ho, Wo, C, kH, kW).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kH):
            for j in range(kW):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gwin[:, :, i, j]
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return np.ascontiguousarray(gx), gw, gb

    return from_op(out, (x, w, b), backward)


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad=0) -> Tensor:
    """x[N,C,T,H,W] * w[O,C,kT,kH,kW] + b[O]; pad may differ per axis."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5D x and w, got {x.shape} and {w.shape}")
    N, C, T, H, W = x.shape
    O, Cw, kT, kH, kW = w.shape
    if C != Cw:
        raise ShapeError(f"conv3d channel mismatch: input {C}, kernel {Cw}")
    if b.shape != (O,):
        raise ShapeError(f"conv3d bias shape {b.shape} != ({O},)")
    if kT % 2 == 0 or kH % 2 == 0 or kW % 2 == 0:
        raise ShapeError(f"conv3d kernels must be odd, got {kT}x{kH}x{kW}")
    pt, ph, pw = _triple(pad)
    To = _out_extent(T, kT, pt, stride)
    Ho = _out_extent(H, kH, ph, stride)
    Wo = _out_extent(W, kW, pw, stride)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kT, kH, kW), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    cols = cols.reshape(N * To * Ho * Wo, C * kT * kH * kW)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(N, To, Ho, Wo, O).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out) + b.data.reshape(1, O, 1, 1, 1)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(N * To * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3, 4))
        gcols = gm @ wm
        gwin = gcols.reshape(N, To, Ho, Wo, C, kT, kH, kW).transpose(0, 4, 5, 6, 7, 1, 2, 3)
        gxp = np.zeros_like(xp)
        for t in range(kT):
            for i in range(kH):
                for j in range(kW):
                    gxp[:, :, t:t + stride * To:stride, i:i + stride * Ho:stride,
                        j:j + stride * Wo:stride] += gwin[:, :, t, i, j]
        gx = gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
        return np.ascontiguousarray(gx), gw, gb

    return from_op(out, (x, w, b), backward)
