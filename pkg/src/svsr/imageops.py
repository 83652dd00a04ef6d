"""Image-geometry primitives: backward warping, resampling, pixel shuffle.

Flow fields are [N,2,H,W] tensors: channel 0 is horizontal displacement,
channel 1 vertical, in pixels at the resolution of the image they warp.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .tensor import ShapeError, Tensor, from_op, reshape, transpose


def warp(x: Tensor, flow: Tensor) -> Tensor:
    """Backward bilinear warp: out(p) = x sampled at p + flow(p).

    Samples falling outside the frame read as zero. Differentiable in both
    the image and the flow (away from integer grid lines, where the bilinear
    kernel has corners).
    """
    if x.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"warp expects x[N,C,H,W], flow[N,2,H,W]; got {x.shape}, {flow.shape}")
    N, C, H, W = x.shape
    if flow.shape[0] != N or flow.shape[2:] != (H, W):
        raise ShapeError(f"warp resolution mismatch: x {x.shape} vs flow {flow.shape}")

    jj = np.arange(W, dtype=x.dtype)
    ii = np.arange(H, dtype=x.dtype)[:, None]
    gx = jj + flow.data[:, 0]          # [N,H,W] sample columns
    gy = ii + flow.data[:, 1]          # [N,H,W] sample rows

    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    wx = (gx - x0).astype(x.dtype)
    wy = (gy - y0).astype(x.dtype)

    xf = x.data.reshape(N, C, H * W)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc, xc = y0 + dy, x0 + dx
        mask = ((yc >= 0) & (yc < H) & (xc >= 0) & (xc < W))
        idx = (np.clip(yc, 0, H - 1) * W + np.clip(xc, 0, W - 1)).reshape(N, H * W)
        v = np.take_along_axis(xf, np.broadcast_to(idx[:, None], (N, C, H * W)), axis=2)
        v = v.reshape(N, C, H, W) * mask[:, None].astype(x.dtype)
        corners.append((v, mask, idx))
    v00, v01, v10, v11 = (c[0] for c in corners)

    wxe = wx[:, None]
    wye = wy[:, None]
    out = ((1 - wye) * ((1 - wxe) * v00 + wxe * v01)
           + wye * ((1 - wxe) * v10 + wxe * v11))

    def backward(g):
        # image gradient: scatter each corner's weighted contribution back
        gflat = np.zeros(N * C * H * W, dtype=x.dtype)
        base = (np.arange(N)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
        weights = ((1 - wxe) * (1 - wye), wxe * (1 - wye), (1 - wxe) * wye, wxe * wye)
        for (v, mask, idx), wgt in zip(corners, weights):
            contrib = (g * wgt * mask[:, None]).reshape(N, C, H * W)
            np.add.at(gflat, base + idx[:, None], contrib)
        gx_img = gflat.reshape(x.shape)

        # flow gradient: derivative of the bilinear weights, summed over C
        dgx = ((1 - wye) * (v01 - v00) + wye * (v11 - v10))
        dgy = ((1 - wxe) * (v10 - v00) + wxe * (v11 - v01))
        gflow = np.stack([(g * dgx).sum(axis=1), (g * dgy).sum(axis=1)], axis=1)
        return gx_img, gflow.astype(flow.dtype)

    return from_op(out, (x, flow), backward)


# -- separable resampling ---------------------------------------------------


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Keys cubic convolution kernel with a = -0.5."""
    a = -0.5
    at = np.abs(t)
    w = np.where(
        at <= 1.0,
        (a + 2.0) * at ** 3 - (a + 3.0) * at ** 2 + 1.0,
        np.where(at < 2.0, a * at ** 3 - 5.0 * a * at ** 2 + 8.0 * a * at - 4.0 * a, 0.0),
    )
    return w


def _cubic_taps(in_size: int, out_size: int):
    """Per-output-pixel source indices (edge-clamped) and kernel weights."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    idx = np.stack([base + k for k in (-1, 0, 1, 2)], axis=1)
    t = src[:, None] - idx
    w = _cubic_kernel(t)
    return np.clip(idx, 0, in_size - 1), w


def _linear_x2_taps(in_size: int):
    """Two-tap bilinear weights for exact x2 (align-corners=false)."""
    src = (np.arange(2 * in_size, dtype=np.float64) + 0.5) / 2.0 - 0.5
    base = np.floor(src).astype(np.int64)
    t = src - base
    idx = np.stack([base, base + 1], axis=1)
    w = np.stack([1.0 - t, t], axis=1)
    return np.clip(idx, 0, in_size - 1), w


def _resample_axis(x: Tensor, idx: np.ndarray, w: np.ndarray, axis: int) -> Tensor:
    """Apply a precomputed 1D linear resampling map along one axis."""
    taps = idx.shape[1]
    wt = w.astype(x.dtype)
    shape = [1] * x.ndim
    shape[axis] = idx.shape[0]
    out = None
    for k in range(taps):
        term = np.take(x.data, idx[:, k], axis=axis) * wt[:, k].reshape(shape)
        out = term if out is None else out + term

    def backward(g):
        gmoved = np.moveaxis(g, axis, 0)
        acc = np.zeros((x.shape[axis],) + gmoved.shape[1:], dtype=x.dtype)
        for k in range(taps):
            np.add.at(acc, idx[:, k], gmoved * wt[:, k].reshape((-1,) + (1,) * (gmoved.ndim - 1)))
        return (np.moveaxis(acc, 0, axis),)

    return from_op(out, (x,), backward)


def resample_bicubic(x: Tensor, scale) -> Tensor:
    """Separable bicubic (a = -0.5, edge-clamped) rescale of x[N,C,H,W].

    `scale` may be a float or Fraction; both target extents must come out
    integral or a ValueError is raised. The same kernel serves LR synthesis
    and the residual upsampling path.
    """
    if x.ndim != 4:
        raise ShapeError(f"resample_bicubic expects [N,C,H,W], got {x.shape}")
    frac = Fraction(scale).limit_denominator(10 ** 6)
    if frac <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    N, C, H, W = x.shape
    out_sizes = []
    for size in (H, W):
        target = frac * size
        if target.denominator != 1:
            raise ValueError(f"non-integral target size {size}*{frac} for bicubic resample")
        out_sizes.append(int(target))
    Ho, Wo = out_sizes
    if (Ho, Wo) == (H, W):
        return from_op(x.data.copy(), (x,), lambda g: (g,))
    idx_h, w_h = _cubic_taps(H, Ho)
    idx_w, w_w = _cubic_taps(W, Wo)
    out = _resample_axis(x, idx_h, w_h, axis=2)
    return _resample_axis(out, idx_w, w_w, axis=3)


def upsample_bilinear_x2(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling (align-corners=false) of x[N,C,H,W]."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear_x2 expects [N,C,H,W], got {x.shape}")
    idx_h, w_h = _linear_x2_taps(x.shape[2])
    idx_w, w_w = _linear_x2_taps(x.shape[3])
    out = _resample_axis(x, idx_h, w_h, axis=2)
    return _resample_axis(out, idx_w, w_w, axis=3)


def upsample_flow_x2(flow: Tensor) -> Tensor:
    """Upsample a flow field to double resolution, doubling displacements.

    Displacements are in pixels, so values rescale with resolution.
    """
    return upsample_bilinear_x2(flow) * 2.0


# -- pixel shuffle -----------------------------------------------------------


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange x[N,C*s^2,H,W] into [N,C,s*H,s*W]."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle expects [N,C,H,W], got {x.shape}")
    N, Cs, H, W = x.shape
    if Cs % (s * s) != 0:
        raise ShapeError(f"channels {Cs} not divisible by s^2={s * s}")
    C = Cs // (s * s)
    out = reshape(x, (N, C, s, s, H, W))
    out = transpose(out, (0, 1, 4, 2, 5, 3))
    return reshape(out, (N, C, H * s, W * s))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_unshuffle expects [N,C,H,W], got {x.shape}")
    N, C, Hs, Ws = x.shape
    if Hs % s != 0 or Ws % s != 0:
        raise ShapeError(f"spatial dims {Hs}x{Ws} not divisible by s={s}")
    out = reshape(x, (N, C, Hs // s, s, Ws // s, s))
    out = transpose(out, (0, 1, 3, 5, 2, 4))
    return reshape(out, (N, C * s * s, Hs // s, Ws // s))
