"""Coarse-to-fine residual optical flow and motion compensation.

A pyramid of K levels refines flow from coarse to fine: the coarsest level
predicts flow directly from the frame pair, every finer level warps the
second frame with the upsampled running flow and predicts a residual
correction. Each level has its own small convnet; the final layer of every
level is zero-initialized so a fresh estimator outputs exactly zero flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import nn
from .imageops import resample_bicubic, upsample_flow_x2, warp
from .tensor import ShapeError, Tensor, concat, leaky_relu, stack, zeros


@dataclass
class FlowPyramidConfig:
    levels: int = 4
    channels: tuple = (32, 64, 32, 16, 2)
    kernel: int = 7

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("flow pyramid needs at least one level")
        if self.channels[-1] != 2:
            raise ValueError("flow convnets must end with 2 channels")


class LevelNet(nn.Module):
    """Per-level convnet mapping (frame, warped frame, flow) to residual flow."""

    def __init__(self, cfg: FlowPyramidConfig, dtype=np.float32):
        super().__init__()
        pad = cfg.kernel // 2
        widths = (8,) + tuple(cfg.channels)
        self.convs = [
            nn.Conv2d(widths[i], widths[i + 1], cfg.kernel, pad=pad,
                      zero_init=(i == len(widths) - 2), dtype=dtype)
            for i in range(len(widths) - 1)
        ]

    def forward(self, frame_a: Tensor, warped_b: Tensor, flow_in: Tensor) -> Tensor:
        x = concat([frame_a, warped_b, flow_in], axis=1)
        for layer in self.convs[:-1]:
            x = leaky_relu(layer(x))
        return self.convs[-1](x)


def build_pyramid(frame: Tensor, levels: int) -> List[Tensor]:
    """Coarse-to-fine frame pyramid; level k is at 1/2^(levels-1-k) scale."""
    out = [frame]
    for _ in range(levels - 1):
        out.append(resample_bicubic(out[-1], 0.5))
    out.reverse()
    return out


class FlowEstimator(nn.Module):
    def __init__(self, cfg: FlowPyramidConfig = None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg or FlowPyramidConfig()
        self.level_nets = [LevelNet(self.cfg, dtype=dtype) for _ in range(self.cfg.levels)]
        self._dtype = dtype

    def forward(self, frame_a: Tensor, frame_b: Tensor) -> Tensor:
        """Flow field F with warp(frame_b, F) aligned to frame_a."""
        if frame_a.shape != frame_b.shape:
            raise ShapeError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
        n, _, h, w = frame_a.shape
        k = self.cfg.levels
        factor = 2 ** (k - 1)
        if h % factor or w % factor:
            raise ShapeError(f"frame {h}x{w} not divisible by 2^{k - 1}")
        pyr_a = build_pyramid(frame_a, k)
        pyr_b = build_pyramid(frame_b, k)
        flow = None
        for lvl in range(k):
            a, b = pyr_a[lvl], pyr_b[lvl]
            if flow is None:
                flow_in = zeros((n, 2) + a.shape[2:], dtype=a.dtype)
                residual = self.level_nets[lvl](a, b, flow_in)
                flow = residual
            else:
                flow_up = upsample_flow_x2(flow)
                residual = self.level_nets[lvl](a, warp(b, flow_up), flow_up)
                flow = flow_up + residual
        return flow


def estimate_neighbor_flows(clip: Tensor, estimator: FlowEstimator) -> list:
    """Flow from each neighbor slice onto the middle slice; None at the middle."""
    if clip.ndim != 5:
        raise ShapeError(f"expected a [N,3,T,H,W] clip, got {clip.shape}")
    t_len = clip.shape[2]
    if t_len % 2 == 0:
        raise ValueError(f"temporal length must be odd, got {t_len}")
    mid = t_len // 2
    middle = clip[:, :, mid]
    return [None if m == mid else estimator(middle, clip[:, :, m]) for m in range(t_len)]


def motion_compensate(clip: Tensor, estimator: FlowEstimator, flows=None) -> Tensor:
    """Warp every neighbor frame of clip[N,3,T,H,W] onto the middle frame.

    The middle slice is passed through untouched; all neighbors are warped
    with flow estimated against the middle frame. Both stereo views are
    expected to reuse the same estimator. Precomputed `flows` (from
    :func:`estimate_neighbor_flows`) avoid re-running the estimator.
    """
    if flows is None:
        flows = estimate_neighbor_flows(clip, estimator)
    t_len = clip.shape[2]
    if t_len % 2 == 0:
        raise ValueError(f"temporal length must be odd, got {t_len}")
    mid = t_len // 2
    slices = []
    for m in range(t_len):
        if m == mid:
            slices.append(clip[:, :, mid])
        else:
            slices.append(warp(clip[:, :, m], flows[m]))
    return stack(slices, axis=2)
