"""Full stereo video super-resolution model.

Per view: motion-compensate the T-frame window onto its middle frame, run
the (view-shared) spatio-temporal transformer, collapse time with a
(T,3,3) conv, then fuse the two views with parallax attention. Each view's
fused features are concatenated with its own collapsed features, pushed
through the 2D reconstruction ladder, upscaled with sub-pixel convolution,
and added to the bicubic upsample of the LR middle frame, so the network
only learns the high-frequency residual.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import nn
from .flow import (FlowEstimator, FlowPyramidConfig, estimate_neighbor_flows,
                   motion_compensate)
from .imageops import pixel_shuffle, resample_bicubic
from .pam import PamMaps, ParallaxFusion
from .tensor import ShapeError, Tensor, concat, relu, reshape
from .transformer import SpatioTemporalTransformer

PAPER_RECON_FILTERS = (256, 512, 1024, 1024, 512, 256, 128, 3)


@dataclass
class ModelConfig:
    scale: int = 4
    temporal_radius: int = 2
    channels: int = 64           # transformer feature width d
    blocks: int = 20             # transformer depth L
    flow_levels: int = 4
    recon_filters: Tuple[int, ...] = PAPER_RECON_FILTERS
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dropout: float = 0.5

    def __post_init__(self):
        if self.scale not in (4, 6):
            raise ValueError(f"scale must be 4 or 6, got {self.scale}")
        if self.recon_filters[-1] != 3:
            raise ValueError("reconstruction ladder must end in 3 channels")
        if self.temporal_radius < 1:
            raise ValueError("temporal radius must be >= 1")

    @property
    def frames(self) -> int:
        return 2 * self.temporal_radius + 1


@dataclass
class SrOutput:
    sr_l: Tensor
    sr_r: Tensor
    maps: PamMaps


def _scale_stages(s: int) -> List[int]:
    # s=4 is a single sub-pixel stage; s=6 is a x2 stage then a x3 stage
    return [s] if s == 4 else [2, 3]


class Upscaler(nn.Module):
    """Sub-pixel convolution stages followed by a 3-channel 3x3 conv."""

    def __init__(self, s: int, dtype=np.float32):
        super().__init__()
        self.factors = _scale_stages(s)
        self.expands = [nn.Conv2d(3, 3 * r * r, 3, pad=1, dtype=dtype) for r in self.factors]
        self.final = nn.Conv2d(3, 3, 3, pad=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        for r, layer in zip(self.factors, self.expands):
            x = pixel_shuffle(layer(x), r)
        return self.final(x)


class StereoVideoSR(nn.Module):
    def __init__(self, config: ModelConfig = None, dtype=np.float32):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        d = cfg.channels
        self.flow_net = FlowEstimator(FlowPyramidConfig(levels=cfg.flow_levels), dtype=dtype)
        self.transformer = SpatioTemporalTransformer(
            d, cfg.blocks, cfg.bn_momentum, cfg.bn_eps, dtype=dtype)
        self.extract = nn.Conv3d(d, d, (cfg.frames, 3, 3), pad=(0, 1, 1), dtype=dtype)
        widths = (2 * d,) + tuple(cfg.recon_filters)
        self.recon = [nn.Conv2d(widths[i], widths[i + 1], 3, pad=1, dtype=dtype)
                      for i in range(len(widths) - 1)]
        self.pam = ParallaxFusion(d, cfg.bn_momentum, cfg.bn_eps, cfg.dropout, dtype=dtype)
        self.upscale = Upscaler(cfg.scale, dtype=dtype)
        self._dtype = dtype

    # -- pieces ----------------------------------------------------------

    def _view_features(self, clip: Tensor) -> Tensor:
        # one flow estimate per neighbor serves both motion compensation and
        # the feed-forward warps of every transformer block
        flows = estimate_neighbor_flows(clip, self.flow_net)
        compensated = motion_compensate(clip, self.flow_net, flows)
        feats = self.transformer(compensated, flows)
        collapsed = relu(self.extract(feats))          # [N,d,1,H,W]
        n, d, _, h, w = collapsed.shape
        return reshape(collapsed, (n, d, h, w))

    def _reconstruct(self, fused: Tensor, own: Tensor) -> Tensor:
        x = concat([fused, own], axis=1)
        for layer in self.recon[:-1]:
            x = relu(layer(x))
        return self.recon[-1](x)

    # -- forward ----------------------------------------------------------

    def forward(self, clip_l: Tensor, clip_r: Tensor) -> SrOutput:
        for name, clip in (("left", clip_l), ("right", clip_r)):
            if clip.ndim != 5 or clip.shape[1] != 3:
                raise ShapeError(f"{name} clip must be [N,3,T,H,W], got {clip.shape}")
            if clip.shape[2] != self.config.frames:
                raise ValueError(
                    f"{name} clip has {clip.shape[2]} frames, model expects {self.config.frames}")
            lo, hi = clip.data.min(), clip.data.max()
            if lo < -1e-6 or hi > 1 + 1e-6:
                raise ValueError(f"{name} clip values outside [0,1]: min {lo}, max {hi}")
        if clip_l.shape != clip_r.shape:
            raise ShapeError(f"view shapes differ: {clip_l.shape} vs {clip_r.shape}")

        feat_l = self._view_features(clip_l)
        feat_r = self._view_features(clip_r)
        fused_l, fused_r, maps = self.pam(feat_l, feat_r)

        s = self.config.scale
        mid = self.config.frames // 2
        out = []
        for fused, own, clip in ((fused_l, feat_l, clip_l), (fused_r, feat_r, clip_r)):
            sr = self.upscale(self._reconstruct(fused, own))
            base = resample_bicubic(clip[:, :, mid], s)
            out.append(sr + base)
        return SrOutput(out[0], out[1], maps)


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> StereoVideoSR:
    model = StereoVideoSR(config, dtype=dtype)
    model.initialize(seed)
    return model
