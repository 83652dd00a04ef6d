"""Parallax attention: fuse left/right features along the epipolar axis.

For each image row, 1x1-projected query/key features form a [W x W]
similarity over candidate disparities; softmax of that product (and of its
transpose) gives the right-to-left and left-to-right attention maps. Each
view's own features are concatenated with the cross-view features gathered
through its map and pushed through a shared three-layer conv stack. Valid
masks and the fusion gate of the original design are intentionally omitted.

Widths scale with the feature width d as (2d, 2d, d), which at the default
d=64 gives the (128, 128, 64) stack.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, concat, matmul, relu, reshape, softmax, transpose


class PamMaps(NamedTuple):
    """Row-stochastic attention maps, each [N*H, W, W]."""
    r2l: Tensor
    l2r: Tensor


def _rows(feat: Tensor):
    """[N,C,H,W] -> [N*H, W, C] (epipolar rows as token sequences)."""
    n, c, h, w = feat.shape
    return reshape(transpose(feat, (0, 2, 3, 1)), (n * h, w, c))


def _unrows(rows: Tensor, n: int, c: int, h: int, w: int) -> Tensor:
    return transpose(reshape(rows, (n, h, w, c)), (0, 3, 1, 2))


def apply_maps(maps: Tensor, image: Tensor) -> Tensor:
    """Gather image[N,C,H,W] rows through attention maps [N*H,W,W]."""
    n, c, h, w = image.shape
    if maps.shape != (n * h, w, w):
        raise ShapeError(f"maps {maps.shape} do not match image {image.shape}")
    return _unrows(matmul(maps, _rows(image)), n, c, h, w)


class ParallaxFusion(nn.Module):
    def __init__(self, d: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                 dropout: float = 0.5, dtype=np.float32):
        super().__init__()
        self.d = d
        self.q_proj = nn.Conv2d(d, d, 1, dtype=dtype)
        self.k_proj = nn.Conv2d(d, d, 1, dtype=dtype)
        self.conv1 = nn.Conv2d(2 * d, 2 * d, 5, pad=2, dtype=dtype)
        self.bn1 = nn.BatchNorm(2 * d, momentum=bn_momentum, eps=bn_eps, dtype=dtype)
        self.conv2 = nn.Conv2d(2 * d, 2 * d, 3, pad=1, dtype=dtype)
        self.bn2 = nn.BatchNorm(2 * d, momentum=bn_momentum, eps=bn_eps, dtype=dtype)
        self.drop = nn.Dropout(dropout)
        self.conv3 = nn.Conv2d(2 * d, d, 3, pad=1, dtype=dtype)
        self.bn3 = nn.BatchNorm(d, momentum=bn_momentum, eps=bn_eps, dtype=dtype)

    def attention_maps(self, feat_l: Tensor, feat_r: Tensor) -> PamMaps:
        n, c, h, w = feat_l.shape
        q = _rows(self.q_proj(feat_l))                       # [NH, W, C]
        k = _rows(self.k_proj(feat_r))
        score = matmul(q, transpose(k, (0, 2, 1)))           # [NH, W, W]
        m_r2l = softmax(score, axis=2)
        m_l2r = softmax(transpose(score, (0, 2, 1)), axis=2)
        return PamMaps(m_r2l, m_l2r)

    def _stack(self, x: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(x)))
        x = self.drop(relu(self.bn2(self.conv2(x))))
        return relu(self.bn3(self.conv3(x)))

    def forward(self, feat_l: Tensor, feat_r: Tensor):
        if feat_l.shape != feat_r.shape:
            raise ShapeError(f"view shapes differ: {feat_l.shape} vs {feat_r.shape}")
        if feat_l.shape[1] != self.d:
            raise ShapeError(f"expected {self.d} channels, got {feat_l.shape[1]}")
        maps = self.attention_maps(feat_l, feat_r)
        cross_l = apply_maps(maps.r2l, feat_r)
        cross_r = apply_maps(maps.l2r, feat_l)
        fused_l = self._stack(concat([feat_l, cross_l], axis=1))
        fused_r = self._stack(concat([feat_r, cross_r], axis=1))
        return fused_l, fused_r, maps
