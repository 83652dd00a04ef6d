"""Spatio-temporal transformer over motion-compensated frame stacks.

Pipeline: channel-lifting 3D-conv encoder, additive sinusoidal positional
encoding over (time, height, width), then L blocks of convolutional
self-attention followed by a flow-based feed-forward, each wired as a
residual branch (y = x + branch(x)) with the normalization living inside
the branch. A residual block plus one more 3D conv form the tail.

Attention tokenizes each temporal slice over its spatial positions: the
similarity matrix per slice is [H*W x H*W], row-stochastic after softmax.
The feed-forward warps every temporal slice of the attention features onto
the middle frame using flows estimated once per batch from the input frames,
concatenates warped and unwarped features, and mixes them back to width d.
"""

from __future__ import annotations

import math
from typing import List, Optional

import numpy as np

from . import nn
from .imageops import warp
from .tensor import (Tensor, concat, leaky_relu, matmul, relu, reshape,
                     softmax, stack, transpose)


def positional_encoding(d: int, t: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal position code [d,T,H,W], one channel bank per axis.

    Channels split into three contiguous banks of ceil(d/3) (the last banks
    truncated when 3 does not divide d). Within a bank, channel 2k holds
    sin(pos * f_k) and channel 2k+1 holds cos(pos * f_k) of that bank's axis
    coordinate, with f_k = 10000^(-2k/ceil(d/3)).
    """
    bank = math.ceil(d / 3)
    out = np.zeros((d, t, h, w), dtype=np.float64)
    extents = (t, h, w)
    axis_shapes = (((-1, 1, 1)), ((1, -1, 1)), ((1, 1, -1)))
    for axis in range(3):
        pos = np.arange(extents[axis], dtype=np.float64).reshape(axis_shapes[axis])
        for i in range(bank):
            ch = axis * bank + i
            if ch >= d:
                break
            freq = 1.0 / (10000.0 ** (2 * (i // 2) / bank))
            wave = np.sin(pos * freq) if i % 2 == 0 else np.cos(pos * freq)
            out[ch] = np.broadcast_to(wave, (t, h, w))
    return out.astype(dtype)


class ResidualBlock3d(nn.Module):
    """x + conv(relu(conv(x))), both convs 3x3x3 pad 1."""

    def __init__(self, channels: int, in_channels: Optional[int] = None, dtype=np.float32):
        super().__init__()
        self.skip = in_channels is None
        self.conv1 = nn.Conv3d(in_channels or channels, channels, 3, pad=1, dtype=dtype)
        self.conv2 = nn.Conv3d(channels, channels, 3, pad=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv2(relu(self.conv1(x)))
        return x + out if self.skip else out


class Encoder(nn.Module):
    """Lift 3-channel compensated frames to d channels plus one residual block."""

    def __init__(self, d: int, dtype=np.float32):
        super().__init__()
        self.lift = nn.Conv3d(3, d, 3, pad=1, dtype=dtype)
        self.res = ResidualBlock3d(d, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.res(self.lift(x))


class SelfAttention(nn.Module):
    """Convolutional self-attention per temporal slice over spatial tokens."""

    def __init__(self, d: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.q = nn.Conv3d(d, d, 3, pad=1, dtype=dtype)
        self.k = nn.Conv3d(d, d, 3, pad=1, dtype=dtype)
        self.v = nn.Conv3d(d, d, 3, pad=1, dtype=dtype)
        self.post = nn.Conv3d(d, d, 3, pad=1, dtype=dtype)
        self.bn = nn.BatchNorm(d, momentum=bn_momentum, eps=bn_eps, dtype=dtype)

    def scores(self, x: Tensor) -> Tensor:
        """Row-stochastic similarity [N,T,HW,HW] between spatial tokens."""
        q, k = self.q(x), self.k(x)
        n, d, t, h, w = x.shape
        qf = reshape(transpose(q, (0, 2, 1, 3, 4)), (n * t, d, h * w))
        kf = reshape(transpose(k, (0, 2, 1, 3, 4)), (n * t, d, h * w))
        sim = matmul(transpose(qf, (0, 2, 1)), kf)
        return reshape(softmax(sim, axis=2), (n, t, h * w, h * w))

    def forward(self, x: Tensor) -> Tensor:
        n, d, t, h, w = x.shape
        q, k, v = self.q(x), self.k(x), self.v(x)

        def tokens(feat):
            return reshape(transpose(feat, (0, 2, 1, 3, 4)), (n * t, d, h * w))

        qf, kf, vf = tokens(q), tokens(k), tokens(v)
        sim = softmax(matmul(transpose(qf, (0, 2, 1)), kf), axis=2)
        attended = matmul(sim, transpose(vf, (0, 2, 1)))          # [N*T, HW, d]
        attended = reshape(transpose(attended, (0, 2, 1)), (n, t, d, h, w))
        attended = transpose(attended, (0, 2, 1, 3, 4))
        branch = relu(self.bn(self.post(attended)))
        return x + branch


class FlowFeedForward(nn.Module):
    """Warp-and-mix feed-forward branch; the outer skip lives in the block.

    branch(x) = conv1x1(LN(x + res(cat(x, warped_x)))) with LeakyReLU,
    where warped_x warps each temporal slice onto the middle frame with the
    cached per-slice flows.
    """

    def __init__(self, d: int, dtype=np.float32):
        super().__init__()
        self.res = ResidualBlock3d(d, in_channels=2 * d, dtype=dtype)
        self.norm = nn.LayerNorm(d, dtype=dtype)
        self.mix = nn.Conv3d(d, d, 1, pad=0, dtype=dtype)

    def forward(self, x: Tensor, flows: List[Optional[Tensor]]) -> Tensor:
        n, d, t, h, w = x.shape
        mid = t // 2
        warped = []
        for m in range(t):
            slice_m = x[:, :, m]
            warped.append(slice_m if m == mid else warp(slice_m, flows[m]))
        ff = concat([x, stack(warped, axis=2)], axis=1)
        mixed = self.norm(x + self.res(ff))
        return leaky_relu(self.mix(mixed))


class TransformerBlock(nn.Module):
    def __init__(self, d: int, bn_momentum: float, bn_eps: float, dtype=np.float32):
        super().__init__()
        self.attn = SelfAttention(d, bn_momentum, bn_eps, dtype=dtype)
        self.ff = FlowFeedForward(d, dtype=dtype)

    def forward(self, x: Tensor, flows) -> Tensor:
        y = self.attn(x)
        return y + self.ff(y, flows)


class SpatioTemporalTransformer(nn.Module):
    """Encoder, +PE, L attention/feed-forward blocks, residual tail."""

    def __init__(self, d: int, blocks: int, bn_momentum: float = 0.1,
                 bn_eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.d = d
        self.encoder = Encoder(d, dtype=dtype)
        self.blocks = [TransformerBlock(d, bn_momentum, bn_eps, dtype=dtype)
                       for _ in range(blocks)]
        self.tail_res = ResidualBlock3d(d, dtype=dtype)
        self.tail_conv = nn.Conv3d(d, d, 3, pad=1, dtype=dtype)
        self._dtype = dtype
        self._pe_cache = {}

    def encoding_for(self, shape) -> Tensor:
        key = tuple(shape)
        if key not in self._pe_cache:
            self._pe_cache[key] = Tensor(positional_encoding(*key, dtype=self._dtype))
        return self._pe_cache[key]

    def forward(self, x: Tensor, flows) -> Tensor:
        feats = self.encoder(x)
        pe = self.encoding_for((self.d,) + feats.shape[2:])
        feats = feats + pe.reshape((1,) + pe.shape)
        for block in self.blocks:
            feats = block(feats, flows)
        return self.tail_conv(self.tail_res(feats))
