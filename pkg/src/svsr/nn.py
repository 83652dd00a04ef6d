"""Lightweight layer system: parameter naming, init, norm layers, dropout.

Modules register sub-modules and tensors as plain attributes; walking
``__dict__`` in insertion order yields stable dot-separated parameter names
(e.g. ``pam.q_proj.w``) that checkpoints key on. Initialization is a separate
pass so every weight draws from a stream keyed by its own name.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Optional, Tuple

import numpy as np

from . import conv, rng
from .tensor import ShapeError, Tensor, activation, dropout, from_op, tmean, tsqrt


class Module:
    """Base class; subclasses assign Tensors and sub-Modules as attributes."""

    def __init__(self):
        self.training = True

    # attribute walking ------------------------------------------------

    def _local_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        for key, val in self.__dict__.items():
            if isinstance(val, Tensor):
                yield key, val

    def _child_modules(self) -> Iterator[Tuple[str, "Module"]]:
        for key, val in self.__dict__.items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self._child_modules():
            sub = f"{prefix}.{key}" if prefix else key
            yield from child.named_modules(sub)

    def named_states(self) -> Iterator[Tuple[str, Tensor]]:
        """All named tensors: trainable parameters and running buffers."""
        for mod_name, mod in self.named_modules():
            for key, t in mod._local_tensors():
                yield (f"{mod_name}.{key}" if mod_name else key), t

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for name, t in self.named_states():
            if t.requires_grad:
                yield name, t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    # bookkeeping --------------------------------------------------------

    def set_training(self, flag: bool):
        for _, mod in self.named_modules():
            mod.training = flag

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def initialize(self, seed: int):
        """Fill parameters from per-name streams; call once after build."""
        for name, mod in self.named_modules():
            reset = getattr(mod, "reset_parameters", None)
            if reset is None:
                continue

            def make(suffix: str, _name=name) -> np.random.Generator:
                key = f"{_name}.{suffix}" if _name else suffix
                return rng.stream(seed, key)

            reset(make)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def count_params(module: Module) -> int:
    """Total trainable parameter elements."""
    return sum(t.size for t in module.parameters())


def _uniform_fan_in(gen: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    k = 1.0 / math.sqrt(fan_in)
    return gen.uniform(-k, k, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, stride: int = 1, pad=0,
                 zero_init: bool = False, dtype=np.float32):
        super().__init__()
        kh, kw = conv._pair(kernel)
        self.stride = stride
        self.pad = pad
        self.zero_init = zero_init
        self.w = Tensor(np.zeros((out_ch, in_ch, kh, kw), dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def reset_parameters(self, make_rng: Callable[[str], np.random.Generator]):
        if self.zero_init:
            self.w.data[...] = 0.0
        else:
            fan_in = int(np.prod(self.w.shape[1:]))
            self.w.data[...] = _uniform_fan_in(make_rng("w"), self.w.shape, fan_in, self.w.dtype)
        self.b.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return conv.conv2d(x, self.w, self.b, self.stride, self.pad)


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, stride: int = 1, pad=0,
                 zero_init: bool = False, dtype=np.float32):
        super().__init__()
        kt, kh, kw = conv._triple(kernel)
        self.stride = stride
        self.pad = pad
        self.zero_init = zero_init
        self.w = Tensor(np.zeros((out_ch, in_ch, kt, kh, kw), dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def reset_parameters(self, make_rng):
        if self.zero_init:
            self.w.data[...] = 0.0
        else:
            fan_in = int(np.prod(self.w.shape[1:]))
            self.w.data[...] = _uniform_fan_in(make_rng("w"), self.w.shape, fan_in, self.w.dtype)
        self.b.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return conv.conv3d(x, self.w, self.b, self.stride, self.pad)


class BatchNorm(Module):
    """Batch normalization over (batch, *spatial) per channel.

    Works on any [N,C,...] layout. Training mode normalizes with batch
    statistics and folds them into the running buffers (momentum 0.1 by
    default); eval mode uses the running buffers, so repeated eval passes
    are idempotent.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))

    def reset_parameters(self, make_rng):
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean.data[...] = 0.0
        self.running_var.data[...] = 1.0

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batchnorm expects {self.gamma.shape[0]} channels, got {x.shape[1]}")
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        if self.training:
            mean = tmean(x, axes, keepdims=True)
            centered = x - mean
            var = tmean(centered * centered, axes, keepdims=True)
            n = x.size // x.shape[1]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean.data[...] = (1 - m) * self.running_mean.data \
                + m * mean.data.reshape(-1)
            self.running_var.data[...] = (1 - m) * self.running_var.data + m * unbiased
            xhat = centered / tsqrt(var + self.eps)
        else:
            mean = self.running_mean.data.reshape(bshape)
            std = np.sqrt(self.running_var.data.reshape(bshape) + self.eps)
            xhat = (x - Tensor(mean.astype(x.dtype))) * Tensor((1.0 / std).astype(x.dtype))
        return xhat * self.gamma.reshape(bshape) + self.beta.reshape(bshape)


class LayerNorm(Module):
    """Normalization over the channel axis (axis 1) at each position."""

    def __init__(self, channels: int, eps: float = 1e-5, affine: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.affine = affine
        if affine:
            self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
            self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.channels = channels

    def reset_parameters(self, make_rng):
        if self.affine:
            self.gamma.data[...] = 1.0
            self.beta.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"layernorm expects {self.channels} channels, got {x.shape[1]}")
        mean = tmean(x, 1, keepdims=True)
        centered = x - mean
        var = tmean(centered * centered, 1, keepdims=True)
        xhat = centered / tsqrt(var + self.eps)
        if not self.affine:
            return xhat
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        return xhat * self.gamma.reshape(bshape) + self.beta.reshape(bshape)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self._rng: Optional[np.random.Generator] = None

    def reset_parameters(self, make_rng):
        self._rng = make_rng("mask")

    def forward(self, x: Tensor) -> Tensor:
        if self.training and self._rng is None:
            raise RuntimeError("Dropout used before initialize()")
        return dropout(x, self.rate, self.training, self._rng)


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return activation(x, self.kind)
