"""Tiny parameter-container layer on top of the autodiff tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Uniform init scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class giving a deterministic name -> parameter view.

    Attributes that are parameter tensors, Modules, or lists of Modules are
    discovered in definition order, which fixes checkpoint layout.
    """

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.bias = ad.parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class PatchConv(Module):
    """Strided conv with kernel == stride (non-overlapping windows)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        fan_in = in_ch * stride * stride
        self.weight = uniform_init(rng, (in_ch, stride, stride, out_ch), fan_in)
        self.bias = ad.parameter(np.zeros(out_ch))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride)
