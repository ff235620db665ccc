"""Minimal layer containers over the engine: parameter registration, a few
standard layers, and the seeded initializers used across the model."""

from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import Tensor
from .rng import Rng


def trunc_normal(shape, std: float, rng: Rng) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normals(shape) * std
    flat = out.reshape(-1)
    bad = np.abs(flat) > 2.0 * std
    while bad.any():
        flat[bad] = rng.normals(int(bad.sum())) * std
        bad = np.abs(flat) > 2.0 * std
    return out


def fanin_uniform(shape, fan_in: int, rng: Rng) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniforms(int(np.prod(shape)), -bound, bound).reshape(shape)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Base container: child modules and parameters found by attribute walk.

    Attribute insertion order is preserved, so parameter naming (and with it
    checkpoint layout) is deterministic for a given architecture.
    """

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p


class Linear(Module):
    """y = x @ w + b with w of shape (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, std: float = 0.02):
        self.w = parameter(trunc_normal((in_dim, out_dim), std, rng))
        self.b = parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        out = E.matmul(x, self.w)
        bias = E.reshape(self.b, (1,) * (out.ndim - 1) + (out.shape[-1],))
        for axis in range(out.ndim - 1):
            bias = E.expand(bias, axis, out.shape[axis])
        return E.add(out, bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return E.layernorm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: Rng,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        self.w = parameter(fanin_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng))
        self.b = parameter(np.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return E.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ChannelAffine(Module):
    """Per-channel scale/shift; the batch-statistics-free stand-in for norm."""

    def __init__(self, channels: int):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return E.channel_affine(x, self.gamma, self.beta)
