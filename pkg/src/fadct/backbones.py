"""Headless micro-scale feature extractors: a patch transformer encoder and a
pre-activation residual CNN, each projecting to a common feature dimension.

Both accept a single (3, S, S) image or a (B, 3, S, S) batch and emit (D,) /
(B, D) feature vectors. They are deterministic functions of (input, params);
there is no dropout and normalization never uses batch statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor
from .nn import ChannelAffine, Conv2d, LayerNorm, Linear, Module, parameter, trunc_normal
from .rng import Rng


@dataclass(frozen=True)
class MicroViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    out_dim: int = 64
    in_channels: int = 3

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.embed_dim, self.layers,
               self.heads, self.out_dim, self.in_channels) < 1:
            raise ValueError("all transformer extents must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by "
                             f"patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by "
                             f"{self.heads} heads")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class MicroResNetConfig:
    channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    out_dim: int = 64
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channels) < 1 or self.blocks_per_stage < 1 or self.out_dim < 1:
            raise ValueError("resnet config needs >= 1 stage, block and output dim")


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng):
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.wq = Linear(dim, dim, rng.derive("wq"))
        self.wk = Linear(dim, dim, rng.derive("wk"))
        self.wv = Linear(dim, dim, rng.derive("wv"))
        self.wo = Linear(dim, dim, rng.derive("wo"))

    def __call__(self, x: Tensor, return_probs: bool = False):
        b, n, e = x.shape

        def split_heads(t):
            return E.transpose(E.reshape(t, (b, n, self.heads, self.head_dim)),
                               (0, 2, 1, 3))

        q, k, v = split_heads(self.wq(x)), split_heads(self.wk(x)), split_heads(self.wv(x))
        scores = E.mul(E.matmul(q, E.transpose(k, (0, 1, 3, 2))), self.scale)
        probs = E.softmax(scores, axis=-1)
        ctx = E.matmul(probs, v)                              # (b, heads, n, head_dim)
        ctx = E.reshape(E.transpose(ctx, (0, 2, 1, 3)), (b, n, e))
        out = self.wo(ctx)
        return (out, probs) if return_probs else out


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: Rng):
        hidden = max(1, int(round(dim * mlp_ratio)))
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng.derive("attn"))
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng.derive("fc1"))
        self.fc2 = Linear(hidden, dim, rng.derive("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        x = E.add(x, self.attn(self.ln1(x)))
        return E.add(x, self.fc2(E.relu(self.fc1(self.ln2(x)))))


class MicroViT(Module):
    """Patch embedding, class token, learned positions, encoder stack, and a
    projection of the class-token embedding to the shared feature size."""

    def __init__(self, cfg: MicroViTConfig, rng: Rng):
        self.cfg = cfg
        p, e = cfg.patch_size, cfg.embed_dim
        self.patch_embed = Linear(cfg.in_channels * p * p, e, rng.derive("patch"))
        self.cls_token = parameter(trunc_normal((1, 1, e), 0.02, rng.derive("cls")))
        self.pos_embed = parameter(trunc_normal((cfg.tokens + 1, e), 0.02, rng.derive("pos")))
        self.blocks = [TransformerBlock(e, cfg.heads, cfg.mlp_ratio, rng.derive(f"block{i}"))
                       for i in range(cfg.layers)]
        self.ln_final = LayerNorm(e)
        self.proj = Linear(e, cfg.out_dim, rng.derive("proj"))

    def patchify(self, x: Tensor) -> Tensor:
        """(B, C, S, S) -> (B, tokens, C*P*P), patches enumerated row-major."""
        cfg = self.cfg
        b = x.shape[0]
        g = cfg.image_size // cfg.patch_size
        x = E.reshape(x, (b, cfg.in_channels, g, cfg.patch_size, g, cfg.patch_size))
        x = E.transpose(x, (0, 2, 4, 1, 3, 5))
        return E.reshape(x, (b, g * g, cfg.in_channels * cfg.patch_size ** 2))

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        single = x.ndim == 3
        if single:
            x = E.reshape(x, (1,) + x.shape)
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.shape[1:] != want:
            raise ShapeError(f"transformer expects images of shape {want}, got {x.shape[1:]}")
        b = x.shape[0]

        tok = self.patch_embed(self.patchify(x))
        cls = E.expand(self.cls_token, 0, b)
        seq = E.concat([cls, tok], axis=1)
        pos = E.expand(E.reshape(self.pos_embed, (1,) + self.pos_embed.shape), 0, b)
        seq = E.add(seq, pos)
        for block in self.blocks:
            seq = block(seq)
        feat = self.proj(E.tslice(self.ln_final(seq), (slice(None), 0)))
        return E.reshape(feat, (cfg.out_dim,)) if single else feat


class ResidualBlock(Module):
    """Pre-activation basic block: out = skip(x) + conv(relu(affine(conv(relu(affine(x)))))).

    Zeroing every parameter on the residual branch makes the block the skip
    mapping exactly (there is no activation after the addition).
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: Rng):
        self.affine1 = ChannelAffine(in_ch)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng.derive("conv1"), stride=stride, padding=1)
        self.affine2 = ChannelAffine(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng.derive("conv2"), padding=1)
        if stride != 1 or in_ch != out_ch:
            self.skip = Conv2d(in_ch, out_ch, 1, rng.derive("skip"), stride=stride)
        else:
            self.skip = None

    def residual_branch(self, x: Tensor) -> Tensor:
        h = self.conv1(E.relu(self.affine1(x)))
        return self.conv2(E.relu(self.affine2(h)))

    def __call__(self, x: Tensor) -> Tensor:
        identity = self.skip(x) if self.skip is not None else x
        return E.add(identity, self.residual_branch(x))


class MicroResNet(Module):
    def __init__(self, cfg: MicroResNetConfig, rng: Rng):
        self.cfg = cfg
        self.stem = Conv2d(cfg.in_channels, cfg.channels[0], 3, rng.derive("stem"), padding=1)
        self.stages = []
        in_ch = cfg.channels[0]
        for si, ch in enumerate(cfg.channels):
            blocks = []
            for bi in range(cfg.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                blocks.append(ResidualBlock(in_ch, ch, stride, rng.derive(f"s{si}b{bi}")))
                in_ch = ch
            self.stages.append(blocks)
        self.final_affine = ChannelAffine(in_ch)
        self.proj = Linear(in_ch, cfg.out_dim, rng.derive("proj"))

    def named_parameters(self, prefix: str = ""):
        yield from self.stem.named_parameters(f"{prefix}stem.")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_parameters(f"{prefix}stages.{si}.{bi}.")
        yield from self.final_affine.named_parameters(f"{prefix}final_affine.")
        yield from self.proj.named_parameters(f"{prefix}proj.")

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        single = x.ndim == 3
        if single:
            x = E.reshape(x, (1,) + x.shape)
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"resnet expects {cfg.in_channels}-channel input, got {x.shape}")
        h = self.stem(x)
        for blocks in self.stages:
            for block in blocks:
                h = block(h)
        h = E.relu(self.final_affine(h))
        b, c = h.shape[0], h.shape[1]
        pooled = E.tmean(E.reshape(h, (b, c, h.shape[2] * h.shape[3])), axis=2)
        feat = self.proj(pooled)
        return E.reshape(feat, (cfg.out_dim,)) if single else feat


def vit_features(model: MicroViT, image: Tensor) -> Tensor:
    """Feature vector of a single (C, S, S) image."""
    if image.ndim != 3:
        raise ShapeError(f"vit_features expects a (C, S, S) image, got {image.shape}")
    return model(image)


def resnet_features(model: MicroResNet, image: Tensor) -> Tensor:
    if image.ndim != 3:
        raise ShapeError(f"resnet_features expects a (C, S, S) image, got {image.shape}")
    return model(image)


def zero_residual_branches(model: MicroResNet) -> None:
    """Zero every residual-branch parameter (test hook for the skip identity)."""
    for blocks in model.stages:
        for block in blocks:
            for mod in (block.affine1, block.conv1, block.affine2, block.conv2):
                for _, p in mod.named_parameters():
                    p.data[...] = 0.0
