"""Additive siamese convolutional conditioning net.

A shared conv tower embeds template and search crops, depthwise cross-correlation
matches them, and two zero-initialized projections turn the similarity grid into
condition tokens for the decoder and an additive residual for the frozen memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import Conv2d, Linear, Module
from .backbone import TokenMemory
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class TowerConfig:
    channels: tuple = (16, 32, 64)
    strides: tuple = (2, 2, 1)
    kernel: int = 3
    padding: int = 1
    in_channels: int = 3
    sides: tuple = (32, 64)


@dataclass
class ConditionMap:
    similarity: Tensor  # (N, C, 9, 9)
    tokens: Tensor  # (N, K, D)
    residual: Tensor  # (N, G*G, D), row-major over the search-token grid


PIXEL_MEAN = 0.5


def stage_padding(pad: int, stride: int):
    """Symmetric padding, except strided stages drop the trailing pad row/column.

    With a 3x3 kernel, stride 2 and pad 1 on an even side, (S + 2 - 3) / 2 is not
    integral; padding only the leading edge gives S/2 outputs, the same grid a
    floor-mode convolution produces.
    """
    if stride == 1:
        return pad
    return (pad, pad - 1), (pad, pad - 1)


class Tower(Module):
    def __init__(self, cfg: TowerConfig, rng: np.random.Generator, prefix: str = "condnet.tower"):
        self.cfg = cfg
        self.convs = []
        c_in = cfg.in_channels
        for i, (c_out, stride) in enumerate(zip(cfg.channels, cfg.strides)):
            self.convs.append(Conv2d(f"{prefix}.conv{i}", c_in, c_out, cfg.kernel, rng, stride,
                                     stage_padding(cfg.padding, stride)))
            c_in = c_out

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[2] != x.shape[3] or x.shape[2] not in self.cfg.sides:
            raise ConfigurationError(f"tower accepts square sides {self.cfg.sides}, got {x.shape}")
        # centered pixels: with [0, 1] inputs the correlation is dominated by brightness
        x = x - PIXEL_MEAN
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ops.gelu(x)
        return x


def xcorr(template_feat: Tensor, search_feat: Tensor) -> Tensor:
    """Depthwise valid cross-correlation; the template map is the per-channel kernel."""
    if template_feat.shape[1] != search_feat.shape[1]:
        raise DimensionError(
            f"xcorr channel mismatch: template {template_feat.shape}, search {search_feat.shape}"
        )
    return ops.depthwise_xcorr(template_feat, search_feat)


def standardize(sim: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance per sample over (C, H, W); keeps the spatial peak structure."""
    n, c, h, w = sim.shape
    one = np.ones(c * h * w, dtype=sim.dtype)
    flat = ops.layer_norm(sim.reshape(n, c * h * w), Tensor(one), Tensor(one * 0), eps)
    return flat.reshape(n, c, h, w)


class CondNet(Module):
    def __init__(self, dim: int, rng: np.random.Generator, cond_tokens: int = 9, search_grid: int = 8,
                 cfg: TowerConfig | None = None, prefix: str = "condnet"):
        self.cfg = cfg or TowerConfig()
        self.dim = dim
        self.search_grid = search_grid
        self.tower = Tower(self.cfg, rng, f"{prefix}.tower")
        c = self.cfg.channels[-1]
        side = int(round(cond_tokens**0.5))
        if side * side != cond_tokens:
            raise ConfigurationError(f"cond_tokens must be a perfect square, got {cond_tokens}")
        self.pool_side = side
        self.token_proj = Linear(f"{prefix}.token_proj", c, dim, rng, zero_init=True)
        self.residual_proj = Linear(f"{prefix}.residual_proj", c, dim, rng, zero_init=True)

    @property
    def cond_tokens(self) -> int:
        return self.pool_side**2

    def similarity(self, template, search) -> Tensor:
        return standardize(xcorr(self.tower(template), self.tower(search)))

    def make_condition(self, sim: Tensor) -> ConditionMap:
        n, c, h, w = sim.shape
        k = self.pool_side
        if h % k or w % k:
            raise ConfigurationError(f"similarity grid {h}x{w} cannot be pooled into {k}x{k} tokens")
        pooled = sim.reshape(n, c, k, h // k, k, w // k).mean(axis=(3, 5))
        tokens = self.token_proj(pooled.reshape(n, c, k * k).transpose(0, 2, 1))
        g = self.search_grid
        grid = ops.resize_bilinear(sim, g, g)
        residual = self.residual_proj(grid.reshape(n, c, g * g).transpose(0, 2, 1))
        return ConditionMap(sim, tokens, residual)

    def __call__(self, template, search) -> ConditionMap:
        return self.make_condition(self.similarity(template, search))


def inject(memory: TokenMemory, cond: ConditionMap) -> TokenMemory:
    """Add the residual grid onto the search tokens; template tokens pass through."""
    tokens = memory.tokens
    if cond.residual.shape[1] != memory.n_search or cond.residual.shape[-1] != tokens.shape[-1]:
        raise DimensionError(
            f"residual {cond.residual.shape} does not match {memory.n_search} search tokens of dim {tokens.shape[-1]}"
        )
    z = ops.getitem(tokens, (slice(None), slice(0, memory.n_template)))
    x = ops.getitem(tokens, (slice(None), slice(memory.n_template, None)))
    return TokenMemory(ops.concat([z, x + cond.residual], axis=1), memory.n_template, memory.n_search)
