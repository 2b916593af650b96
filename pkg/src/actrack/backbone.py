"""Joint template/search ViT encoder and its masked-patch pretraining head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, backward, no_grad, ops, reset_tape
from .autodiff.nn import MLP, LayerNorm, Linear, Module, MultiHeadAttention, normal, zeros
from .errors import ConfigurationError

TEMPLATE, SEARCH = 0, 1


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    dim: int = 128
    heads: int = 4
    layers: int = 4
    template_side: int = 32
    search_side: int = 64
    mlp_ratio: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.template_side % self.patch_size or self.search_side % self.patch_size:
            raise ConfigurationError(
                f"image sides {self.template_side}/{self.search_side} not divisible by patch {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ConfigurationError(f"embed dim {self.dim} not divisible by heads {self.heads}")

    @property
    def template_tokens(self) -> int:
        return (self.template_side // self.patch_size) ** 2

    @property
    def search_tokens(self) -> int:
        return (self.search_side // self.patch_size) ** 2

    @property
    def search_grid(self) -> int:
        return self.search_side // self.patch_size


@dataclass
class TokenMemory:
    """Encoder output: template tokens followed by search tokens."""

    tokens: Tensor  # (N, N_z + N_x, D)
    n_template: int
    n_search: int

    @property
    def segment_ids(self) -> np.ndarray:
        return np.array([TEMPLATE] * self.n_template + [SEARCH] * self.n_search)

    @property
    def position_ids(self) -> np.ndarray:
        return np.concatenate([np.arange(self.n_template), np.arange(self.n_search)])


class Block(Module):
    def __init__(self, name: str, cfg: EncoderConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(f"{name}.norm1", cfg.dim)
        self.attn = MultiHeadAttention(f"{name}.attn", cfg.dim, cfg.heads, rng)
        self.norm2 = LayerNorm(f"{name}.norm2", cfg.dim)
        self.mlp = MLP(f"{name}.mlp", cfg.dim, cfg.mlp_ratio, rng)

    def __call__(self, x: Tensor, keep_weights: bool = False) -> Tensor:
        x = x + self.attn(self.norm1(x), keep_weights=keep_weights)
        return x + self.mlp(self.norm2(x))


def patchify(images: np.ndarray | Tensor, patch: int) -> Tensor:
    """(N, C, S, S) -> (N, (S/P)^2, P*P*C), patches in row-major grid order."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    n, c, s, _ = x.shape
    if s % patch:
        raise ConfigurationError(f"image side {s} not divisible by patch size {patch}")
    g = s // patch
    x = x.reshape(n, c, g, patch, g, patch).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(n, g * g, patch * patch * c)


class Backbone(Module):
    """Pre-norm ViT over the concatenated (template || search) token sequence."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "backbone"):
        self.cfg = cfg
        d = cfg.dim
        self.patch = Linear(f"{prefix}.patch", cfg.patch_size**2 * cfg.channels, d, rng)
        self.pos_template = Parameter(f"{prefix}.pos_template", normal(rng, (cfg.template_tokens, d), 0.02))
        self.pos_search = Parameter(f"{prefix}.pos_search", normal(rng, (cfg.search_tokens, d), 0.02))
        self.segment = Parameter(f"{prefix}.segment", normal(rng, (2, d), 0.02))
        self.blocks = [Block(f"{prefix}.block{i}", cfg, rng) for i in range(cfg.layers)]
        self.norm = LayerNorm(f"{prefix}.norm", d)

    def _check(self, images, side: int, role: str) -> None:
        shape = images.shape
        if len(shape) != 4 or shape[2] != shape[3]:
            raise ConfigurationError(f"{role} images must be (N, C, S, S), got {shape}")
        if shape[2] % self.cfg.patch_size:
            raise ConfigurationError(f"{role} side {shape[2]} not divisible by patch size {self.cfg.patch_size}")
        if shape[2] != side:
            raise ConfigurationError(f"{role} side must be {side}, got {shape[2]}")

    def patch_embed(self, images, segment: int) -> Tensor:
        """Linear patch projection plus learned position and segment embeddings."""
        side = self.cfg.template_side if segment == TEMPLATE else self.cfg.search_side
        self._check(images, side, "template" if segment == TEMPLATE else "search")
        tokens = self.patch(patchify(images, self.cfg.patch_size))
        pos = self.pos_template if segment == TEMPLATE else self.pos_search
        return tokens + pos + ops.getitem(self.segment, slice(segment, segment + 1))

    def run_blocks(self, x: Tensor, keep_weights: bool = False) -> Tensor:
        for block in self.blocks:
            x = block(x, keep_weights=keep_weights)
        return self.norm(x)

    def encode(self, template, search, keep_weights: bool = False) -> TokenMemory:
        z = self.patch_embed(template, TEMPLATE)
        x = self.patch_embed(search, SEARCH)
        out = self.run_blocks(ops.concat([z, x], axis=1), keep_weights=keep_weights)
        return TokenMemory(out, z.shape[1], x.shape[1])

    def attention_maps(self) -> list[np.ndarray]:
        return [b.attn.last_weights for b in self.blocks if b.attn.last_weights is not None]


class PretrainHead(Module):
    """Mask token and pixel-reconstruction projection; discarded after pretraining."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "pretrain"):
        self.mask_token = Parameter(f"{prefix}.mask_token", normal(rng, (cfg.dim,), 0.02))
        self.recon = Linear(f"{prefix}.recon", cfg.dim, cfg.patch_size**2 * cfg.channels, rng)


def sample_mask(rng: np.random.Generator, batch: int, n_tokens: int, mask_ratio: float) -> np.ndarray:
    """Boolean (batch, n_tokens) mask with exactly round(ratio * n) entries set per row."""
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigurationError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    k = int(round(mask_ratio * n_tokens))
    if k < 1:
        raise ConfigurationError(f"mask_ratio {mask_ratio} masks no tokens out of {n_tokens}")
    mask = np.zeros((batch, n_tokens), dtype=bool)
    for i in range(batch):
        mask[i, rng.permutation(n_tokens)[:k]] = True
    return mask


def reconstruction_loss(backbone: Backbone, head: PretrainHead, templates, searches, mask: np.ndarray) -> Tensor:
    """MSE between reconstructed and true pixels, averaged over masked search patches only."""
    cfg = backbone.cfg
    z = backbone.patch_embed(templates, TEMPLATE)
    target = patchify(searches, cfg.patch_size).data
    tokens = backbone.patch(patchify(searches, cfg.patch_size))
    m = mask[..., None].astype(tokens.dtype)
    tokens = tokens * (1.0 - m) + ops.mul(head.mask_token, m)
    x = tokens + backbone.pos_search + ops.getitem(backbone.segment, slice(SEARCH, SEARCH + 1))
    out = backbone.run_blocks(ops.concat([z, x], axis=1))
    pred = head.recon(ops.getitem(out, (slice(None), slice(z.shape[1], None))))
    diff = pred - target
    per_elem = diff * diff * m
    count = float(mask.sum() * target.shape[-1])
    return ops.sum(per_elem) * (1.0 / count)


def pretrain_step(backbone, head, optimizer, templates, searches, rng, mask_ratio: float = 0.5) -> float:
    """One masked-reconstruction update; returns the loss before the update."""
    mask = sample_mask(rng, searches.shape[0], backbone.cfg.search_tokens, mask_ratio)
    reset_tape()
    optimizer.zero_grad()
    loss = reconstruction_loss(backbone, head, templates, searches, mask)
    backward(loss)
    optimizer.step()
    return float(loss.data)


def evaluate_reconstruction(backbone, head, templates, searches, mask: np.ndarray) -> float:
    with no_grad():
        return float(reconstruction_loss(backbone, head, templates, searches, mask).data)
