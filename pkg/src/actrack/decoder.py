"""Coordinate-token vocabulary and the autoregressive box decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, no_grad, ops
from .autodiff.nn import MLP, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask, normal
from .backbone import TokenMemory
from .errors import DomainError

N_COORDS = 4  # cx, cy, w, h


class Vocabulary:
    """``bins`` coordinate levels followed by START and PAD."""

    def __init__(self, bins: int = 400):
        if bins < 2:
            raise DomainError(f"need at least 2 bins, got {bins}")
        self.bins = bins
        self.start = bins
        self.pad = bins + 1

    @property
    def size(self) -> int:
        return self.bins + 2

    def quantize(self, v: float) -> int:
        return quantize(v, self.bins)

    def dequantize(self, t: int) -> float:
        return dequantize(t, self.bins)

    def encode_box(self, box) -> np.ndarray:
        return np.array([quantize(v, self.bins) for v in box], dtype=np.int64)

    def decode_box(self, tokens) -> np.ndarray:
        return np.array([dequantize(int(t), self.bins) for t in tokens], dtype=np.float64)


def quantize(v: float, bins: int) -> int:
    """Round-half-up of clamp(v, 0, 1) onto ``bins`` evenly spaced levels."""
    v = min(max(float(v), 0.0), 1.0)
    return int(math.floor(v * (bins - 1) + 0.5))


def dequantize(t: int, bins: int) -> float:
    t = int(t)
    if not 0 <= t < bins:
        raise DomainError(f"token {t} is not a coordinate bin (0..{bins - 1})")
    return t / (bins - 1)


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 128
    mlp_ratio: int = 4
    cond_tokens: int = 9

    @property
    def prefix_len(self) -> int:
        return N_COORDS + self.cond_tokens + 1

    @property
    def max_len(self) -> int:
        return self.prefix_len + N_COORDS - 1


class DecoderBlock(Module):
    def __init__(self, name: str, cfg: DecoderConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(f"{name}.norm1", cfg.dim)
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", cfg.dim, cfg.heads, rng)
        self.norm2 = LayerNorm(f"{name}.norm2", cfg.dim)
        self.cross_attn = MultiHeadAttention(f"{name}.cross_attn", cfg.dim, cfg.heads, rng)
        self.norm3 = LayerNorm(f"{name}.norm3", cfg.dim)
        self.mlp = MLP(f"{name}.mlp", cfg.dim, cfg.mlp_ratio, rng)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.self_attn(self.norm1(x), mask=mask)
        x = x + self.cross_attn(self.norm2(x), context=memory)
        return x + self.mlp(self.norm3(x))


def bin_features(bins: int, dim: int, scale: float) -> np.ndarray:
    """Sinusoids of the normalized bin value at geometric frequencies.

    Nearby bins get similar vectors, so what is learned for one coordinate value
    transfers to its neighbours instead of each of the ``bins`` rows starting cold.
    """
    v = np.arange(bins) / (bins - 1)
    freqs = np.pi * np.geomspace(1.0, bins / 2.0, dim // 2)
    ang = v[:, None] * freqs[None, :]
    feats = np.zeros((bins, dim))
    feats[:, 0 : 2 * (dim // 2) : 2] = np.sin(ang)
    feats[:, 1 : 2 * (dim // 2) : 2] = np.cos(ang)
    return feats * scale


BIN_INIT_SCALE = 0.1


class SequenceDecoder(Module):
    """Causal Transformer that emits the four box tokens one at a time."""

    def __init__(self, cfg: DecoderConfig, vocab: Vocabulary, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        self.embed = Parameter("vocab.embed", normal(rng, (vocab.size, cfg.dim), 0.02))
        self.pos = Parameter("decoder.pos", normal(rng, (cfg.max_len, cfg.dim), 0.02))
        self.blocks = [DecoderBlock(f"decoder.block{i}", cfg, rng) for i in range(cfg.layers)]
        self.norm = LayerNorm("decoder.norm", cfg.dim)
        self.head = Linear("decoder.head", cfg.dim, vocab.size, rng)
        # coordinate rows of the input embedding and output head share a smooth init
        feats = bin_features(vocab.bins, cfg.dim, BIN_INIT_SCALE).astype(self.embed.dtype)
        self.embed.data[: vocab.bins] = feats
        self.head.weight.data[:, : vocab.bins] = feats.T

    def _check_bins(self, tokens: np.ndarray, what: str) -> None:
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab.bins):
            raise DomainError(f"{what} must be coordinate bins in [0, {self.vocab.bins}), got {tokens.tolist()}")

    def build_queries(self, prev_tokens, cond_tokens: Tensor) -> Tensor:
        """[embed(prev) || condition tokens || embed(START)] with query-position embeddings."""
        prev = np.atleast_2d(np.asarray(prev_tokens, dtype=np.int64))
        self._check_bins(prev, "previous tokens")
        n = prev.shape[0]
        if cond_tokens.shape[1:] != (self.cfg.cond_tokens, self.cfg.dim):
            raise DomainError(f"condition tokens must be (N, {self.cfg.cond_tokens}, {self.cfg.dim}), got {cond_tokens.shape}")
        start = np.full((n, 1), self.vocab.start, dtype=np.int64)
        q = ops.concat([ops.embedding(self.embed, prev), cond_tokens, ops.embedding(self.embed, start)], axis=1)
        return q + ops.getitem(self.pos, slice(0, self.cfg.prefix_len))

    def _extend(self, queries: Tensor, tokens: np.ndarray) -> Tensor:
        if tokens.shape[1] == 0:
            return queries
        p = self.cfg.prefix_len
        emb = ops.embedding(self.embed, tokens) + ops.getitem(self.pos, slice(p, p + tokens.shape[1]))
        return ops.concat([queries, emb], axis=1)

    def forward(self, seq: Tensor, memory: TokenMemory) -> Tensor:
        """Logits (N, T, V) for every position of ``seq``."""
        mask = causal_mask(seq.shape[1], seq.dtype)
        x = seq
        for block in self.blocks:
            x = block(x, memory.tokens, mask)
        return self.head(self.norm(x))

    def teacher_forced_logits(self, queries: Tensor, memory: TokenMemory, targets) -> Tensor:
        """Logits (N, 4, V); position i sees the targets before i."""
        t = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        self._check_bins(t, "targets")
        seq = self._extend(queries, t[:, : N_COORDS - 1])
        logits = self.forward(seq, memory)
        start = self.cfg.prefix_len - 1
        return ops.getitem(logits, (slice(None), slice(start, start + N_COORDS)))

    def teacher_forced_loss(self, queries: Tensor, memory: TokenMemory, targets) -> Tensor:
        t = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        logits = self.teacher_forced_logits(queries, memory, t)
        return ops.cross_entropy(logits, t)

    def decode_greedy(self, queries: Tensor, memory: TokenMemory, return_logits: bool = False):
        """Argmax decoding of 4 tokens with START/PAD masked out; ties go to the lower id."""
        n = queries.shape[0]
        out = np.zeros((n, 0), dtype=np.int64)
        steps = []
        with no_grad():
            for _ in range(N_COORDS):
                logits = self.forward(self._extend(queries, out), memory).data[:, -1, :]
                steps.append(logits.copy())
                masked = logits.copy()
                masked[:, self.vocab.bins :] = -np.inf
                nxt = np.argmax(masked, axis=-1)
                out = np.concatenate([out, nxt[:, None]], axis=1)
        if return_logits:
            return out, np.stack(steps, axis=1)
        return out
