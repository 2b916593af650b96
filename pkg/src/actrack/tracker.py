"""Model assembly and the frame-by-frame tracking loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff.nn import Module
from .backbone import Backbone, EncoderConfig, TokenMemory
from .condnet import CondNet, ConditionMap, inject
from .decoder import DecoderConfig, SequenceDecoder, Vocabulary
from .errors import ArgumentError, ConfigurationError, StateError

MODES = ("additive", "frozen-only", "full-finetune")


@dataclass(frozen=True)
class TrackerConfig:
    dim: int = 128
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    bins: int = 400
    cond_tokens: int = 9
    context_z: float = 2.0
    context_x: float = 4.0
    template_side: int = 32
    search_side: int = 64
    patch_size: int = 8

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(patch_size=self.patch_size, dim=self.dim, heads=self.heads, layers=self.enc_layers,
                             template_side=self.template_side, search_side=self.search_side)

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(layers=self.dec_layers, heads=self.heads, dim=self.dim, cond_tokens=self.cond_tokens)


class ACTracker(Module):
    """Frozen encoder + additive condition net + coordinate-sequence decoder."""

    def __init__(self, cfg: TrackerConfig, rng: np.random.Generator, backbone: Optional[Backbone] = None):
        self.cfg = cfg
        enc = cfg.encoder()
        self.backbone = backbone if backbone is not None else Backbone(enc, rng)
        self.condnet = CondNet(cfg.dim, rng, cond_tokens=cfg.cond_tokens, search_grid=enc.search_grid)
        self.vocab = Vocabulary(cfg.bins)
        self.decoder = SequenceDecoder(cfg.decoder(), self.vocab, rng)

    def set_mode(self, mode: str) -> None:
        """Freeze the parts that a training mode does not update."""
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
        if mode in ("additive", "frozen-only"):
            self.backbone.freeze()
        elif any(p.frozen for p in self.backbone.parameters()):
            raise ConfigurationError("full-finetune needs an unfrozen backbone; load it with unfreeze=True")
        if mode == "frozen-only":
            self.condnet.freeze()

    def condition(self, templates, searches) -> ConditionMap:
        return self.condnet(templates, searches)

    def fuse(self, templates, searches, prev_tokens, use_condition: bool = True) -> tuple[Tensor, TokenMemory]:
        """Queries and fused memory for a batch; ``use_condition=False`` drops the condition path."""
        memory = self.backbone.encode(templates, searches)
        if use_condition:
            cond = self.condition(templates, searches)
            memory = inject(memory, cond)
            cond_tokens = cond.tokens
        else:
            n = memory.tokens.shape[0]
            cond_tokens = Tensor(np.zeros((n, self.cfg.cond_tokens, self.cfg.dim), dtype=memory.tokens.dtype))
        return self.decoder.build_queries(prev_tokens, cond_tokens), memory

    def loss(self, templates, searches, prev_tokens, targets, use_condition: bool = True) -> Tensor:
        queries, memory = self.fuse(templates, searches, prev_tokens, use_condition)
        return self.decoder.teacher_forced_loss(queries, memory, targets)

    def logits(self, templates, searches, prev_tokens, targets, use_condition: bool = True) -> Tensor:
        queries, memory = self.fuse(templates, searches, prev_tokens, use_condition)
        return self.decoder.teacher_forced_logits(queries, memory, targets)

    def predict(self, templates, searches, prev_tokens, use_condition: bool = True, return_logits: bool = False):
        with no_grad():
            queries, memory = self.fuse(templates, searches, prev_tokens, use_condition)
            return self.decoder.decode_greedy(queries, memory, return_logits=return_logits)


# --- windows and crops -------------------------------------------------------


@dataclass(frozen=True)
class WindowMap:
    """Square window of side ``side`` centered at (cx, cy), resampled to ``out`` pixels.

    The center is stored rather than the top-left corner so that re-centering on a
    box reproduces the box center bit-for-bit.
    """

    cx: float
    cy: float
    side: float
    out: int

    @classmethod
    def around(cls, cx: float, cy: float, side: float, out: int) -> "WindowMap":
        return cls(float(cx), float(cy), float(side), out)

    @property
    def wx(self) -> float:
        return self.cx - self.side / 2.0

    @property
    def wy(self) -> float:
        return self.cy - self.side / 2.0

    @property
    def center(self) -> tuple[float, float]:
        return self.cx, self.cy

    def to_window(self, x: float, y: float) -> tuple[float, float]:
        """Image point -> normalized [0, 1] window coordinates."""
        return (x - self.wx) / self.side, (y - self.wy) / self.side

    def to_image(self, u: float, v: float) -> tuple[float, float]:
        return self.wx + u * self.side, self.wy + v * self.side

    def box_to_window(self, box) -> tuple[float, float, float, float]:
        """Image (x, y, w, h) -> normalized (cx, cy, w, h)."""
        x, y, w, h = box
        u, v = self.to_window(x + w / 2.0, y + h / 2.0)
        return u, v, w / self.side, h / self.side

    def box_to_image(self, coords) -> tuple[float, float, float, float]:
        """Normalized (cx, cy, w, h) -> image (x, y, w, h)."""
        u, v, bw, bh = coords
        cx, cy = self.to_image(u, v)
        w, h = bw * self.side, bh * self.side
        return cx - w / 2.0, cy - h / 2.0, w, h


def validate_box(box, frame_shape=None) -> None:
    x, y, w, h = (float(v) for v in box)
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        raise ArgumentError(f"box {box} has non-finite values")
    if w < 1 or h < 1:
        raise ArgumentError(f"degenerate box {box}: width and height must be >= 1")
    if frame_shape is not None:
        fh, fw = frame_shape[:2]
        if x < 0 or y < 0 or x + w > fw + 1e-6 or y + h > fh + 1e-6:
            raise ArgumentError(f"box {box} lies outside the {fw}x{fh} frame")


def crop(frame: np.ndarray, window: WindowMap) -> np.ndarray:
    """Bilinear resample of ``window`` to (3, out, out) floats in [0, 1].

    Pixels outside the frame take the per-channel mean of the in-frame part of the window.
    """
    img = frame.astype(np.float64) / 255.0 if frame.dtype == np.uint8 else frame.astype(np.float64)
    fh, fw = img.shape[:2]
    x0, y0 = int(math.floor(window.wx)), int(math.floor(window.wy))
    x1, y1 = int(math.ceil(window.wx + window.side)), int(math.ceil(window.wy + window.side))
    region = img[max(y0, 0) : min(y1, fh), max(x0, 0) : min(x1, fw)]
    pad = region.reshape(-1, 3).mean(axis=0) if region.size else img.reshape(-1, 3).mean(axis=0)

    step = window.side / window.out
    coords = (np.arange(window.out) + 0.5) * step - 0.5
    xs, ys = window.wx + coords, window.wy + coords
    xf, yf = np.floor(xs).astype(np.int64), np.floor(ys).astype(np.int64)
    ax, ay = xs - xf, ys - yf

    def gather(yi, xi):
        valid = ((yi >= 0) & (yi < fh))[:, None] & ((xi >= 0) & (xi < fw))[None, :]
        vals = img[np.clip(yi, 0, fh - 1)[:, None], np.clip(xi, 0, fw - 1)[None, :]]
        return np.where(valid[..., None], vals, pad)

    out = (gather(yf, xf) * ((1 - ay)[:, None] * (1 - ax)[None, :])[..., None]
           + gather(yf, xf + 1) * ((1 - ay)[:, None] * ax[None, :])[..., None]
           + gather(yf + 1, xf) * (ay[:, None] * (1 - ax)[None, :])[..., None]
           + gather(yf + 1, xf + 1) * (ay[:, None] * ax[None, :])[..., None])
    return out.transpose(2, 0, 1)


def template_window(box, cfg: TrackerConfig) -> WindowMap:
    x, y, w, h = box
    return WindowMap.around(x + w / 2.0, y + h / 2.0, cfg.context_z * max(w, h), cfg.template_side)


def search_window(box, cfg: TrackerConfig) -> WindowMap:
    x, y, w, h = box
    return WindowMap.around(x + w / 2.0, y + h / 2.0, cfg.context_x * max(w, h), cfg.search_side)


def crop_search(frame: np.ndarray, prev_box, cfg: TrackerConfig) -> tuple[np.ndarray, WindowMap]:
    validate_box(prev_box)
    window = search_window(prev_box, cfg)
    return crop(frame, window), window


def clamp_box(box, frame_shape) -> tuple[float, float, float, float]:
    """Clip to the frame keeping w, h >= 1."""
    fh, fw = frame_shape[:2]
    x, y, w, h = (float(v) for v in box)
    x1 = min(max(x, 0.0), fw - 1.0)
    y1 = min(max(y, 0.0), fh - 1.0)
    # width/height are set directly so the >= 1 bound survives float rounding
    w = min(max(x + w - x1, 1.0), fw - x1)
    h = min(max(y + h - y1, 1.0), fh - y1)
    return x1, y1, w, h


# --- runtime -----------------------------------------------------------------


@dataclass
class TrackState:
    template: Optional[np.ndarray] = None
    prev_box: Optional[tuple] = None
    prev_tokens: Optional[np.ndarray] = None
    window_map: Optional[WindowMap] = None
    frame_index: int = 0
    history: list = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return self.template is not None


class Tracker:
    """Runs a (read-only) ACTracker over frames; one TrackState per sequence."""

    def __init__(self, model: ACTracker, use_condition: bool = True):
        self.model = model
        self.cfg = model.cfg
        self.use_condition = use_condition

    def recentered_tokens(self, box) -> np.ndarray:
        """Tokens of ``box`` inside the search window centered on it."""
        window = search_window(box, self.cfg)
        _, _, w, h = box
        return self.model.vocab.encode_box((0.5, 0.5, w / window.side, h / window.side))

    def init(self, frame: np.ndarray, box) -> TrackState:
        validate_box(box, frame.shape)
        box = tuple(float(v) for v in box)
        template = crop(frame, template_window(box, self.cfg)).astype(np.float32)
        template.setflags(write=False)
        return TrackState(template=template, prev_box=box, prev_tokens=self.recentered_tokens(box),
                          window_map=search_window(box, self.cfg), frame_index=0)

    def track_frame(self, state: TrackState, frame: np.ndarray) -> tuple[tuple, TrackState]:
        if not state.initialized:
            raise StateError("track_frame called on an uninitialized state; call init first")
        dtype = self.model.decoder.embed.dtype
        search, window = crop_search(frame, state.prev_box, self.cfg)
        tokens = self.model.predict(state.template[None].astype(dtype), search[None].astype(dtype),
                                    state.prev_tokens[None], use_condition=self.use_condition)[0]
        coords = self.model.vocab.decode_box(tokens)
        box = clamp_box(window.box_to_image(coords), frame.shape)
        new_state = TrackState(template=state.template, prev_box=box, prev_tokens=self.recentered_tokens(box),
                               window_map=window, frame_index=state.frame_index + 1,
                               history=state.history + [tokens])
        return box, new_state

    def run_sequence(self, frames, init_box) -> list[tuple]:
        if len(frames) == 0:
            raise ArgumentError("cannot track an empty sequence")
        state = self.init(frames[0], init_box)
        boxes = [tuple(float(v) for v in init_box)]
        for frame in frames[1:]:
            box, state = self.track_frame(state, frame)
            boxes.append(box)
        return boxes


def format_results(boxes) -> str:
    return "".join(f"{i},{x:.2f},{y:.2f},{w:.2f},{h:.2f}\n" for i, (x, y, w, h) in enumerate(boxes))
