"""Sample construction and the pretraining / tracker-training loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import AdamW, backward, get_default_dtype, reset_tape
from .backbone import Backbone, PretrainHead, pretrain_step
from .data import SequenceRecord
from .errors import NumericalError
from .tracker import ACTracker, TrackerConfig, clamp_box, crop, search_window, template_window

log = logging.getLogger(__name__)

CENTER_JITTER = 0.10  # fraction of the search-window side
SCALE_RANGE = (0.8, 1.25)


@dataclass
class Batch:
    templates: np.ndarray  # (N, 3, 32, 32)
    searches: np.ndarray  # (N, 3, 64, 64)
    prev_tokens: np.ndarray  # (N, 4)
    targets: np.ndarray  # (N, 4)


class SampleBuilder:
    """Builds training crops exactly as the tracker builds them at inference.

    For frame ``t`` the previous box is the ground truth of ``t - 1`` perturbed by
    center jitter and scale jitter, standing in for an imperfect previous prediction.
    The search window is centered on that box, the previous tokens are that box in
    the window, and the target is the ground truth of ``t`` in the same window.
    """

    def __init__(self, records: Sequence[SequenceRecord], cfg: TrackerConfig, bins: int):
        self.records = list(records)
        self.cfg = cfg
        self.bins = bins
        self.templates = [crop(r.frames[0], template_window(r.boxes[0], cfg)) for r in self.records]

    def _quantize(self, coords) -> np.ndarray:
        c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, 1.0)
        return np.floor(c * (self.bins - 1) + 0.5).astype(np.int64)

    def jittered_box(self, rng: np.random.Generator, box, frame_shape):
        x, y, w, h = box
        scale = math.exp(rng.uniform(math.log(SCALE_RANGE[0]), math.log(SCALE_RANGE[1])))
        side = self.cfg.context_x * max(w, h)
        dx, dy = rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=2) * side
        nw, nh = w * scale, h * scale
        cx, cy = x + w / 2.0 + dx, y + h / 2.0 + dy
        return clamp_box((cx - nw / 2.0, cy - nh / 2.0, nw, nh), frame_shape)

    def sample(self, rng: np.random.Generator, seq: int, t: int):
        rec = self.records[seq]
        prev = self.jittered_box(rng, rec.boxes[t - 1], rec.frames[t].shape)
        window = search_window(prev, self.cfg)
        search = crop(rec.frames[t], window)
        _, _, pw, ph = prev
        prev_coords = (0.5, 0.5, pw / window.side, ph / window.side)
        target = window.box_to_window(rec.boxes[t])
        return self.templates[seq], search, self._quantize(prev_coords), self._quantize(target)

    def batch(self, rng: np.random.Generator, size: int) -> Batch:
        items = []
        for _ in range(size):
            seq = int(rng.integers(len(self.records)))
            t = int(rng.integers(1, len(self.records[seq])))
            items.append(self.sample(rng, seq, t))
        dt = get_default_dtype()
        return Batch(
            np.stack([i[0] for i in items]).astype(dt),
            np.stack([i[1] for i in items]).astype(dt),
            np.stack([i[2] for i in items]),
            np.stack([i[3] for i in items]),
        )

    def pretrain_batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        b = self.batch(rng, size)
        return b.templates, b.searches


@dataclass
class TrainStats:
    losses: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    trainable_params: int = 0
    frozen_params: int = 0
    optimizer_state_elements: int = 0

    @property
    def median_step_ms(self) -> float:
        return float(np.median(self.step_times) * 1000.0) if self.step_times else float("nan")

    def efficiency(self) -> dict:
        return {
            "trainable_params": self.trainable_params,
            "frozen_params": self.frozen_params,
            "optimizer_state_elements": self.optimizer_state_elements,
            "median_step_ms": f"{self.median_step_ms:.3f}",
        }


def _log_line(step: int, loss: float, times: list) -> str:
    return f"step {step:6d} loss {loss:.6f} median_step_ms {np.median(times[-10:]) * 1000.0:.3f}"


def pretrain(backbone: Backbone, head: PretrainHead, builder: SampleBuilder, steps: int, batch_size: int,
             lr: float, weight_decay: float, mask_ratio: float, rng: np.random.Generator,
             logger: Optional[Callable[[str], None]] = None) -> TrainStats:
    opt = AdamW(backbone.parameters() + head.parameters(), lr=lr, weight_decay=weight_decay)
    stats = TrainStats(trainable_params=backbone.num_elements(False) + head.num_elements(False),
                       optimizer_state_elements=opt.state_size())
    for step in range(1, steps + 1):
        templates, searches = builder.pretrain_batch(rng, batch_size)
        t0 = time.perf_counter()
        loss = pretrain_step(backbone, head, opt, templates, searches, rng, mask_ratio)
        stats.step_times.append(time.perf_counter() - t0)
        if not math.isfinite(loss):
            raise NumericalError(f"pretraining loss became {loss} at step {step}")
        stats.losses.append(loss)
        if logger and step % 10 == 0:
            logger(_log_line(step, loss, stats.step_times))
    return stats


def train_step(model: ACTracker, opt: AdamW, batch: Batch, use_condition: bool = True) -> float:
    reset_tape()
    opt.zero_grad()
    loss = model.loss(batch.templates, batch.searches, batch.prev_tokens, batch.targets, use_condition)
    backward(loss)
    opt.step()
    return float(loss.data)


def cosine_lr(base: float, step: int, total: int, warmup: int) -> float:
    if step <= warmup:
        return base * step / max(warmup, 1)
    frac = (step - warmup) / max(total - warmup, 1)
    return base * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0))))


def train(model: ACTracker, builder: SampleBuilder, steps: int, batch_size: int, lr: float,
          weight_decay: float, rng: np.random.Generator, logger: Optional[Callable[[str], None]] = None,
          schedule: bool = True) -> tuple[TrainStats, AdamW]:
    """Train every non-frozen parameter of ``model``; frozen ones get no moments and no grads."""
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    use_condition = any(not p.frozen for p in model.condnet.parameters())
    stats = TrainStats(trainable_params=model.num_elements(False), frozen_params=model.num_elements(True),
                       optimizer_state_elements=opt.state_size())
    warmup = min(100, steps // 10)
    for step in range(1, steps + 1):
        if schedule:
            opt.lr = cosine_lr(lr, step, steps, warmup)
        batch = builder.batch(rng, batch_size)
        t0 = time.perf_counter()
        loss = train_step(model, opt, batch, use_condition)
        stats.step_times.append(time.perf_counter() - t0)
        if not math.isfinite(loss):
            raise NumericalError(f"training loss became {loss} at step {step}")
        stats.losses.append(loss)
        if logger and step % 10 == 0:
            logger(_log_line(step, loss, stats.step_times))
    return stats, opt
