"""Deterministic synthetic tracking sequences and their on-disk format.

Split rule: a sequence seed belongs to the training split when it is even and to
the evaluation split when it is odd, so the two splits can never share a seed.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError

KINDS = ("rectangle", "ellipse", "triangle")


@dataclass
class SceneSpec:
    seed: int = 0
    frame_side: int = 128
    length: int = 40
    kind: str = "random"
    size_min: float = 12.0
    size_max: float = 32.0
    v_max: float = 6.0
    damping: float = 0.9
    accel_std: float = 1.5
    scale_amplitude: float = 0.25
    period_min: int = 10
    period_max: int = 30
    distractors: int = -1  # -1 draws 0..3 from the seed
    occluder_prob: float = 0.2
    occluder_max_cover: float = 0.6
    occluder_max_frames: int = 5

    def validate(self) -> None:
        if self.length < 1:
            raise ArgumentError(f"sequence length must be >= 1, got {self.length}")
        if self.kind not in KINDS + ("random",):
            raise ArgumentError(f"unknown object kind {self.kind!r}")
        if not 0 <= self.scale_amplitude <= 0.25:
            raise ArgumentError("scale amplitude must lie in [0, 0.25]")
        if self.distractors > 3:
            raise ArgumentError("at most 3 distractors")
        if self.size_min < 4 or self.size_max < self.size_min:
            raise ArgumentError("invalid size range")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<spec>") -> "SceneSpec":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"{source}:{lineno}: unknown scene key {key!r}")
            kind = types[key]
            try:
                values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
            except ValueError as exc:
                raise FormatError(f"{source}:{lineno}: bad value for {key}: {val!r}") from exc
        return cls(**values)


@dataclass
class SequenceRecord:
    frames: list = field(default_factory=list)  # uint8 (H, W, 3)
    boxes: list = field(default_factory=list)  # (x, y, w, h) floats
    name: str = ""

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise FormatError(f"{len(self.frames)} frames but {len(self.boxes)} boxes")

    def __len__(self) -> int:
        return len(self.frames)


def split_of(seed: int) -> str:
    return "train" if seed % 2 == 0 else "eval"


def split_seeds(base: int, count: int, split: str) -> list[int]:
    """``count`` seeds of the requested split, starting from ``base``."""
    offset = {"train": 0, "eval": 1}[split]
    return [2 * (base + i) + offset for i in range(count)]


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float64)


def _background(rng: np.random.Generator, side: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.85, size=(6, 6, 3))
    t = (np.arange(side) + 0.5) / side * 5.0
    i0 = np.floor(t).astype(int).clip(0, 4)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None, None] + coarse[i0 + 1] * f[:, None, None]
    img = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    return img


def shape_mask(kind: str, box, side: int) -> np.ndarray:
    """Pixels whose centers fall inside the shape inscribed in ``box``."""
    x, y, w, h = box
    cx, cy = x + w / 2.0, y + h / 2.0
    p = np.arange(side) + 0.5
    px, py = p[None, :], p[:, None]
    if kind == "rectangle":
        return (np.abs(px - cx) <= w / 2.0) & (np.abs(py - cy) <= h / 2.0)
    if kind == "ellipse":
        return ((px - cx) / (w / 2.0)) ** 2 + ((py - cy) / (h / 2.0)) ** 2 <= 1.0
    if kind == "triangle":
        depth = (py - y) / h
        return (py >= y) & (py <= y + h) & (np.abs(px - cx) <= (w / 2.0) * depth)
    raise ArgumentError(f"unknown kind {kind!r}")


class _Walker:
    """Damped random walk of an object's center with oscillating size."""

    def __init__(self, rng: np.random.Generator, spec: SceneSpec):
        self.rng = rng
        self.spec = spec
        self.w0 = rng.uniform(spec.size_min, spec.size_max)
        self.h0 = rng.uniform(spec.size_min, spec.size_max)
        self.amp = rng.uniform(0.0, spec.scale_amplitude)
        self.period = rng.uniform(spec.period_min, spec.period_max)
        self.phase = rng.uniform(0, 2 * math.pi, size=2)
        half = max(self.w0, self.h0) * (1 + spec.scale_amplitude) / 2.0 + 1.0
        self.lo, self.hi = half, spec.frame_side - half
        self.c = rng.uniform(self.lo, self.hi, size=2)
        self.v = rng.uniform(-spec.v_max / 2, spec.v_max / 2, size=2)

    def size(self, t: int) -> tuple[float, float]:
        ang = 2 * math.pi * t / self.period
        w = self.w0 * (1 + self.amp * math.sin(ang + self.phase[0]))
        h = self.h0 * (1 + self.amp * math.sin(ang + self.phase[1]))
        return max(w, 4.0), max(h, 4.0)

    def advance(self) -> None:
        s = self.spec
        # margin keeps the 2-decimal rounding of the box inside the step bound
        lim = s.v_max - 0.02
        self.v = np.clip(s.damping * self.v + self.rng.normal(0.0, s.accel_std, size=2), -lim, lim)
        nxt = self.c + self.v
        for a in range(2):
            if nxt[a] > self.hi:
                nxt[a] = 2 * self.hi - nxt[a]
                self.v[a] = -self.v[a]
            elif nxt[a] < self.lo:
                nxt[a] = 2 * self.lo - nxt[a]
                self.v[a] = -self.v[a]
        self.c = nxt

    def box(self, t: int) -> tuple[float, float, float, float]:
        w, h = self.size(t)
        w, h = round(w, 2), round(h, 2)
        return (round(float(self.c[0]) - w / 2.0, 2), round(float(self.c[1]) - h / 2.0, 2), w, h)


def generate(spec: SceneSpec) -> SequenceRecord:
    """Render one sequence; a pure function of ``spec`` (including its seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    side = spec.frame_side
    kind = KINDS[int(rng.integers(3))] if spec.kind == "random" else spec.kind
    hue = rng.uniform()
    color = _hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0))
    n_dis = int(rng.integers(0, 4)) if spec.distractors < 0 else spec.distractors
    dis_colors = [
        _hsv_to_rgb((hue + rng.uniform(0.25, 0.75)) % 1.0, rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0))
        for _ in range(n_dis)
    ]
    bg = _background(rng, side)
    target = _Walker(rng, spec)
    distractors = [_Walker(rng, spec) for _ in range(n_dis)]

    occl = None
    if rng.uniform() < spec.occluder_prob and spec.length > 2:
        duration = int(rng.integers(1, spec.occluder_max_frames + 1))
        start = int(rng.integers(1, max(2, spec.length - duration)))
        occl = (start, duration, rng.uniform(0.2, spec.occluder_max_cover), rng.uniform(0.05, 0.3),
                _hsv_to_rgb(rng.uniform(), 0.2, rng.uniform(0.3, 0.7)))

    frames, boxes = [], []
    for t in range(spec.length):
        if t > 0:
            target.advance()
            for d in distractors:
                d.advance()
        img = bg.copy()
        for d, col in zip(distractors, dis_colors):
            img[shape_mask(kind, d.box(t), side)] = col
        box = target.box(t)
        obj = shape_mask(kind, box, side)
        img[obj] = color
        if occl is not None and occl[0] <= t < occl[0] + occl[1]:
            img = _draw_occluder(img, obj, box, t - occl[0], occl, spec.occluder_max_cover)
        frames.append(np.round(img * 255.0).astype(np.uint8))
        boxes.append(box)
    return SequenceRecord(frames, boxes, name=f"seq_{spec.seed:06d}")


def _draw_occluder(img, obj, box, step, occl, max_cover):
    """Vertical bar sweeping across the object, covering at most ``max_cover`` of its pixels."""
    _, _, frac, speed, col = occl
    x, _, w, _ = box
    side = img.shape[1]
    total = max(int(obj.sum()), 1)
    width = frac * w
    left = x + (step * speed) * w
    p = np.arange(side) + 0.5
    while width > 0.5:
        cols = (p >= left) & (p <= left + width)
        if (obj & cols[None, :]).sum() <= max_cover * total:
            img = img.copy()
            img[:, cols] = col
            return img
        width *= 0.8
    return img


# --- file format -------------------------------------------------------------


def ppm_bytes(frame: np.ndarray) -> bytes:
    h, w, _ = frame.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(frame, dtype=np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    tokens, pos, line = [], 0, 1
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            line += blob[pos : pos + 1] == b"\n"
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: line {line}: truncated PPM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: line 1: expected magic P6, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: line {line}: non-integer PPM header field") from exc
    if maxval != 255:
        raise FormatError(f"{path}: line {line}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = blob[pos:]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {w * h * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def format_box(box) -> str:
    return ",".join(f"{v:.2f}" for v in box)


def write_sequence(record: SequenceRecord, directory, spec: SceneSpec | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(record.frames, 1):
        (d / f"{i:08d}.ppm").write_bytes(ppm_bytes(frame))
    (d / "groundtruth.txt").write_text("".join(format_box(b) + "\n" for b in record.boxes))
    if spec is not None:
        (d / "spec.txt").write_text(spec.to_text())
    return d


def read_boxes(path) -> list[tuple[float, ...]]:
    path = Path(path)
    boxes = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.replace("\t", ",").split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 comma-separated values, got {line!r}")
        try:
            boxes.append(tuple(float(p) for p in parts))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric box {line!r}") from exc
    return boxes


def read_sequence(directory) -> SequenceRecord:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: not a sequence directory")
    files = sorted(d.glob("*.ppm"))
    gt = d / "groundtruth.txt"
    if not gt.exists():
        raise FormatError(f"{gt}: missing ground truth")
    boxes = read_boxes(gt)
    if len(boxes) != len(files):
        raise FormatError(f"{gt}: line {len(boxes)}: {len(boxes)} boxes for {len(files)} frames")
    for i, f in enumerate(files, 1):
        if f.name != f"{i:08d}.ppm":
            raise FormatError(f"{f}: expected frame file {i:08d}.ppm")
    return SequenceRecord([read_ppm(f) for f in files], boxes, name=d.name)


def list_sequences(root) -> list[Path]:
    root = Path(root)
    if (root / "groundtruth.txt").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "groundtruth.txt").exists())
