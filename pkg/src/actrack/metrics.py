"""Single-object tracking metrics and run-comparison reports.

Conventions: frame 0 is the given initialization and never scored; success rates
use a strict ``IoU > tau``; precision counts center errors ``<= tau`` pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import list_sequences, read_boxes
from .errors import ArgumentError, FormatError

AUC_THRESHOLDS = np.round(np.arange(0, 21) * 0.05, 2)
FOOTER = "SR uses IoU > tau (strict); precision uses center error <= tau px (inclusive); frame 0 excluded."


def iou(a, b) -> float:
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def ao(overlaps: Sequence[float]) -> float:
    if len(overlaps) == 0:
        raise ArgumentError("average overlap of an empty list")
    return float(np.mean(np.asarray(overlaps, dtype=np.float64)))


def success_rate(overlaps: Sequence[float], tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ArgumentError(f"threshold {tau} outside [0, 1]")
    o = np.asarray(overlaps, dtype=np.float64)
    return float((o > tau).mean()) if o.size else 0.0


def centers(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return b[:, :2] + b[:, 2:] / 2.0


def precision(pred_centers, gt_centers, tau: float = 5.0) -> float:
    p = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 2)
    if p.shape != g.shape:
        raise ArgumentError(f"{len(p)} predicted centers vs {len(g)} ground-truth centers")
    if not len(p):
        return 0.0
    dist = np.sqrt(((p - g) ** 2).sum(axis=1))
    return float((dist <= tau).mean())


def success_curve(overlaps) -> np.ndarray:
    return np.array([success_rate(overlaps, t) for t in AUC_THRESHOLDS])


@dataclass
class SequenceMetrics:
    name: str
    frames: int
    ao: Optional[float]
    sr50: Optional[float]
    sr75: Optional[float]
    prec5: Optional[float]
    auc: Optional[float]


def score_sequence(pred, gt, name: str = "") -> SequenceMetrics:
    if len(pred) != len(gt):
        raise FormatError(f"{name or 'sequence'}: {len(pred)} predicted boxes vs {len(gt)} ground-truth boxes")
    pred, gt = list(pred)[1:], list(gt)[1:]
    if not gt:
        return SequenceMetrics(name, 0, None, None, None, None, None)
    ov = [iou(p, g) for p, g in zip(pred, gt)]
    return SequenceMetrics(
        name,
        len(ov),
        ao(ov),
        success_rate(ov, 0.5),
        success_rate(ov, 0.75),
        precision(centers(pred), centers(gt), 5.0),
        float(success_curve(ov).mean()),
    )


@dataclass
class MetricsReport:
    name: str = "run"
    sequences: list = field(default_factory=list)
    efficiency: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        """Frame-weighted aggregate over all scored frames."""
        scored = [s for s in self.sequences if s.frames]
        if not scored:
            return {k: None for k in ("ao", "sr50", "sr75", "prec5", "auc")}
        w = np.array([s.frames for s in scored], dtype=np.float64)
        out = {}
        for key in ("ao", "sr50", "sr75", "prec5", "auc"):
            vals = np.array([getattr(s, key) for s in scored])
            out[key] = float((vals * w).sum() / w.sum())
        return out

    def summary_lines(self) -> list[str]:
        lines = [f"name = {self.name}", f"sequences = {len(self.sequences)}",
                 f"frames = {sum(s.frames for s in self.sequences)}"]
        for k, v in self.aggregate().items():
            lines.append(f"{k} = {_fmt(v)}")
        for k, v in self.efficiency.items():
            lines.append(f"{k} = {v}")
        return lines

    def table(self) -> str:
        head = f"{'sequence':<16}{'frames':>8}{'AO':>9}{'SR50':>9}{'SR75':>9}{'Prec5':>9}{'AUC':>9}"
        rows = [head, "-" * len(head)]
        for s in self.sequences:
            rows.append(f"{s.name:<16}{s.frames:>8}" + "".join(
                f"{_fmt(getattr(s, k)):>9}" for k in ("ao", "sr50", "sr75", "prec5", "auc")))
        agg = self.aggregate()
        rows.append("-" * len(head))
        rows.append(f"{'ALL':<16}{sum(s.frames for s in self.sequences):>8}"
                    + "".join(f"{_fmt(agg[k]):>9}" for k in ("ao", "sr50", "sr75", "prec5", "auc")))
        if self.efficiency:
            rows.append("")
            rows.extend(f"{k}: {v}" for k, v in self.efficiency.items())
        rows.append("")
        rows.append(FOOTER)
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        """Writes ``path`` (text table) and ``path`` + '.summary' (key = value)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.table())
        Path(str(path) + ".summary").write_text("\n".join(self.summary_lines()) + "\n")


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def read_summary(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def read_results(path) -> list[tuple[float, ...]]:
    """Parse a tracker output file of ``frame_idx,x,y,w,h`` lines."""
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected frame_idx,x,y,w,h")
        try:
            idx = int(parts[0])
            box = tuple(float(p) for p in parts[1:])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from exc
        if idx != len(boxes):
            raise FormatError(f"{path}:{lineno}: frame index {idx}, expected {len(boxes)}")
        boxes.append(box)
    return boxes


def evaluate(pred_path, gt_path, name: str = "run") -> MetricsReport:
    """Score a results file against a groundtruth file, or a results dir against a dataset root."""
    pred_path, gt_path = Path(pred_path), Path(gt_path)
    report = MetricsReport(name)
    if pred_path.is_file():
        gt_file = gt_path / "groundtruth.txt" if gt_path.is_dir() else gt_path
        report.sequences.append(score_sequence(read_results(pred_path), read_boxes(gt_file), pred_path.stem))
        return report
    for seq_dir in list_sequences(gt_path):
        res = pred_path / f"{seq_dir.name}.txt"
        if not res.exists():
            raise FormatError(f"{res}: missing results for sequence {seq_dir.name}")
        report.sequences.append(score_sequence(read_results(res), read_boxes(seq_dir / "groundtruth.txt"), seq_dir.name))
    return report


_COMPARE_KEYS = ("ao", "sr50", "sr75", "prec5", "auc", "trainable_params", "frozen_params",
                 "optimizer_state_elements", "median_step_ms")


def compare(summaries: Sequence[dict]) -> str:
    """Aligned table of runs with a delta column against the first run."""
    if not summaries:
        raise ArgumentError("nothing to compare")
    names = [s.get("name", f"run{i}") for i, s in enumerate(summaries)]
    width = max(12, *(len(n) + 2 for n in names))
    header = f"{'metric':<26}" + "".join(f"{n:>{width}}" for n in names)
    header += "".join(f"{'d(' + n + ')':>{width}}" for n in names[1:])
    rows = [header, "-" * len(header)]
    for key in _COMPARE_KEYS:
        vals = [s.get(key) for s in summaries]
        if all(v is None for v in vals):
            continue
        row = f"{key:<26}" + "".join(f"{(v if v is not None else 'n/a'):>{width}}" for v in vals)
        base = _num(vals[0])
        for v in vals[1:]:
            x = _num(v)
            delta = "n/a" if base is None or x is None else f"{x - base:+.4f}"
            row += f"{delta:>{width}}"
        rows.append(row)
    rows.append("")
    rows.append(FOOTER)
    return "\n".join(rows) + "\n"


def _num(v) -> Optional[float]:
    try:
        x = float(v)
    except (TypeError, ValueError):
        return None
    return None if math.isnan(x) else x
