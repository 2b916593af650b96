"""Acceptance criteria, one test each.

The summary at the end of the pytest run prints a PASS/FAIL line per criterion.
Run alone with ``pytest tests/test_acceptance.py -v``; the whole file takes roughly
half an hour on one CPU core because criteria 5 and 6 train real trackers.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

from actrack.autodiff import checkpoint, default_dtype, grad_check
from actrack.autodiff.gradcheck import default_tolerance
from actrack.backbone import Backbone, PretrainHead, evaluate_reconstruction, sample_mask
from actrack.cli import build_tracker, main
from actrack.config import RunConfig
from actrack.data import SceneSpec, generate, split_seeds
from actrack.decoder import dequantize, quantize
from actrack.errors import DomainError
from actrack.metrics import ao, iou, precision, score_sequence, success_rate
from actrack.tracker import ACTracker, Tracker, TrackerConfig
from actrack.training import SampleBuilder, pretrain, train

from conftest import ACCEPTANCE_KEY
from test_autodiff import op_graphs
from test_metrics import raster_iou

pytestmark = pytest.mark.slow

DEFAULT = TrackerConfig()
TINY = TrackerConfig(dim=32, heads=2, enc_layers=1, dec_layers=1)
OVERFIT_STEPS = 3000
OVERFIT_LR = 3e-4
COND_TRAIN_SEQS = 32
COND_STEPS = 3000


@pytest.fixture
def record(request):
    """``record(n, ok, detail)`` stores the verdict for the terminal summary, then asserts."""

    def _record(number, ok, detail):
        request.config.stash[ACCEPTANCE_KEY][number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return _record


def records(base, count, split, **spec):
    return [generate(SceneSpec(seed=s, **spec)) for s in split_seeds(base, count, split)]


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    """1,000 seeded pretraining steps; yields (held-out loss before, after, checkpoint path)."""
    builder = SampleBuilder(records(0, 64, "train"), DEFAULT, DEFAULT.bins)
    held = SampleBuilder(records(1000, 8, "eval"), DEFAULT, DEFAULT.bins)
    templates, searches = held.pretrain_batch(np.random.default_rng(5), 16)
    mask = sample_mask(np.random.default_rng(6), 16, DEFAULT.encoder().search_tokens, 0.5)
    rng = np.random.default_rng(0)
    backbone = Backbone(DEFAULT.encoder(), rng)
    head = PretrainHead(DEFAULT.encoder(), rng)
    before = evaluate_reconstruction(backbone, head, templates, searches, mask)
    pretrain(backbone, head, builder, 1000, 8, 1e-3, 0.05, 0.5, rng)
    after = evaluate_reconstruction(backbone, head, templates, searches, mask)
    backbone.freeze()
    path = tmp_path_factory.mktemp("backbone") / "backbone.actk"
    checkpoint.save(path, backbone.parameters())
    return before, after, path


def tracker_on(path, mode="additive", seed=0):
    entries = checkpoint.load(path)
    model = build_tracker(RunConfig(seed=seed, mode=mode), entries, unfreeze=mode == "full-finetune")
    model.set_mode(mode)
    return model


def mean_ao(model, seqs, use_condition=True):
    tracker = Tracker(model, use_condition=use_condition)
    return float(np.mean([score_sequence(tracker.run_sequence(r.frames, r.boxes[0]), r.boxes).ao for r in seqs]))


def test_1_gradient_correctness(record):
    start = time.perf_counter()
    seeds = range(20)
    worst = {}
    for dtype in (np.float32, np.float64):
        with default_dtype(dtype):
            errs = [grad_check(fn, inputs) for s in seeds for _, inputs, fn in op_graphs(np.random.default_rng(s))]
            batch = SampleBuilder(records(0, 2, "train", length=4), TINY, TINY.bins)
            for s in seeds:
                rng = np.random.default_rng(s)
                model = ACTracker(TINY, rng)
                # leave the zero-init point so gradients reach the condition tower
                for p in model.parameters():
                    if not p.data.any():
                        p.data[...] = rng.standard_normal(p.shape) * 0.05
                b = batch.batch(rng, 2)
                errs.append(grad_check(lambda: model.loss(b.templates, b.searches, b.prev_tokens, b.targets),
                                       model.parameters(), max_per_input=3, rng=rng))
        worst[np.dtype(dtype).name] = max(errs)
    elapsed = time.perf_counter() - start
    ok = (worst["float32"] <= default_tolerance(np.float32) and worst["float64"] <= default_tolerance(np.float64)
          and elapsed < 300)
    record(1, ok, f"max rel err f32 {worst['float32']:.2e} (<=1e-3), f64 {worst['float64']:.2e} (<=1e-6), "
                  f"{elapsed:.0f}s")


def test_2_freeze_invariance(record, pretrained):
    path = pretrained[2]
    model = tracker_on(path)
    builder = SampleBuilder(records(0, 8, "train"), DEFAULT, DEFAULT.bins)
    _, opt = train(model, builder, 100, 8, 1e-3, 0.01, np.random.default_rng(1))
    stored = {e.name: e.checksum() for e in checkpoint.load(path)}
    now = {p.name: checkpoint.Entry(p.name, p.data, p.frozen).checksum() for p in model.backbone.parameters()}
    backbone_state = [n for n in opt.state_names() if n.startswith("backbone.")]
    ok = stored == now and not backbone_state
    record(2, ok, f"{len(stored)} backbone tensors unchanged={stored == now}, backbone state entries="
                  f"{len(backbone_state)}")


def test_3_zero_init_identity(record, pretrained):
    model = tracker_on(pretrained[2])
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10):
        t = rng.random((1, 3, 32, 32))
        s = rng.random((1, 3, 64, 64))
        prev = rng.integers(0, 400, (1, 4))
        tgt = rng.integers(0, 400, (1, 4))
        full = model.logits(t, s, prev, tgt).data
        ablated = model.logits(t, s, prev, tgt, use_condition=False).data
        worst = max(worst, float(np.abs(full - ablated).max()))
    record(3, worst <= 1e-6, f"max |logit difference| {worst:.2e} over 10 inputs (<=1e-6)")


def test_4_efficiency_direction(record, pretrained):
    builder = SampleBuilder(records(0, 8, "train"), DEFAULT, DEFAULT.bins)
    stats = {}
    for mode in ("full-finetune", "additive"):
        model = tracker_on(pretrained[2], mode)
        stats[mode], _ = train(model, builder, 110, 8, 1e-4, 0.01, np.random.default_rng(4))
    add, full = stats["additive"], stats["full-finetune"]
    ratio = add.optimizer_state_elements / full.optimizer_state_elements
    ok = add.median_step_ms <= full.median_step_ms and ratio < 0.55
    record(4, ok, f"median step additive {add.median_step_ms:.1f} ms vs full {full.median_step_ms:.1f} ms, "
                  f"state ratio {ratio:.3f} (<0.55)")


def test_5_overfit(record, pretrained):
    seqs = records(0, 8, "train")
    model = tracker_on(pretrained[2])
    start = time.perf_counter()
    train(model, SampleBuilder(seqs, DEFAULT, DEFAULT.bins), OVERFIT_STEPS, 8, OVERFIT_LR, 0.01,
          np.random.default_rng(5))
    score = mean_ao(model, seqs)
    elapsed = time.perf_counter() - start
    record(5, score >= 0.70 and elapsed < 1800, f"mean IoU {score:.3f} on the 8 training sequences (>=0.70) after "
                                                f"{OVERFIT_STEPS} steps, {elapsed:.0f}s")


def test_6_conditioning_helps(record, pretrained):
    train_seqs = records(0, COND_TRAIN_SEQS, "train")
    held = records(0, 50, "eval")
    builder = SampleBuilder(train_seqs, DEFAULT, DEFAULT.bins)
    scores = {}
    for mode in ("additive", "frozen-only"):
        model = tracker_on(pretrained[2], mode)
        train(model, builder, COND_STEPS, 8, OVERFIT_LR, 0.01, np.random.default_rng(6))
        scores[mode] = mean_ao(model, held, use_condition=mode != "frozen-only")
    gap = scores["additive"] - scores["frozen-only"]
    record(6, gap >= 0.05, f"held-out AO additive {scores['additive']:.3f} vs frozen-only "
                           f"{scores['frozen-only']:.3f}, gap {gap:.3f} (>=0.05)")


def test_7_tokenizer_bound(record):
    v = np.random.default_rng(7).random(10_000)
    worst = max(abs(x - dequantize(quantize(x, 400), 400)) for x in v)
    bound = 1 / (2 * 399)
    examples = (quantize(0.0, 400), quantize(1.0, 400), quantize(0.5, 400), dequantize(0, 400), dequantize(399, 400),
                dequantize(200, 400))
    with pytest.raises(DomainError):
        dequantize(400, 400)
    ok = worst <= bound and examples == (0, 399, 200, 0.0, 1.0, 200 / 399)
    record(7, ok, f"max round-trip error {worst:.4e} (<= {bound:.4e}), boundary examples exact={examples[:3]}")


def test_8_metric_oracle(record):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        a = tuple(int(x) for x in rng.integers([0, 0, 0, 0], [40, 40, 25, 25]))
        b = tuple(int(x) for x in rng.integers([0, 0, 0, 0], [40, 40, 25, 25]))
        mismatches += iou(a, b) != raster_iou(a, b)
    hand = (
        ao([1.0, 0.5, 0.0]) == 0.5,
        success_rate([0.6, 0.4], 0.5) == 0.5,
        success_rate([0.5], 0.5) == 0.0,
        success_rate([0.9, 1.0], 1.0) == 0.0,
        precision([(3, 4)], [(0, 0)]) == 1.0,
        precision([(4, 4)], [(0, 0)]) == 0.0,
        iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12),
    )
    record(8, mismatches == 0 and all(hand), f"{mismatches} IoU mismatches on 1000 integer box pairs, "
                                             f"{sum(hand)}/{len(hand)} hand-computed examples match")


def _pipeline(root: Path) -> dict:
    root.mkdir()
    (root / "scene.txt").write_text("length = 20\n")
    (root / "run.txt").write_text(f"seed = 11\nsteps = 200\nbatch_size = 8\ndata_root = {root / 'train'}\n")
    run = [
        ["gen-data", "--spec", str(root / "scene.txt"), "--count", "8", "--out", str(root / "train")],
        ["gen-data", "--spec", str(root / "scene.txt"), "--count", "3", "--out", str(root / "eval"), "--split", "eval"],
        ["pretrain", "--config", str(root / "run.txt"), "--out", str(root / "pre")],
        ["train", "--config", str(root / "run.txt"), "--backbone", str(root / "pre" / "backbone.actk"),
         "--out", str(root / "trk")],
        ["track", "--ckpt", str(root / "trk" / "tracker.actk"), "--dataset", str(root / "eval"),
         "--out", str(root / "res")],
        ["eval", "--pred", str(root / "res"), "--gt", str(root / "eval"), "--report", str(root / "report.txt")],
    ]
    for argv in run:
        assert main(argv) == 0, argv
    files = [*sorted((root / "res").iterdir()), root / "report.txt", root / "report.txt.summary",
             root / "pre" / "backbone.actk", root / "trk" / "tracker.actk"]
    return {f.relative_to(root).as_posix(): f.read_bytes() for f in files}


def test_9_determinism_and_serialization(record, tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    same = first == second
    ckpt = tmp_path / "a" / "trk" / "tracker.actk"
    rewritten = checkpoint.encode(checkpoint.load(ckpt))
    again = checkpoint.encode(checkpoint.decode(rewritten))
    round_trip = rewritten == ckpt.read_bytes() == again
    record(9, same and round_trip, f"{len(first)} output files byte-identical across runs={same}, "
                                   f"checkpoint write-read-write identical={round_trip}")


def test_10_pretraining_efficacy(record, pretrained):
    before, after, _ = pretrained
    drop = 1.0 - after / before
    record(10, drop >= 0.30, f"held-out reconstruction loss {before:.4f} -> {after:.4f}, drop {drop:.1%} (>=30%)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
