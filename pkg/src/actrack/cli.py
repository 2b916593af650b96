"""Command-line entry point: ``actrack <command> ...``.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 data/format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .autodiff import checkpoint
from .backbone import Backbone, PretrainHead
from .config import RunConfig, load_config
from .errors import (ArgumentError, ConfigurationError, DimensionError, DomainError, FormatError,
                     NumericalError, StateError)
from .metrics import compare, evaluate, read_summary
from .tracker import ACTracker, Tracker, format_results
from .training import SampleBuilder, pretrain, train

log = logging.getLogger("actrack")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _file_logger(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("w")

    def emit(line: str) -> None:
        fh.write(line + "\n")
        fh.flush()
        log.info(line)

    return emit, fh


def _load_records(root) -> list:
    root = Path(root)
    if not root.exists():
        raise FormatError(f"dataset root {root} does not exist")
    dirs = data.list_sequences(root)
    if not dirs:
        raise FormatError(f"{root}: no sequences (directories with groundtruth.txt)")
    return [data.read_sequence(d) for d in dirs]


def _write_checksums(out: Path, *files: Path) -> None:
    lines = [f"{checkpoint.file_checksum(f)}  {f.name}\n" for f in files]
    (out / "checksums.txt").write_text("".join(lines))


def _resolve(args, **overrides) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config, **overrides)
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.out_dir)
    cfg = dataclasses.replace(cfg, out_dir=str(out))
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    return cfg, out


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    base = data.SceneSpec.from_text(Path(args.spec).read_text(), args.spec) if args.spec else data.SceneSpec()
    out = Path(args.out)
    for seed in data.split_seeds(base.seed, args.count, args.split):
        spec = dataclasses.replace(base, seed=seed)
        rec = data.generate(spec)
        data.write_sequence(rec, out / rec.name, spec)
    print(f"wrote {args.count} {args.split} sequences to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, out = _resolve(args)
    tcfg = cfg.tracker_config()
    records = _load_records(cfg.data_root)
    rng = np.random.default_rng(cfg.seed)
    backbone = Backbone(tcfg.encoder(), rng)
    head = PretrainHead(tcfg.encoder(), rng)
    builder = SampleBuilder(records, tcfg, cfg.bins)
    emit, fh = _file_logger(out / "pretrain.log")
    try:
        stats = pretrain(backbone, head, builder, cfg.steps, cfg.batch_size, cfg.lr, cfg.weight_decay,
                         cfg.mask_ratio, rng, logger=emit)
    finally:
        fh.close()
    backbone.freeze()
    ckpt = out / "backbone.actk"
    checkpoint.save(ckpt, backbone.parameters())
    _write_checksums(out, ckpt)
    first = stats.losses[0] if stats.losses else float("nan")
    last = stats.losses[-1] if stats.losses else float("nan")
    (out / "pretrain_summary.txt").write_text(
        f"seed = {cfg.seed}\nsteps = {cfg.steps}\nfirst_loss = {first:.6f}\nlast_loss = {last:.6f}\n"
        f"median_step_ms = {stats.median_step_ms:.3f}\n")
    print(f"pretrained backbone written to {ckpt}")
    return EXIT_OK


def build_tracker(cfg: RunConfig, backbone_entries, unfreeze: bool) -> ACTracker:
    tcfg = cfg.tracker_config()
    rng = np.random.default_rng(cfg.seed)
    backbone = Backbone(tcfg.encoder(), np.random.default_rng(cfg.seed + 1))
    checkpoint.assign(backbone.parameters(), backbone_entries, keep_frozen_flag=not unfreeze)
    missing = set(backbone.named_parameters()) - {e.name for e in backbone_entries}
    if missing:
        raise FormatError(f"backbone checkpoint lacks {sorted(missing)[:3]}...")
    return ACTracker(tcfg, rng, backbone=backbone)


def cmd_train(args) -> int:
    cfg, out = _resolve(args, mode=args.mode)
    entries = checkpoint.load(args.backbone)
    unfrozen = [e.name for e in entries if not e.frozen]
    if unfrozen and cfg.mode != "full-finetune":
        raise ConfigurationError(
            f"backbone checkpoint has non-frozen parameters ({unfrozen[0]}, ...); "
            "only mode = full-finetune accepts it")
    model = build_tracker(cfg, entries, unfreeze=cfg.mode == "full-finetune")
    model.set_mode(cfg.mode)
    records = _load_records(cfg.data_root)
    builder = SampleBuilder(records, model.cfg, cfg.bins)
    rng = np.random.default_rng(cfg.seed + 2)
    emit, fh = _file_logger(out / "train.log")
    try:
        stats, opt = train(model, builder, cfg.steps, cfg.batch_size, cfg.lr, cfg.weight_decay, rng, logger=emit)
    finally:
        fh.close()
    ckpt = out / "tracker.actk"
    checkpoint.save(ckpt, model.parameters())
    _write_checksums(out, ckpt)
    eff = stats.efficiency()
    eff["final_loss"] = f"{stats.losses[-1]:.6f}" if stats.losses else "n/a"
    eff["mode"] = cfg.mode
    (out / "train_summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in eff.items()))
    print(f"trained tracker written to {ckpt}")
    return EXIT_OK


def load_tracker(ckpt: Path) -> tuple[ACTracker, RunConfig]:
    """Rebuild a tracker from a checkpoint and the resolved config stored beside it."""
    cfg_path = ckpt.parent / "config.txt"
    cfg = load_config(cfg_path) if cfg_path.exists() else RunConfig()
    entries = checkpoint.load(ckpt)
    tcfg = cfg.tracker_config()
    model = ACTracker(tcfg, np.random.default_rng(0))
    checkpoint.assign(model.parameters(), entries)
    missing = set(model.named_parameters()) - {e.name for e in entries}
    if missing:
        raise FormatError(f"{ckpt}: missing parameters {sorted(missing)[:3]}...")
    return model, cfg


def cmd_track(args) -> int:
    model, cfg = load_tracker(Path(args.ckpt))
    # frozen-only models never trained the condition path, so it is skipped entirely
    tracker = Tracker(model, use_condition=cfg.mode != "frozen-only")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = data.list_sequences(args.dataset)
    if not dirs:
        raise FormatError(f"{args.dataset}: no sequences found")
    for d in dirs:
        rec = data.read_sequence(d)
        boxes = tracker.run_sequence(rec.frames, rec.boxes[0])
        (out / f"{rec.name}.txt").write_text(format_results(boxes))
    print(f"tracked {len(dirs)} sequences into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate(args.pred, args.gt, name=args.name or Path(args.report).stem)
    if args.run:
        summary = Path(args.run) / "train_summary.txt"
        if not summary.exists():
            raise FormatError(f"{summary}: no training summary")
        s = read_summary(summary)
        report.efficiency = {k: s[k] for k in ("trainable_params", "frozen_params",
                                               "optimizer_state_elements", "median_step_ms") if k in s}
    report.write(args.report)
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_compare(args) -> int:
    summaries = []
    for r in args.report:
        p = Path(r)
        s = Path(str(p) + ".summary")
        summaries.append(read_summary(s if s.exists() else p))
    sys.stdout.write(compare(summaries))
    return EXIT_OK


def cmd_inspect(args) -> int:
    for e in checkpoint.load(args.ckpt):
        shape = "x".join(str(d) for d in e.data.shape) or "scalar"
        print(f"{e.name}\t{shape}\tfrozen={int(e.frozen)}\t{e.checksum()}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="actrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render synthetic sequences")
    g.add_argument("--spec", help="scene spec file (key = value); defaults if omitted")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.set_defaults(func=cmd_gen_data)

    pt = sub.add_parser("pretrain", help="masked-patch pretraining of the encoder")
    pt.add_argument("--config", required=True)
    pt.add_argument("--out")
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train the tracker on top of a frozen backbone")
    t.add_argument("--config", required=True)
    t.add_argument("--backbone", required=True)
    t.add_argument("--out")
    t.add_argument("--mode", choices=("additive", "frozen-only", "full-finetune"))
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("track", help="run a trained tracker over a dataset")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score tracking results")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--run", help="training run directory whose efficiency figures to include")
    e.add_argument("--name")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="side-by-side table of evaluation reports")
    c.add_argument("--report", nargs="+", required=True)
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("inspect-ckpt", help="list checkpoint parameters")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        args = make_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("actrack: a command is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ArgumentError, DomainError, DimensionError, StateError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
