"""Command-line entry point: ``msesc <subcommand> [flags]``.

Subcommands: synth, extract, train, cv, ablate, attention, eval.
The worker count for fold-parallel runs comes from ``MSESC_WORKERS``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .audio import chunk_segments, read_wav
from .config import ConfigError, RunConfig, load_run_config, load_synth_spec
from .features import featurize, one_hot, write_features


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed, model={"seed": args.seed})
    if args.out:
        cfg = cfg.replace(out_dir=str(args.out))
    return cfg


def _need(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise SystemExit(f"{args.command}: missing {', '.join(missing)}")


def cmd_synth(args) -> int:
    _need(args, "config")
    spec = load_synth_spec(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    path = harness.write_synth(spec, args.out or "data/synth", args.folds)
    print(path)
    return 0


def cmd_extract(args) -> int:
    _need(args, "manifest")
    manifest = harness.load_manifest(args.manifest)
    k = len(manifest.classes)
    triples = []
    for entry, clip in zip(manifest.entries, harness.load_clips(manifest)):
        if args.fold is not None and entry.fold != args.fold:
            continue
        for seg in chunk_segments(clip):
            triples.append(featurize(seg, one_hot(clip.label, k)))
    out = Path(args.out or "features.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(out, triples, {"manifest": str(args.manifest), "classes": manifest.classes, "fold": args.fold})
    print(f"{len(triples)} windows -> {out}")
    return 0


def cmd_train(args) -> int:
    _need(args, "manifest", "fold")
    cfg = _run_config(args)
    res, report = harness.train_fold(harness.load_manifest(args.manifest), args.fold, cfg, cfg.out_dir)
    print(report.to_json(), end="")
    return 0


def cmd_cv(args) -> int:
    _need(args, "manifest")
    cfg = _run_config(args)
    report = harness.cross_validate(harness.load_manifest(args.manifest), cfg, cfg.out_dir)
    print(report.to_json(), end="")
    return 0


def cmd_ablate(args) -> int:
    _need(args, "manifest")
    cfg = _run_config(args)
    table = harness.ablate(harness.load_manifest(args.manifest), cfg, cfg.out_dir)
    print(table.to_markdown(), end="")
    return 0


def cmd_attention(args) -> int:
    _need(args, "checkpoint", "audio")
    clip = read_wav(args.audio)
    out = Path(args.out or "attention.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "attention.csv"
    print(harness.export_attention(clip, args.checkpoint, out))
    return 0


def cmd_eval(args) -> int:
    _need(args, "checkpoint", "manifest")
    report = harness.evaluate_checkpoint(args.checkpoint, harness.load_manifest(args.manifest), args.fold)
    if args.out:
        report.write(args.out)
    print(report.to_json(), end="")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset and its manifest"),
    "extract": (cmd_extract, "dump per-window feature triples to a binary file"),
    "train": (cmd_train, "train and evaluate a single fold"),
    "cv": (cmd_cv, "k-fold cross-validation"),
    "ablate": (cmd_ablate, "run the component ablation table"),
    "attention": (cmd_attention, "export per-frame attention weights as CSV"),
    "eval": (cmd_eval, "evaluate a checkpoint on a manifest"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msesc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path)
        p.add_argument("--manifest", type=Path)
        p.add_argument("--fold", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        if name == "synth":
            p.add_argument("--folds", type=int, default=5, help="number of folds in the manifest")
        if name in ("attention", "eval"):
            p.add_argument("--checkpoint", type=Path)
        if name == "attention":
            p.add_argument("--audio", type=Path, help="WAV clip to analyse")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command][0](args)
    except (ConfigError, harness.ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
