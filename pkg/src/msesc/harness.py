"""Experiment orchestration: manifests, training, cross-validation,
ablations and attention export."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audio import SAMPLE_RATE, AudioClip, SynthSpec, chunk_segments, read_wav, resample, synth_dataset, write_wav
from .augment import TrainingSet, build_epoch, classify_clip
from .config import RunConfig
from .features import CANVAS_ROWS, HOP, FeatureBank, featurize, pool_rows, uniform_target
from .model import ModelConfig, MultiStreamNet
from .nn import Adam, TrainingError, load_checkpoint, save_checkpoint
from .ops import mae_loss
from .tensor import no_grad

log = logging.getLogger(__name__)

WORKERS_ENV = "MSESC_WORKERS"


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    path: Path
    label: str
    fold: int


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    classes: list[str]
    name: str = ""

    @property
    def folds(self) -> list[int]:
        return sorted({e.fold for e in self.entries})

    def label_index(self, entry: ManifestEntry) -> int:
        return self.classes.index(entry.label)


def load_manifest(path: str | Path) -> Manifest:
    """Read a ``path,label,fold`` CSV; relative paths resolve against the manifest's folder."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        header = [h.strip() for h in header]
        if header != ["path", "label", "fold"]:
            raise ManifestError(f"{path}:1: expected header 'path,label,fold', got {','.join(header)!r}")
        entries = []
        seen: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            p, label, fold = (c.strip() for c in row)
            if p in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {p!r} (first on line {seen[p]})")
            seen[p] = lineno
            try:
                fold_id = int(fold)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: fold {fold!r} is not an integer") from None
            if not label:
                raise ManifestError(f"{path}:{lineno}: empty label")
            full = Path(p) if Path(p).is_absolute() else path.parent / p
            entries.append(ManifestEntry(full, label, fold_id))
    if not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    folds = sorted({e.fold for e in entries})
    if folds != list(range(len(folds))):
        raise ManifestError(f"{path}: fold ids must be contiguous from 0, got {folds}")
    return Manifest(entries, sorted({e.label for e in entries}), path.stem)


def write_manifest(path: str | Path, rows: Sequence[tuple[str, str, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "fold"])
        w.writerows(rows)


def synth_folds(spec: SynthSpec, n_folds: int = 5) -> tuple[list[AudioClip], list[int], list[str]]:
    """Synthetic clips with round-robin fold ids inside each class.

    Labels are renumbered to the sorted class-name order a manifest would
    produce, so in-memory and on-disk runs agree.
    """
    clips = synth_dataset(spec)
    names = [c.kind for c in spec.classes]
    if len(set(names)) != len(names):
        raise ValueError("class kinds must be distinct")
    classes = sorted(names)
    remap = {i: classes.index(n) for i, n in enumerate(names)}
    folds = []
    counters: dict[int, int] = {}
    for clip in clips:
        i = counters.get(clip.label, 0)
        counters[clip.label] = i + 1
        folds.append(i % n_folds)
        clip.label = remap[clip.label]
    return clips, folds, classes


def write_synth(spec: SynthSpec, out_dir: str | Path, n_folds: int = 5) -> Path:
    """Write a synthetic dataset as WAV files plus ``manifest.csv``."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    clips, folds, classes = synth_folds(spec, n_folds)
    rows = []
    for clip, fold in zip(clips, folds):
        rel = f"audio/{clip.source_id}.wav"
        write_wav(out / rel, clip)
        rows.append((rel, classes[clip.label], fold))
    path = out / "manifest.csv"
    write_manifest(path, rows)
    return path


def lr_schedule(epoch: int, lr0: float = 1e-3, every: int = 100, factor: float = 10.0) -> float:
    """Step decay: divide by ``factor`` after every ``every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * factor ** -(epoch // every)


def load_clips(manifest: Manifest) -> list[AudioClip]:
    clips = []
    for e in manifest.entries:
        clip = read_wav(e.path, label=manifest.label_index(e))
        clip.source_id = str(e.path)
        clips.append(resample(clip, SAMPLE_RATE))
    return clips


# -- metrics --------------------------------------------------------------------


@dataclass
class MetricsReport:
    fold_accuracies: list[float]
    confusion: list[list[int]]
    classes: list[str]
    config_hash: str
    wall_clock_s: float = 0.0
    folds: list[int] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    def to_json(self) -> str:
        # wall-clock is excluded so identical runs give identical bytes
        body = {
            "classes": self.classes,
            "config_hash": self.config_hash,
            "confusion": self.confusion,
            "fold_accuracies": [round(a, 10) for a in self.fold_accuracies],
            "folds": self.folds,
            "mean_accuracy": round(self.mean_accuracy, 10),
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(self.to_json())
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock_s}) + "\n")
        with open(out / "confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + self.classes)
            for name, row in zip(self.classes, self.confusion):
                w.writerow([name] + row)


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    confusion: np.ndarray
    model: MultiStreamNet
    losses: list[float]


# -- training -------------------------------------------------------------------


def _batches(triples, size: int):
    batch = []
    for t in triples:
        batch.append(t)
        if len(batch) == size:
            yield batch
            batch = []
    if len(batch) >= 2:  # a lone trailing sample cannot be batch-normalized
        yield batch


def train_model(
    train: TrainingSet,
    cfg: RunConfig,
    rng: np.random.Generator,
    tag: str = "",
    on_epoch: Callable[[int, MultiStreamNet], bool | None] | None = None,
) -> tuple[MultiStreamNet, list[float]]:
    """Minibatch MAE training with Adam and the step-decay schedule.

    Returns the model and the mean loss of each epoch.  ``on_epoch(epoch,
    model)`` runs after every epoch with the model in eval mode; returning
    True stops training early.
    """
    model = MultiStreamNet(cfg.model)
    opt = Adam(dict(model.named_parameters()), lr=cfg.lr0)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr0, cfg.lr_decay_every, cfg.lr_decay_factor)
        model.train()
        losses = []
        stream = build_epoch(
            train, rng, cfg.epoch_size or None, cfg.effective_noise_fraction, cfg.augmentation
        )
        for step, batch in enumerate(_batches(stream, cfg.batch_size)):
            wave = np.stack([t.waveform for t in batch])
            st = np.stack([t.stft.values for t in batch])
            de = np.stack([t.delta.values for t in batch])
            target = np.stack([t.label_target for t in batch])
            loss = mae_loss(model(wave, st, de), target)
            if not np.isfinite(loss.data):
                raise TrainingError(f"{tag}non-finite loss at epoch {epoch}, step {step}")
            model.zero_grad()
            loss.backward()
            try:
                opt.step(lr)
            except TrainingError as exc:
                raise TrainingError(f"{tag}epoch {epoch}, step {step}: {exc}") from exc
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.debug("%sepoch %d lr %.2g loss %.4f", tag, epoch, lr, history[-1])
        if on_epoch is not None and on_epoch(epoch, model.eval()):
            break
    model.eval()
    return model, history


def evaluate(model: MultiStreamNet, clips: Sequence[AudioClip], num_classes: int, fusion: bool = True):
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for clip in clips:
        pred, _ = classify_clip(clip, model, fusion)
        confusion[clip.label, pred] += 1
    acc = float(np.trace(confusion) / max(confusion.sum(), 1))
    return acc, confusion


def make_bank(clips: Sequence[AudioClip], model_cfg: ModelConfig) -> FeatureBank:
    return FeatureBank(clips, model_cfg.canvas_rows, model_cfg.freq_pool)


def fold_split(clips: Sequence[AudioClip], folds: Sequence[int], fold: int) -> tuple[list[int], list[int]]:
    train = [i for i, f in enumerate(folds) if f != fold]
    test = [i for i, f in enumerate(folds) if f == fold]
    if not test:
        raise ValueError(f"fold {fold} has no clips")
    leaked = {clips[i].source_id for i in train} & {clips[i].source_id for i in test}
    if leaked:
        raise RuntimeError(f"fold {fold}: clips in both train and test: {sorted(leaked)[:5]}")
    return train, test


def run_fold(
    clips: Sequence[AudioClip],
    folds: Sequence[int],
    fold: int,
    cfg: RunConfig,
    bank: FeatureBank | None = None,
) -> FoldResult:
    train_idx, test_idx = fold_split(clips, folds, fold)
    bank = bank or make_bank(clips, cfg.model)
    k = cfg.model.num_classes
    rng = np.random.default_rng([cfg.seed, fold])
    model, losses = train_model(TrainingSet(bank, train_idx, k), cfg, rng, tag=f"fold {fold}: ")
    acc, conf = evaluate(model, [clips[i] for i in test_idx], k, cfg.fusion)
    log.info("fold %d accuracy %.3f", fold, acc)
    return FoldResult(fold, acc, conf, model, losses)


def train_fold(manifest: Manifest, fold: int, cfg: RunConfig, out_dir: str | Path | None = None) -> tuple[FoldResult, MetricsReport]:
    """Train on every fold except ``fold`` and evaluate on it."""
    if fold not in manifest.folds:
        raise ValueError(f"fold {fold} not in manifest folds {manifest.folds}")
    cfg = _with_classes(cfg, manifest)
    t0 = time.perf_counter()
    clips = load_clips(manifest)
    res = run_fold(clips, [e.fold for e in manifest.entries], fold, cfg)
    report = MetricsReport(
        [res.accuracy], res.confusion.tolist(), manifest.classes, cfg.hash(),
        time.perf_counter() - t0, [fold],
    )
    if out_dir is not None:
        report.write(out_dir)
        save_checkpoint(Path(out_dir) / f"fold{fold}.ckpt", res.model, epoch=cfg.epochs, meta=_ckpt_meta(cfg, manifest))
    return res, report


def _with_classes(cfg: RunConfig, manifest: Manifest) -> RunConfig:
    if cfg.model.num_classes != len(manifest.classes):
        cfg = cfg.replace(model={"num_classes": len(manifest.classes)})
    return cfg


def _ckpt_meta(cfg: RunConfig, manifest: Manifest | None = None) -> dict:
    meta = {"run_config": cfg.to_dict()}
    if manifest is not None:
        meta["classes"] = manifest.classes
    return meta


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _fold_job(args):
    clips, folds, fold, cfg = args
    res = run_fold(clips, folds, fold, cfg)
    return res


def cross_validate_clips(
    clips: Sequence[AudioClip],
    folds: Sequence[int],
    cfg: RunConfig,
    classes: Sequence[str],
) -> tuple[MetricsReport, list[FoldResult]]:
    fold_ids = sorted(set(folds))
    if len(fold_ids) < 2:
        raise ValueError("cross-validation needs at least two folds")
    t0 = time.perf_counter()
    workers = min(_worker_count(), len(fold_ids))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_fold_job, [(clips, folds, f, cfg) for f in fold_ids]))
    else:
        bank = make_bank(clips, cfg.model)
        results = [run_fold(clips, folds, f, cfg, bank) for f in fold_ids]
    conf = sum(r.confusion for r in results)
    report = MetricsReport(
        [r.accuracy for r in results], conf.tolist(), list(classes), cfg.hash(),
        time.perf_counter() - t0, fold_ids,
    )
    return report, results


def cross_validate(manifest: Manifest, cfg: RunConfig, out_dir: str | Path | None = None) -> MetricsReport:
    cfg = _with_classes(cfg, manifest)
    clips = load_clips(manifest)
    report, results = cross_validate_clips(clips, [e.fold for e in manifest.entries], cfg, manifest.classes)
    if out_dir is not None:
        report.write(out_dir)
        for r in results:
            save_checkpoint(Path(out_dir) / f"fold{r.fold}.ckpt", r.model, epoch=cfg.epochs, meta=_ckpt_meta(cfg, manifest))
    return report


# -- ablations ------------------------------------------------------------------

ABLATIONS = (
    "Without spectrogram",
    "Without delta spectrogram",
    "Without raw audio",
    "Without attention",
    "Without decision fusion",
    "Without uncertainty",
    "Without data augmentation",
    "Complete Model",
)


def ablation_config(cfg: RunConfig, name: str) -> RunConfig:
    streams = cfg.model.streams
    if name == "Without spectrogram":
        return cfg.replace(model={"streams": tuple(s for s in streams if s != "stft")})
    if name == "Without delta spectrogram":
        return cfg.replace(model={"streams": tuple(s for s in streams if s != "delta")})
    if name == "Without raw audio":
        return cfg.replace(model={"streams": tuple(s for s in streams if s != "waveform")})
    if name == "Without attention":
        return cfg.replace(model={"attention": False})
    if name == "Without decision fusion":
        return cfg.replace(fusion=False)
    if name == "Without uncertainty":
        return cfg.replace(uncertainty=False)
    if name == "Without data augmentation":
        return cfg.replace(augmentation=False)
    if name == "Complete Model":
        return cfg
    raise ValueError(f"unknown ablation {name!r}")


@dataclass
class AblationTable:
    rows: dict[str, MetricsReport]

    def to_markdown(self) -> str:
        lines = ["| variant | mean accuracy | fold accuracies |", "|---|---|---|"]
        for name, rep in self.rows.items():
            folds = ", ".join(f"{a:.3f}" for a in rep.fold_accuracies)
            lines.append(f"| {name} | {rep.mean_accuracy:.3f} | {folds} |")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {name: json.loads(rep.to_json()) for name, rep in self.rows.items()}, indent=2, sort_keys=True
        ) + "\n"


def ablate_clips(
    clips: Sequence[AudioClip],
    folds: Sequence[int],
    cfg: RunConfig,
    classes: Sequence[str],
    variants: Sequence[str] = ABLATIONS,
    keep_models: bool = False,
):
    rows = {}
    models = {}
    for name in variants:
        log.info("ablation: %s", name)
        rep, results = cross_validate_clips(clips, folds, ablation_config(cfg, name), classes)
        rows[name] = rep
        if keep_models:
            models[name] = results
    table = AblationTable(rows)
    return (table, models) if keep_models else table


def ablate(manifest: Manifest, cfg: RunConfig, out_dir: str | Path | None = None) -> AblationTable:
    cfg = _with_classes(cfg, manifest)
    clips = load_clips(manifest)
    table = ablate_clips(clips, [e.fold for e in manifest.entries], cfg, manifest.classes)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.md").write_text(table.to_markdown())
        (out / "ablation.json").write_text(table.to_json())
    return table


# -- checkpoints and attention export --------------------------------------------


def model_from_checkpoint(path: str | Path) -> tuple[MultiStreamNet, RunConfig, dict]:
    ck = load_checkpoint(path)
    cfg = RunConfig.from_dict(ck.meta["run_config"])
    model = MultiStreamNet(cfg.model)
    model.load_state_dict(ck.model_state())
    model.eval()
    return model, cfg, ck.meta


def attention_for_clip(clip: AudioClip, model: MultiStreamNet) -> list[list[np.ndarray]]:
    """Per window, the attention vectors of every stage (stage 0 first)."""
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    if not model.cfg.attention:
        raise ValueError("model was trained without attention")
    k = model.cfg.num_classes
    out = []
    model.eval()
    with no_grad():
        for seg in chunk_segments(clip):
            tr = featurize(seg, uniform_target(k), CANVAS_ROWS)
            de = pool_rows(tr.delta.values, model.cfg.freq_pool)[None]
            att = model.attention(de)
            out.append([a.data[0].astype(np.float64) for a in att])
    return out


def export_attention(clip: AudioClip, checkpoint: str | Path, out_path: str | Path) -> Path:
    """CSV of per-frame attention at every stage next to the waveform envelope.

    Stage ``s`` values are repeated ``2**s`` times so every column has one
    row per 10 ms frame.
    """
    model, _, _ = model_from_checkpoint(checkpoint)
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    windows = attention_for_clip(clip, model)
    segs = chunk_segments(clip)
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n_stages = len(windows[0]) if windows else 0
        w.writerow(["time_s"] + [f"attention_stage{s}" for s in range(n_stages)] + ["waveform_envelope"])
        for seg, stages in zip(segs, windows):
            n = stages[0].size
            env = np.abs(seg.samples[: n * HOP]).reshape(n, HOP).max(axis=1)
            cols = [np.repeat(a, n // a.size) for a in stages]
            for t in range(n):
                time_s = (seg.start_sample + t * HOP) / SAMPLE_RATE
                w.writerow([f"{time_s:.4f}"] + [f"{c[t]:.6f}" for c in cols] + [f"{env[t]:.6f}"])
    return out_path


def evaluate_checkpoint(checkpoint: str | Path, manifest: Manifest, fold: int | None = None) -> MetricsReport:
    model, cfg, _ = model_from_checkpoint(checkpoint)
    entries = [e for e in manifest.entries if fold is None or e.fold == fold]
    sub = Manifest(entries, manifest.classes, manifest.name)
    clips = load_clips(sub)
    t0 = time.perf_counter()
    acc, conf = evaluate(model, clips, cfg.model.num_classes, cfg.fusion)
    return MetricsReport([acc], conf.tolist(), manifest.classes, cfg.hash(), time.perf_counter() - t0,
                         [fold] if fold is not None else [])
