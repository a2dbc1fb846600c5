"""Scaled-down experiments on the synthetic dataset.

Each function returns plain numbers so that the acceptance tests and the
scripts in ``scripts/`` can share them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .audio import SAMPLE_RATE, AudioClip, ClassSpec, SynthSpec, synth_dataset
from .augment import TrainingSet, classify_clip
from .config import RunConfig
from .features import one_hot
from .harness import (
    FoldResult,
    MetricsReport,
    ablation_config,
    attention_for_clip,
    cross_validate_clips,
    evaluate,
    make_bank,
    synth_folds,
    train_model,
)
from .model import MultiStreamNet
from .nn import Adam
from .ops import mae_loss


def acceptance_dataset(seed: int = 0, count: int = 40, n_folds: int = 5):
    spec = SynthSpec(
        [ClassSpec(k, count) for k in ("tone", "chirp", "click-train", "noise-band")], seed=seed
    )
    return synth_folds(spec, n_folds)


def noise_clips(n: int, seed: int = 1234, duration_s: float = 5.0) -> list[AudioClip]:
    """White-noise clips with amplitudes drawn like the training noise segments."""
    rng = np.random.default_rng(seed)
    length = int(round(duration_s * SAMPLE_RATE))
    out = []
    for i in range(n):
        amp = rng.uniform(0.1, 1.0)
        x = np.clip(rng.uniform(-amp, amp, size=length), -1.0, 1.0).astype(np.float32)
        out.append(AudioClip(x, SAMPLE_RATE, None, f"noise-{i:03d}"))
    return out


def noise_entropies(model: MultiStreamNet, clips: Sequence[AudioClip]) -> np.ndarray:
    """Entropy (nats) of the fused posterior for each clip."""
    return np.array([classify_clip(c, model, fusion=True)[1].entropy for c in clips])


def click_clips(n: int, period_s: float = 0.5, seed: int = 999) -> list[AudioClip]:
    spec = SynthSpec([ClassSpec("click-train", n, {"period_s": (period_s, period_s)})], seed=seed)
    return synth_dataset(spec)


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Normalised autocorrelation of the mean-removed sequence, lags ``0 .. len-1``."""
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    n = x.size
    spec = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(spec * np.conj(spec))[:n]
    return ac / ac[0] if ac[0] > 0 else ac


def has_peak_near(ac: np.ndarray, lag: int, tol: int = 2) -> bool:
    """True if some lag within ``lag +- tol`` is a local maximum of ``ac``."""
    for k in range(max(lag - tol, 1), min(lag + tol, ac.size - 2) + 1):
        if ac[k] > ac[k - 1] and ac[k] >= ac[k + 1]:
            return True
    return False


def attention_periodicity(model: MultiStreamNet, clips: Sequence[AudioClip], lag: int = 50, tol: int = 2):
    """Fraction of clips whose first-window stage-0 attention peaks near ``lag``."""
    hits = []
    for clip in clips:
        a0 = attention_for_clip(clip, model)[0][0]
        hits.append(has_peak_near(autocorrelation(a0), lag, tol))
    return float(np.mean(hits)), hits


@dataclass
class OverfitResult:
    steps: int
    accuracy_curve: list[float] = field(default_factory=list)

    @property
    def reached(self) -> bool:
        return bool(self.accuracy_curve) and self.accuracy_curve[-1] == 1.0


def overfit(clips: Sequence[AudioClip], cfg: RunConfig, max_steps: int = 200, check_every: int = 10) -> OverfitResult:
    """Train on the first window of each clip, full batch, no augmentation.

    Stops as soon as training accuracy (eval mode, fused over windows)
    reaches 1.0.
    """
    bank = make_bank(clips, cfg.model)
    k = cfg.model.num_classes
    ds = TrainingSet(bank, list(range(len(clips))), k)
    batch = [ds.window(i, 0, one_hot(ds.label(i), k)) for i in ds.indices]
    wave = np.stack([t.waveform for t in batch])
    st = np.stack([t.stft.values for t in batch])
    de = np.stack([t.delta.values for t in batch])
    target = np.stack([t.label_target for t in batch])
    model = MultiStreamNet(cfg.model)
    opt = Adam(dict(model.named_parameters()), lr=cfg.lr0)
    curve = []
    for step in range(1, max_steps + 1):
        model.train()
        loss = mae_loss(model(wave, st, de), target)
        model.zero_grad()
        loss.backward()
        opt.step()
        if step % check_every == 0 or step == max_steps:
            acc, _ = evaluate(model, clips, k, fusion=True)
            curve.append(acc)
            if acc == 1.0:
                return OverfitResult(step, curve)
    return OverfitResult(max_steps, curve)


def epochs_to_fit(clips: Sequence[AudioClip], cfg: RunConfig) -> int | None:
    """First epoch (1-based) after which every training clip is classified correctly.

    Trains with ``cfg`` as given, so augmentation and noise follow the
    config; returns None if ``cfg.epochs`` pass without a perfect fit.
    """
    k = cfg.model.num_classes
    ds = TrainingSet(make_bank(clips, cfg.model), list(range(len(clips))), k)
    fitted: list[int] = []

    def check(epoch, model):
        if evaluate(model, clips, k, fusion=True)[0] == 1.0:
            fitted.append(epoch + 1)
            return True
        return False

    train_model(ds, cfg, np.random.default_rng(cfg.seed), on_epoch=check)
    return fitted[0] if fitted else None


@dataclass
class AcceptanceRuns:
    """Fold results of every ablation variant on one dataset and seed."""

    reports: dict
    results: dict[str, list[FoldResult]]

    def mean(self, name: str) -> float:
        return self.reports[name].mean_accuracy


def run_ablations(clips, folds, classes, cfg: RunConfig, variants: Sequence[str]) -> AcceptanceRuns:
    """Cross-validate every variant with paired seeds.

    "Without decision fusion" changes only evaluation, so it re-scores the
    complete model's fold models on the first window instead of retraining
    them (training would be bit-identical).
    """
    reports, results = {}, {}
    order = sorted(variants, key=lambda v: v != "Complete Model")
    for name in order:
        if name == "Without decision fusion" and "Complete Model" in results:
            base = results["Complete Model"]
            rescored = []
            for fold, r in zip(sorted(set(folds)), base):
                test = [clips[j] for j, f in enumerate(folds) if f == fold]
                acc, conf = evaluate(r.model, test, cfg.model.num_classes, fusion=False)
                rescored.append(FoldResult(fold, acc, conf, r.model, r.losses))
            conf = sum(r.confusion for r in rescored)
            reports[name] = MetricsReport(
                [r.accuracy for r in rescored], conf.tolist(), list(classes),
                ablation_config(cfg, name).hash(), 0.0, sorted(set(folds)),
            )
            results[name] = rescored
            continue
        rep, res = cross_validate_clips(clips, folds, ablation_config(cfg, name), classes)
        reports[name], results[name] = rep, res
    return AcceptanceRuns(reports, results)

