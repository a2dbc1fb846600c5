"""Between-class mixing, white-noise uncertainty samples and windowed
decision fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .audio import SAMPLE_RATE, AudioClip, chunk_segments, resample, white_noise_segment
from .features import (
    HOP,
    FeatureBank,
    FeatureTriple,
    SpectroStack,
    delta,
    featurize,
    one_hot,
    pool_rows,
    uniform_target,
)
from .tensor import no_grad


@dataclass(frozen=True)
class MixSpec:
    a: int
    b: int
    i: int  # start sample in clip a
    j: int  # start sample in clip b
    r: float

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"mixing ratio must lie in [0, 1], got {self.r}")


@dataclass
class ClassPosterior:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-6:
            raise ValueError("posterior must be a probability vector")

    @property
    def decision(self) -> int:
        return int(np.argmax(self.probs))  # first maximum wins ties

    @property
    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())


@dataclass
class TrainingSet:
    """Training clips (by index into ``bank``) with their labels."""

    bank: FeatureBank
    indices: list[int]
    num_classes: int

    def label(self, index: int) -> int:
        return int(self.bank.clips[index].label)

    def window(self, index: int, start_sample: int, target) -> FeatureTriple:
        if start_sample % HOP:
            raise ValueError(f"window start {start_sample} is not a multiple of the hop ({HOP})")
        wave, st = self.bank.window(index, start_sample // HOP)
        return FeatureTriple(
            waveform=wave,
            stft=SpectroStack(st, "stft"),
            delta=SpectroStack(delta(st), "delta"),
            label_target=target,
            source_id=self.bank.clips[index].source_id,
            start_sample=start_sample,
        )


def sample_mixspec(dataset: TrainingSet, rng: np.random.Generator) -> MixSpec:
    """Two distinct clips, a hop-aligned start in each, and a ratio uniform on [0, 1]."""
    if len(dataset.indices) < 2:
        raise ValueError("mixing needs at least two training clips")
    pa, pb = rng.choice(len(dataset.indices), size=2, replace=False)
    a, b = dataset.indices[pa], dataset.indices[pb]
    i = int(rng.integers(dataset.bank.n_starts(a))) * HOP
    j = int(rng.integers(dataset.bank.n_starts(b))) * HOP
    return MixSpec(a, b, i, j, float(rng.uniform(0.0, 1.0)))


def mix_training_sample(spec: MixSpec, dataset: TrainingSet) -> FeatureTriple:
    """``r * x_a + (1 - r) * x_b`` on all three inputs, labels mixed in the same ratio."""
    for idx, start in ((spec.a, spec.i), (spec.b, spec.j)):
        if start < 0 or start // HOP >= dataset.bank.n_starts(idx):
            raise ValueError(f"start {start} leaves no full window in clip {idx}")
    k = dataset.num_classes
    xa = dataset.window(spec.a, spec.i, one_hot(dataset.label(spec.a), k))
    xb = dataset.window(spec.b, spec.j, one_hot(dataset.label(spec.b), k))
    r = np.float32(spec.r)
    s = np.float32(1.0) - r

    def mix(u, v):
        return r * u + s * v

    return FeatureTriple(
        waveform=mix(xa.waveform, xb.waveform),
        stft=SpectroStack(mix(xa.stft.values, xb.stft.values), "stft"),
        delta=SpectroStack(mix(xa.delta.values, xb.delta.values), "delta"),
        label_target=mix(xa.label_target, xb.label_target),
        source_id=f"{xa.source_id}+{xb.source_id}",
    )


def noise_triple(seed, num_classes: int, freq_pool: int = 1) -> FeatureTriple:
    tr = featurize(white_noise_segment(seed), uniform_target(num_classes))
    if freq_pool > 1:
        tr.stft = SpectroStack(pool_rows(tr.stft.values, freq_pool), "stft")
        tr.delta = SpectroStack(pool_rows(tr.delta.values, freq_pool), "delta")
    return tr


def build_epoch(
    dataset: TrainingSet,
    rng: np.random.Generator,
    epoch_size: int | None = None,
    noise_fraction: float = 1.0 / 16,
    augmentation: bool = True,
) -> Iterator[FeatureTriple]:
    """Yield one epoch of training triples in random order.

    ``ceil(noise_fraction * E)`` of them are white-noise windows with a
    uniform target; the rest are between-class mixtures (or, with
    augmentation off, plain windows at random offsets).
    """
    if not 0.0 <= noise_fraction < 1.0:
        raise ValueError(f"noise_fraction must lie in [0, 1), got {noise_fraction}")
    e = len(dataset.indices) if not epoch_size else epoch_size
    n_noise = int(np.ceil(noise_fraction * e - 1e-9))
    kinds = np.zeros(e, dtype=bool)
    kinds[:n_noise] = True
    kinds = rng.permutation(kinds)
    k = dataset.num_classes
    for is_noise in kinds:
        if is_noise:
            yield noise_triple(int(rng.integers(2**63 - 1)), k, dataset.bank.freq_pool)
        elif augmentation:
            yield mix_training_sample(sample_mixspec(dataset, rng), dataset)
        else:
            idx = dataset.indices[int(rng.integers(len(dataset.indices)))]
            start = int(rng.integers(dataset.bank.n_starts(idx))) * HOP
            yield dataset.window(idx, start, one_hot(dataset.label(idx), k))


def fuse_decisions(posteriors: Sequence[ClassPosterior]) -> ClassPosterior:
    """Arithmetic mean of per-window posteriors."""
    if not posteriors:
        raise ValueError("need at least one posterior to fuse")
    probs = np.stack([np.asarray(p.probs, dtype=np.float64) for p in posteriors])
    return ClassPosterior(probs.mean(axis=0))


def window_posteriors(clip: AudioClip, model, freq_pool: int = 1, batch: int = 8) -> list[ClassPosterior]:
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    k = model.cfg.num_classes
    triples = [featurize(seg, uniform_target(k)) for seg in chunk_segments(clip)]
    out = []
    model.eval()
    with no_grad():
        for s in range(0, len(triples), batch):
            chunk = triples[s : s + batch]
            wave = np.stack([t.waveform for t in chunk])
            st = np.stack([pool_rows(t.stft.values, freq_pool) for t in chunk])
            de = np.stack([pool_rows(t.delta.values, freq_pool) for t in chunk])
            probs = model(wave, st, de).data
            out.extend(ClassPosterior(p) for p in probs)
    return out


def classify_clip(clip: AudioClip, model, fusion: bool = True) -> tuple[int, ClassPosterior]:
    """Window the clip, score every window, fuse by averaging and take the argmax.

    With ``fusion`` off only the first window is scored.
    """
    posts = window_posteriors(clip, model, model.cfg.freq_pool)
    fused = fuse_decisions(posts if fusion else posts[:1])
    return fused.decision, fused
