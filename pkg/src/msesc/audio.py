"""Audio ingest: WAV decoding, resampling, fixed-length windowing, noise and
synthetic-dataset generation.

Every downstream consumer sees mono float32 audio at 44.1 kHz cut into
windows of ``SEGMENT_LEN`` samples (3.84 s).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 44100
SEGMENT_LEN = 169344  # 44100 * 3.84


class DecodeError(ValueError):
    """The byte stream is not a well-formed WAV file."""


class UnsupportedFormatError(DecodeError):
    """The WAV file uses a codec other than integer PCM or 32-bit float."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"clip {self.source_id!r} has no samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"clip {self.source_id!r} contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Segment:
    samples: np.ndarray
    source_id: str = ""
    start_sample: int = 0
    is_noise: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.shape != (SEGMENT_LEN,):
            raise ValueError(f"segment must hold exactly {SEGMENT_LEN} samples, got {self.samples.shape}")

    @property
    def origin(self) -> tuple[str, int]:
        return self.source_id, self.start_sample


def decode_wav(data: bytes, source_id: str = "", label: int | None = None) -> AudioClip:
    """Decode PCM (8/16/24/32-bit int) or 32-bit float WAV bytes to a mono clip."""
    try:
        rate, raw = wavfile.read(io.BytesIO(data))
    except ValueError as exc:
        if "Unknown wave file format" in str(exc) or "Unsupported bit depth" in str(exc):
            raise UnsupportedFormatError(str(exc)) from exc
        raise DecodeError(str(exc)) from exc
    except (struct.error, EOFError, OSError) as exc:
        raise DecodeError(f"malformed WAV data: {exc}") from exc

    if raw.dtype == np.uint8:
        x = (raw.astype(np.float64) - 128.0) / 128.0
    elif raw.dtype == np.int16:
        x = raw.astype(np.float64) / 32768.0
    elif raw.dtype == np.int32:
        # scipy left-aligns 24-bit samples in int32, so one scale covers both
        x = raw.astype(np.float64) / 2147483648.0
    elif raw.dtype in (np.float32, np.float64):
        x = np.clip(raw.astype(np.float64), -1.0, 1.0)
    else:
        raise UnsupportedFormatError(f"unsupported sample type {raw.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise DecodeError("WAV file contains no samples")
    return AudioClip(x.astype(np.float32), int(rate), label, source_id)


def read_wav(path: str | Path, label: int | None = None) -> AudioClip:
    path = Path(path)
    return decode_wav(path.read_bytes(), source_id=str(path), label=label)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 32-bit float WAV."""
    wavfile.write(str(path), clip.sample_rate, clip.samples.astype(np.float32))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling to ``target_rate``."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return clip
    ratio = Fraction(int(target_rate), int(clip.sample_rate))
    y = resample_poly(clip.samples.astype(np.float64), ratio.numerator, ratio.denominator)
    n_out = max(1, round(clip.samples.size * target_rate / clip.sample_rate))
    if y.size >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - y.size))
    return AudioClip(y.astype(np.float32), int(target_rate), clip.label, clip.source_id)


def chunk_segments(clip: AudioClip) -> list[Segment]:
    """Cut a 44.1 kHz clip into non-overlapping full windows.

    Clips shorter than one window are zero-padded symmetrically into a
    single window; a trailing remainder shorter than a window is dropped.
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"chunk_segments expects {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    x = clip.samples
    n = x.size
    if n == 0:
        raise ValueError("cannot chunk an empty clip")
    if n < SEGMENT_LEN:
        return [Segment(pad_to_segment(x), clip.source_id, 0)]
    return [
        Segment(x[k * SEGMENT_LEN : (k + 1) * SEGMENT_LEN], clip.source_id, k * SEGMENT_LEN)
        for k in range(n // SEGMENT_LEN)
    ]


def pad_to_segment(x: np.ndarray) -> np.ndarray:
    left = (SEGMENT_LEN - x.size) // 2
    out = np.zeros(SEGMENT_LEN, dtype=np.float32)
    out[left : left + x.size] = x
    return out


def white_noise_segment(seed, amplitude: float | None = None) -> Segment:
    """Uniform white noise in ``[-a, a]``; ``a`` is drawn from [0.1, 1.0] unless given."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 1.0) if amplitude is None else amplitude
    x = rng.uniform(-a, a, size=SEGMENT_LEN).astype(np.float32)
    return Segment(x, source_id=f"noise-{seed}", start_sample=0, is_noise=True)


# -- synthetic dataset ----------------------------------------------------------

CLASS_KINDS = ("tone", "chirp", "click-train", "noise-band")

# parameter ranges per kind; each is (low, high) sampled uniformly per clip
DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "tone": {"freq_hz": (200.0, 2000.0), "amplitude": (0.2, 0.8)},
    "chirp": {"f_start_hz": (300.0, 1000.0), "f_end_hz": (2000.0, 6000.0), "sweep_s": (0.5, 1.5), "amplitude": (0.2, 0.8)},
    "click-train": {"period_s": (0.25, 0.75), "click_hz": (2000.0, 5000.0), "decay_ms": (2.0, 6.0), "amplitude": (0.3, 0.9)},
    "noise-band": {"center_hz": (1000.0, 6000.0), "bandwidth_hz": (300.0, 1500.0), "amplitude": (0.2, 0.8)},
}


@dataclass
class ClassSpec:
    kind: str
    count: int
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CLASS_KINDS:
            raise ValueError(f"unknown class kind {self.kind!r}; expected one of {CLASS_KINDS}")
        merged = dict(DEFAULT_RANGES[self.kind])
        merged.update({k: tuple(v) for k, v in self.ranges.items()})
        unknown = set(merged) - set(DEFAULT_RANGES[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        self.ranges = merged


@dataclass
class SynthSpec:
    classes: list[ClassSpec]
    seed: int = 0
    duration_s: float = 5.0
    background: float = 0.01  # std of white background noise added to every clip


def _synth_one(kind: str, p: dict[str, float], n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    if kind == "tone":
        x = np.sin(2 * np.pi * p["freq_hz"] * t + rng.uniform(0, 2 * np.pi))
    elif kind == "chirp":
        # repeated linear sweeps from f_start to f_end
        sweep = p["sweep_s"]
        tau = np.mod(t + rng.uniform(0, sweep), sweep)
        k = (p["f_end_hz"] - p["f_start_hz"]) / sweep
        x = np.sin(2 * np.pi * (p["f_start_hz"] * tau + 0.5 * k * tau**2))
    elif kind == "click-train":
        period = int(round(p["period_s"] * SAMPLE_RATE))
        tk = np.arange(int(6 * p["decay_ms"] * 1e-3 * SAMPLE_RATE)) / SAMPLE_RATE
        click = np.sin(2 * np.pi * p["click_hz"] * tk) * np.exp(-tk / (p["decay_ms"] * 1e-3))
        impulses = np.zeros(n)
        impulses[int(rng.integers(0, period)) :: period] = 1.0
        x = np.convolve(impulses, click)[:n]
    elif kind == "noise-band":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        lo = p["center_hz"] - p["bandwidth_hz"] / 2
        hi = p["center_hz"] + p["bandwidth_hz"] / 2
        spec[(f < lo) | (f > hi)] = 0.0
        x = np.fft.irfft(spec, n)
    else:
        raise ValueError(f"unknown class kind {kind!r}")
    peak = np.max(np.abs(x))
    return p["amplitude"] * x / peak if peak > 0 else x


def synth_dataset(spec: SynthSpec) -> list[AudioClip]:
    """Generate labelled clips; label ``k`` is the position of the class in ``spec.classes``."""
    n = int(round(spec.duration_s * SAMPLE_RATE))
    clips = []
    for label, cls in enumerate(spec.classes):
        for i in range(cls.count):
            rng = np.random.default_rng([spec.seed, label, i])
            params = {name: rng.uniform(lo, hi) for name, (lo, hi) in sorted(cls.ranges.items())}
            x = _synth_one(cls.kind, params, n, rng)
            if spec.background > 0:
                x = x + rng.normal(0.0, spec.background, size=n)
            x = np.clip(x, -1.0, 1.0).astype(np.float32)
            clips.append(AudioClip(x, SAMPLE_RATE, label, f"{cls.kind}-{label}-{i:03d}"))
    return clips
