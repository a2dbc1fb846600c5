"""Spectral front-end: multi-resolution STFT stack, delta stack and the
per-window feature triple fed to the network.

Every window of 169344 samples maps onto a 384-column canvas (hop 441 =
10 ms).  Each STFT resolution is log-compressed, linearly interpolated
along frequency onto ``CANVAS_ROWS`` rows and stacked as a channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .audio import SEGMENT_LEN, AudioClip, Segment, pad_to_segment

HOP = 441
N_FFTS = (32, 128, 1024)
CANVAS_ROWS = 512
N_FRAMES = SEGMENT_LEN // HOP  # 384
LOG_EPS = 1e-10
LOG_FLOOR = float(np.log10(LOG_EPS))


@dataclass
class SpectroStack:
    values: np.ndarray  # (3, rows, frames)
    kind: str = "stft"

    def __post_init__(self):
        if self.kind not in ("stft", "delta"):
            raise ValueError(f"kind must be 'stft' or 'delta', got {self.kind!r}")
        if self.values.ndim != 3:
            raise ValueError(f"stack must be 3-D (channels, rows, frames), got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class FeatureTriple:
    waveform: np.ndarray
    stft: SpectroStack
    delta: SpectroStack
    label_target: np.ndarray
    is_noise: bool = False
    source_id: str = ""
    start_sample: int = 0

    def __post_init__(self):
        self.label_target = np.asarray(self.label_target, dtype=np.float32)
        if np.any(self.label_target < 0) or abs(float(self.label_target.sum()) - 1.0) > 1e-6:
            raise ValueError("label_target must be a probability vector")


def _as_samples(x) -> np.ndarray:
    return x.samples if isinstance(x, (Segment, AudioClip)) else np.asarray(x, dtype=np.float32)


@lru_cache(maxsize=None)
def _hann(n_fft: int) -> np.ndarray:
    return get_window("hann", n_fft)  # periodic


def stft_magnitude(segment, n_fft: int, hop: int = HOP, n_frames: int | None = None) -> np.ndarray:
    """``log10(|STFT| + 1e-10)`` with shape ``(n_fft // 2 + 1, n_frames)``.

    Frame ``t`` is a Hann-windowed block centred on sample ``t * hop``;
    the signal is reflection-padded by ``n_fft // 2`` at both ends.  The
    default frame count is ``len // hop`` (384 for a window).
    """
    if n_fft not in N_FFTS:
        raise ValueError(f"n_fft must be one of {N_FFTS}, got {n_fft}")
    x = _as_samples(segment).astype(np.float64)
    if n_frames is None:
        n_frames = x.size // hop
    half = n_fft // 2
    xp = np.pad(x, (half, half), mode="reflect")
    frames = sliding_window_view(xp, n_fft)[: (n_frames - 1) * hop + 1 : hop]
    spec = np.fft.rfft(frames * _hann(n_fft), axis=1)
    return np.log10(np.abs(spec) + LOG_EPS).T.astype(np.float32)


@lru_cache(maxsize=None)
def _interp_rows(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    # align-corners: output row i samples input position i*(n_in-1)/(n_out-1)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    return lo, (pos - lo)[:, None]


def rescale_bilinear(array: np.ndarray, rows: int = CANVAS_ROWS) -> np.ndarray:
    """Interpolate along axis 0 onto ``rows`` rows; the time axis is untouched.

    Written as ``a[lo] + frac * (a[lo + 1] - a[lo])`` so that constant
    input comes back bit-exact.
    """
    array = np.asarray(array, dtype=np.float32)
    if array.ndim != 2 or array.shape[0] < 2:
        raise ValueError(f"need a 2-D array with at least 2 rows, got shape {array.shape}")
    if array.shape[0] == rows:
        return array.copy()
    lo, frac = _interp_rows(array.shape[0], rows)
    a = array.astype(np.float64)
    return (a[lo] + frac * (a[lo + 1] - a[lo])).astype(np.float32)


def stft_stack(segment, rows: int = CANVAS_ROWS, n_frames: int | None = None) -> SpectroStack:
    """Channels ordered by n_fft = 32, 128, 1024, each rescaled to ``rows`` rows."""
    chans = [rescale_bilinear(stft_magnitude(segment, n, HOP, n_frames), rows) for n in N_FFTS]
    return SpectroStack(np.stack(chans), "stft")


def delta(values: np.ndarray) -> np.ndarray:
    """Five-frame regression delta along the last axis with edge replication."""
    p = np.pad(values, [(0, 0)] * (values.ndim - 1) + [(2, 2)], mode="edge")
    n = values.shape[-1]
    d = (p[..., 3 : 3 + n] - p[..., 1 : 1 + n]) + 2.0 * (p[..., 4 : 4 + n] - p[..., 0:n])
    return (d / 10.0).astype(np.float32)


def delta_stack(stft: SpectroStack) -> SpectroStack:
    if stft.kind != "stft":
        raise ValueError("delta_stack expects an stft stack")
    return SpectroStack(delta(stft.values), "delta")


def featurize(segment: Segment, label_target, rows: int = CANVAS_ROWS) -> FeatureTriple:
    st = stft_stack(segment, rows)
    return FeatureTriple(
        waveform=segment.samples,
        stft=st,
        delta=delta_stack(st),
        label_target=label_target,
        is_noise=segment.is_noise,
        source_id=segment.source_id,
        start_sample=segment.start_sample,
    )


def one_hot(label: int, k: int) -> np.ndarray:
    v = np.zeros(k, dtype=np.float32)
    v[label] = 1.0
    return v


def uniform_target(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k, dtype=np.float32)


def pool_rows(values: np.ndarray, factor: int) -> np.ndarray:
    """Average groups of ``factor`` adjacent frequency rows of a (C, rows, T) stack."""
    if factor == 1:
        return values
    c, rows, t = values.shape
    return values.reshape(c, rows // factor, factor, t).mean(axis=2, dtype=np.float32)


class FeatureBank:
    """Clip-level STFT stacks so that any hop-aligned window can be sliced out.

    A window starting at ``f * HOP`` gets the canvas columns ``f .. f+383``
    of the clip's stack.  Interior columns are identical to
    :func:`stft_stack` on the cut segment; only the first and last couple of
    columns differ, because here they see real neighbouring audio instead
    of reflection padding.

    With ``freq_pool > 1`` the stored canvas is averaged over groups of
    rows; averaging over frequency commutes with the time-axis delta, so
    deltas of the pooled canvas equal pooled deltas.
    """

    def __init__(self, clips: Sequence[AudioClip], rows: int = CANVAS_ROWS, freq_pool: int = 1):
        self.clips = list(clips)
        self.rows = rows
        self.freq_pool = freq_pool
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.clips)

    def samples(self, index: int) -> np.ndarray:
        x = self.clips[index].samples
        return pad_to_segment(x) if x.size < SEGMENT_LEN else x

    def n_starts(self, index: int) -> int:
        """Number of hop-aligned window starts that keep a full window inside the clip."""
        return (self.samples(index).size - SEGMENT_LEN) // HOP + 1

    def stack(self, index: int) -> np.ndarray:
        if index not in self._cache:
            x = self.samples(index)
            full = stft_stack(x, self.rows, n_frames=x.size // HOP).values
            self._cache[index] = np.ascontiguousarray(pool_rows(full, self.freq_pool))
        return self._cache[index]

    def window(self, index: int, start_frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Waveform and stft canvas of the window starting at ``start_frame * HOP``."""
        if not 0 <= start_frame < self.n_starts(index):
            raise ValueError(f"start frame {start_frame} outside clip {index}")
        s = start_frame * HOP
        return self.samples(index)[s : s + SEGMENT_LEN], self.stack(index)[:, :, start_frame : start_frame + N_FRAMES]


# -- feature dump container ------------------------------------------------------
#
#   magic    8 bytes b"MSESCFT\0"
#   header   u32 x 7: version, count, wave_len, channels, rows, frames, classes
#   records  count times:
#       is_noise u8
#       label_target f32[classes]
#       waveform     f32[wave_len]
#       stft         f32[channels * rows * frames]   (channel, row, frame order)
#       delta        f32[channels * rows * frames]
#
# All numbers little-endian.  A JSON sidecar (<name>.json) carries provenance.

FEAT_MAGIC = b"MSESCFT\x00"
FEAT_VERSION = 1
_HEADER = "<7I"


def write_features(path: str | Path, triples: Sequence[FeatureTriple], provenance: dict | None = None) -> None:
    path = Path(path)
    if not triples:
        raise ValueError("no feature triples to write")
    c, r, f = triples[0].stft.shape
    k = triples[0].label_target.size
    wl = triples[0].waveform.size
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack(_HEADER, FEAT_VERSION, len(triples), wl, c, r, f, k))
        for tr in triples:
            if tr.stft.shape != (c, r, f) or tr.delta.shape != (c, r, f) or tr.waveform.size != wl:
                raise ValueError("all triples in one file must share shapes")
            fh.write(struct.pack("<B", int(tr.is_noise)))
            for arr in (tr.label_target, tr.waveform, tr.stft.values, tr.delta.values):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    side = {
        "format": "msesc-features",
        "version": FEAT_VERSION,
        "count": len(triples),
        "shapes": {"waveform": [wl], "stft": [c, r, f], "delta": [c, r, f], "label_target": [k]},
        "hop": HOP,
        "n_fft": list(N_FFTS),
        "windows": [
            {"source_id": t.source_id, "start_sample": t.start_sample, "is_noise": t.is_noise} for t in triples
        ],
        "provenance": provenance or {},
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def read_features(path: str | Path) -> list[FeatureTriple]:
    data = Path(path).read_bytes()
    if data[:8] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    version, count, wl, c, r, f, k = struct.unpack_from(_HEADER, data, 8)
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 8 + struct.calcsize(_HEADER)
    out = []

    def take(n):
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float32)
        pos += 4 * n
        return arr

    for _ in range(count):
        is_noise = bool(data[pos])
        pos += 1
        target = take(k)
        wave = take(wl)
        st = take(c * r * f).reshape(c, r, f)
        de = take(c * r * f).reshape(c, r, f)
        out.append(FeatureTriple(wave, SpectroStack(st, "stft"), SpectroStack(de, "delta"), target, is_noise))
    return out
