"""Three-stream CNN with delta-driven temporal attention.

Streams (all optional, at least one required):

* ``waveform``: three strided 1-D convolutions bring the raw window down
  to one step per canvas column, the channel axis becomes a feature
  axis, and a 3x3 convolution lifts it to the stage-0 width;
* ``stft`` / ``delta``: one 3x3 convolution over the stacked canvas.

Every stream then runs the same ``stages`` blocks of conv/BN/ReLU/2x2
max-pool, so time extents halve in lockstep.  The attention block
collapses the delta canvas over frequency to one sigmoid weight per
column; that vector is average-pooled alongside the stages and multiplied
into every stream after each pooling step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .nn import BatchNorm, Conv1d, Conv2d, Dense, Module
from .tensor import ShapeError, Tensor, concat

STREAMS = ("waveform", "stft", "delta")


class SynchronizationError(RuntimeError):
    """Streams or attention fell out of temporal alignment."""


@dataclass
class ModelConfig:
    num_classes: int = 10
    streams: tuple[str, ...] = STREAMS
    attention: bool = True
    attention_mode: str = "every_stage"  # or "final_stage"
    stages: int = 4
    widths: tuple[int, ...] = (32, 64, 128, 128)
    wave_channels: tuple[int, ...] = (32, 48, 64)
    wave_kernels: tuple[int, ...] = (128, 64, 16)
    wave_strides: tuple[int, ...] = (7, 7, 9)
    attention_width: int = 16
    hidden: int = 256
    canvas_rows: int = 512
    n_frames: int = 384
    freq_pool: int = 1  # average-pool the canvas over frequency before the spectral streams
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.streams = tuple(self.streams)
        self.widths = tuple(self.widths)
        self.wave_channels = tuple(self.wave_channels)
        self.wave_kernels = tuple(self.wave_kernels)
        self.wave_strides = tuple(self.wave_strides)
        if not self.streams:
            raise ValueError("at least one stream must be enabled")
        unknown = set(self.streams) - set(STREAMS)
        if unknown or len(set(self.streams)) != len(self.streams):
            raise ValueError(f"streams must be distinct members of {STREAMS}, got {self.streams}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if len(self.widths) != self.stages:
            raise ValueError("need one width per stage")
        if self.attention_mode not in ("every_stage", "final_stage"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        scale = 2**self.stages
        if self.n_frames % scale:
            raise ValueError(f"n_frames {self.n_frames} not divisible by 2**stages")
        rows = self.canvas_rows // self.freq_pool
        if self.canvas_rows % self.freq_pool or rows & (rows - 1) or rows < scale:
            raise ValueError("canvas_rows / freq_pool must be a power of two of at least 2**stages")
        if self.wave_channels[-1] % scale:
            raise ValueError("last waveform channel count must be divisible by 2**stages")

    @property
    def segment_len(self) -> int:
        return self.n_frames * int(np.prod(self.wave_strides))

    @property
    def pooled_rows(self) -> int:
        return self.canvas_rows // self.freq_pool

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


class ConvBlock(Module):
    def __init__(self, cin, cout, rng, cfg: ModelConfig, kernel=(3, 3)):
        self.conv = Conv2d(cin, cout, kernel, rng)
        self.bn = BatchNorm(cout, cfg.bn_momentum, cfg.bn_eps)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x)).relu()


class WaveformFrontend(Module):
    def __init__(self, cfg: ModelConfig, rng):
        chans = (1,) + cfg.wave_channels
        self.convs = [
            Conv1d(chans[i], chans[i + 1], cfg.wave_kernels[i], cfg.wave_strides[i], rng)
            for i in range(len(cfg.wave_kernels))
        ]
        self.bns = [BatchNorm(c, cfg.bn_momentum, cfg.bn_eps) for c in cfg.wave_channels]
        self.lift = ConvBlock(1, cfg.widths[0], rng, cfg)
        self.segment_len = cfg.segment_len

    def __call__(self, wave: Tensor) -> Tensor:
        """(N, L) waveform -> (N, F, T, C) map with F = last 1-D channel count."""
        if wave.ndim != 2 or wave.shape[1] != self.segment_len:
            raise ShapeError(f"waveform batch must be (N, {self.segment_len}), got {wave.shape}")
        h = wave.reshape(wave.shape[0], wave.shape[1], 1)
        for conv, bn in zip(self.convs, self.bns):
            h = bn(conv(h)).relu()
        # (N, T, C1d) -> (N, C1d, T, 1): 1-D channels become the feature axis
        h = h.transpose(0, 2, 1).reshape(h.shape[0], h.shape[2], h.shape[1], 1)
        return self.lift(h)


class SpectralFrontend(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.freq_pool = cfg.freq_pool
        self.rows = cfg.canvas_rows
        self.frames = cfg.n_frames
        self.block = ConvBlock(3, cfg.widths[0], rng, cfg)

    def __call__(self, stack: Tensor) -> Tensor:
        """(N, rows, T, 3) canvas -> (N, rows / freq_pool, T, C)."""
        return self.block(_pool_rows(stack, self.rows, self.freq_pool, self.frames))


class AttentionBlock(Module):
    """Delta canvas -> per-column weights in (0, 1), one vector per stage."""

    def __init__(self, cfg: ModelConfig, rng):
        self.freq_pool = cfg.freq_pool
        self.rows = cfg.canvas_rows
        self.frames = cfg.n_frames
        n_blocks = int(np.log2(cfg.pooled_rows))
        w = cfg.attention_width
        self.blocks = [ConvBlock(3 if i == 0 else w, w, rng, cfg) for i in range(n_blocks)]
        self.proj = Conv2d(w, 1, (1, 1), rng, bias=True)
        self.stages = cfg.stages

    def __call__(self, delta: Tensor) -> list[Tensor]:
        h = _pool_rows(delta, self.rows, self.freq_pool, self.frames)
        for block in self.blocks:
            h = ops.pool(block(h), (2, 1), "max")
        a = self.proj(h).sigmoid()  # (N, 1, T, 1)
        out = [a.reshape(a.shape[0], a.shape[2])]
        for _ in range(self.stages):
            a = ops.pool(a, (1, 2), "avg")
            out.append(a.reshape(a.shape[0], a.shape[2]))
        return out


def apply_attention(feature: Tensor, a: Tensor) -> Tensor:
    """``out[n, f, t, c] = feature[n, f, t, c] * a[n, t]``."""
    if feature.ndim == 3:
        out = apply_attention(feature.reshape((1,) + feature.shape), a.reshape(1, -1))
        return out.reshape(feature.shape)
    if a.shape[-1] != feature.shape[2]:
        raise ShapeError(f"attention length {a.shape[-1]} != feature time extent {feature.shape[2]}")
    return ops.scale_time(feature, a)


@dataclass
class ForwardTrace:
    attention: list[np.ndarray] = field(default_factory=list)
    time_extents: list[dict[str, int]] = field(default_factory=list)


class MultiStreamNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        if "waveform" in cfg.streams:
            self.waveform = WaveformFrontend(cfg, rng)
        if "stft" in cfg.streams:
            self.stft = SpectralFrontend(cfg, rng)
        if "delta" in cfg.streams:
            self.delta = SpectralFrontend(cfg, rng)
        for name in cfg.streams:
            blocks = [
                ConvBlock(cfg.widths[max(k - 1, 0)], cfg.widths[k], rng, cfg) for k in range(cfg.stages)
            ]
            setattr(self, f"{name}_stages", blocks)
        # built even when disabled so that every ablation variant draws the
        # same initial weights for the parts it shares with the full model
        self.attention_block = AttentionBlock(cfg, rng)
        self.hidden = Dense(cfg.widths[-1] * len(cfg.streams), cfg.hidden, rng)
        self.out = Dense(cfg.hidden, cfg.num_classes, rng)
        self.trace = ForwardTrace()

    # -- pieces, exposed individually for analysis and tests ----------------
    def frontend(self, wave, stft, delta) -> dict[str, Tensor]:
        feats = {}
        for name in self.cfg.streams:
            if name == "waveform":
                feats[name] = self.waveform(_t(wave))
            else:
                feats[name] = getattr(self, name)(_canvas(stft if name == "stft" else delta))
        return feats

    def attention(self, delta) -> list[Tensor] | None:
        if not self.cfg.attention:
            return None
        return self.attention_block(_canvas(delta))

    def stage(self, streams: dict[str, Tensor], k: int, attention: list[Tensor] | None) -> dict[str, Tensor]:
        _check_sync(streams, None)
        out = {}
        for name, x in streams.items():
            out[name] = ops.pool(getattr(self, f"{name}_stages")[k](x), (2, 2), "max")
        apply_here = attention is not None and (
            self.cfg.attention_mode == "every_stage" or k == self.cfg.stages - 1
        )
        if apply_here:
            a = attention[k + 1]
            _check_sync(out, a.shape[-1])
            out = {name: apply_attention(x, a) for name, x in out.items()}
        else:
            _check_sync(out, None)
        return out

    def merge_and_classify(self, streams: dict[str, Tensor]) -> Tensor:
        if not streams:
            raise ValueError("no enabled stream to classify")
        _check_sync(streams, None)
        # per time step: average each stream over frequency, concatenate channels
        per_step = concat([streams[name].mean(axis=1) for name in self.cfg.streams], axis=-1)
        pooled = per_step.mean(axis=1)
        return self.out(self.hidden(pooled).relu()).softmax(axis=-1)

    def __call__(self, wave, stft, delta) -> Tensor:
        """Batched posteriors ``(N, K)`` from waveform ``(N, L)`` and canvases ``(N, 3, rows, T)``."""
        self.trace = ForwardTrace()
        att = self.attention(delta)
        if att is not None:
            self.trace.attention = [a.data for a in att]
        streams = self.frontend(wave, stft, delta)
        if att is not None:
            _check_sync(streams, att[0].shape[-1])
        self.trace.time_extents.append({n: x.shape[2] for n, x in streams.items()})
        for k in range(self.cfg.stages):
            streams = self.stage(streams, k, att)
            self.trace.time_extents.append({n: x.shape[2] for n, x in streams.items()})
        return self.merge_and_classify(streams)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _canvas(x) -> Tensor:
    # (N, 3, rows, T) -> channels-last (N, rows, T, 3)
    if isinstance(x, Tensor):
        return x.transpose(0, 2, 3, 1)
    return Tensor(np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1)))


def _pool_rows(stack: Tensor, rows: int, factor: int, frames: int) -> Tensor:
    # accepts the full canvas or one already pooled over frequency by ``factor``
    if stack.ndim == 4 and stack.shape[1:] == (rows // factor, frames, 3):
        return stack
    if stack.ndim != 4 or stack.shape[1:] != (rows, frames, 3):
        raise ShapeError(f"spectral batch must be (N, {rows}, {frames}, 3), got {stack.shape}")
    return ops.pool(stack, (factor, 1), "avg") if factor > 1 else stack


def _check_sync(streams: dict[str, Tensor], attention_len: int | None) -> None:
    extents = {name: x.shape[2] for name, x in streams.items()}
    if attention_len is not None:
        extents["attention"] = attention_len
    if len(set(extents.values())) > 1:
        raise SynchronizationError(f"time extents out of sync: {extents}")


def forward_triples(model: MultiStreamNet, triples) -> Tensor:
    """Stack ``FeatureTriple`` objects into one batch and run the model."""
    wave = np.stack([t.waveform for t in triples])
    stft = np.stack([t.stft.values for t in triples])
    delta = np.stack([t.delta.values for t in triples])
    return model(wave, stft, delta)
