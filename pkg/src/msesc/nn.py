"""Parameterized layers, the Adam optimizer and checkpoint serialization."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class TrainingError(RuntimeError):
    """Raised when optimization produces non-finite values."""


class Module:
    """Container that discovers parameters and buffers through its attributes."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, np.ndarray):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        """Cast parameters and buffers in place (used for float64 gradient checks)."""
        for m in self.modules():
            for key, val in vars(m).items():
                if isinstance(val, Tensor):
                    val.data = val.data.astype(dtype)
                elif isinstance(val, np.ndarray):
                    setattr(m, key, val.astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {n for n, _ in self.named_buffers()}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.dtype).copy()
        for name, buf in self.named_buffers():
            buf[...] = state[name]


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel=(3, 3), rng=None, bias: bool = False, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        kh, kw = kernel
        self.weight = _he(rng, (kh, kw, cin, cout), kh * kw * cin, dtype)
        self.bias = Tensor(np.zeros(cout, dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, padding="same", bias=self.bias)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.weight = _he(rng, (kernel, cin, cout), kernel * cin, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, stride=self.stride, padding="same")


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Dense(Module):
    def __init__(self, nin: int, nout: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        limit = np.sqrt(6.0 / (nin + nout))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(nin, nout)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(nout, dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with bias correction over a module's named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, lr: float | None = None) -> None:
        st = self.state
        lr = st.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        st.step += 1
        c1 = 1.0 - st.beta1**st.step
        c2 = 1.0 - st.beta2**st.step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = st.m[name], st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.dtype)


# -- checkpoint container ------------------------------------------------------
#
#   magic      8 bytes  b"MSESCCKP"
#   version    u32      currently 1
#   epoch      u32
#   adam_step  u64
#   meta_len   u32, then meta_len bytes of UTF-8 JSON (model/run config)
#   count      u32 entries, each:
#       name_len u16, name (UTF-8)
#       ndim u8, dims u32 * ndim
#       payload  f32 little-endian, row-major
#
# Parameter and buffer entries use their module path ("stft.conv.weight");
# optimizer moments are stored as "adam.m/<name>" and "adam.v/<name>".

CKPT_MAGIC = b"MSESCCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_table(buf: io.BytesIO, entries: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        arr = np.asarray(arr)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_table(view: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    return out, pos


def save_checkpoint(
    path: str | Path,
    model: Module,
    optimizer: Adam | None = None,
    epoch: int = 0,
    meta: dict | None = None,
) -> None:
    entries = dict(model.state_dict())
    step = 0
    if optimizer is not None:
        step = optimizer.state.step
        for name in optimizer.params:
            entries[f"adam.m/{name}"] = optimizer.state.m[name]
            entries[f"adam.v/{name}"] = optimizer.state.v[name]
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<IIQI", CKPT_VERSION, epoch, step, len(meta_raw)))
    buf.write(meta_raw)
    _write_table(buf, entries)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    epoch: int
    adam_step: int
    meta: dict
    tensors: dict[str, np.ndarray]

    def model_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adam.")}

    def restore_optimizer(self, optimizer: Adam) -> None:
        optimizer.state.step = self.adam_step
        for name in optimizer.params:
            optimizer.state.m[name][...] = self.tensors[f"adam.m/{name}"]
            optimizer.state.v[name][...] = self.tensors[f"adam.v/{name}"]


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    view = memoryview(data)
    try:
        version, epoch, step, meta_len = struct.unpack_from("<IIQI", view, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 8 + struct.calcsize("<IIQI")
        meta = json.loads(bytes(view[pos : pos + meta_len]).decode("utf-8"))
        tensors, _ = _read_table(view, pos + meta_len)
    except (struct.error, ValueError) as exc:  # short buffer or bad JSON/UTF-8
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return Checkpoint(epoch=epoch, adam_step=step, meta=meta, tensors=tensors)
