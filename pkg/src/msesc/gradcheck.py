"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import Module
from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is (close to) zero from
    dividing finite-difference noise by nothing.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], array: np.ndarray, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``array`` (perturbed in place)."""
    out = np.zeros_like(array, dtype=np.float64)
    indices = np.ndindex(array.shape) if index is None else index
    for idx in indices:
        old = array[idx]
        array[idx] = old + h
        fp = f()
        array[idx] = old - h
        fm = f()
        array[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def check_function(fn: Callable[..., Tensor], *arrays: np.ndarray, h: float = 1e-6, floor: float = 1e-6) -> float:
    """Max relative error between backward() and central differences of a scalar-valued ``fn``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    worst = 0.0

    def value():
        with no_grad():
            return float(fn(*[Tensor(a) for a in arrays]).data)

    for leaf, arr in zip(leaves, arrays):
        num = numeric_grad(value, arr, h)
        worst = max(worst, float(relative_error(leaf.grad, num, floor).max()))
    return worst


@dataclass
class ModelCheck:
    max_error: float
    worst_parameter: str
    checked: int


def check_model(
    model: Module,
    loss_fn: Callable[[], Tensor],
    h: float = 1e-4,
    floor: float = 1e-6,
    names: Sequence[str] | None = None,
    per_param: int | None = None,
    seed: int = 0,
) -> ModelCheck:
    """Compare every parameter gradient of ``loss_fn()`` with central differences.

    With ``per_param`` set, only that many entries of each parameter tensor
    (drawn with ``seed``) are perturbed; every tensor is still visited.
    The model should already be in float64.  Running statistics of batch
    normalization are snapshotted and restored around every evaluation so
    that repeated forward passes see identical state.
    """
    buffers = {k: v.copy() for k, v in model.named_buffers()}

    def restore():
        for k, buf in model.named_buffers():
            buf[...] = buffers[k]

    params = dict(model.named_parameters())
    model.zero_grad()
    loss_fn().backward()
    restore()

    def value():
        with no_grad():
            v = float(loss_fn().data)
        restore()
        return v

    rng = np.random.default_rng(seed)
    worst, worst_name, count = 0.0, "", 0
    for name in names or list(params):
        p = params[name]
        index = None
        if per_param is not None and p.data.size > per_param:
            flat = rng.choice(p.data.size, size=per_param, replace=False)
            index = [np.unravel_index(i, p.data.shape) for i in np.sort(flat)]
        num = numeric_grad(value, p.data, h, index)
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if index is None:
            err = float(relative_error(grad, num, floor).max())
        else:
            err = max(float(relative_error(grad[i], num[i], floor)) for i in index)
        count += p.data.size if index is None else len(index)
        if err >= worst:
            worst, worst_name = err, name
    return ModelCheck(worst, worst_name, count)


# -- the standard suite ------------------------------------------------------
# fixed random projections turn each op output into a scalar


def _proj(shape, seed: int = 0) -> Tensor:
    return Tensor(np.random.default_rng([seed, *shape]).normal(size=shape))


def layer_cases() -> dict[str, tuple[Callable[..., Tensor], list[tuple[int, ...]]]]:
    """One scalar-valued case per layer type used by the network, with input shapes."""
    from . import ops
    from .tensor import concat

    target = np.random.default_rng(5).dirichlet(np.ones(4), 3)
    return {
        "conv2d": (lambda x, k: (ops.conv2d(x, k) * _proj((2, 5, 7, 4))).sum(), [(2, 5, 7, 2), (3, 3, 2, 4)]),
        "conv2d-stride2": (lambda x, k: (ops.conv2d(x, k, stride=2) * _proj((2, 3, 4, 4))).sum(), [(2, 5, 7, 2), (3, 3, 2, 4)]),
        "conv2d-1x1-bias": (lambda x, k, b: (ops.conv2d(x, k, bias=b) * _proj((2, 4, 6, 1))).sum(), [(2, 4, 6, 3), (1, 1, 3, 1), (1,)]),
        "conv1d": (lambda x, k: (ops.conv1d(x, k, stride=4) * _proj((2, 10, 2))).sum(), [(2, 40, 3), (9, 3, 2)]),
        "conv1d-long": (lambda x, k: (ops.conv1d(x, k, stride=7) * _proj((2, 9, 2))).sum(), [(2, 63, 1), (32, 1, 2)]),
        "maxpool": (lambda x: (ops.pool(x, (2, 2), "max") * _proj((2, 2, 3, 3))).sum(), [(2, 4, 6, 3)]),
        "maxpool-freq": (lambda x: (ops.pool(x, (2, 1), "max") * _proj((2, 2, 6, 3))).sum(), [(2, 4, 6, 3)]),
        "avgpool": (lambda x: (ops.pool(x, (1, 2), "avg") * _proj((2, 4, 3, 3))).sum(), [(2, 4, 6, 3)]),
        "batchnorm-train": (
            lambda x, g, b: (ops.batch_norm(x, g, b, np.zeros(3), np.ones(3), True) * _proj((2, 4, 6, 3))).sum(),
            [(2, 4, 6, 3), (3,), (3,)],
        ),
        "batchnorm-eval": (
            lambda x, g, b: (ops.batch_norm(x, g, b, np.full(3, 0.2), np.full(3, 2.0), False) * _proj((2, 4, 6, 3))).sum(),
            [(2, 4, 6, 3), (3,), (3,)],
        ),
        "linear": (lambda x, w, b: (ops.linear(x, w, b) * _proj((3, 2))).sum(), [(3, 4), (4, 2), (2,)]),
        "relu": (lambda x: (x.relu() * _proj((3, 4))).sum(), [(3, 4)]),
        "sigmoid": (lambda x: (x.sigmoid() * _proj((3, 4))).sum(), [(3, 4)]),
        "scale_time": (lambda x, a: (ops.scale_time(x, a) * _proj((2, 3, 5, 2))).sum(), [(2, 3, 5, 2), (2, 5)]),
        "mean-concat": (
            lambda a, b: (concat([a.mean(axis=1), b.mean(axis=1)], axis=-1) * _proj((2, 5))).sum(),
            [(2, 4, 2), (2, 4, 3)],
        ),
        "mae-softmax": (lambda z: ops.mae_loss(z.softmax(axis=-1), target), [(3, 4)]),
    }


def check_layers(h: float = 1e-6) -> dict[str, float]:
    """Max relative error of every case in :func:`layer_cases`."""
    import zlib

    out = {}
    for name, (fn, shapes) in layer_cases().items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        out[name] = check_function(fn, *[rng.normal(size=s) for s in shapes], h=h)
    return out


def mini_model_config():
    """Width-reduced network on a 32 x 48 canvas; every stream and attention enabled."""
    from .model import ModelConfig

    return ModelConfig(
        num_classes=4, widths=(4, 4, 4, 4), wave_channels=(2, 2, 16), attention_width=4,
        hidden=8, canvas_rows=32, n_frames=48, seed=3,
    )


def check_mini_model(h: float = 1e-5, names: Sequence[str] | None = None, per_param: int | None = 6) -> ModelCheck:
    """Gradient check of the MAE training loss over every parameter of the mini model.

    ``h`` is small because ReLU and max-pool kinks are crossed by larger steps.
    """
    from .model import MultiStreamNet
    from .ops import mae_loss

    cfg = mini_model_config()
    model = MultiStreamNet(cfg).astype(np.float64)
    rng = np.random.default_rng(0)
    wave = rng.normal(0, 0.3, (2, cfg.segment_len))
    st, de = rng.normal(size=(2, 3, 32, 48)), rng.normal(size=(2, 3, 32, 48))
    target = rng.dirichlet(np.ones(cfg.num_classes), 2)
    return check_model(model, lambda: mae_loss(model(wave, st, de), target), h=h, names=names, per_param=per_param)
