"""Differentiable layer operations on channels-last tensors.

Layouts: ``conv2d`` and ``pool`` take ``(N, F, T, C)`` (or unbatched
``(F, T, C)``), ``conv1d`` takes ``(N, T, C)`` (or ``(T, C)``).  Padding
follows the usual "same"/"valid" conventions; for "same" with stride the
output extent is ``ceil(n / stride)`` and any odd padding goes to the end.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, send


def _pad_amounts(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "valid":
        if n < k:
            raise ShapeError(f"kernel {k} longer than input {n}")
        return (n - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        return out, total // 2, total - total // 2
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding: str = "same", bias: Tensor | None = None) -> Tensor:
    """Cross-correlate ``x`` (N, F, T, Cin) with ``kernel`` (kF, kT, Cin, Cout)."""
    if x.ndim == 3:
        return _squeeze0(conv2d(x.reshape((1,) + x.shape), kernel, stride, padding, bias))
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    sh, sw = _pair(stride)
    if sh <= 0 or sw <= 0:
        raise ValueError("stride must be positive")
    ho, ph0, ph1 = _pad_amounts(h, kh, sh, padding)
    wo, pw0, pw1 = _pad_amounts(w, kw, sw, padding)
    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0))) if ph0 + ph1 + pw0 + pw1 else x.data
    # (N, Ho, Wo, Cin, kh, kw) view -> (N*Ho*Wo, kh*kw*Cin) matrix
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        if kernel.requires_grad:
            send(kernel, (cols.T @ g2).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            send(bias, g2.sum(axis=0))
        if x.requires_grad and padding == "same" and sh == sw == 1 and kh % 2 and kw % 2:
            # input gradient of a stride-1 "same" correlation is a "same" correlation
            # of the output gradient with the flipped, channel-swapped kernel
            wflip = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2)
            gp = np.pad(g, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            gcols = np.ascontiguousarray(gwin.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * cout)
            send(x, (gcols @ wflip.reshape(kh * kw * cout, cin)).reshape(x.shape))
        elif x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += dcols[:, :, :, i, j]
            send(x, dxp[:, ph0 : ph0 + h, pw0 : pw0 + w])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, bw)


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same", bias: Tensor | None = None) -> Tensor:
    """Strided cross-correlation of ``x`` (N, T, Cin) with ``kernel`` (k, Cin, Cout).

    Long kernels are evaluated polyphase: the padded signal is folded into
    blocks of ``stride`` samples so the kernel becomes ``ceil(k/stride)``
    small matrix products instead of one huge im2col buffer.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim == 2:
        return _squeeze0(conv1d(x.reshape((1,) + x.shape), kernel, stride, padding, bias))
    n, t, cin = x.shape
    k, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv1d channel mismatch: input has {cin}, kernel expects {kcin}")
    to, p0, _ = _pad_amounts(t, k, stride, padding)
    q = -(-k // stride)
    blocks = to + q - 1
    span = blocks * stride
    xp = np.zeros((n, span, cin), dtype=x.dtype)
    stop = min(t, span - p0)
    xp[:, p0 : p0 + stop] = x.data[:, :stop]
    xr = xp.reshape(n, blocks, stride * cin)
    wpad = np.zeros((q * stride, cin, cout), dtype=kernel.dtype)
    wpad[:k] = kernel.data
    wr = wpad.reshape(q, stride * cin, cout)
    out = np.zeros((n, to, cout), dtype=np.result_type(x.dtype, kernel.dtype))
    for b in range(q):
        out += xr[:, b : b + to] @ wr[b]
    if bias is not None:
        out += bias.data

    def bw(g):
        if kernel.requires_grad:
            dwr = np.zeros_like(wr)
            for i in range(n):
                gi = g[i]
                for b in range(q):
                    dwr[b] += xr[i, b : b + to].T @ gi
            send(kernel, dwr.reshape(q * stride, cin, cout)[:k])
        if bias is not None and bias.requires_grad:
            send(bias, g.sum(axis=(0, 1)))
        if x.requires_grad:
            dxr = np.zeros_like(xr)
            for b in range(q):
                dxr[:, b : b + to] += g @ wr[b].T
            dxp = dxr.reshape(n, span, cin)
            dx = np.zeros_like(x.data)
            dx[:, :stop] = dxp[:, p0 : p0 + stop]
            send(x, dx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, bw)


def pool(x: Tensor, kernel=(2, 2), mode: str = "max") -> Tensor:
    """Non-overlapping pooling over the two spatial axes of (N, F, T, C).

    Max mode sends the gradient to the first maximal element of each
    window, scanning the window in row-major order.
    """
    if x.ndim == 3:
        return _squeeze0(pool(x.reshape((1,) + x.shape), kernel, mode))
    pf, pt = _pair(kernel)
    n, f, t, c = x.shape
    if f % pf or t % pt:
        raise ShapeError(f"pool kernel {(pf, pt)} does not divide extents {(f, t)}")
    fo, to = f // pf, t // pt
    blocks = x.data.reshape(n, fo, pf, to, pt, c)
    offsets = [(i, j) for i in range(pf) for j in range(pt)]
    if mode == "max":
        out = blocks[:, :, 0, :, 0, :]
        idx = np.zeros(out.shape, dtype=np.int16)
        for p, (i, j) in enumerate(offsets[1:], start=1):
            cand = blocks[:, :, i, :, j, :]
            idx = np.where(cand > out, np.int16(p), idx)
            out = np.maximum(out, cand)
        out = np.array(out, copy=True)

        def bw(g):
            d = np.zeros(blocks.shape, dtype=g.dtype)
            for p, (i, j) in enumerate(offsets):
                d[:, :, i, :, j, :] = g * (idx == p)
            send(x, d.reshape(x.shape))

    elif mode == "avg":
        out = blocks.mean(axis=(2, 4))

        def bw(g):
            d = np.broadcast_to((g / (pf * pt))[:, :, None, :, None, :], blocks.shape)
            send(x, d.reshape(x.shape))

    else:
        raise ValueError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    return Tensor._make(out, (x,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize the last (channel) axis over every other axis.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    ones = np.ones(m, dtype=x.dtype)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        mu = (ones @ x2) / m
        xc = x2 - mu
        var = (ones @ (xc * xc)) / m
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        xc = x2 - mu
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    out = (gamma.data * xhat + beta.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, c)
        sum_g = ones @ g2
        sum_gx = ones @ (g2 * xhat)
        send(gamma, sum_gx)
        send(beta, sum_g)
        if x.requires_grad:
            if training:
                dx = (gamma.data * inv / m) * (m * g2 - sum_g - xhat * sum_gx)
            else:
                dx = g2 * (gamma.data * inv)
            send(x, dx.reshape(x.shape))

    return Tensor._make(out, (x, gamma, beta), bw)


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean over batch and classes of ``|pred - target|``."""
    target = as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss shapes differ: {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out


def scale_time(x: Tensor, a: Tensor) -> Tensor:
    """Multiply every (feature, channel) slice of ``x`` (N, F, T, C) by ``a`` (N, T)."""
    if x.ndim != 4 or a.ndim != 2 or a.shape != (x.shape[0], x.shape[2]):
        raise ShapeError(f"attention of shape {a.shape} does not match feature map {x.shape}")
    return x * a.reshape(a.shape[0], 1, a.shape[1], 1)


def _squeeze0(t: Tensor) -> Tensor:
    return t.reshape(t.shape[1:])
