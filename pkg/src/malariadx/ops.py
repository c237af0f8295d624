"""Differentiable primitives over :class:`~malariadx.tensor.Tensor`.

Images use the N, C, H, W layout.  ``conv2d`` is a cross-correlation (the
kernel is not flipped).  Every public function validates its inputs and
raises :class:`~malariadx.errors.RejectedInputError` on contract violations.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import RejectedInputError
from .tensor import Tensor, apply, register

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise RejectedInputError(msg)


def _out_extent(size: int, k: int, stride: int, pad: int = 0) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) strided view, no copy
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


@register("conv2d")
class _Conv2d:
    @staticmethod
    def forward(x, w, b=None, *, stride, pad):
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = _windows(xp, w.shape[2], w.shape[3], stride)
        out = np.tensordot(cols, w, axes=((1, 4, 5), (1, 2, 3)))  # N, H', W', Cout
        if b is not None:
            out = out + b
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), None

    @staticmethod
    def backward(saved, g, x, w, b=None, *, stride, pad):
        n, c, h, wd = x.shape
        cout, _, kh, kw = w.shape
        oh, ow = g.shape[2], g.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = _windows(xp, kh, kw, stride)
        gw = np.tensordot(g, cols, axes=((0, 2, 3), (0, 2, 3)))  # Cout, C, kh, kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                # (N, Cout, H', W') x (Cout, C) -> (N, H', W', C)
                contrib = np.tensordot(g, w[:, :, i, j], axes=((1,), (0,)))
                gxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                    j:j + stride * (ow - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,Cin,H,W) with ``kernel`` (Cout,Cin,Kh,Kw).

    ``pad`` zeros are added on every spatial border.  ``bias`` may be omitted
    for convolutions that feed a batch norm.
    """
    _require(x.data.ndim == 4, f"conv2d input must be rank 4, got {x.shape}")
    _require(kernel.data.ndim == 4, f"conv2d kernel must be rank 4, got {kernel.shape}")
    _require(int(stride) >= 1 and int(pad) >= 0, "stride must be >= 1 and pad >= 0")
    _require(x.shape[1] == kernel.shape[1],
             f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    kh, kw = kernel.shape[2:]
    h, w = x.shape[2:]
    _require(kh <= h + 2 * pad and kw <= w + 2 * pad,
             f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    _require(_out_extent(h, kh, stride, pad) > 0 and _out_extent(w, kw, stride, pad) > 0,
             "conv2d output would be empty")
    if bias is not None:
        _require(bias.shape == (kernel.shape[0],),
                 f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
        return apply("conv2d", x, kernel, bias, stride=int(stride), pad=int(pad))
    return apply("conv2d", x, kernel, stride=int(stride), pad=int(pad))


# ---------------------------------------------------------------------------
# batch norm


@register("batch_norm2d_train")
class _BatchNormTrain:
    @staticmethod
    def forward(x, gamma, beta, *, eps):
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
        return out, (xhat, inv_std)

    @staticmethod
    def backward(saved, g, x, gamma, beta, *, eps):
        xhat, inv_std = saved
        m = x.shape[0] * x.shape[2] * x.shape[3]
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma[None, :, None, None]
        gx = (inv_std / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return gx, ggamma, gbeta


@register("batch_norm2d_eval")
class _BatchNormEval:
    @staticmethod
    def forward(x, gamma, beta, mean, var, *, eps):
        scale = gamma / np.sqrt(var + eps)
        shift = beta - mean * scale
        return x * scale[None, :, None, None] + shift[None, :, None, None], None

    @staticmethod
    def backward(saved, g, x, gamma, beta, mean, var, *, eps):
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        gx = g * (gamma * inv_std)[None, :, None, None]
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)), None, None


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: Tensor, running_var: Tensor,
                 mode: str = "train", eps: float = BN_EPS,
                 momentum: float = BN_MOMENTUM) -> Tuple[Tensor, Tensor, Tensor]:
    """Per-channel batch normalization.

    Returns ``(output, new_running_mean, new_running_var)``.  In ``"train"``
    mode the batch statistics over N, H, W normalize the input and the
    running statistics move toward them by ``momentum`` (the running
    variance uses the unbiased estimate).  In ``"eval"`` mode the running
    statistics are used and returned unchanged.
    """
    _require(x.data.ndim == 4, f"batch_norm2d input must be rank 4, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        _require(t.shape == (c,), f"{name} shape {t.shape} does not match {c} channels")
    _require(eps > 0, "eps must be positive")
    if mode == "eval":
        out = apply("batch_norm2d_eval", x, gamma, beta, running_mean, running_var, eps=eps)
        return out, running_mean, running_var
    _require(mode == "train", f"unknown batch norm mode {mode!r}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    _require(m >= 2, "train-mode batch norm needs at least two values per channel")
    out = apply("batch_norm2d_train", x, gamma, beta, eps=eps)
    batch_mean = x.data.mean(axis=(0, 2, 3))
    batch_var = x.data.var(axis=(0, 2, 3)) * (m / (m - 1))
    new_mean = (1 - momentum) * running_mean.data + momentum * batch_mean
    new_var = (1 - momentum) * running_var.data + momentum * batch_var
    return out, Tensor(new_mean), Tensor(new_var)


# ---------------------------------------------------------------------------
# pooling


@register("max_pool2d")
class _MaxPool:
    @staticmethod
    def forward(x, *, window, stride):
        win = _windows(x, window, window, stride)
        flat = win.reshape(win.shape[:4] + (window * window,))
        arg = flat.argmax(axis=-1)  # first maximum in row-major order
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, arg

    @staticmethod
    def backward(arg, g, x, *, window, stride):
        gx = np.zeros_like(x)
        oh, ow = g.shape[2:]
        for i in range(window):
            for j in range(window):
                hit = np.where(arg == i * window + j, g, 0.0)
                gx[:, :, i:i + stride * (oh - 1) + 1:stride,
                   j:j + stride * (ow - 1) + 1:stride] += hit
        return (gx,)


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over ``window``x``window`` patches.  Ties route gradient to the first maximum."""
    stride = window if stride is None else stride
    _require(x.data.ndim == 4, f"max_pool2d input must be rank 4, got {x.shape}")
    _require(window >= 1 and stride >= 1, "window and stride must be positive")
    _require(window <= x.shape[2] and window <= x.shape[3],
             f"window {window} exceeds spatial extent {x.shape[2:]}")
    return apply("max_pool2d", x, window=int(window), stride=int(stride))


@register("global_avg_pool")
class _GlobalAvgPool:
    @staticmethod
    def forward(x):
        return x.mean(axis=(2, 3)), None

    @staticmethod
    def backward(saved, g, x):
        hw = x.shape[2] * x.shape[3]
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    _require(x.data.ndim == 4, f"global_avg_pool input must be rank 4, got {x.shape}")
    return apply("global_avg_pool", x)


# ---------------------------------------------------------------------------
# dense, activations, elementwise


@register("dense")
class _Dense:
    @staticmethod
    def forward(x, w, b):
        return x @ w + b, None

    @staticmethod
    def backward(saved, g, x, w, b):
        return g @ w.T, x.T @ g, g.sum(axis=0)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` (N,F), ``weight`` (F,O), ``bias`` (O)."""
    _require(x.data.ndim == 2 and weight.data.ndim == 2,
             f"dense expects rank-2 input and weight, got {x.shape} and {weight.shape}")
    _require(x.shape[1] == weight.shape[0],
             f"dense dimension mismatch: {x.shape} @ {weight.shape}")
    _require(bias.shape == (weight.shape[1],),
             f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    return apply("dense", x, weight, bias)


@register("relu")
class _Relu:
    @staticmethod
    def forward(x):
        return np.maximum(x, 0), None

    @staticmethod
    def backward(saved, g, x):
        return (g * (x > 0),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    p = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    # keep the output strictly inside (0, 1) even where exp saturates
    one = np.ones((), dtype=x.dtype)
    return np.clip(p, np.finfo(x.dtype).tiny, np.nextafter(one, 0 * one))


@register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(x):
        p = _sigmoid(x)
        return p, p

    @staticmethod
    def backward(p, g, x):
        return (g * p * (1 - p),)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return apply("relu", x)
    if kind == "sigmoid":
        return apply("sigmoid", x)
    raise RejectedInputError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return apply("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", x)


@register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        return a + b, None

    @staticmethod
    def backward(saved, g, a, b):
        return g, g


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add shape mismatch: {a.shape} vs {b.shape}")
    return apply("add", a, b)


@register("scale")
class _Scale:
    @staticmethod
    def forward(x, *, factor):
        return x * factor, None

    @staticmethod
    def backward(saved, g, x, *, factor):
        return (g * factor,)


def scale(x: Tensor, factor: float) -> Tensor:
    return apply("scale", x, factor=float(factor))


@register("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        return a * b, None

    @staticmethod
    def backward(saved, g, a, b):
        return g * b, g * a


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"mul shape mismatch: {a.shape} vs {b.shape}")
    return apply("mul", a, b)


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(x, *, shape):
        return x.reshape(shape), None

    @staticmethod
    def backward(saved, g, x, *, shape):
        return (g.reshape(x.shape),)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    _require(int(np.prod(shape)) == x.size, f"cannot reshape {x.shape} to {shape}")
    return apply("reshape", x, shape=shape)


@register("sum")
class _Sum:
    @staticmethod
    def forward(x):
        return np.asarray(x.sum()), None

    @staticmethod
    def backward(saved, g, x):
        return (np.full_like(x, g),)


def sum_all(x: Tensor) -> Tensor:
    return apply("sum", x)


@register("mean")
class _Mean:
    @staticmethod
    def forward(x):
        return np.asarray(x.mean()), None

    @staticmethod
    def backward(saved, g, x):
        return (np.full_like(x, g / x.size),)


def mean_all(x: Tensor) -> Tensor:
    return apply("mean", x)


# ---------------------------------------------------------------------------
# loss


@register("bce")
class _BCE:
    @staticmethod
    def forward(p, y, *, clamp):
        pc = np.clip(p, clamp, 1 - clamp)
        loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
        return np.asarray(loss, dtype=p.dtype), pc

    @staticmethod
    def backward(pc, g, p, y, *, clamp):
        inside = (p >= clamp) & (p <= 1 - clamp)
        gp = (g / p.size) * (pc - y) / (pc * (1 - pc))
        return np.where(inside, gp, 0.0).astype(p.dtype, copy=False), None


def bce_loss(probabilities: Tensor, labels: Tensor, clamp: float = BCE_CLAMP) -> Tensor:
    """Mean binary cross entropy; ``labels`` may be soft values in [0, 1]."""
    _require(probabilities.shape == labels.shape,
             f"probabilities {probabilities.shape} and labels {labels.shape} differ in shape")
    _require(bool(np.all((labels.data >= 0) & (labels.data <= 1))), "labels must lie in [0, 1]")
    return apply("bce", probabilities, labels, clamp=float(clamp))
