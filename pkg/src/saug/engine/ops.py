"""Differentiable layer operations: convolution, pooling, batch norm,
dense, activations, dropout and the two loss functions.

All ops validate shapes up front and raise :class:`ShapeError` with the
offending dimensions; none of them broadcast implicitly.  Backward rules
skip gradient computation for inputs that do not require it (e.g. the image
batch feeding the first convolution).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_op


def _as_c(a: np.ndarray) -> np.ndarray:
    return a if a.flags["C_CONTIGUOUS"] else np.ascontiguousarray(a)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """2-D correlation with stride 1 and zero fill for 'same' padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be (N,C,H,W), got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weights must be (F,C,kh,kw), got {w.shape}")
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(
            f"conv2d: weight channels {wc} do not match input channels {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({f},)")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if h < kh or wd < kw:
            raise ShapeError(
                f"conv2d: valid padding needs input >= kernel, "
                f"got {h}x{wd} vs {kh}x{kw}")
    else:
        raise ShapeError(f"conv2d: unknown padding {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = kernels.conv2d_forward(xp, _as_c(w.data), _as_c(b.data))

    def bwd(g):
        g = _as_c(g)
        dx = dw = db = None
        if w.requires_grad or b.requires_grad:
            dw, db = kernels.conv2d_grad_w(xp, g, kh, kw)
        if x.requires_grad:
            dxp = kernels.conv2d_grad_x(g, _as_c(w.data),
                                        h + 2 * ph, wd + 2 * pw)
            dx = _as_c(dxp[:, :, ph:ph + h, pw:pw + wd]) if ph or pw else dxp
        return dx, dw, db

    return make_op("conv2d", (x, w, b), out, bwd)


def maxpool2d(x: Tensor) -> Tensor:
    """Max over non-overlapping 2x2 windows; gradient flows to the argmax."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"maxpool2d: spatial dims must be even, got {h}x{w}; "
            "resize the input first")
    out, idx = kernels.maxpool2_forward(x.data)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (kernels.maxpool2_backward(_as_c(g), idx),)

    return make_op("maxpool2d", (x,), out, bwd)


class RunningStats:
    """Per-channel running mean/variance updated by exponential moving
    average in train mode and consumed in infer mode."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * batch_mean
        self.var = (1.0 - m) * self.var + m * batch_var


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
                running: RunningStats, epsilon: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta must be ({c},), got "
            f"{gamma.shape}/{beta.shape}")
    if mode not in ("train", "infer"):
        raise value_error(mode)

    gma = gamma.data.reshape(1, c, 1, 1)
    bta = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError(
                "batchnorm2d: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + epsilon)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        running.update(mean, var)
        out = gma * xhat + bta

        def bwd(g):
            dgamma = dbeta = dx = None
            if gamma.requires_grad:
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                dbeta = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxhat = g * gma
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv.reshape(1, c, 1, 1) / m) * (
                    m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

        return make_op("batchnorm2d", (x, gamma, beta), out, bwd)

    inv = 1.0 / np.sqrt(running.var + epsilon)
    xhat = (x.data - running.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gma * xhat + bta

    def bwd(g):
        dgamma = dbeta = dx = None
        if gamma.requires_grad:
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            dbeta = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dx = g * gma * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return make_op("batchnorm2d", (x, gamma, beta), out, bwd)


def value_error(mode):
    return ValueError(f"batchnorm2d: mode must be 'train' or 'infer', got {mode!r}")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(
            f"dense: expected (N,D) x (D,U), got {x.shape} x {w.shape}")
    n, d = x.shape
    wd_, u = w.shape
    if wd_ != d:
        raise ShapeError(
            f"dense: input feature dim {d} does not match weight rows {wd_}")
    if b.shape != (u,):
        raise ShapeError(f"dense: bias shape {b.shape} != ({u},)")
    out = x.data @ w.data + b.data

    def bwd(g):
        dx = g @ w.data.T if x.requires_grad else None
        dw = x.data.T @ g if w.requires_grad else None
        db = g.sum(axis=0) if b.requires_grad else None
        return dx, dw, db

    return make_op("dense", (x, w, b), out, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,) if x.requires_grad else (None,)

    return make_op("relu", (x,), np.maximum(x.data, 0.0), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g):
        return (g * out * (1.0 - out),) if x.requires_grad else (None,)

    return make_op("sigmoid", (x,), out, bwd)


def dropout(x: Tensor, rate: float, mode: str,
            rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0,1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return make_op("dropout", (x,), x.data.copy(), lambda g: (g,))
    if rng is None:
        raise ValueError("dropout: train mode requires an rng")
    keep = rng.random(x.shape) >= rate
    scl = 1.0 / (1.0 - rate)
    mask = keep * scl

    def bwd(g):
        return (g * mask,) if x.requires_grad else (None,)

    return make_op("dropout", (x,), x.data * mask, bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(
            f"softmax_cross_entropy: logits must be (N,K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"softmax_cross_entropy: labels must lie in [0,{k}), "
            f"got range [{labels.min()},{labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    logp = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        if not logits.requires_grad:
            return (None,)
        dl = probs.copy()
        dl[np.arange(n), labels] -= 1.0
        return (dl * (float(g) / n),)

    return make_op("softmax_cross_entropy", (logits,), np.asarray(loss), bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(
            f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    m = pred.size
    loss = float((diff * diff).mean())

    def bwd(g):
        dp = (2.0 / m) * diff * float(g) if pred.requires_grad else None
        dt = -(2.0 / m) * diff * float(g) if target.requires_grad else None
        return dp, dt

    return make_op("mse_loss", (pred, target), np.asarray(loss), bwd)
