"""Normalization, convolution, pooling and loss primitives on top of `tensor`."""
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import DTYPE, Function, Tensor, as_tensor

LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    extent = x.shape[-1] if x.ndim else 0
    if extent == 0:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got shape {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    for label, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (extent,):
            raise ShapeError(f"layer_norm {label} has shape {p.shape}, expected ({extent},)")
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    out = centered * (variance + eps) ** -0.5
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # The subtracted max is a constant, it leaves the gradient unchanged.
    shifted = x - Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - Tensor(np.max(x.data, axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------

def _out_extent(extent: int, kernel: int, stride: int, label: str) -> int:
    if extent < kernel:
        raise ShapeError(f"{label} extent {extent} smaller than kernel {kernel}")
    return (extent - kernel) // stride + 1


class Conv2dFn(Function):
    """Cross-correlation of (B,C,H,W) with (O,C,k,k), zero padding."""

    def forward(self, x, w, stride: int, pad: int):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
                f"kernel {w.shape} expects {w.shape[1]}"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        kh, kw = w.shape[2], w.shape[3]
        ho = _out_extent(xp.shape[2], kh, stride, "conv2d height")
        wo = _out_extent(xp.shape[3], kw, stride, "conv2d width")
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        self.windows, self.w = windows, w
        self.stride, self.pad = stride, pad
        self.x_shape, self.xp_shape, self.out_hw = x.shape, xp.shape, (ho, wo)
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        s, (ho, wo) = self.stride, self.out_hw
        gw = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(self.xp_shape, dtype=DTYPE)
        for i in range(self.w.shape[2]):
            for j in range(self.w.shape[3]):
                contrib = np.tensordot(grad, self.w[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        h, w = self.x_shape[2], self.x_shape[3]
        gx = gxp[:, :, self.pad:self.pad + h, self.pad:self.pad + w]
        return gx, gw


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    out = Conv2dFn.apply(as_tensor(x), as_tensor(kernel), stride=stride, pad=pad)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class AvgPool2dFn(Function):
    def forward(self, x, kernel: int, stride: int):
        if x.ndim != 4:
            raise ShapeError(f"avg_pool2d needs (B,C,H,W), got {x.shape}")
        for extent, label in ((x.shape[2], "height"), (x.shape[3], "width")):
            if extent < kernel or (extent - kernel) % stride:
                raise ShapeError(
                    f"avg_pool2d {label} {extent} incompatible with kernel {kernel}, "
                    f"stride {stride}"
                )
        ho = (x.shape[2] - kernel) // stride + 1
        wo = (x.shape[3] - kernel) // stride + 1
        windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        self.x_shape, self.kernel, self.stride, self.out_hw = x.shape, kernel, stride, (ho, wo)
        return windows.mean(axis=(4, 5))

    def backward(self, grad):
        k, s, (ho, wo) = self.kernel, self.stride, self.out_hw
        gx = np.zeros(self.x_shape, dtype=DTYPE)
        share = grad / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += share
        return (gx,)


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    return AvgPool2dFn.apply(as_tensor(x), kernel=kernel, stride=stride or kernel)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

class BceWithLogitsFn(Function):
    def forward(self, logits, targets: np.ndarray):
        self.logits, self.targets = logits, targets
        return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))

    def backward(self, grad):
        prob = 0.5 * (1.0 + np.tanh(0.5 * self.logits))
        return (grad * (prob - self.targets),)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |logit|."""
    targets = np.asarray(targets, dtype=DTYPE)
    if targets.shape != logits.shape:
        raise ShapeError(f"bce targets {targets.shape} do not match logits {logits.shape}")
    return BceWithLogitsFn.apply(logits, targets=targets)


class SmoothL1Fn(Function):
    def forward(self, diff, beta: float):
        self.diff, self.beta = diff, beta
        small = np.abs(diff) < beta
        return np.where(small, 0.5 * diff * diff / beta, np.abs(diff) - 0.5 * beta)

    def backward(self, grad):
        return (grad * np.clip(self.diff / self.beta, -1.0, 1.0),)


def smooth_l1(diff: Tensor, beta: float = 1.0) -> Tensor:
    return SmoothL1Fn.apply(diff, beta=beta)


def nll_from_log_probs(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `targets` under `log_probs` (last axis)."""
    classes = log_probs.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != log_probs.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match log-probs {log_probs.shape}")
    one_hot = np.eye(classes, dtype=DTYPE)[targets]
    picked = (log_probs * one_hot).sum(axis=-1)
    return -picked.mean()


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    return nll_from_log_probs(log_softmax(logits, axis=-1), targets)
