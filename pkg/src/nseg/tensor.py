"""Differentiable kernels over 4-D ``(n, c, h, w)`` numpy arrays.

Every op is a pure function. Forward functions return whatever the matching
backward needs as an explicit cache; nothing is stored on the inputs.
Arithmetic follows the dtype of the inputs, so float32 arrays train and
float64 arrays are used for finite-difference checks.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_EPS = 1e-7


def check_tensor(x, name: str = "tensor") -> np.ndarray:
    """Validate that ``x`` is a 4-D array with every dimension >= 1."""
    if not isinstance(x, np.ndarray):
        raise ContractError(f"{name} must be a numpy array, got {type(x).__name__}")
    if x.ndim != 4:
        raise ContractError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ContractError(f"{name} has an empty dimension: {x.shape}")
    return x


@dataclass(frozen=True)
class ConvParams:
    """Bias-free convolution weights of shape ``(c_out, c_in, k, k)``."""

    weights: np.ndarray

    def __post_init__(self):
        w = self.weights
        if not isinstance(w, np.ndarray) or w.ndim != 4:
            raise ConfigurationError("conv weights must be a 4-D array (c_out, c_in, k, k)")
        if w.shape[2] != w.shape[3]:
            raise ConfigurationError(f"conv kernel must be square, got {w.shape[2]}x{w.shape[3]}")
        if w.shape[2] % 2 == 0:
            raise ConfigurationError(f"conv kernel size must be odd, got {w.shape[2]}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @property
    def size(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class BatchNormParams:
    """Per-channel scale/shift plus running statistics.

    Only ``gamma`` and ``beta`` are learned; the running statistics are
    buffers and do not count toward the parameter budget.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != c:
                raise ConfigurationError(f"batchnorm {name} has length {len(getattr(self, name))}, expected {c}")
        if np.any(self.running_var < 0):
            raise ConfigurationError("batchnorm running_var must be non-negative")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError(f"batchnorm momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ConfigurationError("batchnorm eps must be positive")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return len(self.gamma)

    @property
    def size(self) -> int:
        """Learned parameter count (gamma and beta)."""
        return self.gamma.size + self.beta.size


# -- convolution ------------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Stride-1, zero same-padded cross-correlation.

    Accumulates one channel contraction per kernel offset, which is faster
    than an im2col matrix for the small channel counts used here.
    """
    check_tensor(x, "conv input")
    w = params.weights
    if x.shape[1] != params.c_in:
        raise ConfigurationError(f"conv expects {params.c_in} input channels, got {x.shape[1]}")
    n, _, h, wd = x.shape
    k = params.k
    xp = _pad(x, k // 2)
    out = np.zeros((params.c_out, n, h, wd), dtype=np.result_type(x, w))
    for a in range(k):
        for b in range(k):
            out += np.tensordot(w[:, :, a, b], xp[:, :, a:a + h, b:b + wd], axes=([1], [1]))
    return out.transpose(1, 0, 2, 3)


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights)`` for :func:`conv2d_forward`."""
    w = params.weights
    n, _, h, wd = x.shape
    expected = (n, params.c_out, h, wd)
    if grad_out.shape != expected:
        raise ContractError(f"conv grad_out shape {grad_out.shape} != forward output shape {expected}")
    k = params.k
    p = k // 2
    # input gradient is a same-padded correlation with the flipped, transposed kernel
    flipped = ConvParams(np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
    gx = conv2d_forward(grad_out, flipped)
    xpt = _pad(x, p).transpose(1, 0, 2, 3)
    g_flat = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(params.c_out, -1)
    gw = np.empty(w.shape, dtype=np.result_type(x, w, grad_out))
    for a in range(k):
        for b in range(k):
            window = xpt[:, :, a:a + h, b:b + wd].reshape(params.c_in, -1)
            gw[:, :, a, b] = g_flat @ window.T
    return gx, gw


# -- batch normalization ------------------------------------------------------

class BatchNormCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


class BatchNormResult(NamedTuple):
    output: np.ndarray
    cache: BatchNormCache
    params: BatchNormParams  # running statistics after this call


def batchnorm_apply(x: np.ndarray, params: BatchNormParams, mode: str = "train") -> BatchNormResult:
    """Per-channel batch normalization.

    In ``"train"`` mode statistics come from the batch (over n, h, w) and the
    returned ``params`` carries the momentum-updated running statistics. In
    ``"infer"`` mode the running statistics are used and returned unchanged.
    """
    check_tensor(x, "batchnorm input")
    if params.channels != x.shape[1]:
        raise ContractError(f"batchnorm has {params.channels} channels, input has {x.shape[1]}")
    if x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise ContractError("batchnorm over an empty batch")
    gamma = params.gamma.reshape(1, -1, 1, 1)
    beta = params.beta.reshape(1, -1, 1, 1)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = params.momentum
        new_params = replace(
            params,
            running_mean=((1 - m) * params.running_mean + m * mean).astype(params.running_mean.dtype),
            running_var=((1 - m) * params.running_var + m * var).astype(params.running_var.dtype),
        )
    elif mode == "infer":
        mean, var = params.running_mean, params.running_var
        new_params = params
    else:
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = gamma * xhat + beta
    return BatchNormResult(out.astype(x.dtype, copy=False),
                           BatchNormCache(xhat, inv_std, params.gamma, mode == "train"),
                           new_params)


def batchnorm_backward(cache: BatchNormCache, grad_out: np.ndarray):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, train = cache
    if grad_out.shape != xhat.shape:
        raise ContractError(f"batchnorm grad shape {grad_out.shape} != {xhat.shape}")
    g_beta = grad_out.sum(axis=(0, 2, 3))
    g_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std).reshape(1, -1, 1, 1)
    if not train:
        return grad_out * scale, g_gamma, g_beta
    count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    gx = scale * (grad_out
                  - g_beta.reshape(1, -1, 1, 1) / count
                  - xhat * (g_gamma.reshape(1, -1, 1, 1) / count))
    return gx, g_gamma, g_beta


# -- activations ----------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval (0, 1) even where the dtype saturates
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1 - info.epsneg, out=out)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward of sigmoid given its *output* ``y``."""
    return grad_out * y * (1 - y)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x: np.ndarray, y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu_backward(x, grad_out)
    if kind == "sigmoid":
        return sigmoid_backward(y, grad_out)
    raise ConfigurationError(f"unknown activation {kind!r}")


# -- resampling -------------------------------------------------------------------

def maxpool2x2(x: np.ndarray):
    """2x2 max pooling with stride 2.

    Returns ``(output, argmax)`` where ``argmax`` holds the row-major index
    (0..3) of the winner inside each window. Ties go to the first position.
    """
    check_tensor(x, "maxpool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2x2 needs even spatial size, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2x2_backward(argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = argmax.shape
    if grad_out.shape != argmax.shape:
        raise ContractError(f"maxpool grad shape {grad_out.shape} != {argmax.shape}")
    win = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    return win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    check_tensor(x, "upsample input")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ContractError(f"upsample grad must have even spatial size, got {h}x{w}")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# -- concatenation ----------------------------------------------------------------

def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ContractError("concat_channels needs at least one input")
    for t in inputs:
        check_tensor(t, "concat input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ContractError(f"cannot concatenate {t.shape} with {inputs[0].shape}: batch/spatial mismatch")
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=1)


def concat_backward(channels: Sequence[int], grad_out: np.ndarray) -> list[np.ndarray]:
    """Split ``grad_out`` back into per-input gradients, in argument order."""
    if sum(channels) != grad_out.shape[1]:
        raise ContractError(f"channel split {list(channels)} does not sum to {grad_out.shape[1]}")
    edges = np.cumsum(channels)[:-1]
    return np.split(grad_out, edges, axis=1)


# -- loss -------------------------------------------------------------------------------

def bce_loss(pred: np.ndarray, target: np.ndarray, eps: float = BCE_EPS):
    """Mean binary cross-entropy and its gradient with respect to ``pred``.

    ``pred`` is clamped to ``[eps, 1 - eps]`` first; the gradient is zero
    where the clamp is active.
    """
    if pred.shape != target.shape:
        raise ContractError(f"bce shapes differ: {pred.shape} vs {target.shape}")
    p = np.clip(pred, eps, 1 - eps)
    y = target.astype(p.dtype, copy=False)
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    grad = (p - y) / (p * (1 - p)) / pred.size
    grad = np.where((pred >= eps) & (pred <= 1 - eps), grad, 0).astype(p.dtype, copy=False)
    return float(loss), grad
