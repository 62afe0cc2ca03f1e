"""Differentiable primitives for the expansion/contraction network.

All spatial ops take NCHW tensors. Each function checks its preconditions,
computes the forward result with numpy and registers an exact backward rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, check_finite, make_result

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


class DegenerateStatisticsError(ValueError):
    """Batch statistics are undefined (a single value per channel)."""


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an (n, c, h, w) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Bias-free square convolution with same padding."""

    weight: Tensor
    stride: int = 1

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 4 or w[2] != w[3]:
            raise ShapeError(f"conv weight must be (out, in, k, k), got {w}")
        if w[2] not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {w[2]}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON
    training: bool = True
    num_batches_tracked: int = 0

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Optional[Tensor] = field(default=None)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp is channel-major (c, n, H, W); result is (c*k*k, n*ho*wo)
    c, n = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    _require_4d(x, "conv2d")
    n, c, h, w = x.shape
    k, s, pad = p.kernel_size, p.stride, p.padding
    if c != p.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {p.in_channels}")
    check_finite(x.data, "conv2d input")
    ho, wo = -(-h // s), -(-w // s)
    o = p.out_channels
    W = p.weight.data.reshape(o, -1)

    # one large GEMM over a channel-major layout beats n small ones
    xt = x.data.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if k == 1 and s == 1:
        cols = np.ascontiguousarray(xt).reshape(c, n * h * w)
    else:
        cols = _im2col(xt, k, s, ho, wo)
    out = np.ascontiguousarray((W @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def _backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        dW = (gt @ cols.T).reshape(p.weight.shape) if p.weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = W.T @ gt
            if k == 1 and s == 1:
                dxt = dcols.reshape(c, n, h, w)
            else:
                dcols = dcols.reshape(c, k, k, n, ho, wo)
                dxt = np.zeros(xt.shape, dtype=dcols.dtype)
                for i in range(k):
                    for j in range(k):
                        dxt[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j]
                if pad:
                    dxt = dxt[:, :, pad : pad + h, pad : pad + w]
            dx = np.ascontiguousarray(dxt.transpose(1, 0, 2, 3))
        return dx, dW

    return make_result(out, "conv2d", (x, p.weight), _backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm2d(x: Tensor, p: BatchNormParams) -> Tensor:
    _require_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"batchnorm2d: input has {c} channels, parameters have {p.channels}")
    check_finite(x.data, "batchnorm2d input")
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)

    if p.training:
        m = n * h * w
        if m < 2:
            raise DegenerateStatisticsError("batchnorm2d in training mode needs at least two values per channel")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        p.running_mean[:] = (1 - p.momentum) * p.running_mean + p.momentum * mean.reshape(c)
        p.running_var[:] = (1 - p.momentum) * p.running_var + p.momentum * var.reshape(c)
        p.num_batches_tracked += 1
    else:
        m = None
        mean = p.running_mean.reshape(1, c, 1, 1)
        var = p.running_var.reshape(1, c, 1, 1)

    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x.data - mean) * inv_std
    out = gamma * xhat + beta

    def _backward(g):
        dgamma = (g * xhat).sum(axis=axes) if p.gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if p.beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma
            if m is None:
                dx = dxhat * inv_std
            else:
                dx = (inv_std / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
        return dx, dgamma, dbeta

    return make_result(out.astype(x.dtype, copy=False), "batchnorm2d", (x, p.gamma, p.beta), _backward)


# ---------------------------------------------------------------------------
# element-wise and dense
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    return make_result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    return make_result(
        np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),)
    )


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)
    return make_result(out, "global_avg_pool", (x,), lambda g: (np.broadcast_to(g * scale, x.shape).copy(),))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(x.data.reshape(shape[0], -1), "flatten", (x,), lambda g: (g.reshape(shape),))


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"linear expects an (n, features) tensor, got {x.shape}")
    if x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear: {x.shape[1]} input features, weight fan-in {p.weight.shape[1]}")
    W = p.weight.data
    out = x.data @ W.T
    inputs: tuple = (x, p.weight)
    if p.bias is not None:
        out = out + p.bias.data
        inputs = (x, p.weight, p.bias)

    def _backward(g):
        grads = [g @ W if x.requires_grad else None, g.T @ x.data]
        if p.bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make_result(out, "linear", inputs, _backward)


# ---------------------------------------------------------------------------
# resampling and channel plumbing
# ---------------------------------------------------------------------------


def maxpool2x2(x: Tensor) -> Tensor:
    _require_4d(x, "maxpool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum in row-major window order
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        dx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return make_result(out, "maxpool2x2", (x,), _backward)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the weights that output sample i places on the inputs.

    Half-pixel centres: output i samples input coordinate
    (i + 0.5) * n_in / n_out - 0.5, clamped to [0, n_in - 1].
    """
    A = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        u = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(u))
        i1 = min(i0 + 1, n_in - 1)
        f = u - i0
        A[i, i0] += 1.0 - f
        A[i, i1] += f
    return A


def upsample_bilinear2(x: Tensor) -> Tensor:
    _require_4d(x, "upsample_bilinear2")
    n, c, h, w = x.shape
    check_finite(x.data, "upsample_bilinear2 input")
    Ah = bilinear_matrix(h, 2 * h, dtype=x.dtype)
    Aw = bilinear_matrix(w, 2 * w, dtype=x.dtype)
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)
    return make_result(out, "upsample_bilinear2", (x,), lambda g: (np.matmul(np.matmul(Ah.T, g), Aw),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, "concat_channels", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def channel_halve_sum(x: Tensor) -> Tensor:
    """Sum adjacent channel pairs: out[:, j] = x[:, 2j] + x[:, 2j + 1]."""
    _require_4d(x, "channel_halve_sum")
    n, c, h, w = x.shape
    if c % 2:
        raise ShapeError(f"channel_halve_sum needs an even channel count, got {c}")
    out = x.data.reshape(n, c // 2, 2, h, w).sum(axis=2)
    return make_result(out, "channel_halve_sum", (x,), lambda g: (np.repeat(g, 2, axis=1),))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def weighted_cross_entropy(logits: Tensor, labels: Sequence[int], weights: Sequence[float]) -> Tensor:
    """Class-weighted cross-entropy, reduced as a weighted mean over the batch."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (n, classes), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logits")
    if weights.shape[0] != k:
        raise ShapeError(f"{weights.shape[0]} class weights for {k} classes")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    if np.any(weights <= 0):
        raise ValueError("class weights must be positive")
    check_finite(logits.data, "weighted_cross_entropy logits")

    logp = log_softmax(logits.data.astype(np.float64))
    w = weights[labels]
    total = w.sum()
    loss = -(w * logp[np.arange(n), labels]).sum() / total

    def _backward(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return ((g * (w / total)[:, None] * probs).astype(logits.dtype),)

    return make_result(np.asarray(loss, dtype=logits.dtype), "weighted_cross_entropy", (logits,), _backward)
