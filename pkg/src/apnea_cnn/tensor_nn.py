"""Numeric kernels for the 1D-CNN: convolution, pooling, batch norm, dense,
activations, dropout, softmax cross-entropy and ADAM.

Every kernel works on batched arrays. Signal tensors are laid out as
``(batch, channels, length)``; dense activations as ``(batch, features)``.
A single unbatched ``(channels, length)`` sample is accepted wherever it is
unambiguous and returned without the batch axis.

All arithmetic is float64. Forward kernels are pure; batch-norm forward in
train mode and :func:`adam_step` mutate their state argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class InvariantError(RuntimeError):
    """Raised when internal bookkeeping (e.g. cached pool indices) is inconsistent."""


PADDING_MODES = ("valid", "same")


@dataclass
class ConvLayerState:
    kernels: np.ndarray  # (out_ch, in_ch, kernel_len)
    bias: np.ndarray | None = None  # (out_ch,)
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kernels.ndim != 3:
            raise ShapeError(f"kernels must be 3-D (out, in, k), got shape {self.kernels.shape}")
        if self.kernels.shape[2] < 1 or self.stride < 1:
            raise ShapeError("kernel_len and stride must be >= 1")
        if self.padding not in PADDING_MODES:
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.bias is not None and self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.kernels.shape[0]} filters")

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_len(self) -> int:
        return self.kernels.shape[2]


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    # Keras convention: running <- momentum * running + (1 - momentum) * batch
    momentum: float = 0.99

    @classmethod
    def fresh(cls, features: int, epsilon: float = 1e-5, momentum: float = 0.99) -> "BatchNormState":
        return cls(
            gamma=np.ones(features),
            beta=np.zeros(features),
            running_mean=np.zeros(features),
            running_var=np.ones(features),
            epsilon=epsilon,
            momentum=momentum,
        )

    def __post_init__(self):
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise ShapeError("gamma, beta and running statistics must share one length")
        if not (0.0 < self.momentum < 1.0) or self.epsilon <= 0.0:
            raise ValueError("momentum must lie in (0, 1) and epsilon must be positive")

    @property
    def features(self) -> int:
        return self.gamma.shape[0]


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class OpCount(NamedTuple):
    multiplications: int
    additions: int


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-D sample or {ndim}-D batch, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# 1D convolution
# ---------------------------------------------------------------------------


def conv_output_length(length: int, kernel_len: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(length / stride)
    if length < kernel_len:
        return 0
    return (length - kernel_len) // stride + 1


def _same_padding(length: int, kernel_len: int, stride: int) -> tuple[int, int]:
    out_len = math.ceil(length / stride)
    total = max((out_len - 1) * stride + kernel_len - length, 0)
    return total // 2, total - total // 2


def _pad_input(x: np.ndarray, layer: ConvLayerState) -> tuple[np.ndarray, int]:
    if layer.padding == "valid":
        return x, 0
    left, right = _same_padding(x.shape[2], layer.kernel_len, layer.stride)
    return np.pad(x, ((0, 0), (0, 0), (left, right))), left


def conv1d_forward(x: np.ndarray, layer: ConvLayerState) -> np.ndarray:
    """Cross-correlate ``x`` (N, C, L) with the layer's kernels.

    Products are accumulated tap by tap in (in_channel, tap) order, so each
    output element is the left-to-right sum a naive scalar loop would give,
    bias added last.
    """
    x, single = _as_batch(x, 3)
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {layer.in_channels}")
    if layer.padding == "valid" and x.shape[2] < layer.kernel_len:
        raise ShapeError(f"input length {x.shape[2]} shorter than kernel length {layer.kernel_len}")
    xp, _ = _pad_input(x, layer)
    n, c_in, _ = x.shape
    out_len = conv_output_length(x.shape[2], layer.kernel_len, layer.stride, layer.padding)
    span = (out_len - 1) * layer.stride + 1
    out = np.zeros((n, layer.out_channels, out_len))
    tmp = np.empty_like(out)
    w = layer.kernels
    for c in range(c_in):
        for k in range(layer.kernel_len):
            np.multiply(w[None, :, c, k, None], xp[:, None, c, k : k + span : layer.stride], out=tmp)
            out += tmp
    if layer.bias is not None:
        out += layer.bias[None, :, None]
    return out[0] if single else out


def conv1d_backward(
    grad: np.ndarray, x: np.ndarray, layer: ConvLayerState
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Return ``(input_grad, kernel_grad, bias_grad)`` for upstream ``grad``."""
    x, single = _as_batch(x, 3)
    grad = np.asarray(grad, dtype=np.float64)
    if single:
        grad = grad[None]
    out_len = conv_output_length(x.shape[2], layer.kernel_len, layer.stride, layer.padding)
    expected = (x.shape[0], layer.out_channels, out_len)
    if grad.shape != expected:
        raise ShapeError(f"upstream gradient shape {grad.shape}, expected {expected}")
    xp, left = _pad_input(x, layer)
    k_len, stride = layer.kernel_len, layer.stride
    # windows[n, c, t, k] = xp[n, c, t*stride + k]
    windows = sliding_window_view(xp, k_len, axis=2)[:, :, ::stride][:, :, :out_len]
    kernel_grad = np.tensordot(grad, windows, axes=([0, 2], [0, 2]))
    bias_grad = grad.sum(axis=(0, 2)) if layer.bias is not None else None

    cols = np.tensordot(grad, layer.kernels, axes=([1], [0]))  # (N, T, C, K)
    cols = cols.transpose(0, 2, 3, 1)  # (N, C, K, T)
    dxp = np.zeros_like(xp)
    span = (out_len - 1) * stride + 1
    for k in range(k_len):
        dxp[:, :, k : k + span : stride] += cols[:, :, k, :]
    dx = dxp[:, :, left : left + x.shape[2]]
    if single:
        dx = dx[0]
    return dx, kernel_grad, bias_grad


def conv1d_op_count(layer: ConvLayerState, in_len: int, binary_weights: bool = False) -> OpCount:
    """Multiplications and additions for one forward pass over a single sample.

    Only nonzero weights are counted, so the same function serves dense and
    pruned models. Each output element with ``n`` contributing products costs
    ``n`` adds when a bias is present (accumulate into the bias) and ``n - 1``
    otherwise. With ``binary_weights`` every product is a sign flip and is
    moved into the additions.
    """
    out_len = conv_output_length(in_len, layer.kernel_len, layer.stride, layer.padding)
    nnz = np.count_nonzero(layer.kernels.reshape(layer.out_channels, -1), axis=1)
    products = out_len * int(nnz.sum())
    if layer.bias is not None:
        adds = products
    else:
        adds = out_len * int(np.maximum(nnz - 1, 0).sum())
    if binary_weights:
        return OpCount(0, adds)
    return OpCount(products, adds)


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------


def maxpool1d_forward(x: np.ndarray, pool_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling; trailing samples that do not fill a window are dropped.

    Returns the pooled values and, per output cell, the absolute input offset
    of the maximum (lowest offset on ties).
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    x, single = _as_batch(x, 3)
    n, c, length = x.shape
    out_len = length // pool_size
    if out_len == 0:
        raise ShapeError(f"input length {length} is shorter than pool size {pool_size}")
    blocks = x[:, :, : out_len * pool_size].reshape(n, c, out_len, pool_size)
    local = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, local[..., None], axis=3)[..., 0]
    indices = local + np.arange(out_len) * pool_size
    if single:
        return out[0], indices[0]
    return out, indices


def maxpool1d_backward(grad: np.ndarray, indices: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != indices.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match index shape {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= input_shape[-1]):
        raise InvariantError("pooling index outside the cached input extent")
    dx = np.zeros(input_shape)
    np.put_along_axis(dx, indices, grad, axis=-1)
    return dx


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def _bn_axes(x: np.ndarray, features: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 2:
        if x.shape[1] != features:
            raise ShapeError(f"{x.shape[1]} features, state has {features}")
        return (0,), (1, -1)
    if x.ndim == 3:
        if x.shape[1] != features:
            raise ShapeError(f"{x.shape[1]} channels, state has {features}")
        return (0, 2), (1, -1, 1)
    raise ShapeError(f"batch norm expects a 2-D or 3-D batch, got shape {x.shape}")


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "infer"):
    """Normalize per feature (axis 1) and apply the affine ``gamma``/``beta``.

    Train mode uses the biased batch variance for normalization, updates the
    running statistics (unbiased variance) in place and returns
    ``(output, cache)``. Infer mode uses the running statistics and returns
    ``(output, None)``.
    """
    x = np.asarray(x, dtype=np.float64)
    axes, bshape = _bn_axes(x, state.features)
    gamma = state.gamma.reshape(bshape)
    beta = state.beta.reshape(bshape)
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        return gamma * xhat + beta, None
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[0] < 2:
        raise ShapeError("train-mode batch norm needs a batch of at least 2")
    m = x.size // state.features
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    mom = state.momentum
    state.running_mean = mom * state.running_mean + (1.0 - mom) * mean
    state.running_var = mom * state.running_var + (1.0 - mom) * var * (m / (m - 1))
    return gamma * xhat + beta, (xhat, inv_std, axes, bshape)


def batchnorm_backward(grad: np.ndarray, cache, state: BatchNormState):
    """Return ``(input_grad, gamma_grad, beta_grad)`` for a train-mode forward."""
    xhat, inv_std, axes, bshape = cache
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != xhat.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match cached {xhat.shape}")
    m = xhat.size // state.features
    gamma_grad = (grad * xhat).sum(axis=axes)
    beta_grad = grad.sum(axis=axes)
    dxhat = grad * state.gamma.reshape(bshape)
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, gamma_grad, beta_grad


# ---------------------------------------------------------------------------
# Dense, activations, dropout, loss
# ---------------------------------------------------------------------------


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    x, single = _as_batch(x, 2)
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} features, weights expect {weights.shape[0]}")
    out = x @ weights
    if bias is not None:
        out = out + bias
    return out[0] if single else out


def dense_backward(grad: np.ndarray, x: np.ndarray, weights: np.ndarray, has_bias: bool = True):
    """Return ``(input_grad, weight_grad, bias_grad)``."""
    x, single = _as_batch(x, 2)
    grad, _ = _as_batch(grad, 2)
    if grad.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"upstream gradient shape {grad.shape} does not match output ({x.shape[0]}, {weights.shape[1]})")
    dx = grad @ weights.T
    return (dx[0] if single else dx), x.T @ grad, (grad.sum(axis=0) if has_bias else None)


def dense_op_count(weights: np.ndarray, has_bias: bool, binary_weights: bool = False) -> OpCount:
    nnz = np.count_nonzero(weights, axis=0)  # per output unit
    products = int(nnz.sum())
    adds = products if has_bias else int(np.maximum(nnz - 1, 0).sum())
    return OpCount(0 if binary_weights else products, adds)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return grad * (x > 0.0)


def dropout(x: np.ndarray, p: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, scale_mask)``; the mask is None in infer mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if mode == "infer" or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(grad: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad if mask is None else grad * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over the batch.

    Returns ``(loss, probabilities, logit_grad)``. For a single logit vector
    the gradient is ``p - one_hot(target)``; for a batch it is divided by the
    batch size to match the mean loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None]
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"{targets.shape[0]} targets for {n} logit rows")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    probs = np.exp(log_p)
    loss = float(-log_p[np.arange(n), targets].mean())
    grad = probs.copy()
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    if single:
        return loss, probs[0], grad[0]
    return loss, probs, grad


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected ADAM update, applied in place to every entry of ``grads``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params
