"""Dense NCHW tensor kernels: convolution, batch norm, activation, pooling, affine.

All operations take and return contiguous numpy arrays in (N, C, H, W)
layout (2-D (N, F) for the affine head). Storage precision follows the
input dtype; convolution, pooling and the affine op accumulate in float64
and cast back, so results are deterministic and directly comparable to a
naive loop-nest reference.

Grouped convolution is evaluated one group at a time through the dense
path. This makes ``groups == C`` bitwise identical to C independent
single-channel convolutions (same code, same summation order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output size of a convolution: floor((size + 2p - k)/s) + 1."""
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(
            f"kernel {kernel} with padding {padding} does not fit input size {size}"
        )
    return span // stride + 1


@dataclass
class ConvParams:
    """Weights and hyper-parameters of one (bias-free) convolution.

    weights: (C_out, C_in // groups, K, K). Every convolution is followed by
    a normalization layer, so no bias term exists anywhere in the model.
    """

    weights: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise DimensionError(f"conv weights must be (C_out, C_in/g, K, K), got {self.weights.shape}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise DimensionError("stride must be >= 1, padding >= 0, groups >= 1")
        if self.out_channels % self.groups:
            raise DimensionError(f"C_out {self.out_channels} not divisible by groups {self.groups}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels


@dataclass
class NormParams:
    """Per-channel batch-norm state: learnable scale/shift plus running stats."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise DimensionError(f"norm vector {name} must have shape ({c},)")
        if np.any(self.running_var < 0):
            raise DimensionError("running variance must be non-negative")
        if self.eps <= 0:
            raise DimensionError("eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @staticmethod
    def identity(channels: int, dtype=np.float32) -> "NormParams":
        return NormParams(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_image(x: np.ndarray) -> None:
    if x.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) input, got shape {x.shape}")


def _im2col_indices(channels: int, k: int, stride: int, h_out: int, w_out: int):
    """Index arrays mapping a padded image to (C*K*K, H_out*W_out) patch columns."""
    c_idx = np.repeat(np.arange(channels), k * k)
    i0 = np.tile(np.repeat(np.arange(k), k), channels)
    j0 = np.tile(np.arange(k), k * channels)
    i1 = stride * np.repeat(np.arange(h_out), w_out)
    j1 = stride * np.tile(np.arange(w_out), h_out)
    return c_idx[:, None], i0[:, None] + i1[None, :], j0[:, None] + j1[None, :]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv2d_dense(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    h_out = conv_output_size(h, k, stride, padding)
    w_out = conv_output_size(wd, k, stride, padding)
    if k == 1 and padding == 0:
        cols = x[:, :, ::stride, ::stride].reshape(n, c, h_out * w_out)
    else:
        xp = _pad(x, padding)
        ci, ii, jj = _im2col_indices(c, k, stride, h_out, w_out)
        cols = xp[:, ci, ii, jj]
    y = np.matmul(w.reshape(c_out, -1).astype(np.float64), cols.astype(np.float64))
    return y.reshape(n, c_out, h_out, w_out).astype(x.dtype)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation of x with p.weights (stride/padding/groups per p)."""
    _check_image(x)
    if x.shape[1] != p.in_channels:
        raise DimensionError(
            f"conv expects {p.in_channels} input channels, got {x.shape[1]}"
        )
    if p.groups == 1:
        return _conv2d_dense(x, p.weights, p.stride, p.padding)
    cg_in = p.in_channels // p.groups
    cg_out = p.out_channels // p.groups
    parts = [
        _conv2d_dense(
            x[:, g * cg_in:(g + 1) * cg_in],
            p.weights[g * cg_out:(g + 1) * cg_out],
            p.stride,
            p.padding,
        )
        for g in range(p.groups)
    ]
    return np.concatenate(parts, axis=1)


def _conv2d_dense_backward(x, w, stride, padding, gy, need_input_grad=True):
    n, c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    h_out, w_out = gy.shape[2], gy.shape[3]
    gy2 = gy.reshape(n, c_out, h_out * w_out).astype(np.float64)
    one_by_one = k == 1 and padding == 0
    if one_by_one:
        cols = x[:, :, ::stride, ::stride].reshape(n, c, h_out * w_out)
    else:
        xp = _pad(x, padding)
        ci, ii, jj = _im2col_indices(c, k, stride, h_out, w_out)
        cols = xp[:, ci, ii, jj]
    gw = np.einsum("nol,nkl->ok", gy2, cols.astype(np.float64)).reshape(w.shape)
    gx = None
    if need_input_grad:
        gcols = np.matmul(w.reshape(c_out, -1).astype(np.float64).T, gy2)
        if one_by_one and stride == 1:
            gx = gcols.reshape(x.shape)
        else:
            gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
            if one_by_one:
                gxp[:, :, ::stride, ::stride] = gcols.reshape(n, c, h_out, w_out)
            else:
                np.add.at(gxp, (np.arange(n)[:, None, None], ci, ii, jj), gcols)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            gx = gxp
        gx = gx.astype(x.dtype)
    return gx, gw.astype(w.dtype)


def conv2d_backward(x: np.ndarray, p: ConvParams, gy: np.ndarray, need_input_grad=True):
    """Gradients of conv2d w.r.t. input and weights given upstream gy."""
    if p.groups == 1:
        return _conv2d_dense_backward(x, p.weights, p.stride, p.padding, gy, need_input_grad)
    cg_in = p.in_channels // p.groups
    cg_out = p.out_channels // p.groups
    gx_parts, gw_parts = [], []
    for g in range(p.groups):
        gx_g, gw_g = _conv2d_dense_backward(
            x[:, g * cg_in:(g + 1) * cg_in],
            p.weights[g * cg_out:(g + 1) * cg_out],
            p.stride,
            p.padding,
            gy[:, g * cg_out:(g + 1) * cg_out],
            need_input_grad,
        )
        gx_parts.append(gx_g)
        gw_parts.append(gw_g)
    gx = np.concatenate(gx_parts, axis=1) if need_input_grad else None
    return gx, np.concatenate(gw_parts, axis=0)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def bn_batch_stats(x: np.ndarray):
    """Per-channel biased mean/variance over (N, H, W), in float64."""
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    return mean, var


def bn_apply(x: np.ndarray, gamma, beta, mean, var, eps: float) -> np.ndarray:
    inv_std = 1.0 / np.sqrt(var.astype(np.float64) + eps)
    xhat = (x.astype(np.float64) - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return y.astype(x.dtype)


def bn_update_running(n: NormParams, mean, var, count: int) -> None:
    """Fold batch stats into the running estimates (unbiased variance)."""
    m = n.momentum
    unbiased = var * (count / (count - 1)) if count > 1 else var
    n.running_mean = ((1 - m) * n.running_mean + m * mean).astype(n.running_mean.dtype)
    n.running_var = ((1 - m) * n.running_var + m * unbiased).astype(n.running_var.dtype)


def batch_norm(x: np.ndarray, n: NormParams, training: bool = False) -> np.ndarray:
    """Channel-wise normalization; training mode uses batch stats and
    updates the running estimates in place."""
    _check_image(x)
    if x.shape[1] != n.channels:
        raise DimensionError(f"batch norm expects {n.channels} channels, got {x.shape[1]}")
    if training:
        mean, var = bn_batch_stats(x)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        bn_update_running(n, mean, var, count)
    else:
        mean, var = n.running_mean, n.running_var
    return bn_apply(x, n.gamma, n.beta, mean, var, n.eps)


def batch_norm_backward(x, gamma, mean, var, eps, gy, training: bool):
    """Gradients (gx, ggamma, gbeta) for batch_norm.

    In training mode mean/var are the batch statistics and the full
    coupled formula applies; in inference mode the op is a per-channel
    affine map.
    """
    x64 = x.astype(np.float64)
    gy64 = gy.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var.astype(np.float64) + eps)).reshape(1, -1, 1, 1)
    xhat = (x64 - mean.reshape(1, -1, 1, 1)) * inv_std
    ggamma = (gy64 * xhat).sum(axis=(0, 2, 3))
    gbeta = gy64.sum(axis=(0, 2, 3))
    g = gamma.astype(np.float64).reshape(1, -1, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        gxhat = gy64 * g
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / count
        )
    else:
        gx = gy64 * g * inv_std
    return gx.astype(x.dtype), ggamma.astype(gamma.dtype), gbeta.astype(gamma.dtype)


# ---------------------------------------------------------------------------
# activation / pooling / affine / concat
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, gy, 0).astype(x.dtype)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, C, 1, 1) spatial mean."""
    _check_image(x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(x_shape, gy: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(gy / (h * w), x_shape).astype(gy.dtype)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, F) @ (F, O) + (O,)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    y = x.astype(np.float64) @ w.astype(np.float64) + b.astype(np.float64)
    return y.astype(x.dtype)


def linear_backward(x, w, gy):
    gy64 = gy.astype(np.float64)
    gx = (gy64 @ w.astype(np.float64).T).astype(x.dtype)
    gw = (x.astype(np.float64).T @ gy64).astype(w.dtype)
    gb = gy64.sum(axis=0).astype(w.dtype)
    return gx, gw, gb


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel-wise concatenation; a's channels come first."""
    _check_image(a)
    _check_image(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat requires matching N, H, W: {a.shape} vs {b.shape}")
    return np.concatenate((a, b), axis=1)
