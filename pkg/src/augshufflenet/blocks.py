"""Shuffle building blocks: augmented (variable ratio + crossover, no ReLU
after the first conv), the fixed-half baseline block, and the stride-2
downsample block.

The node pipelines are the single source of truth for block wiring; the
public ``*_forward`` functions wrap them for plain-array inference, and the
training loop runs them with a tape. The baseline block is the augmented
pipeline at r=0.5 with the crossover disabled and the first ReLU restored,
so the equivalence between the two is structural, not coincidental.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .channel_ops import split_point
from .errors import ConfigurationError, DimensionError
from .ops import ConvParams, NormParams


@dataclass
class BlockParams:
    """Learnable state of one stride-1 shuffle block (three convs + norms)."""

    conv1: ConvParams
    norm1: NormParams
    dwconv: ConvParams
    norm2: NormParams
    conv2: ConvParams
    norm3: NormParams


@dataclass
class DownsampleParams:
    """Learnable state of the two-branch stride-2 block."""

    left_dw: ConvParams
    left_norm1: NormParams
    left_conv: ConvParams
    left_norm2: NormParams
    right_conv1: ConvParams
    right_norm1: NormParams
    right_dw: ConvParams
    right_norm2: NormParams
    right_conv2: ConvParams
    right_norm3: NormParams

    @property
    def out_channels(self) -> int:
        return self.left_conv.out_channels + self.right_conv2.out_channels


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def conv_weight(rng: np.random.Generator, c_out: int, c_in_per_group: int, k: int,
                dtype=np.float32) -> np.ndarray:
    """Zero-mean normal weights with He variance 2/fan_in."""
    fan_in = c_in_per_group * k * k
    w = rng.standard_normal((c_out, c_in_per_group, k, k)) * np.sqrt(2.0 / fan_in)
    return w.astype(dtype)


def pointwise(rng, c_in: int, c_out: int, dtype=np.float32) -> ConvParams:
    return ConvParams(conv_weight(rng, c_out, c_in, 1, dtype))


def depthwise(rng, channels: int, stride: int = 1, dtype=np.float32) -> ConvParams:
    w = conv_weight(rng, channels, 1, 3, dtype)
    return ConvParams(w, stride=stride, padding=1, groups=channels)


def aug_block_params(m: int, r: float, rng, dtype=np.float32) -> BlockParams:
    """Parameters for an augmented block over m channels at split ratio r."""
    x = split_point(m, r)
    if m % 2:
        raise ConfigurationError(f"augmented block needs an even channel count, got {m}")
    half = m // 2
    return BlockParams(
        conv1=pointwise(rng, x, x, dtype),
        norm1=NormParams.identity(x, dtype),
        dwconv=depthwise(rng, x, dtype=dtype),
        norm2=NormParams.identity(x, dtype),
        conv2=pointwise(rng, half, half, dtype),
        norm3=NormParams.identity(half, dtype),
    )


def v2_block_params(m: int, rng, dtype=np.float32) -> BlockParams:
    return aug_block_params(m, 0.5, rng, dtype)


def downsample_params(c_in: int, c_out: int, rng, dtype=np.float32) -> DownsampleParams:
    if c_out % 2:
        raise ConfigurationError(f"downsample output channels must be even, got {c_out}")
    half = c_out // 2
    return DownsampleParams(
        left_dw=depthwise(rng, c_in, stride=2, dtype=dtype),
        left_norm1=NormParams.identity(c_in, dtype),
        left_conv=pointwise(rng, c_in, half, dtype),
        left_norm2=NormParams.identity(half, dtype),
        right_conv1=pointwise(rng, c_in, half, dtype),
        right_norm1=NormParams.identity(half, dtype),
        right_dw=depthwise(rng, half, stride=2, dtype=dtype),
        right_norm2=NormParams.identity(half, dtype),
        right_conv2=pointwise(rng, half, half, dtype),
        right_norm3=NormParams.identity(half, dtype),
    )


# ---------------------------------------------------------------------------
# forward pipelines
# ---------------------------------------------------------------------------

def _validate_block(p: BlockParams, m: int, r: float) -> None:
    x = split_point(m, r)
    if m % 2:
        raise ConfigurationError(f"block input channels must be even, got {m}")
    if p.conv1.in_channels != x or p.conv1.out_channels != x:
        raise ConfigurationError(
            f"first conv must map {x}->{x} channels, has "
            f"{p.conv1.in_channels}->{p.conv1.out_channels}"
        )
    if not (p.dwconv.is_depthwise and p.dwconv.in_channels == x and p.dwconv.stride == 1):
        raise ConfigurationError(f"depthwise conv must be stride-1 over {x} channels")
    half = m // 2
    if p.conv2.in_channels != half or p.conv2.out_channels != half:
        raise ConfigurationError(
            f"second pointwise conv must map {half}->{half} channels, has "
            f"{p.conv2.in_channels}->{p.conv2.out_channels}"
        )


def shuffle_block_nodes(t: Tape | None, x: Node, p: BlockParams, r: float,
                        training: bool, *, use_crossover: bool,
                        relu_after_first: bool) -> Node:
    """Shared split/transform/fuse pipeline for both stride-1 block variants."""
    _validate_block(p, x.value.shape[1], r)
    bank, branch = ad.channel_split(t, x, r)
    h = ad.conv2d(t, branch, p.conv1)
    h = ad.batch_norm(t, h, p.norm1, training)
    if relu_after_first:
        h = ad.relu(t, h)
    h = ad.conv2d(t, h, p.dwconv)
    h = ad.batch_norm(t, h, p.norm2, training)
    if use_crossover:
        h, bank = ad.channel_crossover(t, h, bank)
    h = ad.conv2d(t, h, p.conv2)
    h = ad.batch_norm(t, h, p.norm3, training)
    h = ad.relu(t, h)
    out = ad.concat_channels(t, bank, h)
    return ad.channel_shuffle(t, out)


def aug_block_nodes(t: Tape | None, x: Node, p: BlockParams, r: float,
                    training: bool) -> Node:
    return shuffle_block_nodes(t, x, p, r, training,
                               use_crossover=True, relu_after_first=False)


def v2_block_nodes(t: Tape | None, x: Node, p: BlockParams, training: bool) -> Node:
    return shuffle_block_nodes(t, x, p, 0.5, training,
                               use_crossover=False, relu_after_first=True)


def downsample_block_nodes(t: Tape | None, x: Node, p: DownsampleParams,
                           training: bool) -> Node:
    n, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"downsample needs even spatial dims, got {h}x{w}")
    if c != p.left_dw.in_channels:
        raise DimensionError(
            f"downsample expects {p.left_dw.in_channels} input channels, got {c}"
        )
    left = ad.conv2d(t, x, p.left_dw)
    left = ad.batch_norm(t, left, p.left_norm1, training)
    left = ad.conv2d(t, left, p.left_conv)
    left = ad.batch_norm(t, left, p.left_norm2, training)
    left = ad.relu(t, left)
    right = ad.conv2d(t, x, p.right_conv1)
    right = ad.batch_norm(t, right, p.right_norm1, training)
    right = ad.relu(t, right)
    right = ad.conv2d(t, right, p.right_dw)
    right = ad.batch_norm(t, right, p.right_norm2, training)
    right = ad.conv2d(t, right, p.right_conv2)
    right = ad.batch_norm(t, right, p.right_norm3, training)
    right = ad.relu(t, right)
    out = ad.concat_channels(t, left, right)
    return ad.channel_shuffle(t, out)


# ---------------------------------------------------------------------------
# plain-array entry points
# ---------------------------------------------------------------------------

def aug_block_forward(x: np.ndarray, p: BlockParams, r: float,
                      training: bool = False) -> np.ndarray:
    return aug_block_nodes(None, Node(x, constant=True), p, r, training).value


def v2_block_forward(x: np.ndarray, p: BlockParams, training: bool = False) -> np.ndarray:
    return v2_block_nodes(None, Node(x, constant=True), p, training).value


def downsample_block_forward(x: np.ndarray, p: DownsampleParams,
                             training: bool = False) -> np.ndarray:
    return downsample_block_nodes(None, Node(x, constant=True), p, training).value
