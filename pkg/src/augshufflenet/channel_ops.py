"""Zero-cost channel permutations: split, shuffle (2 groups) and crossover.

These ops never touch pixel values; they only re-label channels. Their
multiply-add cost is therefore 0 and their gradient is the inverse
permutation applied to the upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError

MIN_RATIO = 0.0
MAX_RATIO = 0.5


def validate_ratio(r: float) -> float:
    if not MIN_RATIO < r <= MAX_RATIO:
        raise ConfigurationError(f"split ratio must lie in (0, 0.5], got {r}")
    return float(r)


def split_point(channels: int, r: float) -> int:
    """Number of branch channels r*C; raises unless it is an exact integer >= 1."""
    validate_ratio(r)
    branch = r * channels
    if abs(branch - round(branch)) > 1e-9 or round(branch) < 1:
        raise ConfigurationError(
            f"split ratio {r} does not divide {channels} channels into whole parts"
        )
    return int(round(branch))


@dataclass(frozen=True)
class ChannelPermutation:
    """Bijection on channel indices; output channel j reads input channel mapping[j]."""

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping)
        if sorted(m.tolist()) != list(range(m.shape[0])):
            raise DimensionError("mapping is not a permutation of channel indices")

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.mapping.shape[0]:
            raise DimensionError(
                f"permutation over {self.mapping.shape[0]} channels applied to {x.shape[1]}"
            )
        return x[:, self.mapping]

    def inverse(self) -> "ChannelPermutation":
        return ChannelPermutation(np.argsort(self.mapping))


def channel_split(x: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Partition channels into (bank, branch) = (first (1-r)C, last rC)."""
    branch_c = split_point(x.shape[1], r)
    bank = x[:, : x.shape[1] - branch_c].copy()
    branch = x[:, x.shape[1] - branch_c:].copy()
    return bank, branch


def shuffle_permutation(channels: int) -> ChannelPermutation:
    """Perfect interleave of two channel halves: out 2i <- i, out 2i+1 <- C/2+i."""
    if channels % 2:
        raise DimensionError(f"channel shuffle needs an even channel count, got {channels}")
    half = channels // 2
    mapping = np.empty(channels, dtype=np.int64)
    mapping[0::2] = np.arange(half)
    mapping[1::2] = np.arange(half, channels)
    return ChannelPermutation(mapping)


def channel_shuffle(x: np.ndarray) -> np.ndarray:
    return shuffle_permutation(x.shape[1]).apply(x)


def crossover_counts(branch_channels: int, bank_channels: int) -> tuple[int, int]:
    """(deposited, withdrawn) channel counts for a crossover.

    With x branch and b bank channels (M = x + b even, x <= M/2):
    d = floor(x/2) new maps are deposited into the bank and
    w = d + (M/2 - x) old maps are withdrawn, so both outputs end up with
    M/2 channels and w >= d, strictly for x < M/2.
    """
    m = branch_channels + bank_channels
    if m % 2:
        raise DimensionError(f"crossover needs an even total channel count, got {m}")
    if not 1 <= branch_channels <= m // 2:
        raise DimensionError(
            f"branch width {branch_channels} must lie in [1, {m // 2}] for {m} total channels"
        )
    d = branch_channels // 2
    w = d + (m // 2 - branch_channels)
    return d, w


def channel_crossover(branch: np.ndarray, bank: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exchange channels between branch and bank; both outputs get M/2 channels.

    The branch keeps its first x-d (newest-of-branch) maps and withdraws the
    bank's oldest w maps in front; the bank keeps its remaining maps and
    receives the branch's last d maps at the end. Pure re-labelling, no
    arithmetic on values.
    """
    if branch.shape[0] != bank.shape[0] or branch.shape[2:] != bank.shape[2:]:
        raise DimensionError(f"crossover requires matching N, H, W: {branch.shape} vs {bank.shape}")
    x, b = branch.shape[1], bank.shape[1]
    d, w = crossover_counts(x, b)
    branch2 = np.concatenate((bank[:, :w], branch[:, : x - d]), axis=1)
    bank2 = np.concatenate((bank[:, w:], branch[:, x - d:]), axis=1)
    return branch2, bank2
