"""Block geometry and blockwise noising for block-aligned token sequences.

A sequence of ``visible_len`` tokens is padded up to the next multiple of the
block size; everything downstream (attention masks, suffix supervision, the
decoder's candidate ranges) is phrased in terms of this geometry. Positions
are 1-based throughout this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Structural token ids, fixed across the whole engine. Task alphabets start
# right after the specials.
MASK_ID = 0
PAD_ID = 1
EOS_ID = 2
NUM_SPECIALS = 3


@dataclass(frozen=True)
class BlockLayout:
    """Geometry of one block-aligned sequence.

    visible_len: number of real tokens (pre-padding), >= 1
    block_size:  tokens per block, >= 1
    padded_len:  visible_len rounded up to a multiple of block_size
    num_blocks:  padded_len // block_size
    """

    visible_len: int
    block_size: int
    padded_len: int
    num_blocks: int

    def block_of(self, pos: int) -> int:
        """1-based block index of 1-based position ``pos``."""
        if not 1 <= pos <= self.padded_len:
            raise ValueError(f"position {pos} outside [1, {self.padded_len}]")
        return (pos - 1) // self.block_size + 1

    def is_pad(self, pos: int) -> bool:
        if not 1 <= pos <= self.padded_len:
            raise ValueError(f"position {pos} outside [1, {self.padded_len}]")
        return pos > self.visible_len

    def pad_positions(self) -> range:
        """1-based positions holding padding, possibly empty."""
        return range(self.visible_len + 1, self.padded_len + 1)

    def block_positions(self, block: int) -> range:
        """1-based positions of 1-based ``block``."""
        if not 1 <= block <= self.num_blocks:
            raise ValueError(f"block {block} outside [1, {self.num_blocks}]")
        start = (block - 1) * self.block_size + 1
        return range(start, start + self.block_size)

    def block_ids(self) -> np.ndarray:
        """Block index per position, shape (padded_len,), values 1..num_blocks."""
        return np.repeat(np.arange(1, self.num_blocks + 1), self.block_size)


def make_layout(visible_len: int, block_size: int) -> BlockLayout:
    if visible_len < 1:
        raise ValueError(f"visible_len must be >= 1, got {visible_len}")
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    num_blocks = -(-visible_len // block_size)
    return BlockLayout(
        visible_len=visible_len,
        block_size=block_size,
        padded_len=num_blocks * block_size,
        num_blocks=num_blocks,
    )


@dataclass(frozen=True)
class NoisySequence:
    """A block-aligned sequence after blockwise masking.

    tokens:       padded token ids with masked positions replaced by MASK_ID
    masked:       boolean indicator per padded position
    noise_levels: per-block masking probability actually used, shape (num_blocks,)
    """

    tokens: np.ndarray
    masked: np.ndarray
    noise_levels: np.ndarray


def apply_block_noise(
    layout: BlockLayout,
    tokens,
    rng: np.random.Generator,
    noise_levels=None,
) -> NoisySequence:
    """Mask each real token independently with its block's noise level.

    ``tokens`` holds the ``visible_len`` real ids; padding is appended here.
    Noise levels default to one uniform draw per block. Pad positions are
    never masked (they carry no supervision and stay PAD_ID as keys).
    """
    clean = np.asarray(tokens, dtype=np.int64)
    if clean.shape != (layout.visible_len,):
        raise ValueError(
            f"expected {layout.visible_len} tokens, got shape {clean.shape}"
        )
    if noise_levels is None:
        levels = rng.uniform(0.0, 1.0, size=layout.num_blocks)
    else:
        levels = np.asarray(noise_levels, dtype=np.float64)
        if levels.shape != (layout.num_blocks,):
            raise ValueError(
                f"expected {layout.num_blocks} noise levels, got shape {levels.shape}"
            )
        if np.any((levels < 0.0) | (levels > 1.0)):
            raise ValueError("noise levels must lie in [0, 1]")

    padded = np.full(layout.padded_len, PAD_ID, dtype=np.int64)
    padded[: layout.visible_len] = clean
    per_pos_level = np.repeat(levels, layout.block_size)
    masked = rng.uniform(size=layout.padded_len) < per_pos_level
    masked[layout.visible_len :] = False
    noisy = np.where(masked, MASK_ID, padded)
    return NoisySequence(tokens=noisy, masked=masked, noise_levels=levels)
