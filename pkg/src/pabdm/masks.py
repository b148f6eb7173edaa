"""Attention visibility masks for block-structured training and decoding.

Masks come in two equivalent forms that are built independently and checked
against each other in tests: a scalar 1-based predicate ``visible(query, key)``
and a boolean matrix with rows as queries. The block-causal variant is, by
construction, identical to plain lower-triangular causal attention; keeping it
as its own constructor preserves the block reading (and its kind tag).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .layout import BlockLayout


class MaskKind(Enum):
    BLOCK_BIDIRECTIONAL = "block_bidirectional"
    BLOCK_CAUSAL = "block_causal"
    CONCAT_TRAIN = "concat_train"
    FULL_CAUSAL = "full_causal"


@dataclass(frozen=True, eq=False)
class MaskSpec:
    """One attention mask: size, provenance, predicate and matrix forms."""

    size: int
    kind: MaskKind
    rule: Callable[[int, int], bool] = field(repr=False)
    grid: np.ndarray = field(repr=False)  # bool, (size, size), rows = queries

    def visible(self, query: int, key: int) -> bool:
        """Closed-form predicate; ``query`` and ``key`` are 1-based."""
        if not (1 <= query <= self.size and 1 <= key <= self.size):
            raise ValueError(
                f"(query={query}, key={key}) outside [1, {self.size}]^2"
            )
        return bool(self.rule(query, key))

    def matrix(self) -> np.ndarray:
        return self.grid.copy()

    def text_grid(self) -> str:
        """Plain-text dump, one row of '1'/'0' per query; for golden tests."""
        return "\n".join(
            "".join("1" if v else "0" for v in row) for row in self.grid
        )


def _segment_of(boundaries: list[int], pos: int) -> int:
    # boundaries are cumulative segment ends; returns 0-based segment index
    return bisect.bisect_left(boundaries, pos)


def segmented_mask(segment_sizes, intra: str) -> MaskSpec:
    """Mask over consecutive segments: keys in earlier segments are always
    visible, later segments never, and ``intra`` fixes the within-segment
    direction ("bidirectional" or "causal")."""
    sizes = [int(s) for s in segment_sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError(f"segment sizes must be positive, got {sizes}")
    if intra not in ("bidirectional", "causal"):
        raise ValueError(f"unknown intra-segment direction: {intra!r}")
    size = sum(sizes)
    boundaries = list(np.cumsum(sizes))
    bidirectional = intra == "bidirectional"

    def rule(q: int, k: int) -> bool:
        sq, sk = _segment_of(boundaries, q), _segment_of(boundaries, k)
        if sk < sq:
            return True
        if sk > sq:
            return False
        return True if bidirectional else k <= q

    seg = np.repeat(np.arange(len(sizes)), sizes)
    if bidirectional:
        grid = seg[None, :] <= seg[:, None]
    else:
        pos = np.arange(1, size + 1)
        grid = (seg[None, :] < seg[:, None]) | (
            (seg[None, :] == seg[:, None]) & (pos[None, :] <= pos[:, None])
        )
    kind = MaskKind.BLOCK_BIDIRECTIONAL if bidirectional else MaskKind.BLOCK_CAUSAL
    return MaskSpec(size=size, kind=kind, rule=rule, grid=grid)


def block_bidirectional_mask(layout: BlockLayout) -> MaskSpec:
    """Standard block-diffusion visibility: a query sees every key whose block
    is at or before its own; within a block attention is bidirectional."""
    return segmented_mask([layout.block_size] * layout.num_blocks, "bidirectional")


def block_causal_mask(layout: BlockLayout) -> MaskSpec:
    """Within-block left-to-right variant: earlier blocks fully visible, own
    block visible up to and including the query. Equals full causal."""
    return segmented_mask([layout.block_size] * layout.num_blocks, "causal")


def full_causal_mask(size: int) -> MaskSpec:
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")

    def rule(q: int, k: int) -> bool:
        return k <= q

    pos = np.arange(1, size + 1)
    grid = pos[None, :] <= pos[:, None]
    return MaskSpec(size=size, kind=MaskKind.FULL_CAUSAL, rule=rule, grid=grid)


@dataclass(frozen=True)
class ConcatLayout:
    """Geometry of the two-branch training grid [prompt | noisy | clean].

    The noisy branch holds the corrupted response, the clean branch the
    original response; both span the same ``padded_len`` block layout and
    share position ids downstream.
    """

    response: BlockLayout
    prompt_len: int

    def __post_init__(self) -> None:
        if self.prompt_len < 0:
            raise ValueError(f"prompt_len must be >= 0, got {self.prompt_len}")

    @property
    def size(self) -> int:
        return self.prompt_len + 2 * self.response.padded_len

    @property
    def noisy_start(self) -> int:
        """1-based position of the first noisy-branch token."""
        return self.prompt_len + 1

    @property
    def clean_start(self) -> int:
        """1-based position of the first clean-branch token."""
        return self.prompt_len + self.response.padded_len + 1


def concat_train_mask(concat: ConcatLayout, variant: str = "causal") -> MaskSpec:
    """Visibility over the training grid, rows/cols ordered prompt, noisy, clean.

    Rules: prompt rows are causal within the prompt; every response row sees
    the whole prompt; a clean row sees clean keys up to itself; a noisy row
    sees clean keys from strictly earlier blocks and noisy keys of its own
    block (all of them under "bidirectional", those up to itself under
    "causal"); clean rows never see noisy keys.
    """
    if variant not in ("bidirectional", "causal"):
        raise ValueError(f"unknown variant: {variant!r}")
    p = concat.prompt_len
    lay = concat.response
    lpad = lay.padded_len
    bidirectional = variant == "bidirectional"

    def rule(q: int, k: int) -> bool:
        if q <= p:  # prompt row
            return k <= q
        if k <= p:  # response row, prompt key
            return True
        if q <= p + lpad:  # noisy row
            a = q - p
            if k <= p + lpad:  # noisy key
                b = k - p
                if lay.block_of(b) != lay.block_of(a):
                    return False
                return True if bidirectional else b <= a
            c = k - p - lpad  # clean key
            return lay.block_of(c) < lay.block_of(a)
        # clean row
        a = q - p - lpad
        if k <= p + lpad:  # noisy key
            return False
        return (k - p - lpad) <= a

    blocks = lay.block_ids()  # (lpad,), 1-based block index
    resp = np.arange(1, lpad + 1)
    grid = np.zeros((concat.size, concat.size), dtype=bool)
    if p:
        ppos = np.arange(1, p + 1)
        grid[:p, :p] = ppos[None, :] <= ppos[:, None]
        grid[p:, :p] = True
    nsl = slice(p, p + lpad)
    csl = slice(p + lpad, p + 2 * lpad)
    same_block = blocks[None, :] == blocks[:, None]
    if bidirectional:
        grid[nsl, nsl] = same_block
    else:
        grid[nsl, nsl] = same_block & (resp[None, :] <= resp[:, None])
    grid[nsl, csl] = blocks[None, :] < blocks[:, None]
    grid[csl, csl] = resp[None, :] <= resp[:, None]
    return MaskSpec(size=concat.size, kind=MaskKind.CONCAT_TRAIN, rule=rule, grid=grid)
