"""Training objectives over the two-branch grid.

Each example becomes one row of [prompt | noisy response | clean response].
The noisy branch is corrupted per block: either a masked suffix (pick a
start slot uniformly per block, mask everything from it to the block end)
or independent per-token masking at a block-level noise rate. Both branches
share position ids, so a slot trains at the same position it will occupy at
decode time.

Supervision chooses which masked slots contribute cross entropy:

* full: every masked suffix slot.
* gated: scan each block's candidates left to right under the gold token's
  own probability; supervise up to and including the first slot whose gold
  probability falls below the threshold, then stop. The scan is detached,
  so gating never feeds gradient.
* random: keep each candidate with fixed probability, a size-matched
  control for gating.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .layout import EOS_ID, MASK_ID, PAD_ID, BlockLayout, apply_block_noise, make_layout
from .masks import ConcatLayout, concat_train_mask
from .model import ModelConfig, TinyTransformer, attention_bias, forward_training, init_model

log = logging.getLogger(__name__)

OBJECTIVES = ("gated", "full", "random")
CORRUPTIONS = ("suffix", "block_noise")


def sample_suffix_starts(layout: BlockLayout, rng: np.random.Generator) -> np.ndarray:
    """One start slot per block, uniform over {1..block_size}."""
    return rng.integers(1, layout.block_size + 1, size=layout.num_blocks)


def gate_supervision(
    confidences: Sequence[float], suffix_start: int, threshold: float
) -> list[int]:
    """Block-local slots to supervise, given gold confidences for the slots
    ``suffix_start..block_size`` in order. Supervision runs through the
    first sub-threshold slot and stops there."""
    out = []
    for offset, q in enumerate(confidences):
        slot = suffix_start + offset
        out.append(slot)
        if q < threshold:
            break
    return out


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    grid: torch.Tensor  # (B, P + 2L) long
    position_ids: torch.Tensor  # (B, P + 2L) long
    bias: torch.Tensor  # (B, P + 2L, P + 2L) float
    targets: torch.Tensor  # (B, L) long, clean response then PAD
    valid: torch.Tensor  # (B, L) bool, real response slots
    masked: torch.Tensor  # (B, L) bool, corrupted slots
    suffix_mask: torch.Tensor  # (B, L) bool, slots at or past the block's start
    suffix_starts: np.ndarray  # (B, num_blocks)
    layout: BlockLayout
    prompt_len: int  # padded prompt width P

    @property
    def response_len(self) -> int:
        return self.layout.padded_len

    def noisy_logits(self, logits: torch.Tensor) -> torch.Tensor:
        p, l = self.prompt_len, self.response_len
        return logits[:, p : p + l, :]


def build_training_batch(
    examples: Sequence[tuple[Sequence[int], Sequence[int]]],
    block_size: int,
    rng: np.random.Generator,
    corruption: str = "suffix",
    variant: str = "causal",
) -> TrainingBatch:
    """Pack (prompt ids, response ids) pairs into one padded training grid.
    An EOS is appended to every response before padding."""
    if corruption not in CORRUPTIONS:
        raise ValueError(f"unknown corruption: {corruption!r}")
    if not examples:
        raise ValueError("examples must be non-empty")
    responses = [list(t) + [EOS_ID] for _, t in examples]
    prompts = [list(p) for p, _ in examples]
    layout = make_layout(max(len(r) for r in responses), block_size)
    big_l = layout.padded_len
    big_p = max(len(p) for p in prompts)
    batch = len(examples)

    grid = np.full((batch, big_p + 2 * big_l), PAD_ID, dtype=np.int64)
    position_ids = np.zeros((batch, big_p + 2 * big_l), dtype=np.int64)
    targets = np.full((batch, big_l), PAD_ID, dtype=np.int64)
    valid = np.zeros((batch, big_l), dtype=bool)
    masked = np.zeros((batch, big_l), dtype=bool)
    suffix_mask = np.zeros((batch, big_l), dtype=bool)
    starts = np.zeros((batch, layout.num_blocks), dtype=np.int64)

    base = concat_train_mask(ConcatLayout(layout, big_p), variant=variant).matrix()
    allowed = np.repeat(base[None, :, :], batch, axis=0)

    block_ids = layout.block_ids()  # (L,), 1-based
    slot_in_block = np.arange(1, big_l + 1) - (block_ids - 1) * block_size

    for e, (prompt, response) in enumerate(zip(prompts, responses)):
        k, n = len(prompt), len(response)
        grid[e, :k] = prompt
        clean = np.full(big_l, PAD_ID, dtype=np.int64)
        clean[:n] = response
        valid[e, :n] = True
        targets[e] = clean

        starts[e] = sample_suffix_starts(layout, rng)
        suffix_mask[e] = slot_in_block >= starts[e][block_ids - 1]
        if corruption == "suffix":
            masked[e] = suffix_mask[e] & valid[e]
        else:
            noisy_draw = apply_block_noise(
                BlockLayout(n, block_size, big_l, layout.num_blocks), response, rng
            )
            masked[e] = noisy_draw.masked
        noisy = np.where(masked[e], MASK_ID, clean)
        grid[e, big_p : big_p + big_l] = noisy
        grid[e, big_p + big_l :] = clean

        # shared timeline: both branches sit right after the real prompt
        position_ids[e, :big_p] = np.arange(big_p)
        position_ids[e, big_p : big_p + big_l] = k + np.arange(big_l)
        position_ids[e, big_p + big_l :] = k + np.arange(big_l)

        # prompt padding is invisible as keys; pad rows keep themselves so
        # their softmax stays finite (they are never supervised)
        if k < big_p:
            allowed[e, :, k:big_p] = False
            for j in range(k, big_p):
                allowed[e, j, j] = True

    return TrainingBatch(
        grid=torch.from_numpy(grid),
        position_ids=torch.from_numpy(position_ids),
        bias=attention_bias(allowed),
        targets=torch.from_numpy(targets),
        valid=torch.from_numpy(valid),
        masked=torch.from_numpy(masked),
        suffix_mask=torch.from_numpy(suffix_mask),
        suffix_starts=starts,
        layout=layout,
        prompt_len=big_p,
    )


@dataclass(frozen=True, eq=False)
class SupervisionPlan:
    candidate_mask: torch.Tensor  # (B, L) bool, slots eligible for loss
    supervised_mask: torch.Tensor  # (B, L) bool, slots actually supervised
    suffix_starts: np.ndarray

    @property
    def supervised_ratio(self) -> float:
        total = int(self.candidate_mask.sum())
        if total == 0:
            return 0.0
        return int(self.supervised_mask.sum()) / total


def supervised_ratio(plan: SupervisionPlan) -> float:
    return plan.supervised_ratio


def supervision_for(
    logits: torch.Tensor | None,
    batch: TrainingBatch,
    objective: str,
    threshold: float = 0.95,
    keep_ratio: float = 0.5,
    rng: np.random.Generator | None = None,
) -> SupervisionPlan:
    """Decide which candidate slots carry loss. Gold confidences come from
    the same logits the loss will use, detached; only gating reads them."""
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective: {objective!r}")
    candidate = batch.masked & batch.valid & batch.suffix_mask
    if objective == "full":
        return SupervisionPlan(candidate, candidate.clone(), batch.suffix_starts)
    if objective == "random":
        if rng is None:
            raise ValueError("random objective needs an rng")
        keep = torch.from_numpy(rng.random(candidate.shape) < keep_ratio)
        return SupervisionPlan(candidate, candidate & keep, batch.suffix_starts)

    if logits is None:
        raise ValueError("gated supervision needs logits")
    with torch.no_grad():
        resp = batch.noisy_logits(logits)
        probs = torch.softmax(resp, dim=-1)
        gold = probs.gather(-1, batch.targets.unsqueeze(-1)).squeeze(-1)
    supervised = torch.zeros_like(candidate)
    d = batch.layout.block_size
    for e in range(candidate.shape[0]):
        for b in range(batch.layout.num_blocks):
            lo = b * d
            slots = [i for i in range(lo, lo + d) if candidate[e, i]]
            for i in slots:
                supervised[e, i] = True
                if float(gold[e, i]) < threshold:
                    break
    return SupervisionPlan(candidate, supervised, batch.suffix_starts)


def loss_from_plan(
    logits: torch.Tensor, batch: TrainingBatch, plan: SupervisionPlan
) -> torch.Tensor | None:
    """Mean cross entropy over every supervised slot, or None when the plan
    is empty (degenerate draw: nothing to learn from this step)."""
    sel = plan.supervised_mask
    if int(sel.sum()) == 0:
        log.warning("empty supervision plan, skipping step")
        return None
    resp = batch.noisy_logits(logits)
    return F.cross_entropy(resp[sel], batch.targets[sel])


def _run(model: TinyTransformer, batch: TrainingBatch) -> torch.Tensor:
    return forward_training(model, batch.grid, batch.position_ids, batch.bias)


def gated_suffix_loss(
    model: TinyTransformer, batch: TrainingBatch, threshold: float = 0.95
):
    logits = _run(model, batch)
    plan = supervision_for(logits, batch, "gated", threshold=threshold)
    return loss_from_plan(logits, batch, plan), plan


def full_suffix_loss(model: TinyTransformer, batch: TrainingBatch):
    logits = _run(model, batch)
    plan = supervision_for(logits, batch, "full")
    return loss_from_plan(logits, batch, plan), plan


def random_drop_loss(
    model: TinyTransformer,
    batch: TrainingBatch,
    keep_ratio: float,
    rng: np.random.Generator,
):
    logits = _run(model, batch)
    plan = supervision_for(logits, batch, "random", keep_ratio=keep_ratio, rng=rng)
    return loss_from_plan(logits, batch, plan), plan


def train_model(
    examples: Sequence[tuple[Sequence[int], Sequence[int]]],
    objective: str,
    model_config: ModelConfig,
    block_size: int = 16,
    threshold: float = 0.95,
    keep_ratio: float = 0.5,
    steps: int = 600,
    batch_size: int = 16,
    lr: float = 3e-3,
    seed: int = 0,
    corruption: str = "suffix",
    variant: str = "causal",
) -> tuple[TinyTransformer, list[dict]]:
    """AdamW over one objective; returns the trained model and one history
    row per step."""
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective: {objective!r}")
    if not examples:
        raise ValueError("examples must be non-empty")
    worst = max(len(p) for p, _ in examples) + make_layout(
        max(len(t) for _, t in examples) + 1, block_size
    ).padded_len
    if worst > model_config.max_positions:
        raise ValueError(
            f"grid needs {worst} positions, model allows {model_config.max_positions}"
        )

    rng = np.random.default_rng(seed)
    model = init_model(model_config, seed=seed)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    history: list[dict] = []
    pool = list(examples)
    for step in range(1, steps + 1):
        picked = [pool[i] for i in rng.integers(0, len(pool), size=batch_size)]
        batch = build_training_batch(
            picked, block_size, rng, corruption=corruption, variant=variant
        )
        logits = _run(model, batch)
        plan = supervision_for(
            logits, batch, objective, threshold=threshold, keep_ratio=keep_ratio, rng=rng
        )
        loss = loss_from_plan(logits, batch, plan)
        if loss is None:
            continue
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(
            {
                "step": step,
                "objective": objective,
                "tau": threshold,
                "loss": float(loss.detach()),
                "supervised_ratio": plan.supervised_ratio,
            }
        )
    model.eval()
    return model, history
