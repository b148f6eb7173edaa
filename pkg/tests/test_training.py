"""Suffix supervision: gating rule, batch geometry, gradient reach."""

import dataclasses
import logging

import numpy as np
import pytest
import torch

from pabdm.layout import EOS_ID, MASK_ID, PAD_ID, make_layout
from pabdm.model import ModelConfig, forward_training, init_model
from pabdm.training import (
    build_training_batch,
    full_suffix_loss,
    gate_supervision,
    gated_suffix_loss,
    loss_from_plan,
    random_drop_loss,
    sample_suffix_starts,
    supervision_for,
    train_model,
)

CFG = ModelConfig(vocab_size=16, embed_dim=32, num_layers=2, num_heads=4, max_positions=128)


def toy_examples():
    return [
        ([3, 4, 5], [6, 7, 8, 9, 10]),
        ([4, 5], [7, 8, 9]),
        ([3, 6, 4, 7], [10, 9, 8, 7, 6, 5]),
        ([5], [11, 12]),
    ]


def toy_batch(seed=0, block_size=4, corruption="suffix", variant="causal"):
    rng = np.random.default_rng(seed)
    return build_training_batch(
        toy_examples(), block_size, rng, corruption=corruption, variant=variant
    )


# --- gate rule ---


def test_gate_supervises_through_first_low_slot():
    assert gate_supervision([0.98, 0.96, 0.80, 0.99], suffix_start=1, threshold=0.95) == [1, 2, 3]


def test_gate_takes_whole_suffix_when_confident():
    assert gate_supervision([0.99, 0.97], suffix_start=3, threshold=0.95) == [3, 4]


def test_gate_forced_first_slot():
    assert gate_supervision([0.10, 0.99], suffix_start=2, threshold=0.95) == [2]


# --- batch geometry ---


def test_batch_grid_layout():
    batch = toy_batch()
    layout = batch.layout
    assert layout.visible_len == 7  # longest response + EOS
    assert layout.padded_len == 8
    p, l = batch.prompt_len, layout.padded_len
    assert p == 4
    assert batch.grid.shape == (4, p + 2 * l)
    # clean branch carries the response then EOS then PAD
    clean = batch.grid[1, p + l :]
    assert clean.tolist() == [7, 8, 9, EOS_ID] + [PAD_ID] * 4
    # noisy branch masks exactly the flagged slots
    noisy = batch.grid[1, p : p + l]
    for i in range(l):
        if batch.masked[1, i]:
            assert noisy[i] == MASK_ID
        else:
            assert noisy[i] == clean[i]
    # prompt padding stays PAD and is masked out as a key for real rows
    assert batch.grid[1, 2:p].tolist() == [PAD_ID, PAD_ID]
    bias = batch.bias[1]
    assert torch.isinf(bias[p, 2]) and bias[p, 2] < 0
    assert bias[p, 1] == 0


def test_batch_position_ids_shared_between_branches():
    batch = toy_batch()
    p, l = batch.prompt_len, batch.layout.padded_len
    for e, (prompt, _) in enumerate(toy_examples()):
        k = len(prompt)
        noisy_ids = batch.position_ids[e, p : p + l]
        clean_ids = batch.position_ids[e, p + l :]
        assert torch.equal(noisy_ids, clean_ids)
        assert noisy_ids.tolist() == [k + i for i in range(l)]


def test_suffix_mask_matches_sampled_starts():
    batch = toy_batch(seed=3)
    d = batch.layout.block_size
    for e in range(4):
        for b in range(batch.layout.num_blocks):
            u = batch.suffix_starts[e, b]
            for slot in range(1, d + 1):
                i = b * d + slot - 1
                assert bool(batch.suffix_mask[e, i]) == (slot >= u)


def test_suffix_corruption_never_masks_pads():
    batch = toy_batch(seed=5)
    assert not (batch.masked & ~batch.valid).any()


def test_block_noise_corruption_masks_within_valid():
    batch = toy_batch(seed=7, corruption="block_noise")
    assert not (batch.masked & ~batch.valid).any()
    assert batch.masked.any()  # vanishingly unlikely to draw all-zero noise


def test_batch_rejects_unknown_corruption():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        build_training_batch(toy_examples(), 4, rng, corruption="swap")


def test_bidirectional_variant_builds():
    batch = toy_batch(variant="bidirectional")
    model = init_model(CFG, seed=0)
    logits = forward_training(model, batch.grid, batch.position_ids, batch.bias)
    assert torch.isfinite(logits).all()


# --- supervision plans ---


def test_gated_plan_agrees_with_scalar_gate():
    model = init_model(CFG, seed=1)
    batch = toy_batch(seed=11)
    logits = forward_training(model, batch.grid, batch.position_ids, batch.bias)
    threshold = 0.05  # random-init probs hover near 1/16, so both sides occur
    plan = supervision_for(logits, batch, "gated", threshold=threshold)
    resp = batch.noisy_logits(logits).detach()
    gold = torch.softmax(resp, -1).gather(-1, batch.targets.unsqueeze(-1)).squeeze(-1)
    d = batch.layout.block_size
    candidate = batch.masked & batch.valid & batch.suffix_mask
    for e in range(4):
        for b in range(batch.layout.num_blocks):
            lo = b * d
            slots = [i for i in range(lo, lo + d) if candidate[e, i]]
            confs = [float(gold[e, i]) for i in slots]
            if not slots:
                continue
            # local replay of the scan, phrased through gate_supervision
            picked = gate_supervision(confs, suffix_start=1, threshold=threshold)
            want = {slots[p - 1] for p in picked}
            got = {i for i in slots if plan.supervised_mask[e, i]}
            assert got == want


def test_zero_threshold_gated_equals_full():
    model = init_model(CFG, seed=2)
    batch = toy_batch(seed=13)
    logits = forward_training(model, batch.grid, batch.position_ids, batch.bias)
    gated = supervision_for(logits, batch, "gated", threshold=0.0)
    full = supervision_for(logits, batch, "full")
    assert torch.equal(gated.supervised_mask, full.supervised_mask)
    assert full.supervised_ratio == 1.0


def test_tighter_threshold_supervises_subset():
    model = init_model(CFG, seed=3)
    batch = toy_batch(seed=17)
    logits = forward_training(model, batch.grid, batch.position_ids, batch.bias)
    loose = supervision_for(logits, batch, "gated", threshold=0.01)
    tight = supervision_for(logits, batch, "gated", threshold=0.5)
    assert not (tight.supervised_mask & ~loose.supervised_mask).any()


def test_gradient_stops_exactly_at_the_gate():
    model = init_model(CFG, seed=4)
    batch = toy_batch(seed=19)
    logits = forward_training(model, batch.grid, batch.position_ids, batch.bias)
    plan = supervision_for(logits, batch, "gated", threshold=0.5)
    loss = loss_from_plan(logits, batch, plan)
    grad = torch.autograd.grad(loss, logits)[0]
    p, l = batch.prompt_len, batch.layout.padded_len
    noisy_grad = grad[:, p : p + l, :]
    off = ~plan.supervised_mask
    assert torch.all(noisy_grad[off] == 0)
    assert torch.any(noisy_grad[plan.supervised_mask] != 0)
    # prompt and clean rows never carry loss
    assert torch.all(grad[:, :p, :] == 0)
    assert torch.all(grad[:, p + l :, :] == 0)


def test_empty_plan_skips_with_warning(caplog):
    model = init_model(CFG, seed=5)
    batch = toy_batch(seed=23)
    batch = dataclasses.replace(batch, masked=torch.zeros_like(batch.masked))
    logits = forward_training(model, batch.grid, batch.position_ids, batch.bias)
    plan = supervision_for(logits, batch, "full")
    with caplog.at_level(logging.WARNING, logger="pabdm.training"):
        loss = loss_from_plan(logits, batch, plan)
    assert loss is None
    assert any("empty supervision" in r.message for r in caplog.records)
    assert plan.supervised_ratio == 0.0


# --- sampling statistics ---


def test_suffix_starts_uniform_over_block():
    layout = make_layout(64, 8)
    rng = np.random.default_rng(0)
    draws = np.concatenate([sample_suffix_starts(layout, rng) for _ in range(1250)])
    assert draws.size == 10_000
    freq = np.bincount(draws, minlength=9)[1:9] / draws.size
    assert np.all(np.abs(freq - 0.125) < 0.015)


def test_random_drop_hits_keep_ratio():
    rng = np.random.default_rng(42)
    long_examples = [
        ([3, 4, 5], [3 + (i % 12) for i in range(40 + j)]) for j in range(8)
    ]
    kept = total = 0
    for _ in range(40):
        batch = build_training_batch(long_examples, 8, rng)
        plan = supervision_for(None, batch, "random", keep_ratio=0.5, rng=rng)
        kept += int(plan.supervised_mask.sum())
        total += int(plan.candidate_mask.sum())
    assert total > 6000
    assert abs(kept / total - 0.5) < 0.02


# --- objective wrappers and the loop ---


def test_objective_wrappers_return_loss_and_plan():
    model = init_model(CFG, seed=7)
    batch = toy_batch(seed=29)
    rng = np.random.default_rng(1)
    for loss, plan in (
        gated_suffix_loss(model, batch, threshold=0.9),
        full_suffix_loss(model, batch),
        random_drop_loss(model, batch, keep_ratio=0.9, rng=rng),
    ):
        assert loss is not None and torch.isfinite(loss)
        assert 0.0 <= plan.supervised_ratio <= 1.0


def test_train_model_runs_and_reports():
    model, history = train_model(
        toy_examples(),
        "gated",
        CFG,
        block_size=4,
        threshold=0.9,
        steps=5,
        batch_size=4,
        seed=0,
    )
    assert len(history) == 5
    row = history[0]
    assert set(row) == {"step", "objective", "tau", "loss", "supervised_ratio"}
    assert row["objective"] == "gated"
    assert np.isfinite(row["loss"])
    assert not model.training


def test_train_model_rejects_oversized_grid():
    tiny = ModelConfig(vocab_size=16, embed_dim=32, num_layers=1, num_heads=4, max_positions=8)
    with pytest.raises(ValueError):
        train_model(toy_examples(), "full", tiny, block_size=4, steps=1)
