"""Task grammars, metrics, and the evaluation loop."""

import numpy as np
import pytest

from pabdm.decoding import StrategyConfig
from pabdm.oracle import make_scenario_samples
from pabdm.tasks import (
    TASKS,
    edit_distance,
    encode_corpus,
    evaluate,
    generate_corpus,
    get_task,
)

STRAT = StrategyConfig(block_size=8, max_len=48, threshold=0.95)


# --- metric ---


def test_edit_distance_frozen_values():
    assert edit_distance(list("kitten"), list("sitting")) == pytest.approx(3 / 7)
    assert edit_distance(list("abc"), []) == 1.0
    assert edit_distance([], list("abc")) == 1.0
    assert edit_distance(list("same"), list("same")) == 0.0
    assert edit_distance([], []) == 0.0


def test_edit_distance_works_on_multichar_symbols():
    assert edit_distance(["<t>", "<r>"], ["<t>", "</r>"]) == pytest.approx(0.5)


# --- brackets ---


def all_balanced(pairs):
    if pairs == 0:
        yield []
        return
    for inner in range(pairs):
        for left in all_balanced(inner):
            for rest in all_balanced(pairs - 1 - inner):
                yield ["("] + left + [")"] + rest


def test_brackets_validator_agrees_with_enumeration():
    task = get_task("brackets")
    seen = 0
    for pairs in range(1, 7):
        for seq in all_balanced(pairs):
            assert task.is_valid(seq)
            seen += 1
    assert seen == sum([1, 2, 5, 14, 42, 132])  # Catalan counts
    for bad in ([")", "("], ["(", "(", ")"], ["a", "b"], [], ["(", ")", ")"]):
        assert not task.is_valid(bad)


def test_brackets_samples_are_valid_renames():
    task = get_task("brackets")
    rng = np.random.default_rng(0)
    for _ in range(100):
        prompt, target = task.sample(rng)
        assert task.is_valid(target)
        assert 4 <= len(target) <= 28
        assert prompt == ["a" if s == "(" else "b" for s in target]


# --- expr ---


def all_infix(ops):
    if ops == 0:
        for d in ("1", "2", "3"):
            yield [d]
        return
    for left_ops in range(ops):
        for left in all_infix(left_ops):
            for right in all_infix(ops - 1 - left_ops):
                for op in ("+", "*"):
                    yield ["("] + left + [op] + right + [")"]


def test_expr_validator_agrees_with_enumeration():
    task = get_task("expr")
    count = 0
    for ops in range(3):
        for seq in all_infix(ops):
            assert task.is_valid(seq)
            count += 1
            assert not task.is_valid(seq[:-1])  # drop close paren
    assert count == 3 + 18 + 2 * 18 * 3 * 2
    assert not task.is_valid(["(", "1", "+", "2"])
    assert not task.is_valid(["1", "+", "2"])
    assert not task.is_valid([")"])


def test_expr_samples_pair_prefix_with_infix():
    task = get_task("expr")
    rng = np.random.default_rng(1)
    for _ in range(100):
        prompt, target = task.sample(rng)
        assert task.is_valid(target)
        ops = (len(target) - 1) // 4
        assert len(target) == 4 * ops + 1
        assert len(prompt) == 2 * ops + 1
        assert "(" not in prompt and ")" not in prompt


# --- table ---


def test_table_validator_cases():
    task = get_task("table")
    good = ["<t>", "<r>", "1", "2", "</r>", "<r>", "3", "4", "</r>", "</t>"]
    assert task.is_valid(good)
    assert task.is_valid(["<t>", "<r>", "7", "</r>", "</t>"])
    ragged = ["<t>", "<r>", "1", "2", "</r>", "<r>", "3", "</r>", "</t>"]
    assert not task.is_valid(ragged)
    assert not task.is_valid(good[:-1])  # unterminated
    assert not task.is_valid(["<t>", "</t>"])  # no rows
    assert not task.is_valid(["<t>", "<r>", "</r>", "</t>"])  # empty row
    assert not task.is_valid(["<r>", "1", "</r>"])


def test_table_samples_are_valid_and_row_major():
    task = get_task("table")
    rng = np.random.default_rng(2)
    for _ in range(100):
        prompt, target = task.sample(rng)
        assert task.is_valid(target)
        rows = prompt.count("r")
        cols = prompt.count("c")
        values = prompt[rows + cols :]
        assert len(values) == rows * cols
        flat = [s for s in target if s not in ("<t>", "</t>", "<r>", "</r>")]
        assert flat == values


# --- coding and corpora ---


def test_encode_decode_roundtrip_and_errors():
    for task in TASKS.values():
        assert 3 < task.vocab_size <= 64
        prompt, target = task.sample(np.random.default_rng(3))
        assert task.decode(task.encode(target)) == target
        assert task.decode(task.encode(prompt)) == prompt
    with pytest.raises(ValueError):
        get_task("brackets").encode(["("] + ["z"])
    assert get_task("brackets").decode([99]) == ["?"]
    with pytest.raises(ValueError):
        get_task("nope")


def test_corpus_generation_is_seeded():
    task = get_task("brackets")
    a = generate_corpus(task, 20, seed=5)
    b = generate_corpus(task, 20, seed=5)
    c = generate_corpus(task, 20, seed=6)
    assert a == b
    assert a != c
    assert all(isinstance(r["prompt"], str) and isinstance(r["target"], str) for r in a)
    pairs = encode_corpus(task, a)
    assert task.decode(pairs[0][1]) == a[0]["target"].split()


# --- evaluation ---


def oracle_corpus(kind, count=12, seed=9):
    task = get_task("brackets")
    corpus = generate_corpus(task, count, seed=seed)
    targets = [task.encode(r["target"].split()) for r in corpus]
    samples = make_scenario_samples(kind, targets, seed=seed)
    return task, corpus, [s.oracle for s in samples]


def test_perfect_oracles_score_perfectly():
    task, corpus, oracles = oracle_corpus("smooth")
    report, traces = evaluate(corpus, task, STRAT, oracles=oracles)
    assert report.similarity == 1.0
    assert report.validity_rate == 1.0
    assert report.exact_rate == 1.0
    assert report.acc_analog == 1.0
    assert len(traces) == report.count == len(corpus)
    assert report.mean_forward_calls >= 1.0


def test_single_flip_separates_similarity_from_validity():
    task, corpus, oracles = oracle_corpus("flip_one")
    report, _ = evaluate(corpus, task, STRAT, oracles=oracles)
    # one wrong bracket: surface nearly intact, balance always broken
    assert report.similarity > 0.8
    assert report.validity_rate == 0.0
    assert report.exact_rate == 0.0
    assert report.acc_analog < 1.0


def test_thread_pool_keeps_order_and_scores():
    task, corpus, oracles = oracle_corpus("decay")
    solo, solo_traces = evaluate(corpus, task, STRAT, oracles=oracles)
    task2, corpus2, oracles2 = oracle_corpus("decay")
    pooled, pooled_traces = evaluate(corpus2, task2, STRAT, oracles=oracles2, threads=3)
    assert pooled == solo
    for a, b in zip(solo_traces, pooled_traces):
        assert a.final_sequence == b.final_sequence


def test_evaluate_argument_validation():
    task, corpus, oracles = oracle_corpus("smooth", count=3)
    with pytest.raises(ValueError):
        evaluate(corpus, task, STRAT)
    with pytest.raises(ValueError):
        evaluate(corpus, task, STRAT, oracles=oracles[:2])


def test_report_row_shape():
    task, corpus, oracles = oracle_corpus("smooth", count=4)
    report, _ = evaluate(corpus, task, STRAT, oracles=oracles)
    row = report.as_row()
    assert set(row) == {
        "count",
        "similarity",
        "validity_rate",
        "exact_rate",
        "acc_analog",
        "forward_calls",
        "processed_positions",
        "tokens_per_forward",
    }
