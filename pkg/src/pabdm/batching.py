"""Batched adaptive decoding over samples with uneven prefix lengths.

Samples in a batch share one candidate alignment target per round: the
shortest total prefix (prompt plus committed) plus the block size. Each
sample scores only the slots between its own frontier and the target, so
per-sample candidate widths differ but all rows end at the same position.
A sample already at the target contributes a materialization-only pass
(or nothing, when it has no pending commit).

Because candidate slots are causal and masked slots contribute exact zeros
to attention, a narrower range scores each slot identically to the full
range, so batched decodes commit the same token stream as solo decodes.

The width gap is bounded by the block size, which also bounds the initial
prompt-length spread a bucket may hold; after one aligned round the spread
only shrinks, so bucketing by prompt length is enough.
"""

from __future__ import annotations

from typing import Sequence

from .decoding import (
    DecodeTrace,
    RoundRecord,
    StrategyConfig,
    StrategyKind,
    _make_session,
    _truncate_at_eos,
    select_commit,
)


def align_batch(prefix_lens: Sequence[int], block_size: int) -> tuple[int, list[int]]:
    """Shared target = shortest prefix + block size; per-sample width is the
    gap up to that target. Spread wider than one block cannot align."""
    lens = [int(p) for p in prefix_lens]
    if not lens:
        raise ValueError("prefix_lens must be non-empty")
    if any(p < 0 for p in lens):
        raise ValueError("prefix lengths must be >= 0")
    target = min(lens) + block_size
    widths = [target - p for p in lens]
    if any(w < 0 for w in widths):
        raise ValueError(
            f"prefix spread {max(lens) - min(lens)} exceeds block size {block_size}"
        )
    return target, widths


def bucket_prompts(
    prompt_lens: Sequence[int], block_size: int, max_batch: int = 8
) -> list[list[int]]:
    """Greedy grouping of sample indices so every bucket stays alignable."""
    if max_batch < 1:
        raise ValueError(f"max_batch must be >= 1, got {max_batch}")
    order = sorted(range(len(prompt_lens)), key=lambda i: prompt_lens[i])
    buckets: list[list[int]] = []
    for idx in order:
        if (
            buckets
            and len(buckets[-1]) < max_batch
            and prompt_lens[idx] - prompt_lens[buckets[-1][0]] <= block_size
        ):
            buckets[-1].append(idx)
        else:
            buckets.append([idx])
    return buckets


class _SampleState:
    def __init__(self, session, prompt_len: int) -> None:
        self.session = session
        self.prompt_len = prompt_len
        self.committed: list[int] = []
        self.pending: list[int] = []
        self.rounds: list[RoundRecord] = []
        self.processed: list[int] = []
        self.done = False

    @property
    def prefix_len(self) -> int:
        return self.prompt_len + len(self.committed)

    def finalize(self) -> None:
        if self.pending:
            _, _, cost = self.session.step(self.pending, [], "causal")
            self.processed.append(cost)
            self.pending = []
        self.done = True

    def trace(self, eos: int) -> DecodeTrace:
        return DecodeTrace(
            rounds=self.rounds,
            final_sequence=_truncate_at_eos(self.committed, eos),
            total_committed=len(self.committed),
            forward_calls=len(self.processed),
            processed_per_call=tuple(self.processed),
        )


def batch_decode(
    model,
    prompt_caches,
    strategy: StrategyConfig,
    batch: Sequence[int] | None = None,
    prompt_lens: Sequence[int] | None = None,
    alignment_log: list | None = None,
) -> list[DecodeTrace]:
    """Decode several samples in aligned lockstep; returns one trace per
    sample in batch order.

    ``model`` is a transformer with ``prompt_caches`` (one cache per sample)
    or a sequence of scripted oracles with ``prompt_caches=None``; oracles
    take alignment offsets from ``prompt_lens`` when given.
    """
    if strategy.kind is not StrategyKind.ADAPTIVE:
        raise ValueError(f"batched decoding supports ADAPTIVE only, got {strategy.kind}")
    oracle_mode = prompt_caches is None
    count = len(model) if oracle_mode else len(prompt_caches)
    indices = list(range(count)) if batch is None else [int(i) for i in batch]
    states: list[_SampleState] = []
    for i in indices:
        if oracle_mode:
            session = _make_session(model[i], None, True)
            p_len = 0 if prompt_lens is None else int(prompt_lens[i])
        else:
            session = _make_session(model, prompt_caches[i], True)
            p_len = prompt_caches[i].prompt_len
        states.append(_SampleState(session, p_len))

    # initial spread must already be alignable; later rounds keep it so
    align_batch([s.prefix_len for s in states], strategy.block_size)

    while True:
        active = [s for s in states if not s.done]
        if not active:
            break
        target, widths = align_batch(
            [s.prefix_len for s in active], strategy.block_size
        )
        if alignment_log is not None:
            alignment_log.append((target, tuple(widths)))
        for state, gap in zip(active, widths):
            width = min(gap, strategy.max_len - len(state.committed))
            if width == 0:
                if len(state.committed) >= strategy.max_len:
                    state.finalize()
                elif state.pending:
                    # caught up to the target: materialize, decide nothing
                    _, _, cost = state.session.step(state.pending, [], "causal")
                    state.processed.append(cost)
                    state.pending = []
                continue
            tokens, confs, cost = state.session.step(
                state.pending, [None] * width, "causal"
            )
            state.processed.append(cost)
            decision = select_commit(confs, strategy.threshold, tokens)
            state.pending = list(decision.committed_tokens)
            state.committed.extend(state.pending)
            state.rounds.append(
                RoundRecord(
                    round_index=len(state.rounds) + 1,
                    forward_index=len(state.processed),
                    confidences=tuple(confs),
                    first_low_index=decision.first_low_index,
                    commit_len=decision.commit_len,
                    tokens=tuple(tokens),
                )
            )
            if strategy.eos_token in state.pending:
                state.finalize()
            elif len(state.committed) >= strategy.max_len:
                state.finalize()
    return [s.trace(strategy.eos_token) for s in states]
