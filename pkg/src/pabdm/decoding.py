"""Decode loops over a block-masked model.

The adaptive strategy treats the block size as the width of a fresh candidate
range each round, commits the left-contiguous run of above-threshold tokens
(at least one, at most the whole range), and fuses the materialization of the
previous commit into the next forward. Baselines cover the classic
whole-block denoiser, a fixed commit width, no range reset (keep denoising
the residual suffix of the current block), and no prefix cache (recompute
committed tokens every round).

Every strategy records a DecodeTrace: per-round candidate confidences and
argmax tokens, the commit decision, and forward/position accounting. The
trailing materialization-only pass is counted as a forward call; strategies
that keep no response cache have nothing to materialize and skip it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import torch

from .layout import EOS_ID, MASK_ID, PAD_ID
from .masks import segmented_mask
from .model import CacheState, TinyTransformer, forward
from .oracle import ScriptedOracle


class StrategyKind(Enum):
    ADAPTIVE = "adaptive"  # reset + prefix cache
    BLOCK_LEVEL = "block_level"  # classic whole-block denoising
    FIXED_K = "fixed_k"  # always commit k tokens
    NO_RESET = "no_reset"  # prefix cache, candidate range shrinks within block
    NO_CACHE = "no_cache"  # reset, but committed tokens are recomputed


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind = StrategyKind.ADAPTIVE
    threshold: float = 0.95
    block_size: int = 32
    max_len: int = 256
    eos_token: int = EOS_ID
    fixed_k: int = 4
    intra_block: str = "bidirectional"  # block-level baseline's inner direction

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if self.fixed_k < 1:
            raise ValueError(f"fixed_k must be >= 1, got {self.fixed_k}")
        if self.intra_block not in ("bidirectional", "causal"):
            raise ValueError(f"unknown intra_block: {self.intra_block!r}")


@dataclass(frozen=True)
class CommitDecision:
    """Outcome of scanning one candidate range left to right."""

    commit_len: int
    first_low_index: int | None  # 1-based index of the first sub-threshold token
    committed_tokens: tuple[int, ...] | None

    @property
    def forced(self) -> bool:
        """True when the very first candidate was below threshold and the
        single-token minimum commit kicked in."""
        return self.first_low_index == 1


def select_commit(
    confidences: Sequence[float], threshold: float, tokens: Sequence[int] | None = None
) -> CommitDecision:
    """Commit everything left of the first sub-threshold candidate, but never
    nothing: a below-threshold head still commits exactly one token."""
    confs = list(confidences)
    if not confs:
        raise ValueError("confidences must be non-empty")
    first_low = None
    for idx, c in enumerate(confs, start=1):
        if c < threshold:
            first_low = idx
            break
    commit_len = len(confs) if first_low is None else max(1, first_low - 1)
    committed = None if tokens is None else tuple(tokens[:commit_len])
    if committed is not None and len(committed) != commit_len:
        raise ValueError(
            f"{len(list(tokens))} tokens cannot cover commit of {commit_len}"
        )
    return CommitDecision(
        commit_len=commit_len, first_low_index=first_low, committed_tokens=committed
    )


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    forward_index: int
    confidences: tuple[float, ...]
    first_low_index: int | None
    commit_len: int
    tokens: tuple[int, ...]  # argmax for every candidate slot scored this round


@dataclass
class DecodeTrace:
    rounds: list[RoundRecord] = field(default_factory=list)
    final_sequence: tuple[int, ...] = ()
    total_committed: int = 0
    forward_calls: int = 0
    processed_per_call: tuple[int, ...] = ()

    @property
    def processed_positions(self) -> int:
        return sum(self.processed_per_call)

    @property
    def tokens_per_forward(self) -> float:
        """Mean commit length per decision round."""
        if not self.rounds:
            return 0.0
        return self.total_committed / len(self.rounds)

    def jsonl_lines(self) -> list[str]:
        lines = []
        for r in self.rounds:
            lines.append(
                json.dumps(
                    {
                        "round": r.round_index,
                        "forward_index": r.forward_index,
                        "confidences": list(r.confidences),
                        "m": r.first_low_index,
                        "commit_len": r.commit_len,
                        "tokens": list(r.tokens),
                    }
                )
            )
        lines.append(
            json.dumps(
                {
                    "forward_calls": self.forward_calls,
                    "committed": self.total_committed,
                    "tokens_per_forward": self.tokens_per_forward,
                    "processed_positions": self.processed_positions,
                    "final_sequence": list(self.final_sequence),
                }
            )
        )
        return lines

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(self.jsonl_lines()) + "\n")


def _greedy(logits_row: torch.Tensor) -> tuple[int, float]:
    """Argmax over emittable tokens; MASK/PAD are structural, never surface.
    Confidence is the full-softmax probability of the chosen token."""
    masked = logits_row.clone()
    masked[MASK_ID] = float("-inf")
    masked[PAD_ID] = float("-inf")
    token = int(masked.argmax())
    conf = float(torch.softmax(logits_row, dim=0)[token])
    return token, conf


class _TransformerSession:
    def __init__(
        self, model: TinyTransformer, prompt_cache: CacheState, use_prefix_cache: bool
    ) -> None:
        self.model = model
        self.cache = prompt_cache if prompt_cache is not None else CacheState.empty(model)
        self.use_prefix_cache = use_prefix_cache
        self.backlog: list[int] = []  # committed but deliberately uncached

    def step(
        self,
        commit: Sequence[int],
        candidates: Sequence[int | None],
        intra: str,
    ) -> tuple[list[int], list[float], int]:
        if self.use_prefix_cache:
            lead = list(commit)
        else:
            self.backlog.extend(commit)
            lead = list(self.backlog)
        cand = [MASK_ID if c is None else int(c) for c in candidates]
        new = lead + cand
        if not new:
            return [], [], 0
        sizes = [s for s in (len(lead), len(cand)) if s]
        mask = segmented_mask(sizes, intra)
        out = forward(
            self.model,
            self.cache,
            new,
            mask,
            materialize_prefix_len=len(lead) if self.use_prefix_cache else 0,
        )
        if self.use_prefix_cache:
            self.cache = out.new_cache
        tokens: list[int] = []
        confs: list[float] = []
        for offset, slot in enumerate(candidates):
            if slot is None:
                tok, conf = _greedy(out.logits[len(lead) + offset])
                tokens.append(tok)
                confs.append(conf)
        return tokens, confs, len(new)


class _OracleSession:
    def __init__(self, oracle: ScriptedOracle, use_prefix_cache: bool) -> None:
        self.oracle = oracle
        self.use_prefix_cache = use_prefix_cache
        self.resolved: list[int] = []

    def step(
        self,
        commit: Sequence[int],
        candidates: Sequence[int | None],
        intra: str,
    ) -> tuple[list[int], list[float], int]:
        self.resolved.extend(int(t) for t in commit)
        if not commit and not candidates:
            return [], [], 0
        # context = resolved prefix plus the contiguous fixed run at the head
        # of the candidate range (matters for frontier-relative confidence)
        lead_fixed: list[int] = []
        for c in candidates:
            if c is None:
                break
            lead_fixed.append(int(c))
        prefix = self.resolved + lead_fixed
        positions = [
            len(self.resolved) + idx
            for idx, slot in enumerate(candidates)
            if slot is None
        ]
        preds = self.oracle.predict(prefix, positions)
        tokens = [int(t) for t, _ in preds]
        confs = [float(c) for _, c in preds]
        cost = len(commit) if self.use_prefix_cache else len(self.resolved)
        return tokens, confs, cost + len(candidates)


def _make_session(model, prompt_cache, use_prefix_cache: bool):
    if isinstance(model, ScriptedOracle):
        return _OracleSession(model, use_prefix_cache)
    return _TransformerSession(model, prompt_cache, use_prefix_cache)


def _truncate_at_eos(committed: Sequence[int], eos: int) -> tuple[int, ...]:
    out = []
    for tok in committed:
        if tok == eos:
            break
        out.append(int(tok))
    return tuple(out)


def _decode_prefix_style(session, cfg: StrategyConfig) -> DecodeTrace:
    committed: list[int] = []
    pending: list[int] = []
    rounds: list[RoundRecord] = []
    processed: list[int] = []
    saw_eos = False
    while len(committed) < cfg.max_len and not saw_eos:
        if cfg.kind is StrategyKind.NO_RESET:
            room = cfg.block_size - (len(committed) % cfg.block_size)
        else:
            room = cfg.block_size
        width = min(room, cfg.max_len - len(committed))
        tokens, confs, cost = session.step(pending, [None] * width, "causal")
        processed.append(cost)
        if cfg.kind is StrategyKind.FIXED_K:
            k = min(cfg.fixed_k, width)
            decision = CommitDecision(
                commit_len=k, first_low_index=None, committed_tokens=tuple(tokens[:k])
            )
        else:
            decision = select_commit(confs, cfg.threshold, tokens)
        pending = list(decision.committed_tokens)
        committed.extend(pending)
        rounds.append(
            RoundRecord(
                round_index=len(rounds) + 1,
                forward_index=len(processed),
                confidences=tuple(confs),
                first_low_index=decision.first_low_index,
                commit_len=decision.commit_len,
                tokens=tuple(tokens),
            )
        )
        saw_eos = cfg.eos_token in pending
    if session.use_prefix_cache and pending:
        _, _, cost = session.step(pending, [], "causal")
        processed.append(cost)
    return DecodeTrace(
        rounds=rounds,
        final_sequence=_truncate_at_eos(committed, cfg.eos_token),
        total_committed=len(committed),
        forward_calls=len(processed),
        processed_per_call=tuple(processed),
    )


def _decode_block_style(session, cfg: StrategyConfig) -> DecodeTrace:
    committed: list[int] = []
    pending: list[int] = []
    rounds: list[RoundRecord] = []
    processed: list[int] = []
    saw_eos = False
    while len(committed) < cfg.max_len and not saw_eos:
        width = min(cfg.block_size, cfg.max_len - len(committed))
        slots: list[int | None] = [None] * width
        carry = pending
        pending = []
        while any(s is None for s in slots):
            tokens, confs, cost = session.step(carry, slots, cfg.intra_block)
            carry = []
            processed.append(cost)
            open_idx = [i for i, s in enumerate(slots) if s is None]
            above = [j for j, c in enumerate(confs) if c >= cfg.threshold]
            if not above:
                best = max(range(len(confs)), key=lambda j: confs[j])
                above = [best]
            for j in above:
                slots[open_idx[j]] = tokens[j]
            rounds.append(
                RoundRecord(
                    round_index=len(rounds) + 1,
                    forward_index=len(processed),
                    confidences=tuple(confs),
                    first_low_index=None,
                    commit_len=len(above),
                    tokens=tuple(tokens),
                )
            )
        block = [int(s) for s in slots]
        committed.extend(block)
        pending = block
        saw_eos = cfg.eos_token in block
    if pending:
        _, _, cost = session.step(pending, [], cfg.intra_block)
        processed.append(cost)
    return DecodeTrace(
        rounds=rounds,
        final_sequence=_truncate_at_eos(committed, cfg.eos_token),
        total_committed=len(committed),
        forward_calls=len(processed),
        processed_per_call=tuple(processed),
    )


def decode(model, prompt_cache, strategy: StrategyConfig) -> DecodeTrace:
    """Decode one sequence; ``model`` is a transformer (with its prompt
    cache) or a scripted oracle (prompt_cache ignored)."""
    use_cache = strategy.kind is not StrategyKind.NO_CACHE
    session = _make_session(model, prompt_cache, use_cache)
    if strategy.kind is StrategyKind.BLOCK_LEVEL:
        return _decode_block_style(session, strategy)
    return _decode_prefix_style(session, strategy)


def decode_block_level(model, prompt_cache, strategy: StrategyConfig) -> DecodeTrace:
    from dataclasses import replace

    return decode(model, prompt_cache, replace(strategy, kind=StrategyKind.BLOCK_LEVEL))


def decode_fixed_k(model, prompt_cache, strategy: StrategyConfig, k: int) -> DecodeTrace:
    from dataclasses import replace

    return decode(
        model, prompt_cache, replace(strategy, kind=StrategyKind.FIXED_K, fixed_k=k)
    )


def replay_oracle_from_trace(trace: DecodeTrace) -> ScriptedOracle:
    """Rebuild a scripted oracle that replays a recorded adaptive decode:
    keyed by the committed prefix at each round's start."""
    script: dict[tuple[int, ...], list[tuple[int, float]]] = {}
    prefix: list[int] = []
    for r in trace.rounds:
        script[tuple(prefix)] = list(zip(r.tokens, r.confidences))
        prefix.extend(r.tokens[: r.commit_len])
    return ScriptedOracle(script)


def commits_respect_threshold(trace: DecodeTrace, threshold: float) -> bool:
    """True when no committed token sat below threshold except as the forced
    single commit at the head of a range. Applies to prefix-style traces
    (adaptive, no-reset, no-cache) where each round commits a left run."""
    for r in trace.rounds:
        head = r.confidences[: r.commit_len]
        if r.commit_len == 1 and head[0] < threshold:
            if r.first_low_index == 1:
                continue  # forced single commit
            return False
        if any(c < threshold for c in head):
            return False
    return True
