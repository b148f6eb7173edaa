"""Scripted stand-ins for a trained model.

A scripted oracle deterministically maps a committed prefix to per-candidate
(token, confidence) pairs, which is all the decode loops ever ask of a model.
They make decoding dynamics testable without training: targets are exact, so
every scheduling strategy commits the same token stream, and the confidence
profile alone shapes commit lengths, forward counts and forced single commits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .layout import EOS_ID


class ScriptedOracle:
    """Replay-style oracle: an explicit table from prefix to predictions.

    ``script`` maps a committed-prefix tuple to a list of (token, confidence)
    pairs for the candidate slots that follow it; anything off-script falls
    back to ``fallback``. Positions are 0-based response slots.
    """

    def __init__(
        self,
        script: Mapping[tuple[int, ...], Sequence[tuple[int, float]]] | None = None,
        fallback: tuple[int, float] = (EOS_ID, 1.0),
    ) -> None:
        self.script = {
            tuple(k): [(int(t), float(c)) for t, c in v]
            for k, v in (script or {}).items()
        }
        self.fallback = (int(fallback[0]), float(fallback[1]))

    def predict(
        self, prefix: Sequence[int], positions: Sequence[int]
    ) -> list[tuple[int, float]]:
        entry = self.script.get(tuple(prefix))
        base = len(prefix)
        out = []
        for pos in positions:
            offset = pos - base
            if entry is not None and 0 <= offset < len(entry):
                out.append(entry[offset])
            else:
                out.append(self.fallback)
        return out


class TargetOracle(ScriptedOracle):
    """Oracle that always predicts one fixed sequence.

    ``confidence`` may be a constant, a per-position array, or a callable
    ``(position, frontier) -> float`` where ``frontier`` is the length of the
    resolved prefix at query time (lets confidence depend on distance from
    the frontier, the shape real models exhibit).
    """

    def __init__(
        self,
        target: Sequence[int],
        confidence,
        fallback: tuple[int, float] = (EOS_ID, 1.0),
    ) -> None:
        super().__init__(script=None, fallback=fallback)
        self.target = tuple(int(t) for t in target)
        if callable(confidence):
            self._conf = confidence
        elif np.isscalar(confidence):
            value = float(confidence)
            self._conf = lambda pos, frontier: value
        else:
            table = tuple(float(c) for c in confidence)
            if len(table) != len(self.target):
                raise ValueError(
                    f"{len(table)} confidences for {len(self.target)} target tokens"
                )
            self._conf = lambda pos, frontier: table[pos]

    def predict(self, prefix, positions):
        frontier = len(prefix)
        out = []
        for pos in positions:
            if pos < len(self.target):
                out.append((self.target[pos], float(self._conf(pos, frontier))))
            else:
                out.append(self.fallback)
        return out


def decay_profile(
    hi: float,
    step: float,
    dips: Mapping[int, float] | None = None,
    floor: float = 0.05,
) -> Callable[[int, int], float]:
    """Confidence falls linearly with distance from the committed frontier;
    fixed dip positions override with their own (low) value."""
    dip_table = dict(dips or {})

    def conf(pos: int, frontier: int) -> float:
        if pos in dip_table:
            return dip_table[pos]
        return max(floor, hi - step * (pos - frontier))

    return conf


@dataclass(frozen=True)
class ScenarioSample:
    """One simulated decode problem: the oracle emits ``target`` + EOS; the
    surface ``target`` (no EOS) is what metrics compare against."""

    oracle: ScriptedOracle
    target: tuple[int, ...]


SCENARIO_KINDS = ("smooth", "decay", "decay_dips", "flip_one")


def make_scenario_samples(
    kind: str,
    targets: Sequence[Sequence[int]],
    seed: int = 0,
    dip_rate: float = 0.08,
) -> list[ScenarioSample]:
    """Build one oracle per target under a named confidence scenario."""
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario {kind!r}, pick one of {SCENARIO_KINDS}")
    rng = np.random.default_rng(seed)
    samples = []
    for target in targets:
        surface = tuple(int(t) for t in target)
        full = surface + (EOS_ID,)
        if kind == "smooth":
            oracle = TargetOracle(full, 0.99)
        elif kind == "flip_one":
            if len(surface) < 2:
                raise ValueError("flip_one needs targets of length >= 2")
            corrupted = list(full)
            pos = int(rng.integers(0, len(surface)))
            # swap in a different token from the same sample's alphabet
            others = sorted(set(surface) - {corrupted[pos]})
            if not others:
                raise ValueError("flip_one needs at least two distinct tokens")
            corrupted[pos] = others[int(rng.integers(0, len(others)))]
            oracle = TargetOracle(tuple(corrupted), 0.99)
        else:
            hi = float(rng.uniform(0.97, 0.999))
            step = float(rng.uniform(0.008, 0.02))
            dips: dict[int, float] = {}
            if kind == "decay_dips":
                for pos in range(len(full)):
                    if rng.uniform() < dip_rate:
                        dips[pos] = float(rng.uniform(0.2, 0.45))
            oracle = TargetOracle(full, decay_profile(hi, step, dips))
        samples.append(ScenarioSample(oracle=oracle, target=surface))
    return samples


def synthetic_targets(
    count: int,
    seed: int = 0,
    length_range: tuple[int, int] = (48, 96),
    alphabet: Sequence[int] = tuple(range(3, 11)),
) -> list[list[int]]:
    """Random token sequences for scenario decoding when no grammar is needed."""
    rng = np.random.default_rng(seed)
    lo, hi = length_range
    out = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        out.append([int(t) for t in rng.choice(list(alphabet), size=n)])
    return out
