"""Symbolic transduction tasks with checkable outputs.

Each task maps a prompt string to a target string over a small symbol
alphabet, and exposes a validity check that is independent of the prompt.
That separation lets evaluation report surface similarity and structural
validity as distinct signals: a decode can be nearly right yet broken, or
well-formed yet wrong.

Tasks:

* brackets: the prompt spells a balanced bracket sequence in letters
  (a = open, b = close); the target is the same sequence in brackets.
* expr: the prompt is an arithmetic expression in prefix notation; the
  target is the fully parenthesized infix form.
* table: the prompt gives row and column counts plus cell values; the
  target wraps the values into a tagged row-major table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .layout import NUM_SPECIALS
from .model import TinyTransformer, encode_prompt

Symbols = list[str]


@dataclass(frozen=True)
class GrammarTask:
    name: str
    alphabet: tuple[str, ...]
    sampler: Callable[[np.random.Generator], tuple[Symbols, Symbols]]
    validator: Callable[[Sequence[str]], bool]

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIALS + len(self.alphabet)

    @property
    def symbol_ids(self) -> Mapping[str, int]:
        return {s: NUM_SPECIALS + i for i, s in enumerate(self.alphabet)}

    def encode(self, symbols: Sequence[str]) -> list[int]:
        table = self.symbol_ids
        try:
            return [table[s] for s in symbols]
        except KeyError as err:
            raise ValueError(f"symbol {err.args[0]!r} not in task {self.name}") from None

    def decode(self, ids: Sequence[int]) -> Symbols:
        out = []
        for i in ids:
            k = i - NUM_SPECIALS
            out.append(self.alphabet[k] if 0 <= k < len(self.alphabet) else "?")
        return out

    def sample(self, rng: np.random.Generator) -> tuple[Symbols, Symbols]:
        return self.sampler(rng)

    def is_valid(self, symbols: Sequence[str]) -> bool:
        return self.validator(symbols)


# --- brackets ---


def _balanced(rng: np.random.Generator, pairs: int) -> Symbols:
    if pairs == 0:
        return []
    inner = int(rng.integers(0, pairs))
    rest = pairs - 1 - inner
    return ["("] + _balanced(rng, inner) + [")"] + _balanced(rng, rest)


def _sample_brackets(rng: np.random.Generator) -> tuple[Symbols, Symbols]:
    target = _balanced(rng, int(rng.integers(2, 15)))
    prompt = ["a" if s == "(" else "b" for s in target]
    return prompt, target


def _valid_brackets(symbols: Sequence[str]) -> bool:
    if not symbols:
        return False
    depth = 0
    for s in symbols:
        if s == "(":
            depth += 1
        elif s == ")":
            depth -= 1
            if depth < 0:
                return False
        else:
            return False
    return depth == 0


# --- expr ---

_DIGITS = ("1", "2", "3")
_OPS = ("+", "*")


def _expr_tree(rng: np.random.Generator, ops: int):
    if ops == 0:
        return str(rng.choice(_DIGITS))
    left = int(rng.integers(0, ops))
    return (str(rng.choice(_OPS)), _expr_tree(rng, left), _expr_tree(rng, ops - 1 - left))


def _prefix(node) -> Symbols:
    if isinstance(node, str):
        return [node]
    op, left, right = node
    return [op] + _prefix(left) + _prefix(right)


def _infix(node) -> Symbols:
    if isinstance(node, str):
        return [node]
    op, left, right = node
    return ["("] + _infix(left) + [op] + _infix(right) + [")"]


def _sample_expr(rng: np.random.Generator) -> tuple[Symbols, Symbols]:
    tree = _expr_tree(rng, int(rng.integers(0, 6)))
    return _prefix(tree), _infix(tree)


def _valid_expr(symbols: Sequence[str]) -> bool:
    pos = 0

    def parse() -> bool:
        nonlocal pos
        if pos >= len(symbols):
            return False
        if symbols[pos] in _DIGITS:
            pos += 1
            return True
        if symbols[pos] != "(":
            return False
        pos += 1
        if not parse():
            return False
        if pos >= len(symbols) or symbols[pos] not in _OPS:
            return False
        pos += 1
        if not parse():
            return False
        if pos >= len(symbols) or symbols[pos] != ")":
            return False
        pos += 1
        return True

    return parse() and pos == len(symbols)


# --- table ---

_CELLS = tuple(str(d) for d in range(10))


def _sample_table(rng: np.random.Generator) -> tuple[Symbols, Symbols]:
    rows = int(rng.integers(1, 4))
    cols = int(rng.integers(1, 4))
    values = [str(rng.choice(_CELLS)) for _ in range(rows * cols)]
    prompt = ["r"] * rows + ["c"] * cols + values
    target = ["<t>"]
    for r in range(rows):
        target += ["<r>"] + values[r * cols : (r + 1) * cols] + ["</r>"]
    target.append("</t>")
    return prompt, target


def _valid_table(symbols: Sequence[str]) -> bool:
    if len(symbols) < 4 or symbols[0] != "<t>" or symbols[-1] != "</t>":
        return False
    body = symbols[1:-1]
    widths = []
    pos = 0
    while pos < len(body):
        if body[pos] != "<r>":
            return False
        pos += 1
        cells = 0
        while pos < len(body) and body[pos] in _CELLS:
            cells += 1
            pos += 1
        if cells == 0 or pos >= len(body) or body[pos] != "</r>":
            return False
        pos += 1
        widths.append(cells)
    return len(widths) >= 1 and len(set(widths)) == 1


TASKS: dict[str, GrammarTask] = {
    "brackets": GrammarTask(
        name="brackets",
        alphabet=("a", "b", "(", ")"),
        sampler=_sample_brackets,
        validator=_valid_brackets,
    ),
    "expr": GrammarTask(
        name="expr",
        alphabet=_DIGITS + _OPS + ("(", ")"),
        sampler=_sample_expr,
        validator=_valid_expr,
    ),
    "table": GrammarTask(
        name="table",
        alphabet=("r", "c", "<t>", "</t>", "<r>", "</r>") + _CELLS,
        sampler=_sample_table,
        validator=_valid_table,
    ),
}


def get_task(name: str) -> GrammarTask:
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}, have {sorted(TASKS)}")
    return TASKS[name]


# --- corpora ---


def generate_corpus(task: GrammarTask, count: int, seed: int = 0) -> list[dict]:
    """Sampled prompt/target pairs as space-joined symbol strings."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(count):
        prompt, target = task.sample(rng)
        rows.append({"prompt": " ".join(prompt), "target": " ".join(target)})
    return rows


def encode_corpus(task: GrammarTask, corpus: Sequence[dict]) -> list[tuple[list[int], list[int]]]:
    return [
        (task.encode(row["prompt"].split()), task.encode(row["target"].split()))
        for row in corpus
    ]


# --- metrics ---


def edit_distance(a: Sequence, b: Sequence) -> float:
    """Levenshtein distance normalized by the longer length; 0.0 for two
    empty sequences."""
    if not a and not b:
        return 0.0
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1] / max(len(a), len(b))


@dataclass(frozen=True)
class EvalReport:
    count: int
    similarity: float  # mean 1 - normalized edit distance
    validity_rate: float
    exact_rate: float
    mean_forward_calls: float
    mean_processed_positions: float
    mean_tokens_per_forward: float

    @property
    def acc_analog(self) -> float:
        """Scalar quality blend of surface similarity and well-formedness."""
        return (self.similarity + self.validity_rate) / 2.0

    def as_row(self) -> dict:
        return {
            "count": self.count,
            "similarity": self.similarity,
            "validity_rate": self.validity_rate,
            "exact_rate": self.exact_rate,
            "acc_analog": self.acc_analog,
            "forward_calls": self.mean_forward_calls,
            "processed_positions": self.mean_processed_positions,
            "tokens_per_forward": self.mean_tokens_per_forward,
        }


def evaluate(
    corpus: Sequence[dict],
    task: GrammarTask,
    strategy,
    model: TinyTransformer | None = None,
    oracles: Sequence | None = None,
    threads: int | None = None,
):
    """Decode every corpus row and score it; returns (report, traces).

    Exactly one of ``model`` / ``oracles`` drives the decode. ``threads``
    fans samples out over a thread pool; results keep corpus order.
    """
    from .decoding import decode  # local import, decoding pulls no tasks

    if (model is None) == (oracles is None):
        raise ValueError("pass exactly one of model or oracles")
    if oracles is not None and len(oracles) != len(corpus):
        raise ValueError(f"{len(oracles)} oracles for {len(corpus)} rows")

    def run(idx: int):
        row = corpus[idx]
        if model is not None:
            prompt_ids = task.encode(row["prompt"].split())
            trace = decode(model, encode_prompt(model, prompt_ids), strategy)
        else:
            trace = decode(oracles[idx], None, strategy)
        return trace

    if threads is not None and threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(run, range(len(corpus))))
    else:
        traces = [run(i) for i in range(len(corpus))]

    sims, valids, exacts = [], [], []
    for row, trace in zip(corpus, traces):
        want = row["target"].split()
        got = task.decode(trace.final_sequence)
        sims.append(1.0 - edit_distance(got, want))
        valids.append(task.is_valid(got))
        exacts.append(got == want)
    n = len(corpus)
    report = EvalReport(
        count=n,
        similarity=sum(sims) / n,
        validity_rate=sum(valids) / n,
        exact_rate=sum(exacts) / n,
        mean_forward_calls=sum(t.forward_calls for t in traces) / n,
        mean_processed_positions=sum(t.processed_positions for t in traces) / n,
        mean_tokens_per_forward=sum(t.tokens_per_forward for t in traces) / n,
    )
    return report, traces
