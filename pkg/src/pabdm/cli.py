"""Command line front end.

Subcommands cover the full loop: sample a task corpus, train a model under
one of the objectives, decode with any strategy, and run the scripted
ablation / threshold-sweep / simulation reports. Every run writes its
resolved configuration to config.json (byte-stable across reruns) and a
meta.json sidecar that carries the only timestamp; report paths render a
PNG figure next to each CSV.

Exit codes: 0 on success, 1 for usage problems, 2 for missing or malformed
data files, 3 when an internal invariant breaks.

PABDM_THREADS fans evaluation out over a thread pool (decode order and all
outputs are unaffected).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import traceback
from pathlib import Path

import torch

from .decoding import StrategyConfig, StrategyKind, decode
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .oracle import SCENARIO_KINDS, make_scenario_samples, synthetic_targets
from .reports import (
    save_ablation_chart,
    save_commit_histogram,
    save_sweep_chart,
    save_training_curves,
)
from .tasks import TASKS, edit_distance, encode_corpus, evaluate, generate_corpus, get_task
from .training import OBJECTIVES, train_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

STRATEGIES = {
    "adaptive": StrategyKind.ADAPTIVE,
    "block": StrategyKind.BLOCK_LEVEL,
    "fixed": StrategyKind.FIXED_K,
    "no_reset": StrategyKind.NO_RESET,
    "no_cache": StrategyKind.NO_CACHE,
}

ABLATION_VARIANTS = ("adaptive", "block", "no_reset", "no_cache")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are 1 here
        raise UsageError(message)


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    root = _Parser(prog="pabdm", description=__doc__.splitlines()[0])
    subs = root.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parsers: dict[str, _Parser] = {}

    def sub(name: str, help_text: str) -> _Parser:
        p = subs.add_parser(name, help=help_text)
        p.set_defaults(command=name)
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="KEY=VALUE defaults file; flags win")
        parsers[name] = p
        return p

    p = sub("gen-corpus", "sample a task corpus to corpus.jsonl")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--count", type=int, default=200)

    p = sub("train", "train a model on a corpus under one objective")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--corpus", help="corpus.jsonl from gen-corpus")
    p.add_argument("--objective", choices=OBJECTIVES, default="gated")
    p.add_argument("--tau-train", type=float, default=0.95)
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--keep-ratio", type=float, default=0.5)
    p.add_argument("--corruption", choices=("suffix", "block_noise"), default="suffix")
    p.add_argument("--variant", choices=("causal", "bidirectional"), default="causal")
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--num-layers", type=int, default=2)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--max-positions", type=int, default=256)

    p = sub("decode", "decode a corpus with a trained model")
    p.add_argument("--model", help="checkpoint from train")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--corpus")
    p.add_argument("--strategy", choices=sorted(STRATEGIES), default="adaptive")
    p.add_argument("--tau-infer", type=float, default=0.95)
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--fixed-k", type=int, default=4)
    p.add_argument("--limit", type=int, help="decode only the first N rows")

    p = sub("ablate", "compare decode variants on scripted confidence scenarios")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--corpus")
    p.add_argument("--scenario", choices=SCENARIO_KINDS, default="decay_dips")
    p.add_argument("--tau-infer", type=float, default=0.95)
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--limit", type=int)

    p = sub("sweep-threshold", "decode one corpus across several thresholds")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--corpus")
    p.add_argument("--scenario", choices=SCENARIO_KINDS, default="decay_dips")
    p.add_argument("--taus", help="comma-separated thresholds in [0, 1]")
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--limit", type=int)

    p = sub("simulate", "decode synthetic targets under a confidence scenario")
    p.add_argument("--scenario", choices=SCENARIO_KINDS, default="decay_dips")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--length", default="48,96", help="target length range LO,HI")
    p.add_argument("--strategy", choices=sorted(STRATEGIES), default="adaptive")
    p.add_argument("--tau-infer", type=float, default=0.95)
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--fixed-k", type=int, default=4)

    return root, parsers


def _apply_config_file(parser: _Parser, path: str) -> None:
    """Inject KEY=VALUE lines as parser defaults; explicit flags still win."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise DataError(f"cannot read config file {path}: {err}") from None
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for ln, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected KEY=VALUE, got {line!r}")
        key, _, raw = line.partition("=")
        dest = key.strip().replace("-", "_")
        act = actions.get(dest)
        if act is None or dest in ("config", "command"):
            raise DataError(f"{path}:{ln}: unknown config key {key.strip()!r}")
        value = raw.strip()
        try:
            defaults[dest] = act.type(value) if callable(act.type) else value
        except ValueError as err:
            raise DataError(f"{path}:{ln}: bad value for {key.strip()!r}: {err}") from None
        if act.choices is not None and defaults[dest] not in act.choices:
            raise DataError(f"{path}:{ln}: {key.strip()!r} must be one of {sorted(act.choices)}")
    parser.set_defaults(**defaults)


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required (flag or config file)")


def _threads_from_env() -> int | None:
    raw = os.environ.get("PABDM_THREADS")
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"PABDM_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"PABDM_THREADS must be >= 1, got {value}")
    return value


def _load_corpus(path: str, limit: int | None = None) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise DataError(f"cannot read corpus {path}: {err}") from None
    rows = []
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataError(f"{path}:{ln}: bad JSON: {err}") from None
        if not isinstance(row, dict) or not isinstance(row.get("prompt"), str) \
                or not isinstance(row.get("target"), str):
            raise DataError(f"{path}:{ln}: rows need string 'prompt' and 'target'")
        rows.append(row)
    if not rows:
        raise DataError(f"corpus {path} is empty")
    return rows[:limit] if limit is not None else rows


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_records(out: Path, args, threads: int | None) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    meta = {"command": args.command, "created_unix": round(time.time(), 3), "threads": threads}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _write_traces(path: Path, traces) -> None:
    with open(path, "w") as fh:
        for i, trace in enumerate(traces):
            for line in trace.jsonl_lines():
                row = {"sample": i}
                row.update(json.loads(line))
                fh.write(json.dumps(row) + "\n")


def _commit_lengths(traces) -> list[int]:
    return [r.commit_len for t in traces for r in t.rounds]


def _strategy_from(args, name: str | None = None) -> StrategyConfig:
    return StrategyConfig(
        kind=STRATEGIES[name or args.strategy],
        threshold=args.tau_infer,
        block_size=args.block_size,
        max_len=args.max_len,
        fixed_k=getattr(args, "fixed_k", 4),
    )


def _scenario_oracles(args, task, corpus):
    targets = [task.encode(r["target"].split()) for r in corpus]
    return [s.oracle for s in make_scenario_samples(args.scenario, targets, seed=args.seed)]


SAMPLE_FIELDS = [
    "sample", "similarity", "valid", "exact",
    "forward_calls", "processed_positions", "tokens_per_forward",
]
REPORT_FIELDS = [
    "count", "similarity", "validity_rate", "exact_rate", "acc_analog",
    "forward_calls", "processed_positions", "tokens_per_forward",
]


def _per_sample_rows(task, corpus, traces) -> list[dict]:
    rows = []
    for i, (row, trace) in enumerate(zip(corpus, traces)):
        want = row["target"].split()
        got = task.decode(trace.final_sequence)
        rows.append(
            {
                "sample": i,
                "similarity": 1.0 - edit_distance(got, want),
                "valid": int(task.is_valid(got)),
                "exact": int(got == want),
                "forward_calls": trace.forward_calls,
                "processed_positions": trace.processed_positions,
                "tokens_per_forward": trace.tokens_per_forward,
            }
        )
    return rows


# --- subcommands ---


def cmd_gen_corpus(args, threads) -> int:
    _require(args, "task", "out")
    out = _outdir(args)
    rows = generate_corpus(get_task(args.task), args.count, seed=args.seed)
    with open(out / "corpus.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    _write_run_records(out, args, threads)
    print(f"wrote {len(rows)} rows to {out / 'corpus.jsonl'}")
    return EXIT_OK


def cmd_train(args, threads) -> int:
    _require(args, "task", "corpus", "out")
    out = _outdir(args)
    task = get_task(args.task)
    corpus = _load_corpus(args.corpus)
    examples = encode_corpus(task, corpus)
    config = ModelConfig(
        vocab_size=task.vocab_size,
        embed_dim=args.embed_dim,
        num_layers=args.num_layers,
        num_heads=args.num_heads,
        max_positions=args.max_positions,
    )
    model, history = train_model(
        examples,
        args.objective,
        config,
        block_size=args.block_size,
        threshold=args.tau_train,
        keep_ratio=args.keep_ratio,
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        corruption=args.corruption,
        variant=args.variant,
    )
    save_checkpoint(model, out / "model.ckpt")
    _write_csv(out / "history.csv", history,
               ["step", "objective", "tau", "loss", "supervised_ratio"])
    save_training_curves({args.objective: history}, out / "training_curves.png")
    _write_run_records(out, args, threads)
    final = history[-1]["loss"] if history else float("nan")
    print(f"trained {args.objective} for {args.steps} steps, final loss {final:.4f}")
    return EXIT_OK


def cmd_decode(args, threads) -> int:
    _require(args, "model", "task", "corpus", "out")
    out = _outdir(args)
    task = get_task(args.task)
    corpus = _load_corpus(args.corpus, limit=args.limit)
    try:
        model = load_checkpoint(args.model)
    except (OSError, ValueError) as err:
        raise DataError(f"cannot load model {args.model}: {err}") from None
    strategy = _strategy_from(args)
    report, traces = evaluate(corpus, task, strategy, model=model, threads=threads)
    _write_csv(out / "results.csv", _per_sample_rows(task, corpus, traces), SAMPLE_FIELDS)
    _write_csv(out / "summary.csv", [report.as_row()], REPORT_FIELDS)
    _write_traces(out / "traces.jsonl", traces)
    save_commit_histogram(_commit_lengths(traces), out / "commit_hist.png", args.block_size)
    _write_run_records(out, args, threads)
    print(
        f"{args.strategy} on {report.count} rows: acc_analog {report.acc_analog:.3f}, "
        f"{report.mean_forward_calls:.2f} forwards/sample"
    )
    return EXIT_OK


def cmd_ablate(args, threads) -> int:
    _require(args, "task", "corpus", "out")
    out = _outdir(args)
    task = get_task(args.task)
    corpus = _load_corpus(args.corpus, limit=args.limit)
    oracles = _scenario_oracles(args, task, corpus)
    rows = []
    for name in ABLATION_VARIANTS:
        strategy = StrategyConfig(
            kind=STRATEGIES[name],
            threshold=args.tau_infer,
            block_size=args.block_size,
            max_len=args.max_len,
        )
        report, _ = evaluate(corpus, task, strategy, oracles=oracles, threads=threads)
        row = {"variant": name}
        row.update(report.as_row())
        rows.append(row)
    _write_csv(out / "ablation.csv", rows, ["variant"] + REPORT_FIELDS)
    save_ablation_chart(rows, out / "ablation.png")
    _write_run_records(out, args, threads)
    for row in rows:
        print(
            f"{row['variant']:>9}: acc_analog {row['acc_analog']:.3f}, "
            f"forwards {row['forward_calls']:.2f}, "
            f"tokens/forward {row['tokens_per_forward']:.2f}"
        )
    return EXIT_OK


def cmd_sweep_threshold(args, threads) -> int:
    _require(args, "task", "corpus", "out", "taus")
    try:
        taus = [float(t) for t in args.taus.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--taus must be comma-separated floats, got {args.taus!r}") from None
    if not taus or any(not 0.0 <= t <= 1.0 for t in taus):
        raise UsageError(f"--taus values must lie in [0, 1], got {args.taus!r}")
    out = _outdir(args)
    task = get_task(args.task)
    corpus = _load_corpus(args.corpus, limit=args.limit)
    oracles = _scenario_oracles(args, task, corpus)
    rows = []
    for tau in taus:
        strategy = StrategyConfig(
            kind=StrategyKind.ADAPTIVE,
            threshold=tau,
            block_size=args.block_size,
            max_len=args.max_len,
        )
        report, _ = evaluate(corpus, task, strategy, oracles=oracles, threads=threads)
        row = {"tau": tau}
        row.update(report.as_row())
        rows.append(row)
    _write_csv(out / "sweep.csv", rows, ["tau"] + REPORT_FIELDS)
    save_sweep_chart(rows, out / "sweep.png")
    _write_run_records(out, args, threads)
    print(f"swept {len(taus)} thresholds over {len(corpus)} rows")
    return EXIT_OK


def cmd_simulate(args, threads) -> int:
    _require(args, "out")
    out = _outdir(args)
    try:
        lo, hi = (int(x) for x in args.length.split(","))
    except ValueError:
        raise UsageError(f"--length must be LO,HI integers, got {args.length!r}") from None
    if not 1 <= lo <= hi:
        raise UsageError(f"--length needs 1 <= LO <= HI, got {args.length!r}")
    targets = synthetic_targets(args.count, seed=args.seed, length_range=(lo, hi))
    samples = make_scenario_samples(args.scenario, targets, seed=args.seed)
    strategy = _strategy_from(args)

    def run(sample):
        return decode(sample.oracle, None, strategy)

    if threads is not None and threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(run, samples))
    else:
        traces = [run(s) for s in samples]

    sims = [
        1.0 - edit_distance(list(t.final_sequence), list(s.target))
        for t, s in zip(traces, samples)
    ]
    exacts = [t.final_sequence == s.target for t, s in zip(traces, samples)]
    n = len(samples)
    summary = {
        "count": n,
        "similarity": sum(sims) / n,
        "exact_rate": sum(exacts) / n,
        "forward_calls": sum(t.forward_calls for t in traces) / n,
        "processed_positions": sum(t.processed_positions for t in traces) / n,
        "tokens_per_forward": sum(t.tokens_per_forward for t in traces) / n,
    }
    _write_csv(out / "summary.csv", [summary], list(summary))
    _write_traces(out / "traces.jsonl", traces)
    save_commit_histogram(_commit_lengths(traces), out / "commit_hist.png", args.block_size)
    _write_run_records(out, args, threads)
    print(
        f"simulated {n} {args.scenario} decodes: exact {summary['exact_rate']:.2f}, "
        f"tokens/forward {summary['tokens_per_forward']:.2f}"
    )
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "decode": cmd_decode,
    "ablate": cmd_ablate,
    "sweep-threshold": cmd_sweep_threshold,
    "simulate": cmd_simulate,
}


def _parse(argv: list[str]):
    root, parsers = build_parser()
    args = root.parse_args(argv)
    if args.config:
        _apply_config_file(parsers[args.command], args.config)
        args = root.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    torch.set_num_threads(1)  # keep decode numerics independent of host cores
    try:
        args = _parse(argv)
        threads = _threads_from_env()
        return COMMANDS[args.command](args, threads)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
