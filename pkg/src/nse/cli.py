"""Command-line surface and run-artifact emission.

Commands: run, count, distribution, inspect, dump-benchmark.  Exit codes:
0 on success, 2 for configuration problems, 3 for runtime failures.  The
environment variable NSE_SEED overrides the config's master seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from decimal import Decimal
from pathlib import Path

from .config import ConfigError, build_engine, config_hash, load_config, resolved_dict
from .engine import EvolutionState, RoundResult, distribution_estimate
from .oracle import OracleEvaluator
from .pareto import EvaluationRecord
from .rng import make_rng
from .space import count_architectures, full_subset, ledger_to_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ArtifactError(RuntimeError):
    pass


def _record_json(rec: EvaluationRecord) -> dict:
    return {
        "id": rec.architecture.compact_id(),
        "architecture": [list(layer) for layer in rec.architecture.encoding()],
        "accuracy": rec.accuracy,
        "cost": rec.cost,
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def scientific(n: int, digits: int = 1) -> str:
    return f"{Decimal(n):.{digits}e}"


# ---------------------------------------------------------------------------
# Commands


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    engine = build_engine(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def sink(result: RoundResult, state: EvolutionState) -> None:
        round_dir = out / f"round_{result.round_index:03d}"
        round_dir.mkdir(exist_ok=True)
        _write_json(
            round_dir / "pareto.json",
            {
                "config_hash": chash,
                "round": result.round_index,
                "corrected": [_record_json(r) for r in result.front],
                "raw": [_record_json(r) for r in result.raw_front],
                "indicators": result.indicator_snapshot,
            },
        )
        _write_json(
            round_dir / "subset.json",
            {
                "config_hash": chash,
                "round": result.round_index,
                "subset": result.subset_snapshot,
            },
        )
        _write_json(
            round_dir / "ledger.json",
            {
                "config_hash": chash,
                "round": result.round_index,
                "ledger": ledger_to_json(state.ledger),
            },
        )
        _write_json(
            round_dir / "manifest.json",
            {
                "config_hash": chash,
                "round": result.round_index,
                "master_seed": cfg.master_seed,
                "duration_seconds": result.duration,
                "diagnostics": result.diagnostics,
            },
        )
        top = max(result.front, key=lambda r: r.accuracy) if result.front else None
        print(
            f"round {result.round_index}: front {len(result.front)}"
            + (
                f", best acc {top.accuracy:.4f} @ cost {top.cost:.1f}"
                if top is not None
                else ""
            )
            + f" ({result.duration:.1f}s)",
            flush=True,
        )

    summary = engine.run(sink)
    _write_json(
        out / "manifest.json",
        {
            "config_hash": chash,
            "config": resolved_dict(cfg),
            "rounds_completed": len(summary.results),
            "shortage": summary.shortage,
            "best_archive": [_record_json(r) for r in summary.state.best_archive],
            "durations_seconds": [r.duration for r in summary.results],
        },
    )
    final = summary.results[-1]
    print(
        f"done: {len(summary.results)} round(s)"
        + (", ended by pool shortage" if summary.shortage else "")
        + f"; final front size {len(final.front)}"
    )
    return EXIT_OK


def cmd_count(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    sizes = [cfg.pool.ops_per_layer] * cfg.pool.num_layers
    exact = count_architectures(sizes, cfg.capacity, cfg.pool.roles())
    print(f"exact: {exact}")
    print(f"approx: {scientific(exact)}")
    return EXIT_OK


def cmd_distribution(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if cfg.evaluator != "oracle":
        raise ConfigError("distribution sampling requires an oracle config")
    pool = cfg.pool.build()
    bench = cfg.benchmark.build(pool)
    evaluator = OracleEvaluator(bench)
    records = distribution_estimate(
        full_subset(pool),
        evaluator,
        (args.lo, args.hi),
        args.n,
        make_rng(cfg.master_seed, "distribution"),
        workers=cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1),
    )
    target = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(target)
        writer.writerow(["arch_id", "cost", "accuracy"])
        for rec in records:
            writer.writerow([rec.architecture.compact_id(), rec.cost, rec.accuracy])
    finally:
        if args.output:
            target.close()
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no run manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    chash = manifest["config_hash"]

    if args.round is None:
        rounds = sorted(p.name for p in run_dir.glob("round_*") if p.is_dir())
        if not rounds:
            raise ArtifactError(f"no round artifacts in {run_dir}")
        round_dir = run_dir / rounds[-1]
    else:
        round_dir = run_dir / f"round_{args.round:03d}"
        if not round_dir.is_dir():
            raise FileNotFoundError(f"no artifacts for round {args.round} in {run_dir}")

    artifacts = {}
    for name in ("pareto.json", "subset.json", "ledger.json", "manifest.json"):
        payload = json.loads((round_dir / name).read_text())
        if payload["config_hash"] != chash:
            raise ArtifactError(
                f"{round_dir / name} embeds config hash {payload['config_hash'][:12]}..."
                f" but the run manifest has {chash[:12]}...; refusing mixed artifacts"
            )
        artifacts[name] = payload

    pareto = artifacts["pareto.json"]
    subset = artifacts["subset.json"]["subset"]
    print(f"run {run_dir}  round {pareto['round']}  config {chash[:12]}")
    print(
        f"front: {len(pareto['corrected'])} corrected / {len(pareto['raw'])} raw"
    )
    for rec in pareto["corrected"]:
        print(f"  acc {rec['accuracy']:.4f}  cost {rec['cost']:.2f}  [{rec['id']}]")
    print(f"subset (capacity {subset['capacity']}, shortage {subset['shortage']}):")
    for layer in subset["layers"]:
        parts = []
        for e in layer["entries"]:
            tag = "i" if e["origin"] == "inherited" else "f"
            tag += "" if e["active"] else "!"
            parts.append(f"{e['slot']}:{e['kind']}({tag})")
        print(f"  L{layer['layer_index']} [{layer['role']}] " + " ".join(parts))
    print("legend: i inherited, f fresh, ! pruned")
    return EXIT_OK


def cmd_dump_benchmark(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    pool = cfg.pool.build()
    bench = cfg.benchmark.build(pool)
    payload = {
        "config_hash": config_hash(cfg),
        "benchmark": bench.to_json(),
        "cost_table": bench.cost_table().to_json(),
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nse",
        description="Search-space evolution for multi-branch architecture search.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the evolution loop")
    p_run.add_argument("config")
    p_run.set_defaults(func=cmd_run)

    p_count = sub.add_parser("count", help="count reachable architectures")
    p_count.add_argument("config")
    p_count.set_defaults(func=cmd_count)

    p_dist = sub.add_parser(
        "distribution", help="sample accuracies within a cost band (CSV)"
    )
    p_dist.add_argument("config")
    p_dist.add_argument("--lo", type=float, required=True)
    p_dist.add_argument("--hi", type=float, required=True)
    p_dist.add_argument("-n", type=int, required=True)
    p_dist.add_argument("-o", "--output", default=None)
    p_dist.set_defaults(func=cmd_distribution)

    p_inspect = sub.add_parser("inspect", help="summarize run artifacts")
    p_inspect.add_argument("run_dir")
    p_inspect.add_argument("--round", type=int, default=None)
    p_inspect.set_defaults(func=cmd_inspect)

    p_dump = sub.add_parser(
        "dump-benchmark", help="write the oracle benchmark tables as JSON"
    )
    p_dump.add_argument("config")
    p_dump.add_argument("-o", "--output", default=None)
    p_dump.set_defaults(func=cmd_dump_benchmark)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
