#!/usr/bin/env python3
"""Run the stage-ablation grid and print the two-block results table.

With no arguments the grid runs on a fresh scripted fixture, which checks the
plumbing (every row scores 1.0 by construction). Point ``--configs`` at real
backend configs, one YAML per row, to get live numbers:

    python scripts/run_ablation.py --questions q.jsonl --configs cfg/rag.yaml cfg/full.yaml
"""

import argparse
import json
import tempfile
import time
from collections import Counter
from pathlib import Path

from oculus.config import build_runtime, load_config
from oculus.harness import format_results_table, load_questions, run_benchmark
from oculus.synthetic import ABLATION_ROWS, make_fixture


def run_row(cfg_path: Path, items):
    cfg = load_config(cfg_path)
    t0 = time.perf_counter()
    record, result = run_benchmark(items, build_runtime(cfg).pipeline())
    stages = Counter(e.get("stage") for e in record.events)
    return result, time.perf_counter() - t0, stages


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--questions", type=Path)
    ap.add_argument("--configs", type=Path, nargs="*")
    ap.add_argument("--items", type=int, default=20, help="fixture size when no questions are given")
    ap.add_argument("--json", type=Path, help="also write per-row reports here")
    args = ap.parse_args()

    if args.questions and args.configs:
        items = load_questions(args.questions)
        grid = [(p.stem, p) for p in args.configs]
    else:
        fx = make_fixture(Path(tempfile.mkdtemp(prefix="oculus-ablation-")), args.items)
        items = fx.items
        grid = [(name, fx.configs[name]) for name in ("baseline", *ABLATION_ROWS)]

    rows, dump = [], {}
    for name, path in grid:
        result, secs, stages = run_row(path, items)
        rows.append((name, result.by_subtype))
        dump[name] = result.to_dict()
        used = ", ".join(f"{s}={n}" for s, n in sorted(stages.items(), key=lambda kv: str(kv[0])) if s)
        print(f"{name:20s} acc={result.overall.accuracy:.3f} f1={result.overall.macro_f1:.3f} "
              f"{secs:5.2f}s  events: {used}")
    print()
    print(format_results_table(rows), end="")
    if args.json:
        args.json.write_text(json.dumps(dump, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
