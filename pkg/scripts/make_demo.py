#!/usr/bin/env python3
"""Write a self-contained scripted demo tree and print commands to try.

    python scripts/make_demo.py demo/ --items 20
"""

import argparse
from pathlib import Path

from oculus.synthetic import make_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path)
    ap.add_argument("--items", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--parallelism", type=int, default=4)
    args = ap.parse_args()

    fx = make_fixture(args.root, args.items, args.seed, args.parallelism)
    img = fx.items[0].images[0].path
    print(f"wrote {len(fx.items)} items, {len(fx.configs)} configs under {fx.root}")
    print()
    print(f"oculus bench run --questions {fx.questions} --config {fx.configs['full']} --out {fx.root / 'out'}")
    print(f"oculus query --question \"{fx.items[0].stem}\" --image {img} --config {fx.configs['full']}")
    print(f"oculus robust run --questions {fx.questions} --seed 1 --config {fx.configs['baseline']} "
          f"--out {fx.root / 'robust'}")
    print(f"oculus rag ingest --sources {fx.sources} --out {fx.root / 'index.jsonl'}")
    print(f"oculus tools invoke --tool dr_severity --image {img} --stub-dir {fx.stub_dir}")


if __name__ == "__main__":
    main()
