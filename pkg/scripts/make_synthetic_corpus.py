#!/usr/bin/env python3
"""Generate a synthetic blank-line-delimited corpus for pipeline experiments.

Example:
    python scripts/make_synthetic_corpus.py --out /tmp/corpus --size-mb 10 --seed 42
"""

import argparse

from bertpipe.synthdata import generate_corpus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--size-mb", type=float, default=10.0, help="approximate total size")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--files", type=int, default=4, help="number of text files")
    args = parser.parse_args()

    paths = generate_corpus(
        args.out, target_bytes=int(args.size_mb * 2**20), seed=args.seed, n_files=args.files
    )
    total = sum(p.stat().st_size for p in paths)
    print(f"wrote {len(paths)} files, {total / 2**20:.1f} MiB total, under {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
