"""Regenerate the bundled banana-like classification CSV."""

import argparse
from pathlib import Path

from vish.datasets import make_banana, write_csv

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "vish" / "data" / "banana.csv"

if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--n", type=int, default=400)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=str(DEFAULT_OUT))
    args = parser.parse_args()
    X, y = make_banana(args.n, args.seed)
    write_csv(args.out, ["x1", "x2", "label"], [X[:, 0], X[:, 1], y.astype(int)])
    print(f"wrote {args.n} rows to {args.out}")
