"""Print per-cell tables from a `splitinfer simulate` output directory.

Usage: python3 scripts/summarize.py sim_out [--csv]
"""

import argparse
import json
import sys
from pathlib import Path

import pandas as pd


def binom_se(p, n):
    return (p * (1 - p) / n) ** 0.5 if n else float("nan")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("dir", type=Path)
    ap.add_argument("--csv", action="store_true", help="write the table as CSV to stdout")
    args = ap.parse_args()

    df = pd.read_csv(args.dir / "results.csv")
    for col in ("covered", "reject"):
        df[col] = df[col].map({True: 1.0, False: 0.0, "true": 1.0, "false": 0.0})
    keys = ["cell", "dgp", "method", "n", "k", "m"]
    g = df.groupby(keys, sort=True)
    table = g.agg(
        reps=("iteration", "size"),
        mean_estimate=("estimate", "mean"),
        sd_estimate=("estimate", "std"),
        mean_se=("se", "mean"),
        coverage=("covered", "mean"),
        rejection=("reject", "mean"),
        median_p=("p_value", "median"),
    ).reset_index()
    table["coverage_se"] = [binom_se(p, n) for p, n in zip(table["coverage"], table["reps"])]
    table["rejection_se"] = [binom_se(p, n) for p, n in zip(table["rejection"], table["reps"])]

    summary = json.loads((args.dir / "summary.json").read_text())
    if summary.get("failures"):
        print(f"{len(summary['failures'])} failed iterations (rerun to retry):", file=sys.stderr)
        for f in summary["failures"]:
            print(f"  cell {f['cell']} iteration {f['iteration']}: {f['error']}", file=sys.stderr)

    if args.csv:
        print(table.to_csv(index=False), end="")
    else:
        print(table.to_string(index=False, float_format="%.4f"))


if __name__ == "__main__":
    main()
