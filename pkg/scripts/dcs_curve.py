"""Synthesize, train, then sweep the proposal budget and print the metric curve.

    python3 scripts/dcs_curve.py --out runs/dcs --seed 0
"""
import argparse
import sys
from pathlib import Path

from rtsgg.cli import main as cli_main
from rtsgg.graph_engine import DcsResult


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/dcs"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", type=Path)
    args = ap.parse_args()

    common = ["--seed", str(args.seed), "--out", str(args.out)]
    if args.config:
        common += ["--config", str(args.config)]
    for cmd in ("synth", "train", "dcs"):
        if cli_main([cmd, *common]):
            sys.exit(f"{cmd} failed")
    res = DcsResult.from_csv((args.out / "dcs.csv").read_text())
    top = max(res.values) or 1.0
    for k, f, d in zip(res.k_grid, res.values, res.slopes):
        mark = " <- x_opt" if k == res.x_opt else ""
        print(f"{k:4d} {f:7.3f} {d:+.2e} {'#' * int(40 * f / top)}{mark}")
    print(f"x_opt={res.x_opt} saturation_reached={res.saturation_reached}")


if __name__ == "__main__":
    main()
