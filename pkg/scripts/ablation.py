"""Run the extractor x head x context x geometry ablation matrix and print it.

    python3 scripts/ablation.py --out runs/ablation --epochs 3 --scenes 60
"""
import argparse
from dataclasses import replace
from pathlib import Path

from rtsgg.cli import cmd_ablate, cmd_synth
from rtsgg.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--scenes", type=int, help="training scenes per cell")
    args = ap.parse_args()

    cfg = load_config(args.config).seeded(args.seed)
    if args.scenes:
        cfg = replace(cfg, ablate_scenes=args.scenes)
    if not (args.out / "dataset" / "train.json").is_file():
        cmd_synth(cfg, args.out)
    rows = cmd_ablate(cfg, args.out, epochs=args.epochs)
    print(f"{'extractor':9s} {'head':5s} ctx rope {'params':>8s} {'gathers':>8s} {'R@20':>6s} {'mR@20':>6s} {'F1@100':>6s}")
    for r in rows:
        print(f"{r['extractor']:9s} {r['head']:5s} {r['global_context']:3d} {r['rope']:4d} {r['params']:8d} "
              f"{r['gathers']:8d} {r['R@20']:6.1f} {r['mR@20']:6.1f} {r['F1@100']:6.1f}")


if __name__ == "__main__":
    main()
