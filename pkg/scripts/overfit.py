"""Fit CARPE and the gated baseline on 200 synthetic scenes and compare.

    python3 scripts/overfit.py --seeds 0 1 --epochs 30
"""
import argparse
import time
from dataclasses import replace

import torch

from rtsgg.config import overfit_model_config, overfit_train_config
from rtsgg.model import RelationModel
from rtsgg.pipeline import PERFECT_DETECTOR, DetectorConfig, evaluate_model
from rtsgg.scene_synth import PREDICATES, SynthConfig, generate_scene
from rtsgg.trainer import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--scenes", type=int, default=200)
    args = ap.parse_args()

    synth = SynthConfig()
    scenes = [generate_scene(i, synth) for i in range(args.scenes)]
    held_out = [generate_scene(10_000 + i, synth) for i in range(50)]
    for seed in args.seeds:
        tcfg = replace(overfit_train_config(), epochs=args.epochs, seed=seed, eval_every=0)
        for head in ("carpe", "gated"):
            torch.manual_seed(seed)
            model = RelationModel(replace(overfit_model_config(), head=head))
            t0 = time.perf_counter()
            res = train(model, scenes, synth, tcfg)
            fit, _ = evaluate_model(model, scenes, synth, PERFECT_DETECTOR)
            test, _ = evaluate_model(model, held_out, synth, DetectorConfig())
            per = " ".join(f"{PREDICATES[k]}={v:.0f}" for k, v in fit.per_predicate[20].items())
            print(f"seed {seed} {head:5s} loss {res.history[-1]['loss']:.3f} train R@20 {fit.recall[20]:.1f} "
                  f"mR@20 {fit.mean_recall[20]:.1f} test F1@100 {test.f1[100]:.1f} "
                  f"({time.perf_counter() - t0:.0f}s)  {per}", flush=True)


if __name__ == "__main__":
    main()
