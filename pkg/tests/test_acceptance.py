"""End-to-end acceptance checks, one test per criterion.

Run as part of the suite or directly: ``python3 tests/test_acceptance.py``.
Each test records a PASS/FAIL line that the terminal summary prints.
"""
import csv
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.utils.flop_counter import FlopCounterMode

from rtsgg.carpe import PrototypeBank, geom_encode, score_predicates, seeded_embeddings
from rtsgg.cli import cmd_ablate, cmd_gradcheck, cmd_synth
from rtsgg.config import RunConfig, merge, overfit_model_config, overfit_train_config
from rtsgg.damp import DetectionBatch, GatherVariant, gather_count, pyramid_tensors
from rtsgg.graph_engine import dcs_sweep, enumerate_pairs
from rtsgg.metrics import f1_at_k
from rtsgg.model import ModelConfig, RelationModel, SceneInput
from rtsgg.pipeline import PERFECT_DETECTOR, DetectorConfig, evaluate_model, scene_detections
from rtsgg.scene_synth import SynthConfig, generate_scene
from rtsgg.trainer import train

SYNTH = SynthConfig()
TINY_MODEL = {"dim": 16, "d_h": 32, "d_e": 8, "heads": 2, "d_rope": 8, "rope_hidden": 8, "ctx_dim": 8, "ctx_heads": 2}


# ---- 1. gather-count ratio

def test_gather_ratio(acceptance):
    ratios = {n: Fraction(gather_count(GatherVariant.RoiAlign, n), gather_count(GatherVariant.DAMP, n))
              for n in (1, 10, 100)}
    ok = all(r == Fraction(49, 9) for r in ratios.values())
    acceptance(1, "gather-count ratio RoiAlign/DAMP", ok, f"{set(ratios.values())} ~ {float(49 / 9):.3f}")
    assert ok


# ---- 2. F1 arithmetic

def test_f1_arithmetic(acceptance):
    f = f1_at_k(33.6, 24.73)
    ok = abs(f - 28.4) <= 0.15
    acceptance(2, "F1 of reported R/mR row", ok, f"f1={f:.4f} vs 28.4 +- 0.15")
    assert ok


# ---- 3. gradient suite

def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    rows = cmd_gradcheck(seeds=5)
    elapsed = time.perf_counter() - t0
    worst = max(rows, key=lambda r: r["max_rel_err"])
    ok = all(r["pass"] for r in rows) and elapsed < 120
    acceptance(3, "finite-difference gradient suite", ok,
               f"{len(rows)} checks, worst {worst['op']}={worst['max_rel_err']:.2e}, {elapsed:.1f}s")
    assert ok


# ---- 4. EMA closed form

def test_ema_closed_form(acceptance):
    t0 = time.perf_counter()
    f64 = torch.float64
    bank = PrototypeBank(seeded_embeddings(5, 6, 0).double(), seeded_embeddings(3, 6, 1).double(), 4, 8,
                         momentum=0.999, renormalize=False).double()
    c0 = torch.tensor([[0.3, -0.2, 0.9, 0.1]], dtype=f64)
    target = F.normalize(torch.tensor([[0.5, 1.0, -0.4, 0.2]], dtype=f64), dim=-1)
    bank.ema_update(c0, torch.tensor([1]))
    for _ in range(100):
        bank.ema_update(target, torch.tensor([1]))
    got = (bank.ema[1] - target[0]).norm().item()
    want = 0.999 ** 100 * (c0[0] - target[0]).norm().item()
    rel = abs(got - want) / want
    ok = rel < 1e-9 and time.perf_counter() - t0 < 1
    acceptance(4, "EMA closed form over 100 updates", ok, f"rel err {rel:.1e}")
    assert ok


# ---- 5. DCS oracle

def _first_below(F_, tau, grid, eps):
    hits = [k for k in grid if (F_ / tau) * math.exp(-k / tau) < eps]
    return hits[0] if hits else None


def test_dcs_oracle(acceptance):
    t0 = time.perf_counter()
    grid = list(range(0, 151, 5))
    found = {}
    for F_, tau in ((24, 5), (24, 8), (10, 6)):
        res = dcs_sweep(lambda k: F_ * (1 - math.exp(-k / tau)), grid, 1e-5)
        found[(F_, tau)] = (res.x_opt, _first_below(F_, tau, grid, 1e-5))
    ladder = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3]
    xs = [dcs_sweep(lambda k: 24 * (1 - math.exp(-k / 8)), grid, e).x_opt for e in ladder]
    monotone = all(a >= b for a, b in zip(xs, xs[1:]))
    ok = all(a == b for a, b in found.values()) and monotone and time.perf_counter() - t0 < 1
    acceptance(5, "DCS closed-form fixtures and eps monotonicity", ok,
               f"{ {k: v[0] for k, v in found.items()} } ladder {xs}")
    assert ok


# ---- 6. overfit and 7. asymmetry share one trained model

@pytest.fixture(scope="module")
def overfit():
    scenes = [generate_scene(i, SYNTH) for i in range(200)]
    held_out = [generate_scene(10_000 + i, SYNTH) for i in range(50)]
    tcfg = overfit_train_config()
    out = {"t0": time.perf_counter()}
    for head in ("carpe", "gated"):
        torch.manual_seed(tcfg.seed)
        model = RelationModel(replace(overfit_model_config(), head=head))
        res = train(model, scenes, SYNTH, tcfg)
        train_rep, _ = evaluate_model(model, scenes, SYNTH, PERFECT_DETECTOR)
        test_rep, _ = evaluate_model(model, held_out, SYNTH, DetectorConfig())
        out[head] = (model, res, train_rep, test_rep)
    out["elapsed"] = time.perf_counter() - out["t0"]
    return out


def test_overfit(acceptance, overfit):
    model, res, rep, test_c = overfit["carpe"]
    _, res_g, _, test_g = overfit["gated"]
    gated_finite = all(math.isfinite(h["loss"]) for h in res_g.history)
    r20, mr20 = rep.recall[20], rep.mean_recall[20]
    diff = test_c.f1[100] - test_g.f1[100]
    ok = r20 >= 90 and mr20 >= 80 and gated_finite and overfit["elapsed"] <= 600
    acceptance(6, "overfit 200 scenes / 30 epochs", ok,
               f"R@20={r20:.1f} mR@20={mr20:.1f} gated final loss={res_g.history[-1]['loss']:.3f} "
               f"test F1@100 carpe-gated={diff:+.2f} ({overfit['elapsed']:.0f}s)")
    assert ok


def test_asymmetry(acceptance, overfit):
    model = overfit["carpe"][0]
    model.eval()
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    changed = 0
    ninth_exact = True
    for trial in range(100):
        scene = generate_scene(20_000 + trial, SYNTH)
        pyr, dets = scene_detections(scene, SYNTH, DetectorConfig(), 100)
        i, j = rng.choice(len(dets), size=2, replace=False).tolist()
        inp = SceneInput(pyramid_tensors(pyr), DetectionBatch(dets, pyr), torch.tensor([[i, j], [j, i]]))
        with torch.no_grad():
            logits, _ = model([inp])
        top_ij, top_ji = logits[0].argmax().item(), logits[1].argmax().item()
        if top_ij != top_ji or abs(logits[0].max().item() - logits[1].max().item()) > 1e-6:
            changed += 1
        bi = torch.tensor(dets[i].box, dtype=torch.float64)
        bj = torch.tensor(dets[j].box, dtype=torch.float64)
        ninth_exact &= bool(geom_encode(bi, bj)[8] == -geom_encode(bj, bi)[8])
    elapsed = time.perf_counter() - t0
    ok = changed >= 95 and ninth_exact and elapsed < 10
    acceptance(7, "subject/object swap asymmetry", ok,
               f"{changed}/100 pairs changed, ninth component negates exactly={ninth_exact}, {elapsed:.1f}s")
    assert ok


# ---- 8. pair-count scaling

def _head_flops(model: RelationModel, n: int) -> int:
    gen = torch.Generator().manual_seed(n)
    xy = torch.rand(n, 2, generator=gen) * 0.7
    boxes = torch.cat([xy, xy + 0.05 + torch.rand(n, 2, generator=gen) * 0.2], dim=1)
    nodes = torch.randn(n, model.config.dim, generator=gen)
    classes = torch.randint(0, model.config.num_object_classes, (n,), generator=gen)
    pairs = torch.tensor(enumerate_pairs(n))
    counter = FlopCounterMode(display=False)
    with counter, torch.no_grad():
        reps = model.relation_reps(nodes, boxes, classes, pairs)
        score_predicates(reps, model.bank.effective_prototypes(), model.config.tau_s)
    return counter.get_total_flops()


def test_pair_scaling(acceptance):
    t0 = time.perf_counter()
    sizes_ok = all(len(enumerate_pairs(n)) == n * (n - 1) for n in range(151))
    torch.manual_seed(0)
    model = RelationModel(ModelConfig())
    f50, f150 = _head_flops(model, 50), _head_flops(model, 150)
    ratio, quad = f150 / f50, (150 * 149) / (50 * 49)
    ok = sizes_ok and abs(ratio / quad - 1) <= 0.10 and time.perf_counter() - t0 < 30
    acceptance(8, "relation-head cost grows quadratically", ok,
               f"pair sizes ok={sizes_ok}, flop ratio {ratio:.3f} vs {quad:.3f}")
    assert ok


# ---- 9. determinism of the end-to-end pipeline

def _cli_run(cfg_path, out):
    env = {**os.environ, "RXPP_THREADS": "1"}
    for cmd in ("synth", "train", "eval", "dcs"):
        subprocess.run([sys.executable, "-m", "rtsgg.cli", cmd, "--config", str(cfg_path), "--seed", "5",
                        "--out", str(out)], check=True, env=env, capture_output=True)


def test_determinism(acceptance, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"num_scenes": 60, "model": TINY_MODEL,
                               "train": {"epochs": 2, "batch_size": 2, "accumulation": 2}}))
    t0 = time.perf_counter()
    _cli_run(cfg, tmp_path / "a")
    _cli_run(cfg, tmp_path / "b")
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("model.rxpp", "metrics.csv", "x_opt.txt")}
    elapsed = time.perf_counter() - t0
    ok = all(same.values()) and elapsed <= 1200
    acceptance(9, "two seeded end-to-end runs are byte-identical", ok, f"{same} ({elapsed:.0f}s)")
    assert ok


# ---- 10. ablation structure

def test_ablation_structure(acceptance, tmp_path):
    cfg = merge(RunConfig(), {"num_scenes": 60, "model": TINY_MODEL, "ablate_epochs": 1, "ablate_scenes": 8,
                              "train": {"batch_size": 4, "accumulation": 1}}).seeded(2)
    cmd_synth(cfg, tmp_path)
    cmd_ablate(cfg, tmp_path)
    t0 = time.perf_counter()
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    key = lambda r: (r["extractor"], r["head"], r["rope"])
    on = {key(r): r for r in rows if r["global_context"] == "1"}
    off = {key(r): r for r in rows if r["global_context"] == "0"}
    params_ok = set(on) == set(off) and all(int(off[k]["params"]) < int(on[k]["params"]) for k in on)
    damp = {(r["head"], r["global_context"], r["rope"]): int(r["gathers"]) for r in rows if r["extractor"] == "damp"}
    roi = {(r["head"], r["global_context"], r["rope"]): int(r["gathers"]) for r in rows if r["extractor"] == "roialign"}
    gathers_ok = set(damp) == set(roi) and all(Fraction(roi[k], damp[k]) == Fraction(49, 9) for k in damp)
    elapsed = time.perf_counter() - t0
    ok = len(rows) == 30 and params_ok and gathers_ok and elapsed < 1
    acceptance(10, "ablation matrix structure", ok,
               f"{len(rows)} cells, fewer params without context={params_ok}, roi/damp gathers=49/9 {gathers_ok}, "
               f"check {elapsed * 1e3:.1f}ms")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
