"""Command-line entry point: synth, train, eval, dcs, ablate, gradcheck, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import checkpoint
from .config import RunConfig, load_config
from .damp import GatherVariant, gather_count
from .graph_engine import DcsResult, dcs_sweep
from .gradcheck import REGISTRY, grad_check
from .model import ModelConfig, RelationModel
from .pipeline import evaluate_model
from .scene_synth import SceneSpec, SynthConfig, generate_scene
from .trainer import train

SPLITS = ("train", "val", "test")
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


def split_of(scene_id: int) -> str:
    """80/10/10 split keyed on a hash of the scene id, stable under dataset growth."""
    bucket = int(hashlib.sha256(str(scene_id).encode()).hexdigest(), 16) % 100
    if bucket < 80:
        return "train"
    return "val" if bucket < 90 else "test"


def write_split(path: Path, synth: SynthConfig, scenes: list[SceneSpec]) -> None:
    payload = {"config": synth.to_dict(), "scenes": [s.to_dict() for s in scenes]}
    path.write_text(json.dumps(payload, sort_keys=True))


def read_split(path: Path) -> tuple[SynthConfig, list[SceneSpec]]:
    if not path.is_file():
        raise UsageError(f"dataset split not found: {path}")
    payload = json.loads(path.read_text())
    return SynthConfig.from_dict(payload["config"]), [SceneSpec.from_dict(s) for s in payload["scenes"]]


def _write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _dataset_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.dataset_dir) if cfg.dataset_dir else out / "dataset"


def _checkpoint_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else out / "model.rxpp"


def _require(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"required input missing: {path}")
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, out: Path) -> dict[str, int]:
    cfg.synth.validate()
    base = cfg.seed * 1_000_000
    scenes = [generate_scene(base + i, cfg.synth) for i in range(cfg.num_scenes)]
    target = _dataset_dir(cfg, out)
    target.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in SPLITS:
        part = [s for s in scenes if split_of(s.scene_id) == split]
        write_split(target / f"{split}.json", cfg.synth, part)
        counts[split] = len(part)
    return counts


def _train_model(cfg: RunConfig, model_cfg: ModelConfig, train_scenes, synth, eval_scenes=None,
                 epochs: int | None = None):
    torch.manual_seed(cfg.seed)
    model = RelationModel(model_cfg)
    tcfg = cfg.train if epochs is None else replace(cfg.train, epochs=epochs)
    return train(model, train_scenes, synth, tcfg, eval_scenes=eval_scenes, eval_detector=cfg.detector)


def cmd_train(cfg: RunConfig, out: Path) -> Path:
    data = _dataset_dir(cfg, out)
    _require(data / "train.json")
    _require(data / "val.json")
    synth, train_scenes = read_split(data / "train.json")
    _, val_scenes = read_split(data / "val.json")
    result = _train_model(cfg, cfg.model, train_scenes, synth, val_scenes)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = _checkpoint_path(cfg, out)
    checkpoint.save(ckpt, result.model, {"train": cfg.train.to_dict(), "synth": synth.to_dict()})
    if result.history:
        _write_csv(out / "history.csv", [{k: (round(v, 10) if isinstance(v, float) else v)
                                          for k, v in row.items() if not isinstance(v, dict)}
                                         for row in result.history])
    return ckpt


def _load_eval_inputs(cfg: RunConfig, out: Path, split: str):
    ckpt = _require(_checkpoint_path(cfg, out))
    synth, scenes = read_split(_dataset_dir(cfg, out) / f"{split}.json")
    model, _ = checkpoint.load(ckpt)
    return model, synth, scenes


def cmd_eval(cfg: RunConfig, out: Path, split: str = "test", k_proposals: int | None = None):
    model, synth, scenes = _load_eval_inputs(cfg, out, split)
    k = cfg.proposals if k_proposals is None else k_proposals
    report, preds = evaluate_model(model, scenes, synth, cfg.detector, k, cfg.ks, cfg.iou_thresh,
                                   cfg.expand_predicates)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.txt").write_text(report.to_text())
    (out / "predictions.json").write_text(json.dumps([p.to_dict() for p in preds], sort_keys=True))
    return report


def _metric(report, name: str) -> float:
    kind, k = name.split("@")
    table = {"R": report.recall, "mR": report.mean_recall, "F1": report.f1}
    if kind not in table:
        raise UsageError(f"unknown DCS metric {name!r}")
    return table[kind][int(k)]


def cmd_dcs(cfg: RunConfig, out: Path, split: str = "test") -> DcsResult:
    model, synth, scenes = _load_eval_inputs(cfg, out, split)
    kind, k = cfg.dcs_metric.split("@")
    ks = tuple(sorted(set(cfg.ks) | {int(k)}))

    def f(k_prop: int) -> float:
        report, _ = evaluate_model(model, scenes, synth, cfg.detector, k_prop, ks, cfg.iou_thresh,
                                   cfg.expand_predicates)
        return _metric(report, cfg.dcs_metric)

    result = dcs_sweep(f, cfg.grid(), cfg.eps, cfg.dcs_smooth)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dcs.csv").write_text(result.to_csv())
    (out / "x_opt.txt").write_text(f"{result.x_opt}\n")
    return result


def ablation_cells() -> list[tuple[str, str, bool, bool]]:
    """Extractor x head x global context x geometry encoding.

    The gated head has no geometry path, so its rope-off cells would duplicate
    the rope-on ones and are skipped.
    """
    cells = []
    for variant in GatherVariant:
        for head in ("carpe", "gated"):
            for ctx in (True, False):
                for rope in ((True, False) if head == "carpe" else (False,)):
                    cells.append((variant.value, head, ctx, rope))
    return cells


def cmd_ablate(cfg: RunConfig, out: Path, cells=None, epochs: int | None = None) -> list[dict]:
    data = _dataset_dir(cfg, out)
    synth, train_scenes = read_split(_require(data / "train.json"))
    _, test_scenes = read_split(_require(data / "test.json"))
    train_scenes = train_scenes[: cfg.ablate_scenes]
    epochs = cfg.ablate_epochs if epochs is None else epochs
    rows = []
    for variant, head, ctx, rope in cells or ablation_cells():
        mcfg = replace(cfg.model, variant=variant, head=head, global_context=ctx, rope=rope)
        result = _train_model(cfg, mcfg, train_scenes, synth, epochs=epochs)
        report, preds = evaluate_model(result.model, test_scenes, synth, cfg.detector, cfg.proposals,
                                       cfg.ks, cfg.iou_thresh, cfg.expand_predicates)
        n_det = sum(len(p.detections) for p in preds)
        row = {"extractor": variant, "head": head, "global_context": int(ctx), "rope": int(rope),
               "params": result.model.num_parameters(),
               "gathers_per_object": gather_count(GatherVariant(variant), 1),
               "gathers": gather_count(GatherVariant(variant), n_det),
               "final_loss": round(result.history[-1]["loss"], 6) if result.history else ""}
        row.update({k: round(v, 6) for k, v in report.row().items()})
        rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablation.csv", rows)
    return rows


def cmd_gradcheck(seeds: int = 5, ops=None) -> list[dict]:
    rows = []
    for op in ops or REGISTRY:
        for seed in range(seeds):
            err = grad_check(op, seed)
            rows.append({"op": op, "seed": seed, "max_rel_err": err, "pass": err < GRAD_TOL})
    return rows


def cmd_report(out: Path) -> list[Path]:
    """Plot-ready CSVs: metric vs proposal count and validation F1 vs epoch."""
    written = []
    dcs_path = out / "dcs.csv"
    if dcs_path.exists():
        res = DcsResult.from_csv(dcs_path.read_text())
        rows = [{"k": k, "metric": f, "slope": d} for k, f, d in zip(res.k_grid, res.values, res.slopes)]
        _write_csv(out / "curve_metric_vs_k.csv", rows)
        written.append(out / "curve_metric_vs_k.csv")
    hist_path = out / "history.csv"
    if hist_path.exists():
        with open(hist_path) as fh:
            hist = list(csv.DictReader(fh))
        cols = [c for c in ("epoch", "loss", "F1@20", "F1@50", "F1@100") if hist and c in hist[0]]
        _write_csv(out / "curve_f1_vs_epoch.csv", [{c: r[c] for c in cols} for r in hist])
        written.append(out / "curve_f1_vs_epoch.csv")
    if not written:
        raise UsageError(f"nothing to report in {out}: run train and dcs first")
    return written


# ---------------------------------------------------------------- argument handling

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file layered over the defaults")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=Path, default=Path("runs/default"))
    common.add_argument("--dataset", type=Path, help="dataset directory (default: OUT/dataset)")
    common.add_argument("--checkpoint", type=Path, help="checkpoint path (default: OUT/model.rxpp)")
    common.add_argument("--extractor", choices=[v.value for v in GatherVariant])
    common.add_argument("--head", choices=["carpe", "gated"])
    common.add_argument("--no-global-context", action="store_true")
    common.add_argument("--no-rope", action="store_true")
    common.add_argument("--proposals", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--scenes", type=int, help="number of scenes to synthesise")

    parser = argparse.ArgumentParser(prog="rtsgg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate and split a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train a relation model")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--split", choices=SPLITS, default="test")
    p = sub.add_parser("dcs", parents=[common], help="sweep the proposal budget")
    p.add_argument("--split", choices=SPLITS, default="test")
    sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation matrix")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--op", action="append", choices=sorted(REGISTRY))
    sub.add_parser("report", parents=[common], help="emit plot-ready CSVs from a run directory")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None and not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    cfg = cfg.seeded(cfg.seed if args.seed is None else args.seed)
    model = cfg.model
    if args.extractor:
        model = replace(model, variant=args.extractor)
    if args.head:
        model = replace(model, head=args.head)
    if args.no_global_context:
        model = replace(model, global_context=False)
    if args.no_rope:
        model = replace(model, rope=False)
    model.validate()
    updates = {"model": model}
    if args.proposals is not None:
        if args.proposals < 0:
            raise UsageError("--proposals must be >= 0")
        updates["proposals"] = args.proposals
    if args.epochs is not None:
        updates["train"] = replace(cfg.train, epochs=args.epochs)
    if args.scenes is not None:
        updates["num_scenes"] = args.scenes
    if args.dataset is not None:
        updates["dataset_dir"] = str(args.dataset)
    if args.checkpoint is not None:
        updates["checkpoint"] = str(args.checkpoint)
    return replace(cfg, **updates)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("RXPP_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = resolve_config(args)
        out = args.out
        if args.command == "synth":
            counts = cmd_synth(cfg, out)
            print(" ".join(f"{k}={v}" for k, v in counts.items()))
        elif args.command == "train":
            print(cmd_train(cfg, out))
        elif args.command == "eval":
            print(cmd_eval(cfg, out, args.split).to_text())
        elif args.command == "dcs":
            res = cmd_dcs(cfg, out, args.split)
            print(f"x_opt={res.x_opt} saturation_reached={res.saturation_reached}")
        elif args.command == "ablate":
            rows = cmd_ablate(cfg, out)
            print(f"wrote {len(rows)} cells to {out / 'ablation.csv'}")
        elif args.command == "gradcheck":
            rows = cmd_gradcheck(args.seeds, args.op)
            for r in rows:
                print(f"{r['op']:<24} seed={r['seed']} err={r['max_rel_err']:.3e} {'ok' if r['pass'] else 'FAIL'}")
            if not all(r["pass"] for r in rows):
                return 1
        elif args.command == "report":
            for path in cmd_report(out):
                print(path)
    except (UsageError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
