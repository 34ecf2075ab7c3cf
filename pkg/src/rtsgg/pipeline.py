"""Scene -> pyramid -> detections -> ranked scene graph, and dataset-level evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .damp import DetectionBatch, pyramid_tensors
from .graph_engine import candidates_from_probs, enumerate_pairs, score_and_rank
from .metrics import DEFAULT_KS, MetricReport, SceneGraphPrediction, evaluate
from .model import RelationModel, SceneInput
from .pyramid import rank_and_truncate, simulate_detections
from .scene_synth import SceneSpec, SynthConfig, render_pyramid


@dataclass(frozen=True)
class DetectorConfig:
    jitter: float = 0.02
    fp_rate: float = 0.3
    seed: int = 11
    render_seed: int = 5

    def to_dict(self) -> dict:
        return asdict(self)


PERFECT_DETECTOR = DetectorConfig(jitter=0.0, fp_rate=0.0)


def training_input(scene: SceneSpec, synth: SynthConfig, det_cfg: DetectorConfig = PERFECT_DETECTOR) -> SceneInput:
    """Noiseless detections in ground-truth order; pairs and labels come straight from the annotation."""
    pyr = render_pyramid(scene, synth, det_cfg.render_seed)
    dets = simulate_detections(scene, pyr, 0.0, 0.0, det_cfg.seed, synth.num_object_classes)
    pairs = torch.tensor([(s, o) for s, _, o in scene.relations], dtype=torch.long).reshape(-1, 2)
    labels = torch.tensor([p for _, p, _ in scene.relations], dtype=torch.long)
    return SceneInput(pyramid_tensors(pyr), DetectionBatch(dets, pyr), pairs, labels)


def scene_detections(scene: SceneSpec, synth: SynthConfig, det_cfg: DetectorConfig, k_proposals: int):
    pyr = render_pyramid(scene, synth, det_cfg.render_seed)
    dets = simulate_detections(scene, pyr, det_cfg.jitter, det_cfg.fp_rate, det_cfg.seed, synth.num_object_classes)
    return pyr, rank_and_truncate(dets, k_proposals)


@torch.no_grad()
def predict_scene(model: RelationModel, scene: SceneSpec, synth: SynthConfig, det_cfg: DetectorConfig,
                  k_proposals: int = 100, top_k: int = max(DEFAULT_KS), expand: bool = False) -> SceneGraphPrediction:
    pyr, dets = scene_detections(scene, synth, det_cfg, k_proposals)
    pairs = enumerate_pairs(len(dets))
    if not pairs:
        return SceneGraphPrediction(dets, [])
    inp = SceneInput(pyramid_tensors(pyr, model.dtype), DetectionBatch(dets, pyr), torch.tensor(pairs))
    logits, _ = model([inp])
    probs = torch.softmax(logits.double(), dim=-1).numpy()
    cands = candidates_from_probs(pairs, probs, [d.confidence for d in dets], logits.double().numpy(), expand)
    return SceneGraphPrediction(dets, score_and_rank(cands, top_k))


def evaluate_model(model: RelationModel, scenes: list[SceneSpec], synth: SynthConfig, det_cfg: DetectorConfig,
                   k_proposals: int = 100, ks=DEFAULT_KS, iou_thresh: float = 0.5,
                   expand: bool = False) -> tuple[MetricReport, list[SceneGraphPrediction]]:
    was_training = model.training
    model.eval()
    preds = [predict_scene(model, s, synth, det_cfg, k_proposals, max(ks), expand) for s in scenes]
    model.train(was_training)
    return evaluate(preds, scenes, ks, iou_thresh, model.config.num_predicates), preds
