"""Triplet matching, Recall@K, meanRecall@K and F1@K."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .graph_engine import RelationCandidate
from .pyramid import Detection
from .scene_synth import PREDICATES, SceneSpec, box_iou

SceneGraphAnnotation = SceneSpec
DEFAULT_KS = (20, 50, 100)


@dataclass
class SceneGraphPrediction:
    detections: list[Detection]
    candidates: list[RelationCandidate]  # ranked by theta_rel, descending

    def to_dict(self) -> dict:
        return {
            "detections": [d.to_dict() for d in self.detections],
            "relations": [c.to_dict() for c in self.candidates],
        }


def match_triplets(pred: SceneGraphPrediction, gt: SceneGraphAnnotation, iou_thresh: float = 0.5,
                   k: int = 100) -> set[int]:
    """Greedy one-to-one matching of the top-k predicted triplets, in rank order."""
    if not 0 < iou_thresh <= 1:
        raise ValueError("iou_thresh must lie in (0, 1]")
    if k < 0:
        raise ValueError("K must be >= 0")
    matched: set[int] = set()
    gt_objs = gt.objects
    for cand in pred.candidates[:k]:
        ds, do = pred.detections[cand.subject_index], pred.detections[cand.object_index]
        for gi, (s, p, o) in enumerate(gt.relations):
            if gi in matched or p != cand.predicate:
                continue
            (cs, bs), (co, bo) = gt_objs[s], gt_objs[o]
            if cs != ds.class_id or co != do.class_id:
                continue
            if box_iou(ds.box, bs) >= iou_thresh and box_iou(do.box, bo) >= iou_thresh:
                matched.add(gi)
                break
    return matched


def recall_at_k(matches: list[set[int]], gts: list[SceneGraphAnnotation]) -> float:
    total = sum(len(g.relations) for g in gts)
    if total == 0:
        raise ValueError("recall is undefined with zero ground-truth triplets")
    return 100.0 * sum(len(m) for m in matches) / total


def per_predicate_recall(matches: list[set[int]], gts: list[SceneGraphAnnotation],
                         num_predicates: int = len(PREDICATES)) -> dict[int, float]:
    hit = [0] * num_predicates
    cnt = [0] * num_predicates
    for m, g in zip(matches, gts):
        for gi, (_, p, _) in enumerate(g.relations):
            cnt[p] += 1
            hit[p] += gi in m
    return {p: 100.0 * hit[p] / cnt[p] for p in range(num_predicates) if cnt[p]}


def mean_recall_at_k(matches: list[set[int]], gts: list[SceneGraphAnnotation],
                     num_predicates: int = len(PREDICATES)) -> float:
    table = per_predicate_recall(matches, gts, num_predicates)
    if not table:
        raise ValueError("mean recall is undefined with zero ground-truth triplets")
    return sum(table.values()) / len(table)


def f1_at_k(r: float, mr: float) -> float:
    if r < 0 or mr < 0:
        raise ValueError("recalls must be >= 0")
    if r == 0 and mr == 0:
        return 0.0
    return 2 * r * mr / (r + mr)


@dataclass
class MetricReport:
    recall: dict[int, float]
    mean_recall: dict[int, float]
    f1: dict[int, float]
    per_predicate: dict[int, dict[int, float]]
    num_gt: int
    extra: dict = field(default_factory=dict)

    @property
    def ks(self) -> list[int]:
        return sorted(self.recall)

    @property
    def mean_f1(self) -> float:
        """Mean of the per-K F1 values."""
        return sum(self.f1.values()) / len(self.f1)

    @property
    def f1_of_means(self) -> float:
        r = sum(self.recall.values()) / len(self.recall)
        mr = sum(self.mean_recall.values()) / len(self.mean_recall)
        return f1_at_k(r, mr)

    def row(self) -> dict:
        out = {}
        for k in self.ks:
            out[f"R@{k}"] = self.recall[k]
            out[f"mR@{k}"] = self.mean_recall[k]
            out[f"F1@{k}"] = self.f1[k]
        out["F1_mean_of_K"] = self.mean_f1
        out["F1_of_means"] = self.f1_of_means
        out["num_gt"] = self.num_gt
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, val in self.row().items():
            w.writerow([key, repr(float(val)) if isinstance(val, float) else val])
        for k in self.ks:
            for p, v in sorted(self.per_predicate[k].items()):
                w.writerow([f"recall@{k}/{PREDICATES[p]}", repr(float(v))])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'K':>5} {'R@K':>8} {'mR@K':>8} {'F1@K':>8}"]
        for k in self.ks:
            lines.append(f"{k:>5} {self.recall[k]:8.2f} {self.mean_recall[k]:8.2f} {self.f1[k]:8.2f}")
        lines.append(f"mean F1@K {self.mean_f1:.2f}   F1 of mean R/mR {self.f1_of_means:.2f}   gt triplets {self.num_gt}")
        return "\n".join(lines)


def evaluate(preds: list[SceneGraphPrediction], gts: list[SceneGraphAnnotation], ks=DEFAULT_KS,
             iou_thresh: float = 0.5, num_predicates: int = len(PREDICATES)) -> MetricReport:
    recall, mrecall, f1, per_pred = {}, {}, {}, {}
    for k in ks:
        matches = [match_triplets(p, g, iou_thresh, k) for p, g in zip(preds, gts)]
        recall[k] = recall_at_k(matches, gts)
        mrecall[k] = mean_recall_at_k(matches, gts, num_predicates)
        f1[k] = f1_at_k(recall[k], mrecall[k])
        per_pred[k] = per_predicate_recall(matches, gts, num_predicates)
    return MetricReport(recall, mrecall, f1, per_pred, sum(len(g.relations) for g in gts))
