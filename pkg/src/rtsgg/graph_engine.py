"""Candidate pairs, triplet ranking, and dynamic candidate selection."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .pyramid import Detection, rank_and_truncate


@dataclass(frozen=True)
class RelationCandidate:
    subject_index: int
    object_index: int
    predicate: int
    theta_subj: float
    theta_obj: float
    theta_pred: float
    logits: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.subject_index == self.object_index:
            raise ValueError("subject and object must differ")

    @property
    def theta_rel(self) -> float:
        return self.theta_subj * self.theta_pred * self.theta_obj

    def to_dict(self) -> dict:
        return {
            "subject_index": self.subject_index,
            "object_index": self.object_index,
            "predicate": self.predicate,
            "theta_subj": self.theta_subj,
            "theta_obj": self.theta_obj,
            "theta_pred": self.theta_pred,
            "theta_rel": self.theta_rel,
        }


def enumerate_pairs(n: int) -> list[tuple[int, int]]:
    if n < 0:
        raise ValueError("n must be >= 0")
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def candidates_from_probs(pairs, probs: np.ndarray, confidences, logits: np.ndarray | None = None,
                          expand: bool = False) -> list[RelationCandidate]:
    """One candidate per pair carrying its top predicate, or one per (pair, predicate) when expanding."""
    probs = np.asarray(probs, dtype=np.float64)
    out = []
    for p, (i, j) in enumerate(pairs):
        row = probs[p]
        lrow = tuple(float(v) for v in logits[p]) if logits is not None else ()
        preds = range(len(row)) if expand else [int(np.argmax(row))]
        for k in preds:
            out.append(RelationCandidate(i, j, k, float(confidences[i]), float(confidences[j]), float(row[k]),
                                         lrow, tuple(float(v) for v in row)))
    return out


def _rank_key(c: RelationCandidate):
    return (-c.theta_rel, c.subject_index, c.object_index, c.predicate)


def score_and_rank(candidates: Sequence[RelationCandidate], k: int) -> list[RelationCandidate]:
    if k < 0:
        raise ValueError("K must be >= 0")
    return sorted(candidates, key=_rank_key)[:k]


@dataclass
class DcsResult:
    k_grid: list[int]
    values: list[float]
    slopes: list[float]
    eps: float
    x_opt: int
    saturation_reached: bool = True  # False when no grid point has |f'| < eps
    smoothed: bool = False
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# x_opt={self.x_opt}\n# eps={self.eps!r}\n# saturation_reached={str(self.saturation_reached).lower()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "f", "f_prime"])
        for k, f, d in zip(self.k_grid, self.values, self.slopes):
            w.writerow([k, repr(float(f)), repr(float(d))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DcsResult":
        meta, rows = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key] = val
            elif line and not line.startswith("k,"):
                k, f, d = line.split(",")
                rows.append((int(k), float(f), float(d)))
        return cls(
            k_grid=[r[0] for r in rows], values=[r[1] for r in rows], slopes=[r[2] for r in rows],
            eps=float(meta["eps"]), x_opt=int(meta["x_opt"]), saturation_reached=meta.get("saturation_reached") == "true",
        )


def moving_average3(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    out = v.copy()
    if len(v) >= 3:
        out[1:-1] = (v[:-2] + v[1:-1] + v[2:]) / 3
        out[0] = (v[0] + v[1]) / 2
        out[-1] = (v[-2] + v[-1]) / 2
    return out


def dcs_sweep(evaluate: Callable[[int], float], k_grid: Sequence[int], eps: float = 1e-5,
              smooth: bool = False) -> DcsResult:
    """First grid point where the metric-vs-budget slope falls below eps."""
    grid = np.asarray(list(k_grid))
    if len(grid) < 3:
        raise ValueError("k_grid needs at least 3 points")
    steps = np.diff(grid)
    if (steps <= 0).any() or (steps != steps[0]).any():
        raise ValueError("k_grid must be strictly increasing with a uniform stride")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    values = np.array([float(evaluate(int(k))) for k in grid])
    curve = moving_average3(values) if smooth else values
    # central differences inside, one-sided at the ends
    slopes = np.gradient(curve, grid.astype(np.float64))
    below = np.flatnonzero(np.abs(slopes) < eps)
    if below.size:
        x_opt, reached = int(grid[below[0]]), True
    else:
        x_opt, reached = int(grid[-1]), False
    return DcsResult([int(k) for k in grid], values.tolist(), slopes.tolist(), eps, x_opt, reached, smooth)


def apply_dcs(detections: list[Detection], x_opt: int) -> list[Detection]:
    if x_opt < 0:
        raise ValueError("x_opt must be >= 0")
    return rank_and_truncate(detections, x_opt)
