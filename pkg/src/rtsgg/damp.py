"""Detection-anchored multi-scale pooling, its ablated variants, and a RoI-Align baseline.

All gathers read from (H, W, C) level grids. Out-of-range neighbours are
handled by clamping indices to the grid, so the Gaussian weights of every
window still sum to one.
"""
from __future__ import annotations

import enum

import torch
from torch import nn

from .pyramid import LEVELS, Detection, FeaturePyramid, snap_anchor


class GatherVariant(str, enum.Enum):
    RoiAlign = "roialign"
    DA = "da"
    DAP = "dap"
    DAM = "dam"
    DAMP = "damp"


_GATHERS_PER_OBJECT = {
    GatherVariant.DA: 1,
    GatherVariant.DAP: 9,
    GatherVariant.DAM: 3,
    GatherVariant.DAMP: 27,
    GatherVariant.RoiAlign: 7 * 7 * 3,
}


def gather_count(variant: GatherVariant | str, n_objects: int) -> int:
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    return _GATHERS_PER_OBJECT[GatherVariant(variant)] * n_objects


def gaussian_window(radius: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Offsets (M, 2) and normalised weights (M,) of a (2r+1)^2 window."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    span = torch.arange(-radius, radius + 1)
    dr, dc = torch.meshgrid(span, span, indexing="ij")
    offsets = torch.stack([dr.reshape(-1), dc.reshape(-1)], dim=1)
    w = torch.exp(-(offsets.to(torch.float64) ** 2).sum(1))
    return offsets, (w / w.sum()).to(dtype)


def gather_gaussian(grid: torch.Tensor, anchors: torch.Tensor, radius: int = 1) -> torch.Tensor:
    """Gaussian-weighted neighbourhood pooling.

    grid: (H, W, C); anchors: (N, 2) integer (row, col). Returns (N, C).
    """
    h, w, _ = grid.shape
    anchors = torch.as_tensor(anchors, dtype=torch.long).reshape(-1, 2)
    if anchors.numel() and (
        anchors[:, 0].min() < 0 or anchors[:, 0].max() >= h or anchors[:, 1].min() < 0 or anchors[:, 1].max() >= w
    ):
        raise ValueError("anchor out of bounds")
    offsets, weights = gaussian_window(radius, grid.dtype)
    rows = (anchors[:, None, 0] + offsets[None, :, 0]).clamp(0, h - 1)
    cols = (anchors[:, None, 1] + offsets[None, :, 1]).clamp(0, w - 1)
    feats = grid[rows, cols]  # (N, M, C)
    return (feats * weights[None, :, None]).sum(1)


def _bilinear(grid: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Bilinear samples at continuous cell-index coordinates, clamped to the grid."""
    h, w, _ = grid.shape
    ys = ys.clamp(0, h - 1)
    xs = xs.clamp(0, w - 1)
    y0 = ys.floor().long().clamp(max=h - 1)
    x0 = xs.floor().long().clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    wy = (ys - y0.to(ys.dtype)).unsqueeze(-1)
    wx = (xs - x0.to(xs.dtype)).unsqueeze(-1)
    return (
        grid[y0, x0] * (1 - wy) * (1 - wx)
        + grid[y0, x1] * (1 - wy) * wx
        + grid[y1, x0] * wy * (1 - wx)
        + grid[y1, x1] * wy * wx
    )


def roi_align_level(grid: torch.Tensor, boxes: torch.Tensor, samples: int = 7) -> torch.Tensor:
    """Average of a samples x samples bilinear grid inside each box. boxes: (N, 4) normalised xyxy."""
    if samples < 1:
        raise ValueError("grid must be >= 1")
    h, w, _ = grid.shape
    boxes = boxes.to(grid.dtype)
    frac = (torch.arange(samples, dtype=grid.dtype) + 0.5) / samples
    # cell centres sit at integer coordinates after the half-cell shift
    xs = (boxes[:, 0:1] + frac[None] * (boxes[:, 2:3] - boxes[:, 0:1])) * w - 0.5
    ys = (boxes[:, 1:2] + frac[None] * (boxes[:, 3:4] - boxes[:, 1:2])) * h - 0.5
    yy = ys[:, :, None].expand(-1, samples, samples)
    xx = xs[:, None, :].expand(-1, samples, samples)
    vals = _bilinear(grid, yy, xx)  # (N, s, s, C)
    return vals.mean(dim=(1, 2))


def _check_boxes(boxes: torch.Tensor) -> None:
    if ((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])).any():
        raise ValueError("degenerate box")


def roi_align_baseline(grids: dict, boxes: torch.Tensor, samples: int = 7) -> torch.Tensor:
    boxes = torch.as_tensor(boxes).reshape(-1, 4)
    _check_boxes(boxes)
    return torch.cat([roi_align_level(grids[lv], boxes, samples) for lv in LEVELS], dim=-1)


def pyramid_tensors(pyramid: FeaturePyramid, dtype=torch.float32) -> dict:
    return {lv: torch.as_tensor(pyramid.levels[lv], dtype=dtype) for lv in LEVELS}


class DetectionBatch:
    """Tensor view of a detection list for one scene."""

    def __init__(self, detections: list[Detection], pyramid: FeaturePyramid):
        n = len(detections)
        self.n = n
        self.boxes = torch.tensor([d.box for d in detections], dtype=torch.float64).reshape(n, 4)
        self.source_level = torch.tensor([LEVELS.index(d.source_level) for d in detections], dtype=torch.long)
        self.source_anchor = torch.tensor([d.grid_index for d in detections], dtype=torch.long).reshape(n, 2)
        self.level_anchors = {
            lv: torch.tensor([snap_anchor(d.box, lv, pyramid) for d in detections], dtype=torch.long).reshape(n, 2)
            for lv in LEVELS
        }
        self.confidence = torch.tensor([d.confidence for d in detections], dtype=torch.float64)
        self.classes = torch.tensor([d.class_id for d in detections], dtype=torch.long)


class DampExtractor(nn.Module):
    """Per-detection visual feature in R^D for one of the five gather variants."""

    def __init__(self, variant: GatherVariant | str, channels: tuple[int, int, int], dim: int, roi_samples: int = 7):
        super().__init__()
        self.variant = GatherVariant(variant)
        self.channels = tuple(channels)
        self.dim = dim
        self.roi_samples = roi_samples
        if self.variant is GatherVariant.RoiAlign:
            self.roi_proj = nn.Linear(sum(channels), dim)
        else:
            self.proj = nn.ModuleDict({lv: nn.Linear(c, dim) for lv, c in zip(LEVELS, channels)})
        if self.variant in (GatherVariant.DAM, GatherVariant.DAMP):
            self.norm = nn.LayerNorm(3 * dim)
            self.fuse = nn.Linear(3 * dim, dim)

    def _check(self, grids: dict) -> None:
        got = tuple(grids[lv].shape[-1] for lv in LEVELS)
        if got != self.channels:
            raise ValueError(f"pyramid channels {got} do not match extractor channels {self.channels}")

    def fuse_levels(self, gathered: dict) -> torch.Tensor:
        cat = torch.cat([self.proj[lv](gathered[lv]) for lv in LEVELS], dim=-1)
        return self.fuse(self.norm(cat))

    def forward(self, grids: dict, dets: DetectionBatch) -> torch.Tensor:
        self._check(grids)
        v = self.variant
        if v is GatherVariant.RoiAlign:
            return self.roi_proj(roi_align_baseline(grids, dets.boxes, self.roi_samples))
        if v in (GatherVariant.DA, GatherVariant.DAP):
            radius = 0 if v is GatherVariant.DA else 1
            out = grids[LEVELS[0]].new_zeros(dets.n, self.dim)
            for li, lv in enumerate(LEVELS):
                idx = (dets.source_level == li).nonzero().reshape(-1)
                if idx.numel():
                    feats = self.proj[lv](gather_gaussian(grids[lv], dets.source_anchor[idx], radius))
                    out = out.index_put((idx,), feats)
            return out
        radius = 0 if v is GatherVariant.DAM else 1
        gathered = {lv: gather_gaussian(grids[lv], dets.level_anchors[lv], radius) for lv in LEVELS}
        return self.fuse_levels(gathered)

    def gathers(self, n_objects: int) -> int:
        return gather_count(self.variant, n_objects)

