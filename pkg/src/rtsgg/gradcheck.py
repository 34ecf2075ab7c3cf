"""Central finite-difference checks of every differentiable operation, in float64."""
from __future__ import annotations

from typing import Callable

import torch

from .carpe import (
    GatedFusion,
    GeomRoPE,
    PrototypeCrossAttention,
    RelationComposer,
    SwiGLU,
    geom_encode,
    score_predicates,
)
from .damp import DampExtractor, DetectionBatch
from .global_context import AifiEncoder, ContextFusion
from .pyramid import Detection, FeaturePyramid, assign_levels, snap_anchor
from .trainer import logit_adjusted_focal_loss

STEP = 1e-5
FLOOR = 1e-8


def _randomize(module: torch.nn.Module, gen: torch.Generator) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)


def _boxes(n: int, gen: torch.Generator) -> torch.Tensor:
    xy = torch.rand(n, 2, generator=gen, dtype=torch.float64) * 0.6
    wh = torch.rand(n, 2, generator=gen, dtype=torch.float64) * 0.3 + 0.05
    return torch.cat([xy, xy + wh], dim=1)


def _case_swiglu(gen):
    m = SwiGLU(6, 10, 8).double()
    _randomize(m, gen)
    x = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    return list(m.parameters()), lambda: m(x)


def _case_geom_rope(gen):
    m = GeomRoPE(8, 6).double()
    _randomize(m, gen)
    b = _boxes(3, gen)
    enc = geom_encode(b, b.flip(0))
    return list(m.parameters()), lambda: m(enc)


def _case_cross_attend(gen):
    rope = GeomRoPE(6, 5).double()
    att = PrototypeCrossAttention(8, 2, 6, 5).double()
    _randomize(rope, gen)
    _randomize(att, gen)
    x = torch.randn(3, 8, generator=gen, dtype=torch.float64)
    bank = torch.randn(5, 8, generator=gen, dtype=torch.float64)
    b = _boxes(3, gen)
    enc = geom_encode(b, b.roll(1, 0))
    return list(att.parameters()) + list(rope.parameters()), lambda: att(x, bank, rope(enc))


def _case_compose(gen):
    m = RelationComposer(8).double()
    _randomize(m, gen)
    s = torch.randn(4, 8, generator=gen, dtype=torch.float64)
    o = torch.randn(4, 8, generator=gen, dtype=torch.float64)
    return list(m.parameters()), lambda: m(s, o)


def _case_score(gen):
    r = torch.randn(4, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    protos = torch.randn(5, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    return [r, protos], lambda: score_predicates(r, protos, 0.5)


def _case_gated(gen):
    m = GatedFusion(6, 8).double()
    _randomize(m, gen)
    t = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    v = torch.randn(4, 8, generator=gen, dtype=torch.float64)
    return list(m.parameters()), lambda: m(t, v)


def _case_aifi(gen):
    m = AifiEncoder(5, 8, 2).double()
    _randomize(m, gen)
    p5 = torch.randn(3, 3, 5, generator=gen, dtype=torch.float64)
    return list(m.parameters()), lambda: m(p5)


def _case_fuse_context(gen):
    m = ContextFusion(8, 6).double()
    _randomize(m, gen)
    nodes = torch.randn(4, 8, generator=gen, dtype=torch.float64)
    g = torch.randn(6, generator=gen, dtype=torch.float64)
    return list(m.parameters()), lambda: m(nodes, g)


def _case_damp(gen):
    channels = (3, 4, 5)
    sizes = {"P3": (8, 8), "P4": (4, 4), "P5": (2, 2)}
    levels = {lv: torch.randn(*sizes[lv], c, generator=gen, dtype=torch.float64).numpy()
              for lv, c in zip(sizes, channels)}
    pyr = FeaturePyramid(levels, (64, 64))
    boxes = [tuple(b) for b in _boxes(4, gen).tolist()]
    lvls = assign_levels(boxes)
    dets = [Detection(b, 0, 0.9, lv, snap_anchor(b, lv, pyr)) for b, lv in zip(boxes, lvls)]
    m = DampExtractor("damp", channels, 8).double()
    _randomize(m, gen)
    grids = {lv: torch.as_tensor(g) for lv, g in levels.items()}
    batch = DetectionBatch(dets, pyr)
    return list(m.parameters()), lambda: m(grids, batch)


def _case_loss(gen):
    logits = torch.randn(6, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 5, (6,), generator=gen)
    priors = torch.rand(5, generator=gen, dtype=torch.float64) + 0.1
    priors = priors / priors.sum()
    return [logits], lambda: logit_adjusted_focal_loss(logits, labels, priors, 1.0, 2.0)


REGISTRY: dict[str, Callable] = {
    "swiglu_lift": _case_swiglu,
    "geom_rope": _case_geom_rope,
    "cross_attend": _case_cross_attend,
    "compose_relation": _case_compose,
    "score_predicates": _case_score,
    "gated_fusion_baseline": _case_gated,
    "aifi_encode": _case_aifi,
    "fuse_context": _case_fuse_context,
    "damp_projections": _case_damp,
    "focal_loss": _case_loss,
}


def max_relative_error(params: list[torch.Tensor], fn: Callable[[], torch.Tensor], gen: torch.Generator,
                       step: float = STEP) -> float:
    """Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over every parameter entry."""
    out = fn()
    weights = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def objective() -> torch.Tensor:
        return (fn() * weights).sum()

    analytic = torch.autograd.grad(objective(), params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = objective().item()
                flat[i] = orig - step
                down = objective().item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                a = gflat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), FLOOR)
                worst = max(worst, err)
    return worst


def grad_check(op: str, seed: int = 0) -> float:
    if op not in REGISTRY:
        raise KeyError(f"no differentiable op registered as {op!r}")
    gen = torch.Generator().manual_seed(seed)
    params, fn = REGISTRY[op](gen)
    for p in params:
        p.requires_grad_(True)
    return max_relative_error(params, fn, gen)
