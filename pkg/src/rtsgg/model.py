"""Relation model: pooled detection features -> optional global context -> relation head."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .carpe import (
    GatedFusion,
    GeomRoPE,
    PrototypeBank,
    PrototypeCrossAttention,
    RelationComposer,
    geom_encode,
    load_embeddings,
    score_predicates,
    seeded_embeddings,
)
from .damp import DampExtractor, DetectionBatch, GatherVariant
from .global_context import GlobalContext
from .scene_synth import PREDICATES


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "damp"
    head: str = "carpe"  # carpe | gated
    global_context: bool = True
    rope: bool = True
    num_object_classes: int = 10
    num_predicates: int = len(PREDICATES)
    channels: tuple[int, int, int] = (16, 24, 32)
    d_e: int = 32
    d_h: int = 512
    dim: int = 64
    heads: int = 4
    d_rope: int = 32
    rope_hidden: int = 32
    rope_init_scale: float = 15.0
    ctx_dim: int = 32
    ctx_heads: int = 4
    tau_s: float = 0.1
    momentum: float = 0.999
    ema_renormalize: bool = True
    embed_seed: int = 7
    embedding_file: str | None = None

    def validate(self) -> None:
        GatherVariant(self.variant)
        if self.head not in ("carpe", "gated"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.dim % self.heads or self.ctx_dim % self.ctx_heads:
            raise ValueError("model dims must be divisible by head counts")
        if self.tau_s <= 0:
            raise ValueError("tau_s must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def object_class_names(n: int) -> list[str]:
    return [f"obj{i}" for i in range(n)]


class SceneInput:
    """Everything the model needs for one scene: level grids, detections and candidate pairs."""

    def __init__(self, grids: dict, dets: DetectionBatch, pairs: torch.Tensor, labels: torch.Tensor | None = None):
        self.grids = grids
        self.dets = dets
        self.pairs = pairs.reshape(-1, 2)
        self.labels = labels

    def to(self, dtype) -> "SceneInput":
        return SceneInput({k: v.to(dtype) for k, v in self.grids.items()}, self.dets, self.pairs, self.labels)


class RelationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.extractor = DampExtractor(c.variant, c.channels, c.dim)
        self.context = GlobalContext(c.channels[2], c.dim, c.ctx_dim, c.ctx_heads) if c.global_context else None
        if c.embedding_file:
            obj_e = load_embeddings(c.embedding_file, object_class_names(c.num_object_classes), c.d_e, c.embed_seed)
            pred_e = load_embeddings(c.embedding_file, list(PREDICATES), c.d_e, c.embed_seed + 1)
        else:
            obj_e = seeded_embeddings(c.num_object_classes, c.d_e, c.embed_seed)
            pred_e = seeded_embeddings(c.num_predicates, c.d_e, c.embed_seed + 1)
        self.bank = PrototypeBank(obj_e, pred_e, c.dim, c.d_h, c.momentum, c.ema_renormalize)
        if c.head == "carpe":
            self.attention = PrototypeCrossAttention(c.dim, c.heads, c.d_rope, c.num_object_classes)
            self.rope = GeomRoPE(c.d_rope, c.rope_hidden, init_scale=c.rope_init_scale) if c.rope else None
        else:
            self.gate_subject = GatedFusion(c.d_e, c.dim)
            self.gate_object = GatedFusion(c.d_e, c.dim)
        self.composer = RelationComposer(c.dim)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def node_features(self, scenes: list[SceneInput]) -> list[torch.Tensor]:
        nodes = [self.extractor(s.grids, s.dets) for s in scenes]
        if self.context is not None:
            g = self.context.scene_vectors(torch.stack([s.grids["P5"] for s in scenes]))
            nodes = [self.context.fusion(n, g[i]) for i, n in enumerate(nodes)]
        return nodes

    def relation_reps(self, nodes: torch.Tensor, boxes: torch.Tensor, classes: torch.Tensor,
                      pairs: torch.Tensor) -> torch.Tensor:
        s, o = pairs[:, 0], pairs[:, 1]
        if self.config.head == "carpe":
            bank = self.bank.object_prototypes()
            geo_s = geo_o = None
            if self.rope is not None:
                geo_s = self.rope(geom_encode(boxes[s], boxes[o]))
                geo_o = self.rope(geom_encode(boxes[o], boxes[s]))
            s_hat = self.attention(nodes[s], bank, geo_s)
            o_hat = self.attention(nodes[o], bank, geo_o)
        else:
            t = self.bank.obj_embed[classes]
            s_hat = self.gate_subject(t[s], nodes[s])
            o_hat = self.gate_object(t[o], nodes[o])
        return self.composer(s_hat, o_hat)

    def forward(self, scenes: list[SceneInput]) -> tuple[torch.Tensor, torch.Tensor]:
        """Predicate logits and unit relation vectors for the concatenated pairs of all scenes."""
        dtype = self.dtype
        nodes = self.node_features(scenes)
        offset = 0
        all_nodes, all_boxes, all_classes, all_pairs = [], [], [], []
        for sc, n in zip(scenes, nodes):
            all_nodes.append(n)
            all_boxes.append(sc.dets.boxes.to(dtype))
            all_classes.append(sc.dets.classes)
            all_pairs.append(sc.pairs + offset)
            offset += sc.dets.n
        pairs = torch.cat(all_pairs)
        if pairs.numel() == 0:
            empty = torch.zeros(0, self.config.num_predicates, dtype=dtype)
            return empty, torch.zeros(0, self.config.dim, dtype=dtype)
        reps = self.relation_reps(torch.cat(all_nodes), torch.cat(all_boxes), torch.cat(all_classes), pairs)
        logits = score_predicates(reps, self.bank.effective_prototypes(), self.config.tau_s)
        return logits, reps
