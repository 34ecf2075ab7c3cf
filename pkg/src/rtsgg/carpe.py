"""Cross-attention prototype relation head and the gated-fusion baseline.

Visual node features query a bank of lifted object-class prototypes; a
learned sinusoidal encoding of the pair geometry biases the attention logits.
Subject and object representations are composed into a unit relation vector
and scored by cosine similarity against predicate prototypes, which are
stabilised by an exponential-moving-average shadow buffer.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

AREA_EPS = 1e-8


class SwiGLU(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.d_in = d_in
        self.gate = nn.Linear(d_in, d_hidden, bias=False)
        self.val = nn.Linear(d_in, d_hidden, bias=False)
        self.out = nn.Linear(d_hidden, d_out, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"expected input dim {self.d_in}, got {x.shape[-1]}")
        return self.out(F.silu(self.gate(x)) * self.val(x))


def swiglu_lift(x: torch.Tensor, lift: SwiGLU) -> torch.Tensor:
    return lift(x)


def geom_encode(box_s: torch.Tensor, box_o: torch.Tensor) -> torch.Tensor:
    """[w_s, h_s, cx_s, cy_s, w_o, h_o, cx_o, cy_o, log area ratio] for (..., 4) xyxy boxes."""
    box_s = torch.as_tensor(box_s)
    box_o = torch.as_tensor(box_o, dtype=box_s.dtype)
    ws, hs = box_s[..., 2] - box_s[..., 0], box_s[..., 3] - box_s[..., 1]
    wo, ho = box_o[..., 2] - box_o[..., 0], box_o[..., 3] - box_o[..., 1]
    if (ws <= 0).any() or (hs <= 0).any() or (wo <= 0).any() or (ho <= 0).any():
        raise ValueError("degenerate box")
    cxs, cys = (box_s[..., 0] + box_s[..., 2]) / 2, (box_s[..., 1] + box_s[..., 3]) / 2
    cxo, cyo = (box_o[..., 0] + box_o[..., 2]) / 2, (box_o[..., 1] + box_o[..., 3]) / 2
    # difference of logs so swapping subject and object negates the term exactly
    ratio = torch.log(ws * hs + AREA_EPS) - torch.log(wo * ho + AREA_EPS)
    return torch.stack([ws, hs, cxs, cys, wo, ho, cxo, cyo, ratio], dim=-1)


class GeomRoPE(nn.Module):
    """b -> [sin(f1(b)), cos(f2(b))] with f1, f2 two-layer networks."""

    def __init__(self, d_rope: int = 32, hidden: int = 32, d_in: int = 9, init_scale: float = 1.0):
        super().__init__()
        if d_rope % 2:
            raise ValueError("d_rope must be even")
        self.d_rope = d_rope
        self.f1 = nn.Sequential(nn.Linear(d_in, hidden), nn.SiLU(), nn.Linear(hidden, d_rope // 2))
        self.f2 = nn.Sequential(nn.Linear(d_in, hidden), nn.SiLU(), nn.Linear(hidden, d_rope // 2))
        # box coordinates live in [0, 1] and predicates flip over small offsets, so the
        # first layer may start at a higher input frequency than the default init
        with torch.no_grad():
            for f in (self.f1, self.f2):
                f[0].weight.mul_(init_scale)

    def forward(self, b: torch.Tensor) -> torch.Tensor:
        return torch.cat([torch.sin(self.f1(b)), torch.cos(self.f2(b))], dim=-1)


def geom_rope(b: torch.Tensor, rope: GeomRoPE) -> torch.Tensor:
    return rope(b)


class PrototypeCrossAttention(nn.Module):
    """x + W_o(softmax(QK^T / sqrt(d) + geometry bias) V) over the object prototype bank.

    The geometry encoding is projected to one additive logit per head and per
    prototype key. The output projection starts at zero so the module is an
    identity at initialisation.
    """

    def __init__(self, dim: int, heads: int, d_rope: int, num_keys: int, zero_init_bias: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.num_keys = dim, heads, num_keys
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)
        self.bias_proj = nn.Linear(d_rope, heads * num_keys, bias=False)
        nn.init.zeros_(self.o.weight)
        if zero_init_bias:
            nn.init.zeros_(self.bias_proj.weight)
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, bank: torch.Tensor, b_geo: torch.Tensor | None = None) -> torch.Tensor:
        if bank.shape[0] == 0:
            raise ValueError("empty prototype bank")
        n, kk, h = x.shape[0], bank.shape[0], self.heads
        hd = self.dim // h
        q = self.q(x).reshape(n, h, hd)
        k = self.k(bank).reshape(kk, h, hd)
        v = self.v(bank).reshape(kk, h, hd)
        logits = torch.einsum("nhd,khd->nhk", q, k) / math.sqrt(hd)
        if b_geo is not None:
            if kk != self.num_keys:
                raise ValueError(f"bias projection built for {self.num_keys} keys, bank has {kk}")
            logits = logits + self.bias_proj(b_geo).reshape(n, h, kk)
        attn = torch.softmax(logits, dim=-1)
        self.last_attention = attn.detach()
        mixed = torch.einsum("nhk,khd->nhd", attn, v).reshape(n, self.dim)
        return x + self.o(mixed)


def cross_attend(x, bank_keys, b_geo, attention: PrototypeCrossAttention) -> torch.Tensor:
    return attention(x, bank_keys, b_geo)


class RelationComposer(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.lin = nn.Linear(2 * dim, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, s_hat: torch.Tensor, o_hat: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.norm(self.lin(torch.cat([s_hat, o_hat], dim=-1))), dim=-1)


def compose_relation(s_hat, o_hat, composer: RelationComposer) -> torch.Tensor:
    return composer(s_hat, o_hat)


class PrototypeBank(nn.Module):
    """Class embeddings, lifted prototypes and the EMA shadow of predicate prototypes."""

    def __init__(self, obj_embed: torch.Tensor, pred_embed: torch.Tensor, dim: int, d_hidden: int,
                 momentum: float = 0.999, renormalize: bool = True):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        d_e = obj_embed.shape[1]
        self.register_buffer("obj_embed", obj_embed.clone())
        self.register_buffer("pred_embed", pred_embed.clone())
        # one lift shared by subject and object streams
        self.obj_lift = SwiGLU(d_e, d_hidden, dim)
        self.pred_lift = SwiGLU(d_e, d_hidden, dim)
        self.register_buffer("ema", torch.zeros(pred_embed.shape[0], dim, dtype=obj_embed.dtype))
        self.register_buffer("init_mask", torch.zeros(pred_embed.shape[0], dtype=torch.bool))
        self.momentum = momentum
        self.renormalize = renormalize

    @property
    def subject_lift(self) -> SwiGLU:
        return self.obj_lift

    @property
    def object_lift(self) -> SwiGLU:
        return self.obj_lift

    def object_prototypes(self) -> torch.Tensor:
        return self.obj_lift(self.obj_embed)

    def learnable_predicate_prototypes(self) -> torch.Tensor:
        return self.pred_lift(self.pred_embed)

    def effective_prototypes(self) -> torch.Tensor:
        learned = self.learnable_predicate_prototypes()
        return torch.where(self.init_mask[:, None], self.ema.to(learned.dtype), learned)

    @torch.no_grad()
    def ema_update(self, reps: torch.Tensor, labels: torch.Tensor) -> None:
        reps = reps.detach().to(self.ema.dtype)
        labels = torch.as_tensor(labels, dtype=torch.long)
        k_pred = self.ema.shape[0]
        if labels.numel() and (labels.min() < 0 or labels.max() >= k_pred):
            raise ValueError("predicate label out of range")
        for k in torch.unique(labels).tolist():
            mean = reps[labels == k].mean(0)
            if self.init_mask[k]:
                new = self.momentum * self.ema[k] + (1 - self.momentum) * mean
            else:
                new = mean
                self.init_mask[k] = True
            if self.renormalize:
                new = F.normalize(new, dim=0)
            self.ema[k] = new


def ema_update(bank: PrototypeBank, reps, labels) -> PrototypeBank:
    bank.ema_update(reps, labels)
    return bank


def score_predicates(r: torch.Tensor, prototypes: torch.Tensor, tau: float) -> torch.Tensor:
    """Cosine similarity / tau between relation vectors (..., D) and prototypes (K, D)."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    norms = prototypes.norm(dim=-1)
    if (norms < 1e-12).any():
        raise ValueError("zero-norm predicate prototype")
    return F.normalize(r, dim=-1) @ (prototypes / norms[:, None]).T / tau


class GatedFusion(nn.Module):
    """s = W_sub t + sigmoid(w [t; v]) * v, with W_sub a two-layer ReLU lift."""

    def __init__(self, d_e: int, dim: int):
        super().__init__()
        self.lift = nn.Sequential(nn.Linear(d_e, dim // 2), nn.ReLU(), nn.Linear(dim // 2, dim))
        self.gate = nn.Linear(d_e + dim, 1)

    def forward(self, t: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(torch.cat([t, v], dim=-1)))
        return self.lift(t) + g * v


def gated_fusion_baseline(t, v, fusion: GatedFusion) -> torch.Tensor:
    return fusion(t, v)


def seeded_embeddings(n: int, d_e: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, d_e))
    return torch.as_tensor(e / np.linalg.norm(e, axis=1, keepdims=True), dtype=torch.float32)


def load_embeddings(path: str | Path, names: list[str], d_e: int, seed: int) -> torch.Tensor:
    """Rows for `names` from a whitespace text file ("name v1 ... v_de" per line).

    Classes missing from the file fall back to seeded Gaussian rows.
    """
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d_e + 1:
                raise ValueError(f"{path}:{lineno}: expected {d_e} values, got {len(parts) - 1}")
            table[parts[0]] = [float(v) for v in parts[1:]]
    fallback = seeded_embeddings(len(names), d_e, seed)
    rows = [torch.tensor(table[n], dtype=torch.float32) if n in table else fallback[i] for i, n in enumerate(names)]
    return torch.stack(rows)
