"""Intra-scale self-attention over the coarsest pyramid level, and global-to-local fusion."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


def sincos_2d(h: int, w: int, dim: int, temperature: float = 10000.0, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sine-cosine position embedding, (h*w, dim) in row-major token order."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    gy, gx = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    quarter = dim // 4
    omega = 1.0 / temperature ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ox = gx.reshape(-1, 1) * omega[None]
    oy = gy.reshape(-1, 1) * omega[None]
    return torch.cat([ox.sin(), ox.cos(), oy.sin(), oy.cos()], dim=1).to(dtype)


class AifiEncoder(nn.Module):
    """One pre-norm transformer encoder layer over the flattened P5 grid."""

    def __init__(self, in_channels: int, dim: int = 32, heads: int = 4, use_pos: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"context dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.use_pos = use_pos
        self.in_proj = nn.Linear(in_channels, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, 2 * dim)
        self.ffn_out = nn.Linear(2 * dim, dim)
        self.last_attention: torch.Tensor | None = None

    def tokens(self, p5: torch.Tensor) -> torch.Tensor:
        *lead, h, w, c = p5.shape
        t = self.in_proj(p5.reshape(*lead, h * w, c))
        if self.use_pos:
            t = t + sincos_2d(h, w, self.dim, dtype=t.dtype)
        return t

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        hd = self.dim // self.heads
        qkv = self.qkv(x).reshape(*lead, n, 3, self.heads, hd)
        q, k, v = (qkv.select(-3, i).transpose(-2, -3) for i in range(3))  # (..., heads, n, hd)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        attn = torch.softmax(logits, dim=-1)  # max-subtracted internally
        self.last_attention = attn.detach()
        return self.attn_out((attn @ v).transpose(-2, -3).reshape(*lead, n, self.dim))

    def forward(self, p5: torch.Tensor) -> torch.Tensor:
        """(..., H, W, C) -> (..., H, W, D_ctx)"""
        if p5.numel() == 0:
            raise ValueError("empty P5 grid")
        *lead, h, w, _ = p5.shape
        t = self.tokens(p5)
        t = t + self.attend(self.norm1(t))
        t = t + self.ffn_out(F.gelu(self.ffn_in(self.norm2(t))))
        return t.reshape(*lead, h, w, self.dim)


def aifi_encode(p5: torch.Tensor, encoder: AifiEncoder) -> torch.Tensor:
    return encoder(p5)


def pool_context(grid: torch.Tensor) -> torch.Tensor:
    """Mean over the two spatial axes of a (..., H, W, D) grid."""
    if grid.numel() == 0:
        raise ValueError("empty grid")
    return grid.mean(dim=(-3, -2))


class ContextFusion(nn.Module):
    """node + W [node ; g]"""

    def __init__(self, node_dim: int, ctx_dim: int):
        super().__init__()
        self.node_dim = node_dim
        self.ctx_dim = ctx_dim
        self.lin = nn.Linear(node_dim + ctx_dim, node_dim)

    def forward(self, nodes: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if nodes.shape[-1] != self.node_dim or g.shape[-1] != self.ctx_dim:
            raise ValueError("fuse_context dimension mismatch")
        g = g.expand(*nodes.shape[:-1], self.ctx_dim)
        return nodes + self.lin(torch.cat([nodes, g], dim=-1))


def fuse_context(node: torch.Tensor, g: torch.Tensor, fusion: ContextFusion) -> torch.Tensor:
    return fusion(node, g)


class GlobalContext(nn.Module):
    def __init__(self, p5_channels: int, node_dim: int, ctx_dim: int = 32, heads: int = 4):
        super().__init__()
        self.encoder = AifiEncoder(p5_channels, ctx_dim, heads)
        self.fusion = ContextFusion(node_dim, ctx_dim)

    def scene_vectors(self, p5: torch.Tensor) -> torch.Tensor:
        return pool_context(self.encoder(p5))

    def forward(self, nodes: torch.Tensor, p5: torch.Tensor) -> torch.Tensor:
        return self.fusion(nodes, self.scene_vectors(p5))
