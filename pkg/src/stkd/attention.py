"""Inter-frame feature encoding.

``mutual_attention`` computes dot-product attention between the high-level
maps of a reference frame (t) and a target frame (t + t0). For flattened maps
Ht, Ht0 of shape (c, n):

    A = softmax_i( Ht^T Ht0 / sqrt(c) )      # (n, n), each column sums to 1
    weighted = Ht0 @ A

so every output location is a convex combination of the target-frame
feature columns. ``InterFrameEncoder`` wraps this with the final fusion
convolution, or swaps it for one of the simple add / multiply / concat fusions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from stkd.config import FUSIONS
from stkd.errors import ConfigError, ShapeError


@dataclass
class AttentionResult:
    attention: torch.Tensor  # (B, n, n)
    weighted: torch.Tensor  # (B, c, h, w)
    scale: float
    fused: torch.Tensor | None = None


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4:
        raise ShapeError(f"expected (B, c, h, w) features, got {tuple(a.shape)}")


def mutual_attention(h_t: torch.Tensor, h_t0: torch.Tensor) -> AttentionResult:
    _check_pair(h_t, h_t0)
    b, c, h, w = h_t.shape
    flat_t = h_t.reshape(b, c, h * w)
    flat_t0 = h_t0.reshape(b, c, h * w)
    scale = 1.0 / math.sqrt(c)
    logits = scale * torch.bmm(flat_t.transpose(1, 2), flat_t0)
    attn = torch.softmax(logits, dim=1)
    weighted = torch.bmm(flat_t0, attn).reshape(b, c, h, w)
    return AttentionResult(attention=attn, weighted=weighted, scale=scale)


class MutualFusion(nn.Module):
    """Conv(Cat(weighted, original)): a single 3x3 conv, 2c -> c."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def forward(self, weighted: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
        _check_pair(weighted, original)
        return self.conv(torch.cat([weighted, original], dim=1))


class InterFrameEncoder(nn.Module):
    """Fuses reference (``h_t``) and target (``h_t0``) high-level features."""

    def __init__(self, channels: int, kind: str = "mutual"):
        super().__init__()
        if kind not in FUSIONS:
            raise ConfigError(f"unknown fusion variant {kind!r}; expected one of {FUSIONS}")
        self.kind = kind
        if kind == "mutual":
            self.fuse = MutualFusion(channels)
        elif kind == "concat":
            self.fuse = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, h_t: torch.Tensor, h_t0: torch.Tensor) -> torch.Tensor:
        _check_pair(h_t, h_t0)
        if self.kind == "add":
            return h_t + h_t0
        if self.kind == "multiply":
            return h_t * h_t0
        if self.kind == "concat":
            return self.fuse(torch.cat([h_t, h_t0], dim=1))
        return self.fuse(mutual_attention(h_t, h_t0).weighted, h_t0)

    def attend(self, h_t: torch.Tensor, h_t0: torch.Tensor) -> AttentionResult:
        """Full mutual-attention result including the fused map."""
        if self.kind != "mutual":
            raise ConfigError(f"attend() needs the mutual variant, encoder is {self.kind!r}")
        res = mutual_attention(h_t, h_t0)
        res.fused = self.fuse(res.weighted, h_t0)
        return res


def fuse_variant(h_t: torch.Tensor, h_t0: torch.Tensor, kind: str, encoder: InterFrameEncoder | None = None):
    """Apply fusion ``kind``; parameterized kinds need a matching ``encoder``."""
    if kind not in FUSIONS:
        raise ConfigError(f"unknown fusion variant {kind!r}; expected one of {FUSIONS}")
    if encoder is None:
        if kind in ("mutual", "concat"):
            raise ConfigError(f"fusion {kind!r} has parameters; pass an encoder")
        encoder = InterFrameEncoder(h_t.shape[1], kind)
    elif encoder.kind != kind:
        raise ConfigError(f"encoder is {encoder.kind!r}, requested {kind!r}")
    return encoder(h_t, h_t0)
