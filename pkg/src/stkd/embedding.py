"""Saliency-guided feature embedding.

P_0 comes from the high-level map through one conv layer. Each embedding unit
takes the previous prediction and a feature map and emits a residual R_j;
the new prediction is P_j = P_{j-1} + R_j. The spatial branch alternates
low-level then high-level features. All P_j are logits at the low-level
(1/4) working resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from stkd.errors import ShapeError
from stkd.features import FeaturePyramid, resize_to


@dataclass
class PhasePredictions:
    logits: list[torch.Tensor]
    residuals: list[torch.Tensor]

    @property
    def final(self) -> torch.Tensor:
        return self.logits[-1]

    def __len__(self):
        return len(self.logits)


class EmbeddingUnit(nn.Module):
    """Three conv layers on Cat(prev_logits, features). The first two carry
    batch norm + PReLU; the last emits the 1-channel residual."""

    def __init__(self, feature_channels: int, width: int = 64):
        super().__init__()
        self.feature_channels = feature_channels
        self.body = nn.Sequential(
            nn.Conv2d(feature_channels + 1, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.PReLU(width),
            nn.Conv2d(width, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.PReLU(width),
            nn.Conv2d(width, 1, 3, padding=1),
        )

    @property
    def residual_conv(self) -> nn.Conv2d:
        return self.body[-1]

    def forward(self, prev_logits: torch.Tensor, features: torch.Tensor):
        if prev_logits.shape[-2:] != features.shape[-2:]:
            raise ShapeError(
                f"resolution mismatch: logits {tuple(prev_logits.shape[-2:])} vs features {tuple(features.shape[-2:])}"
            )
        if features.shape[1] != self.feature_channels:
            raise ShapeError(f"expected {self.feature_channels} feature channels, got {features.shape[1]}")
        raw = self.body(torch.cat([prev_logits, features], dim=1))
        logits = prev_logits + raw
        # report the realized increment so that P_j - P_{j-1} == R_j holds in floating point
        return logits - prev_logits, logits


class SpatialHead(nn.Module):
    def __init__(self, low_channels: int, high_channels: int, width: int = 64):
        super().__init__()
        self.initial = nn.Conv2d(high_channels, 1, 3, padding=1)
        self.units = nn.ModuleList([
            EmbeddingUnit(low_channels, width),
            EmbeddingUnit(high_channels, width),
        ])

    def initial_prediction(self, high_level: torch.Tensor, size=None) -> torch.Tensor:
        p0 = self.initial(high_level)
        return p0 if size is None else resize_to(p0, size)

    def forward(self, pyramid: FeaturePyramid) -> PhasePredictions:
        size = tuple(pyramid.low_level.shape[-2:])
        p0 = self.initial_prediction(pyramid.high_level, size)
        r1, p1 = self.units[0](p0, pyramid.low_level)
        r2, p2 = self.units[1](p1, resize_to(pyramid.high_level, size))
        return PhasePredictions(logits=[p0, p1, p2], residuals=[r1, r2])
