"""Ground-truth and distillation losses.

Both terms are pixel-mean sigmoid cross entropy. The distillation target is
sigmoid(teacher) with the teacher detached, so no gradient reaches it.

spatial:   L_s = sum_{i=0..2} CE(P_i, G) + alpha * sum_{i=0..1} CE(P_i, sigmoid(P_2))
temporal:  L_t = sum_i CE(P'_i, G') + alpha * sum_i CE(P'_i, sigmoid(P_2 of the other frame))
           with i = 0..2 (plain) or 0..3 (encoded)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from stkd.config import LossConfig
from stkd.embedding import PhasePredictions
from stkd.errors import ConfigError, ShapeError


@dataclass
class LossReport:
    kind: str
    g_terms: list[torch.Tensor]
    d_terms: list[torch.Tensor]
    alpha: float
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        total = torch.stack(self.g_terms).sum()
        if self.d_terms:
            total = total + self.alpha * torch.stack(self.d_terms).sum()
        self.total = total

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "g_terms": [t.item() for t in self.g_terms],
            "d_terms": [t.item() for t in self.d_terms],
            "total": self.total.item(),
        }


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def sigmoid_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(logits, target)
    if target.numel() and (target.min() < 0 or target.max() > 1):
        raise ValueError("targets must lie in [0, 1]")
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def distill_term(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    _check_same(student_logits, teacher_logits)
    return sigmoid_ce(student_logits, torch.sigmoid(teacher_logits.detach()))


def match_target(gt: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Area-average ``gt`` down to the spatial size of ``like``."""
    if gt.dim() == 3:
        gt = gt.unsqueeze(1)
    if gt.shape[-2:] == like.shape[-2:]:
        return gt.to(like.dtype)
    return F.interpolate(gt.to(like.dtype), size=like.shape[-2:], mode="area")


def spatial_loss(phases: PhasePredictions, gt: torch.Tensor, cfg: LossConfig) -> LossReport:
    if len(phases) != 3:
        raise ShapeError(f"spatial loss needs 3 phases, got {len(phases)}")
    target = match_target(gt, phases.final)
    g = [sigmoid_ce(p, target) for p in phases.logits]
    d = [distill_term(p, phases.final) for p in phases.logits[:2]] if cfg.spatial_distill else []
    return LossReport("spatial", g, d, cfg.alpha)


def temporal_loss(phases: PhasePredictions, teacher: torch.Tensor, gt: torch.Tensor, cfg: LossConfig) -> LossReport:
    """``phases`` belong to frame t+t0; ``teacher`` is P_2 of frame t."""
    expected = {"plain": 3, "encoded": 4}.get(cfg.temporal_mode)
    if expected is None:
        raise ConfigError(f"temporal loss is undefined for temporal_mode={cfg.temporal_mode!r}")
    if len(phases) != expected:
        raise ShapeError(f"{cfg.temporal_mode} temporal loss needs {expected} phases, got {len(phases)}")
    target = match_target(gt, phases.final)
    g = [sigmoid_ce(p, target) for p in phases.logits]
    d = [distill_term(p, teacher) for p in phases.logits] if cfg.temporal_distill else []
    return LossReport("temporal", g, d, cfg.alpha)
