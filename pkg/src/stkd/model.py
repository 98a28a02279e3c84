"""Network assembly: feature extractor, spatial head and the optional
inter-frame encoder used by the temporal branch."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from stkd.attention import InterFrameEncoder
from stkd.config import ArchitectureConfig
from stkd.embedding import EmbeddingUnit, PhasePredictions, SpatialHead
from stkd.errors import MissingParameterError
from stkd.features import FeatureExtractor, FeaturePyramid, resize_to

ENCODER_PREFIX = "encoder."


@dataclass
class ParameterStore:
    """Named parameter/buffer tensors keyed by module path, plus run metadata."""

    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    def without_prefix(self, prefix: str) -> "ParameterStore":
        kept = {k: v for k, v in self.tensors.items() if not k.startswith(prefix)}
        return ParameterStore(kept, dict(self.meta))


class TemporalEncoder(nn.Module):
    """Inter-frame fusion plus the third embedding unit."""

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        self.fusion = InterFrameEncoder(arch.high_channels, arch.fusion)
        self.unit = EmbeddingUnit(arch.high_channels, arch.unit_channels)


class STKDNet(nn.Module):
    def __init__(self, arch: ArchitectureConfig, with_encoder: bool = False):
        super().__init__()
        self.arch = arch
        self.features = FeatureExtractor(arch)
        self.head = SpatialHead(arch.low_channels, arch.high_channels, arch.unit_channels)
        self.encoder = TemporalEncoder(arch) if with_encoder else None

    @property
    def has_encoder(self) -> bool:
        return self.encoder is not None

    def forward_spatial(self, frames: torch.Tensor) -> tuple[FeaturePyramid, PhasePredictions]:
        pyramid = self.features(frames)
        return pyramid, self.head(pyramid)

    def forward(self, frames: torch.Tensor) -> PhasePredictions:
        return self.forward_spatial(frames)[1]

    def forward_temporal(
        self, reference_high: torch.Tensor, pyramid: FeaturePyramid, phases: PhasePredictions
    ) -> PhasePredictions:
        """Extend the target frame's spatial phases with P_3 from the encoder."""
        if self.encoder is None:
            raise MissingParameterError("network was built without the inter-frame encoder")
        fused = self.encoder.fusion(reference_high, pyramid.high_level)
        prev = phases.final
        r3, p3 = self.encoder.unit(prev, resize_to(fused, prev.shape[-2:]))
        return PhasePredictions(logits=phases.logits + [p3], residuals=phases.residuals + [r3])

    def predict(self, frames: torch.Tensor, reference: torch.Tensor | None = None) -> torch.Tensor:
        """Saliency maps in [0, 1] at input resolution.

        Without ``reference`` this is the distilled path: sigmoid(P_2). With a
        reference frame batch the encoder runs and sigmoid(P_3) is returned.
        """
        pyramid, phases = self.forward_spatial(frames)
        if reference is not None:
            ref_high = self.features(reference).high_level
            phases = self.forward_temporal(ref_high, pyramid, phases)
        return torch.sigmoid(resize_to(phases.final, frames.shape[-2:]))

    # -- parameter store ----------------------------------------------------

    def to_store(self, **meta) -> ParameterStore:
        tensors = {k: v.detach().clone() for k, v in self.state_dict().items()}
        return ParameterStore(tensors, dict(meta))

    def load_store(self, store: ParameterStore, strict: bool = True) -> dict:
        """Load tensors; returns ``{'loaded', 'missing', 'unexpected'}`` key lists.

        ``strict`` raises on any missing key and on unexpected keys outside the
        encoder namespace (encoder keys are removable by design).
        """
        own = self.state_dict()
        missing = sorted(k for k in own if k not in store.tensors)
        unexpected = sorted(k for k in store.tensors if k not in own)
        shape_bad = sorted(
            f"{k}: {tuple(store.tensors[k].shape)} != {tuple(own[k].shape)}"
            for k in own
            if k in store.tensors and store.tensors[k].shape != own[k].shape
        )
        if shape_bad:
            raise MissingParameterError(f"parameter shapes do not match the architecture: {shape_bad}")
        hard_unexpected = [k for k in unexpected if not k.startswith(ENCODER_PREFIX)]
        if strict and (missing or hard_unexpected):
            raise MissingParameterError(f"parameter keys differ: missing={missing} unexpected={hard_unexpected}")
        loaded = {k: v for k, v in store.tensors.items() if k in own}
        self.load_state_dict(loaded, strict=False)
        return {"loaded": sorted(loaded), "missing": missing, "unexpected": unexpected}
