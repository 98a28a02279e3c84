"""Multi-level feature extraction.

Five side outputs S_1..S_5 come from four backbone blocks plus an ASPP block.
Stride plan (both backbones): S_1, S_2 at 1/4 of the input, S_3..S_5 at 1/8
(the last blocks keep resolution through dilation). S_1 and S_2 are fused
into the low-level map L; S_3, S_4, S_5 into the high-level map H.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from stkd.config import ArchitectureConfig
from stkd.errors import CheckpointError, ShapeError

STRIDES = (4, 4, 8, 8, 8)
TINY_CHANNELS = (16, 32, 64, 64)
RESNET50_CHANNELS = (256, 512, 1024, 2048)
MIN_SIDE = 32


@dataclass
class FeaturePyramid:
    side_outputs: list[torch.Tensor]
    low_level: torch.Tensor
    high_level: torch.Tensor


def check_frame(frame: torch.Tensor):
    if frame.dim() != 4:
        raise ShapeError(f"frame batch must be 4-D (B, 3, H, W), got {tuple(frame.shape)}")
    if frame.shape[1] != 3:
        raise ShapeError(f"frame channels must be 3, got channels={frame.shape[1]}")
    if frame.shape[2] < MIN_SIDE:
        raise ShapeError(f"frame height must be >= {MIN_SIDE}, got height={frame.shape[2]}")
    if frame.shape[3] < MIN_SIDE:
        raise ShapeError(f"frame width must be >= {MIN_SIDE}, got width={frame.shape[3]}")


def stride_output_size(size: int, stride: int) -> int:
    """Spatial size after the conv/pool stack reaches ``stride`` (each halving is ceil)."""
    while stride > 1:
        size = (size + 1) // 2
        stride //= 2
    return size


def resize_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def align_and_concat(tensors, resample: bool = True) -> torch.Tensor:
    """Concatenate along channels after bilinear resampling to the coarsest operand."""
    sizes = [tuple(t.shape[-2:]) for t in tensors]
    if len(set(sizes)) > 1 and not resample:
        raise ShapeError(f"spatial sizes differ and resampling is disabled: {sizes}")
    target = min(sizes, key=lambda s: s[0] * s[1])
    return torch.cat([resize_to(t, target) for t in tensors], dim=1)


class ConvBNPReLU(nn.Sequential):
    """3x3 conv + batch norm + PReLU."""

    def __init__(self, cin: int, cout: int, kernel_size: int = 3, dilation: int = 1):
        pad = dilation * (kernel_size - 1) // 2
        super().__init__(
            nn.Conv2d(cin, cout, kernel_size, padding=pad, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
            nn.PReLU(cout),
        )
        self.in_channels = cin


class LevelFusion(nn.Module):
    """Cat of side outputs followed by one conv group (used for L and H)."""

    def __init__(self, in_channels: tuple[int, ...], out_channels: int):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.block = ConvBNPReLU(sum(in_channels), out_channels)

    def forward(self, *sides: torch.Tensor, resample: bool = True) -> torch.Tensor:
        got = tuple(s.shape[1] for s in sides)
        if got != self.in_channels:
            raise ShapeError(f"channel mismatch: expected {self.in_channels}, got {got}")
        return self.block(align_and_concat(sides, resample=resample))


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling: a 1x1 branch, one dilated 3x3 branch per
    rate, and an image-pooling branch, projected back with a 1x1 conv."""

    def __init__(self, in_channels: int, out_channels: int, rates=(6, 12, 18)):
        super().__init__()

        def branch(k, d):
            return nn.Sequential(
                nn.Conv2d(in_channels, out_channels, k, padding=0 if k == 1 else d, dilation=d, bias=False),
                nn.BatchNorm2d(out_channels),
                nn.ReLU(inplace=True),
            )

        self.rates = tuple(rates)
        self.branches = nn.ModuleList([branch(1, 1)] + [branch(3, r) for r in self.rates])
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv2d(out_channels * (len(self.rates) + 2), out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = [b(x) for b in self.branches]
        pooled = self.pool(x).expand(-1, -1, x.shape[2], x.shape[3])
        return self.project(torch.cat(outs + [pooled], dim=1))


def _tiny_stage(cin, cout, strides=(1, 1), dilation=1):
    layers = []
    for i, s in enumerate(strides):
        layers += [
            nn.Conv2d(cin if i == 0 else cout, cout, 3, stride=s, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        ]
    return nn.Sequential(*layers)


class TinyBackbone(nn.Module):
    """Four small conv stages with the same stride plan as the dilated ResNet-50."""

    channels = TINY_CHANNELS

    def __init__(self):
        super().__init__()
        c1, c2, c3, c4 = self.channels
        self.blocks = nn.ModuleList([
            _tiny_stage(3, c1, strides=(2, 2)),
            _tiny_stage(c1, c2),
            _tiny_stage(c2, c3, strides=(2, 1)),
            _tiny_stage(c3, c4, dilation=2),
        ])

    def forward(self, x):
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 reshaped to output stride 8.

    layer2 runs at stride 1 so that S_2 stays at 1/4; layer3 keeps its
    stride-2 entry (1/8); layer4 replaces its stride with dilation 2.
    """

    channels = RESNET50_CHANNELS

    def __init__(self, weights_path: str = ""):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None, replace_stride_with_dilation=[False, False, True])
        net.layer2[0].conv2.stride = (1, 1)
        net.layer2[0].downsample[0].stride = (1, 1)
        if weights_path:
            load_imagenet_weights(net, weights_path)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def forward(self, x):
        s1 = self.layer1(self.stem(x))
        s2 = self.layer2(s1)
        s3 = self.layer3(s2)
        s4 = self.layer4(s3)
        return [s1, s2, s3, s4]


def load_imagenet_weights(net: nn.Module, path: str):
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"pretrained weights not found: {path}")
    state = torch.load(p, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    state = {k.removeprefix("module."): v for k, v in state.items() if not k.startswith(("fc.", "module.fc."))}
    missing, unexpected = net.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.startswith("fc.")]
    if missing or unexpected:
        raise CheckpointError(f"pretrained weights do not match ResNet-50: missing={missing} unexpected={unexpected}")


class FeatureExtractor(nn.Module):
    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        if arch.backbone == "tiny":
            self.backbone = TinyBackbone()
        else:
            self.backbone = ResNet50Backbone(arch.pretrained)
        c1, c2, c3, c4 = self.backbone.channels
        self.aspp = ASPP(c4, arch.aspp_channels, arch.aspp_rates)
        self.side_channels = (c1, c2, c3, c4, arch.aspp_channels)
        self.fuse_low = LevelFusion((c1, c2), arch.low_channels)
        self.fuse_high = LevelFusion((c3, c4, arch.aspp_channels), arch.high_channels)

    def side_outputs(self, frame: torch.Tensor) -> list[torch.Tensor]:
        check_frame(frame)
        s1, s2, s3, s4 = self.backbone(frame)
        return [s1, s2, s3, s4, self.aspp(s4)]

    def forward(self, frame: torch.Tensor) -> FeaturePyramid:
        sides = self.side_outputs(frame)
        return FeaturePyramid(
            side_outputs=sides,
            low_level=self.fuse_low(sides[0], sides[1]),
            high_level=self.fuse_high(sides[2], sides[3], sides[4]),
        )
