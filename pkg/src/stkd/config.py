"""Run configuration: typed dataclasses plus a flat ``section.key = value`` text format.

Example file::

    # toy run
    arch.backbone = tiny
    arch.aspp_rates = 1, 2, 3
    loss.alpha = 0.7
    train.stage1.lr = 0.01
    ablation.td = false

Every key has a default, so an empty file is a valid config. Unknown keys and
out-of-range values raise :class:`~stkd.errors.ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from stkd.errors import ConfigError

BACKBONES = ("resnet50", "tiny")
FUSIONS = ("mutual", "add", "multiply", "concat")
LAYOUTS = ("auto", "davis", "flat_pairs")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ArchitectureConfig:
    backbone: str = "resnet50"
    # path to torchvision-format ResNet-50 ImageNet weights; empty = random init
    pretrained: str = ""
    low_channels: int = 64
    high_channels: int = 256
    unit_channels: int = 64
    aspp_channels: int = 256
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    fusion: str = "mutual"
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"arch.backbone: expected one of {BACKBONES}, got {self.backbone!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"arch.fusion: expected one of {FUSIONS}, got {self.fusion!r}")
        for name in ("low_channels", "high_channels", "unit_channels", "aspp_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"arch.{name}: must be >= 1")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError("arch.aspp_rates: need at least one rate, all >= 1")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("arch.mean/arch.std: need exactly 3 values")
        if any(s <= 0 for s in self.std):
            raise ConfigError("arch.std: values must be > 0")


@dataclass
class LossConfig:
    """Loss weighting.

    ``temporal_mode`` is ``none`` (spatial loss only), ``plain`` (temporal loss
    over P_0..P_2 of the second frame) or ``encoded`` (over P_0..P_3).
    """

    alpha: float = 0.7
    temporal_mode: str = "none"
    spatial_distill: bool = True
    temporal_distill: bool = True
    temporal_weight: float = 1.0

    def validate(self):
        LossWeights(self.alpha, self.temporal_weight).validate()
        if self.temporal_mode not in ("none", "plain", "encoded"):
            raise ConfigError(f"loss.temporal_mode: unknown mode {self.temporal_mode!r}")


@dataclass
class LossWeights:
    """The loss keys a run file sets. Which terms exist follows from the
    ablation flags; see :meth:`RunConfig.loss_config`."""

    alpha: float = 0.7
    # weight of L_t against L_s in the stage-2 objective
    temporal_weight: float = 1.0

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"loss.alpha: must lie in [0, 1], got {self.alpha}")
        if self.temporal_weight < 0:
            raise ConfigError("loss.temporal_weight: must be >= 0")


@dataclass
class StageConfig:
    lr: float
    momentum: float
    max_iter: int = 40000


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-3, momentum=0.9))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(lr=1e-4, momentum=0.95))
    weight_decay: float = 5e-4
    lr_power: float = 0.9
    batch_size: int = 8
    crop: int = 473
    rotation_deg: float = 10.0
    flip: bool = True
    t0_max: int = 3
    seed: int = 0
    checkpoint_every: int = 1000
    # 0 disables clipping
    grad_clip: float = 0.0

    def stage(self, stage: int) -> StageConfig:
        if stage == 1:
            return self.stage1
        if stage == 2:
            return self.stage2
        raise ConfigError(f"stage must be 1 or 2, got {stage}")

    def validate(self):
        for name in ("stage1", "stage2"):
            st = getattr(self, name)
            if st.lr <= 0:
                raise ConfigError(f"train.{name}.lr: must be > 0")
            if not 0 <= st.momentum < 1:
                raise ConfigError(f"train.{name}.momentum: must lie in [0, 1)")
            if st.max_iter < 1:
                raise ConfigError(f"train.{name}.max_iter: must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if self.crop < 64:
            raise ConfigError(f"train.crop: must be >= 64, got {self.crop}")
        if not 0 <= self.rotation_deg <= 180:
            raise ConfigError("train.rotation_deg: must lie in [0, 180]")
        if not 1 <= self.t0_max <= 3:
            raise ConfigError(f"train.t0_max: must lie in [1, 3], got {self.t0_max}")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every: must be >= 1")
        if self.grad_clip < 0:
            raise ConfigError("train.grad_clip: must be >= 0")


@dataclass
class AblationConfig:
    """Scenario flags: spatial distillation, temporal distillation, and the
    inter-frame encoder used only in training (``fe_o``) or also at test time
    (``fe_t``). Defaults are the full method."""

    sd: bool = True
    td: bool = True
    fe_o: bool = True
    fe_t: bool = False

    @property
    def encoder(self) -> bool:
        return self.fe_o or self.fe_t

    @property
    def temporal_mode(self) -> str:
        if self.encoder:
            return "encoded"
        if self.td:
            return "plain"
        return "none"

    @property
    def name(self) -> str:
        parts = [p for p in ("sd", "td", "fe_o", "fe_t") if getattr(self, p)]
        return "+".join(parts) if parts else "bs"

    def validate(self):
        if self.td and not self.sd:
            raise ConfigError("ablation.td: temporal distillation requires ablation.sd")
        if self.encoder and not self.sd:
            raise ConfigError("ablation.fe_o/fe_t: the encoder requires ablation.sd")
        if self.fe_o and self.fe_t:
            raise ConfigError("ablation.fe_o and ablation.fe_t are mutually exclusive")


@dataclass
class DataConfig:
    layout: str = "auto"
    resolution: str = "480p"

    def validate(self):
        if self.layout not in LAYOUTS:
            raise ConfigError(f"data.layout: expected one of {LAYOUTS}, got {self.layout!r}")


@dataclass
class RunConfig:
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.arch.validate()
        self.loss.validate()
        self.train.validate()
        self.ablation.validate()
        self.data.validate()
        return self

    def loss_config(self, stage: int = 2) -> LossConfig:
        """Loss settings implied by the ablation flags for ``stage``."""
        flags = self.ablation
        return LossConfig(
            alpha=self.loss.alpha,
            temporal_mode=flags.temporal_mode if stage == 2 else "none",
            spatial_distill=flags.sd,
            temporal_distill=flags.td,
            temporal_weight=self.loss.temporal_weight,
        )

    def to_dict(self) -> dict:
        return flatten(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(self).items())


# ---------------------------------------------------------------------------
# flat key-value io


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(key: str, text: str, tp):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            (item_tp, _) = typing.get_args(tp)
            return tuple(_parse(key, t, item_tp) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def _set(cfg, key: str, text: str):
    obj = cfg
    parts = key.split(".")
    for i, part in enumerate(parts):
        hints = typing.get_type_hints(type(obj))
        if part not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        if i == len(parts) - 1:
            if dataclasses.is_dataclass(hints[part]):
                raise ConfigError(f"config key {key!r} names a section, not a value")
            setattr(obj, part, _parse(key, text, hints[part]))
        else:
            obj = getattr(obj, part)
            if not dataclasses.is_dataclass(obj):
                raise ConfigError(f"unknown config key {key!r}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        _set(cfg, key, value)
    return cfg.validate()


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read and validate a config file; ``None`` gives the defaults."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, cfg)
    for key, value in (overrides or {}).items():
        _set(cfg, key, value if isinstance(value, str) else _format(value))
    return cfg.validate()


def config_from_dict(values: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in values.items():
        _set(cfg, key, _format(tuple(value)) if isinstance(value, list) else _format(value))
    return cfg.validate()
