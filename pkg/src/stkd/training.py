"""Two-stage training.

Stage 1 trains the backbone, ASPP and the two embedding units on single
frames (still images and video frames mixed uniformly). Stage 2 fine-tunes
on frame pairs (t, t + t0) from the same sequence: frame t's final
prediction P_2 is the temporal teacher, and depending on the ablation flags
the second frame is supervised with the plain temporal loss (P_0..P_2) or,
with the inter-frame encoder, the encoded one (P_0..P_3).

SGD with momentum and weight decay; the learning rate follows
``base * (1 - iter / max_iter) ** 0.9``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from stkd.config import RunConfig, TrainConfig
from stkd.embedding import PhasePredictions
from stkd.errors import ConfigError, DataError, MissingParameterError, NumericalError
from stkd.features import FeaturePyramid
from stkd.losses import spatial_loss, temporal_loss
from stkd.model import ENCODER_PREFIX, ParameterStore, STKDNet
from stkd.persistence import Checkpoint, DatasetIndex, load_image, load_mask, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = "iter\tlr\tL_s\tL_t\ttotal\n"


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


# ---------------------------------------------------------------------------
# frame pairs


def pair_offsets(n: int, t: int, t0_max: int) -> list[int]:
    return [o for k in range(1, t0_max + 1) for o in (-k, k) if 0 <= t + o < n]


def sample_pair_indices(n: int, t0_max: int, rng: np.random.Generator) -> tuple[int, int]:
    """Pick (t, offset): t uniform over the sequence, offset uniform over the
    non-zero offsets with |offset| <= t0_max that stay inside it."""
    if n < 2:
        raise DataError(f"frame pairs need a sequence of at least 2 frames, got {n}")
    t = int(rng.integers(n))
    legal = pair_offsets(n, t, t0_max)
    return t, legal[int(rng.integers(len(legal)))]


@dataclass
class AugmentParams:
    resize: tuple[int, int] | None
    angle: float
    top: int
    left: int
    crop: int
    flip: bool


def sample_augment(height: int, width: int, cfg: TrainConfig, rng: np.random.Generator) -> AugmentParams:
    crop = cfg.crop
    resize = None
    if min(height, width) < crop:
        scale = crop / min(height, width)
        height, width = max(crop, round(height * scale)), max(crop, round(width * scale))
        resize = (height, width)
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg > 0 else 0.0
    top = int(rng.integers(height - crop + 1))
    left = int(rng.integers(width - crop + 1))
    flip = bool(rng.random() < 0.5) if cfg.flip else False
    return AugmentParams(resize, angle, top, left, crop, flip)


def apply_geometry(x: torch.Tensor, p: AugmentParams) -> torch.Tensor:
    """Resize / rotate / crop / flip a (C, H, W) float tensor."""
    if p.resize is not None:
        x = TF.resize(x, list(p.resize), interpolation=InterpolationMode.BILINEAR, antialias=False)
    if p.angle:
        x = TF.rotate(x, p.angle, interpolation=InterpolationMode.BILINEAR, fill=0.0)
    x = x[:, p.top : p.top + p.crop, p.left : p.left + p.crop]
    if p.flip:
        x = x.flip(-1)
    return x


def augment_mask(mask: np.ndarray | torch.Tensor, p: AugmentParams) -> torch.Tensor:
    m = torch.tensor(np.asarray(mask, dtype=np.float32))[None]
    return (apply_geometry(m, p) >= 0.5).to(torch.float32)


def normalize(image: np.ndarray | torch.Tensor, mean, std) -> torch.Tensor:
    """uint8 (H, W, 3) or float (3, H, W) in [0, 255] -> normalized float (3, H, W)."""
    x = image if isinstance(image, torch.Tensor) else torch.tensor(np.asarray(image))
    if x.dim() == 3 and x.shape[-1] == 3 and x.shape[0] != 3:
        x = x.permute(2, 0, 1)
    x = x.to(torch.float32) / 255.0
    mean = torch.tensor(mean, dtype=torch.float32)[:, None, None]
    std = torch.tensor(std, dtype=torch.float32)[:, None, None]
    return (x - mean) / std


def augment(frames, masks, cfg: RunConfig, rng: np.random.Generator):
    """One geometric transform, sampled once, applied to every frame and mask.

    Returns normalized frame tensors (3, crop, crop), binary mask tensors
    (1, crop, crop) and the sampled parameters.
    """
    h, w = frames[0].shape[:2]
    for f, m in zip(frames, masks):
        if f.shape[:2] != (h, w) or np.shape(m) != (h, w):
            raise DataError("frames and masks of one sample must share a size")
    p = sample_augment(h, w, cfg.train, rng)
    out_f = [apply_geometry(torch.tensor(np.asarray(f)).permute(2, 0, 1).float(), p) for f in frames]
    out_f = [normalize(f, cfg.arch.mean, cfg.arch.std) for f in out_f]
    out_m = [augment_mask(m, p) for m in masks]
    return out_f, out_m, p


@dataclass
class FramePair:
    frame_t: torch.Tensor
    frame_t0: torch.Tensor
    gt_t: torch.Tensor
    gt_t0: torch.Tensor
    offset: int
    sequence: str = ""
    t: int = 0


class FrameCache:
    """Decoded frames and masks keyed by path."""

    def __init__(self):
        self._frames, self._masks = {}, {}

    def frame(self, path) -> np.ndarray:
        if path not in self._frames:
            self._frames[path] = load_image(path)
        return self._frames[path]

    def mask(self, path) -> np.ndarray:
        if path not in self._masks:
            self._masks[path] = load_mask(path)
        return self._masks[path]


def sample_pair(sequence, cfg: RunConfig, rng: np.random.Generator, cache: FrameCache | None = None) -> FramePair:
    cache = cache or FrameCache()
    annotated = sequence.annotated
    if len(annotated) < 2:
        raise DataError(f"sequence {sequence.name!r} has fewer than 2 annotated frames")
    t, off = sample_pair_indices(len(annotated), cfg.train.t0_max, rng)
    i, j = annotated[t], annotated[t + off]
    frames = [cache.frame(sequence.frames[i]), cache.frame(sequence.frames[j])]
    masks = [cache.mask(sequence.masks[i]), cache.mask(sequence.masks[j])]
    (ft, ft0), (gt, gt0), _ = augment(frames, masks, cfg, rng)
    return FramePair(ft, ft0, gt, gt0, off, sequence.name, t)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    net: STKDNet
    checkpoint: Path | None
    history: list[dict] = field(default_factory=list)
    init_report: dict = field(default_factory=dict)


def _single_frames(indices: list[DatasetIndex]):
    items = [(s, i) for idx in indices for s in idx.sequences for i in s.annotated]
    if not items:
        raise DataError("no annotated frames to train on")
    return items


def _video_sequences(indices: list[DatasetIndex]):
    seqs = [s for idx in indices if idx.kind == "video" for s in idx.sequences if len(s.annotated) >= 2]
    if not seqs:
        raise DataError("stage 2 needs video sequences with at least 2 annotated frames")
    return seqs


def _split(pyr: FeaturePyramid, phases: PhasePredictions, b: int):
    def cut(t, part):
        return t[:b] if part == 0 else t[b:]

    out = []
    for part in (0, 1):
        p = FeaturePyramid([cut(s, part) for s in pyr.side_outputs], cut(pyr.low_level, part), cut(pyr.high_level, part))
        ph = PhasePredictions([cut(x, part) for x in phases.logits], [cut(x, part) for x in phases.residuals])
        out.append((p, ph))
    return out


def seed_everything(seed: int):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


class _Loop:
    def __init__(self, net: STKDNet, cfg: RunConfig, stage: int, out: Path | None, max_iter: int | None):
        self.net, self.cfg, self.stage, self.out = net, cfg, stage, out
        st = cfg.train.stage(stage)
        self.base_lr, self.max_iter = st.lr, max_iter or st.max_iter
        self.schedule_len = st.max_iter if max_iter is None else max(max_iter, 1)
        self.opt = torch.optim.SGD(
            net.parameters(), lr=st.lr, momentum=st.momentum, weight_decay=cfg.train.weight_decay
        )
        self.history: list[dict] = []
        self.log_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            self.log_fh = open(out / f"loss_stage{stage}.tsv", "w")
            self.log_fh.write(LOG_HEADER)

    def save(self, it: int, name: str | None = None) -> Path | None:
        if self.out is None:
            return None
        ckpt = Checkpoint.from_store(self.net.to_store(), self.cfg, self.stage, it)
        return save_checkpoint(self.out / (name or f"stage{self.stage}_iter{it:06d}.stkd"), ckpt)

    def run(self, step) -> tuple[list[dict], Path | None]:
        self.net.train()
        try:
            for it in range(self.max_iter):
                lr = poly_lr(self.base_lr, it, self.schedule_len, self.cfg.train.lr_power)
                for g in self.opt.param_groups:
                    g["lr"] = lr
                l_s, l_t, total = step()
                if not torch.isfinite(total):
                    raise NumericalError(
                        f"stage {self.stage} diverged at iteration {it}: L_s={l_s.item()} L_t={l_t.item()}"
                    )
                self.opt.zero_grad(set_to_none=True)
                total.backward()
                if self.cfg.train.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(self.net.parameters(), self.cfg.train.grad_clip)
                self.opt.step()
                row = {"iter": it, "lr": lr, "L_s": l_s.item(), "L_t": l_t.item(), "total": total.item()}
                self.history.append(row)
                if self.log_fh:
                    self.log_fh.write(
                        f"{it}\t{lr:.10e}\t{row['L_s']:.10e}\t{row['L_t']:.10e}\t{row['total']:.10e}\n"
                    )
                if (it + 1) % self.cfg.train.checkpoint_every == 0 and it + 1 < self.max_iter:
                    self.save(it + 1)
            final = self.save(self.max_iter, f"stage{self.stage}_final.stkd")
        finally:
            if self.log_fh:
                self.log_fh.close()
        return self.history, final


def train_stage1(
    indices: list[DatasetIndex],
    cfg: RunConfig,
    out: str | Path | None = None,
    max_iter: int | None = None,
    init: ParameterStore | None = None,
) -> TrainResult:
    """Single-frame training of the spatial network."""
    cfg.validate()
    rng = seed_everything(cfg.train.seed)
    net = STKDNet(cfg.arch, with_encoder=False)
    if init is not None:
        net.load_store(init, strict=True)
    items = _single_frames(indices)
    loss_cfg = cfg.loss_config(stage=1)
    cache = FrameCache()

    def step():
        frames, gts = [], []
        for _ in range(cfg.train.batch_size):
            seq, i = items[int(rng.integers(len(items)))]
            (f,), (m,), _ = augment([cache.frame(seq.frames[i])], [cache.mask(seq.masks[i])], cfg, rng)
            frames.append(f)
            gts.append(m)
        phases = net(torch.stack(frames))
        rep = spatial_loss(phases, torch.stack(gts), loss_cfg)
        return rep.total, torch.zeros(()), rep.total

    loop = _Loop(net, cfg, 1, Path(out) if out is not None else None, max_iter)
    history, final = loop.run(step)
    return TrainResult(net, final, history)


def init_stage2(init: ParameterStore | Checkpoint, cfg: RunConfig) -> tuple[STKDNet, dict]:
    """Build the stage-2 network from a stage-1 store.

    Returns the network and a report with the ``adopted`` keys taken from
    ``init`` and the ``fresh`` (encoder) keys left at their initialization.
    """
    store = init.store() if isinstance(init, Checkpoint) else init
    net = STKDNet(cfg.arch, with_encoder=cfg.ablation.encoder)
    rep = net.load_store(store, strict=False)
    hard = [k for k in rep["missing"] if not k.startswith(ENCODER_PREFIX)]
    if hard:
        raise MissingParameterError(f"init checkpoint lacks spatial-network keys: {hard}")
    bad = [k for k in rep["unexpected"] if not k.startswith(ENCODER_PREFIX)]
    if bad:
        raise MissingParameterError(f"init checkpoint has keys this architecture lacks: {bad}")
    return net, {"adopted": rep["loaded"], "fresh": rep["missing"], "dropped": rep["unexpected"]}


def stage2_losses(net: STKDNet, pairs: list[FramePair], cfg: RunConfig):
    """(spatial report, temporal report or None, total) for a batch of pairs."""
    loss_cfg = cfg.loss_config(stage=2)
    ft = torch.stack([p.frame_t for p in pairs])
    gt_t = torch.stack([p.gt_t for p in pairs])
    if loss_cfg.temporal_mode == "none":
        phases = net(ft)
        rep_s = spatial_loss(phases, gt_t, loss_cfg)
        return rep_s, None, rep_s.total
    b = len(pairs)
    ft0 = torch.stack([p.frame_t0 for p in pairs])
    gt_t0 = torch.stack([p.gt_t0 for p in pairs])
    pyr, phases = net.forward_spatial(torch.cat([ft, ft0]))
    (pyr_t, ph_t), (pyr_t0, ph_t0) = _split(pyr, phases, b)
    rep_s = spatial_loss(ph_t, gt_t, loss_cfg)
    if loss_cfg.temporal_mode == "encoded":
        ph_t0 = net.forward_temporal(pyr_t.high_level, pyr_t0, ph_t0)
    rep_t = temporal_loss(ph_t0, ph_t.final, gt_t0, loss_cfg)
    return rep_s, rep_t, rep_s.total + loss_cfg.temporal_weight * rep_t.total


def train_stage2(
    init: ParameterStore | Checkpoint,
    indices: list[DatasetIndex],
    cfg: RunConfig,
    out: str | Path | None = None,
    max_iter: int | None = None,
) -> TrainResult:
    """Pair-wise fine-tuning with spatial/temporal distillation per the ablation flags."""
    cfg.validate()
    if isinstance(init, Checkpoint) and init.stage not in (1, 2):
        raise ConfigError(f"init checkpoint has unknown stage {init.stage}")
    rng = seed_everything(cfg.train.seed + 1)
    net, report = init_stage2(init, cfg)
    seqs = _video_sequences(indices)
    cache = FrameCache()

    def step():
        pairs = [sample_pair(seqs[int(rng.integers(len(seqs)))], cfg, rng, cache) for _ in range(cfg.train.batch_size)]
        rep_s, rep_t, total = stage2_losses(net, pairs, cfg)
        return rep_s.total, rep_t.total if rep_t is not None else torch.zeros(()), total

    loop = _Loop(net, cfg, 2, Path(out) if out is not None else None, max_iter)
    history, final = loop.run(step)
    return TrainResult(net, final, history, report)


def loss_drop(history: list[dict], window: int = 10, key: str = "total") -> float:
    """Ratio of the mean of the first ``window`` losses to the mean of the last."""
    head = np.mean([h[key] for h in history[:window]])
    tail = np.mean([h[key] for h in history[-window:]])
    return float(head / tail) if tail > 0 else math.inf
