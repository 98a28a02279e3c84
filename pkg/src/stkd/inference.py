"""Test-time forward path.

The distilled network runs the spatial branch only and returns sigmoid(P_2);
the inter-frame encoder is not loaded. Checkpoints trained with the encoder
kept for testing (``ablation.fe_t``) instead pair each frame with its
predecessor (the first frame with itself) and return sigmoid(P_3).
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from pathlib import Path

import numpy as np
import torch

from stkd.config import RunConfig
from stkd.errors import CheckpointError, DataError, MissingParameterError
from stkd.model import STKDNet
from stkd.persistence import (
    Checkpoint,
    DatasetIndex,
    config_diff,
    load_checkpoint,
    load_image,
    save_map,
)
from stkd.training import normalize

log = logging.getLogger(__name__)


def to_uint8(saliency: np.ndarray) -> np.ndarray:
    """[0, 1] -> 0..255, rounding half up."""
    return np.floor(np.clip(np.asarray(saliency, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


class Predictor:
    def __init__(self, ckpt: Checkpoint | str | Path, cfg: RunConfig | None = None):
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        if cfg is not None:
            diff = config_diff(ckpt.config, cfg.to_dict())
            if diff:
                lines = ", ".join(f"{k}: checkpoint={a!r} config={b!r}" for k, (a, b) in diff.items())
                raise CheckpointError(f"checkpoint does not match the architecture config: {lines}")
        self.ckpt = ckpt
        self.cfg = ckpt.run_config()
        self.temporal = ckpt.encoder_at_test
        if self.temporal and not ckpt.has_encoder:
            raise CheckpointError("checkpoint declares fe_t but carries no encoder parameters")
        self.net = STKDNet(self.cfg.arch, with_encoder=self.temporal)
        try:
            self.net.load_store(ckpt.store(), strict=True)
        except MissingParameterError as exc:
            raise CheckpointError(str(exc)) from exc
        self.net.eval()

    def _tensor(self, image: np.ndarray) -> torch.Tensor:
        return normalize(image, self.cfg.arch.mean, self.cfg.arch.std)[None]

    @torch.inference_mode()
    def infer_frame(self, image: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
        """Saliency map in [0, 1] with the image's height and width."""
        x = self._tensor(image)
        ref = None
        if self.temporal:
            ref = self._tensor(image if reference is None else reference)
        return self.net.predict(x, reference=ref)[0, 0].numpy()

    def infer_sequence(self, frames: list[Path], out_dir: str | Path | None = None) -> dict:
        """Predict every frame; writes ``<stem>.png`` maps when ``out_dir`` is given."""
        if not frames:
            raise DataError("no frames to process")
        out_dir = Path(out_dir) if out_dir is not None else None
        times, skipped, maps = [], [], {}
        previous = None
        for path in frames:
            path = Path(path)
            try:
                image = load_image(path)
            except DataError as exc:
                log.warning("skipping unreadable frame %s: %s", path, exc)
                skipped.append(str(path))
                continue
            start = time.perf_counter()
            sal = self.infer_frame(image, previous)
            times.append(time.perf_counter() - start)
            if self.temporal:
                previous = image
            maps[path.stem] = sal
            if out_dir is not None:
                save_map(out_dir / f"{path.stem}.png", sal)
        return {"maps": maps, "times": times, "skipped": skipped}


def timing_summary(times: list[float]) -> dict:
    if not times:
        return {"frames": 0}
    return {
        "frames": len(times),
        "mean_s": statistics.fmean(times),
        "median_s": statistics.median(times),
        "std_s": statistics.pstdev(times),
        "total_s": sum(times),
    }


def infer_dataset(
    predictor: Predictor, index: DatasetIndex, out_dir: str | Path, sequences: list[str] | None = None
) -> dict:
    """Maps under ``out_dir/<sequence>/<stem>.png`` plus ``out_dir/timing.json``."""
    out_dir = Path(out_dir)
    if sequences:
        index = index.select(sequences)
    all_times, skipped, per_seq = [], [], {}
    for seq in index.sequences:
        dest = out_dir if index.kind == "still" else out_dir / seq.name
        res = predictor.infer_sequence(seq.frames, dest)
        all_times += res["times"]
        skipped += res["skipped"]
        per_seq[seq.name] = timing_summary(res["times"])
    if not all_times:
        raise DataError("no frame could be read")
    report = {
        "timing": timing_summary(all_times),
        "sequences": per_seq,
        "skipped": skipped,
        "mode": "temporal (P_3, previous-frame reference)" if predictor.temporal else "spatial (P_2)",
        "checkpoint_stage": predictor.ckpt.stage,
        "checkpoint_iteration": predictor.ckpt.iteration,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "timing.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report

