"""Saliency evaluation: maximum F-measure and MAE.

Conventions (also written into every report):

* 256 thresholds; at threshold k a pixel is positive when pred >= (k + 0.5) / 256.
* Precision is 0 when nothing is predicted positive.
* Frames whose ground truth has no foreground are left out of the
  precision/recall averages (they still count for MAE).
* Per-frame precision and recall are averaged over the set first; F is
  computed from the averages, then maximized over thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_THRESHOLDS = 256
THRESHOLDS = (np.arange(N_THRESHOLDS) + 0.5) / N_THRESHOLDS
BETA2 = 0.3

CONVENTIONS = {
    "thresholds": "256 levels, positive iff pred >= (k + 0.5) / 256",
    "averaging": "per-frame precision/recall averaged over frames, F from the averages",
    "empty_prediction": "precision = 0",
    "empty_ground_truth": "frame excluded from precision/recall averages, kept for MAE",
    "resize": "prediction resized bilinearly to ground-truth size",
    "beta2": BETA2,
}


@dataclass
class EvalResult:
    precision: np.ndarray
    recall: np.ndarray
    fmeasure: np.ndarray
    f_max: float
    mae: float
    frame_count: int
    empty_gt_frames: int = 0
    beta2: float = BETA2

    def to_report(self) -> dict:
        return {
            "f_max": self.f_max,
            "mae": self.mae,
            "frame_count": self.frame_count,
            "empty_gt_frames": self.empty_gt_frames,
            "best_threshold": int(np.argmax(self.fmeasure)),
            "thresholds": THRESHOLDS.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "fmeasure": self.fmeasure.tolist(),
            "conventions": dict(CONVENTIONS, beta2=self.beta2),
        }


def _as_gt(gt) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.dtype == bool:
        return gt
    values = np.unique(gt)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"ground truth must be binary (0/1), found values {values[:8].tolist()}")
    return gt.astype(bool)


def _as_pred(pred, shape=None) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if shape is not None and pred.shape != tuple(shape):
        pred = resize_bilinear(pred, shape)
    if pred.size and (pred.min() < 0 or pred.max() > 1):
        raise ValueError("predictions must lie in [0, 1]")
    return pred


def resize_bilinear(pred: np.ndarray, shape) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(pred, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)
    return out[0, 0].numpy().clip(0.0, 1.0)


def pr_at_threshold(pred, gt, threshold: int) -> tuple[float, float]:
    if not 0 <= threshold < N_THRESHOLDS:
        raise ValueError(f"threshold must be in 0..255, got {threshold}")
    gt = _as_gt(gt)
    pred = _as_pred(pred, gt.shape)
    positive = pred >= THRESHOLDS[threshold]
    tp = np.count_nonzero(positive & gt)
    npos = np.count_nonzero(positive)
    nfg = np.count_nonzero(gt)
    precision = tp / npos if npos else 0.0
    recall = tp / nfg if nfg else 1.0
    return float(precision), float(recall)


def pr_curve(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at all 256 thresholds for one frame."""
    gt = _as_gt(gt)
    pred = _as_pred(pred, gt.shape)
    # level[p] = number of thresholds <= pred[p]; pixel positive at k iff level > k
    level = np.searchsorted(THRESHOLDS, pred.ravel(), side="right")
    fg = gt.ravel()
    hist_fg = np.bincount(level[fg], minlength=N_THRESHOLDS + 1)
    hist_all = np.bincount(level, minlength=N_THRESHOLDS + 1)
    tp = np.cumsum(hist_fg[::-1])[::-1][1:]
    npos = np.cumsum(hist_all[::-1])[::-1][1:]
    nfg = np.count_nonzero(fg)
    precision = np.divide(tp, npos, out=np.zeros(N_THRESHOLDS), where=npos > 0)
    recall = tp / nfg if nfg else np.ones(N_THRESHOLDS)
    return precision, recall


def f_beta(precision, recall, beta2: float = BETA2):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _pair(preds, gts):
    preds, gts = list(preds), list(gts)
    if not preds:
        raise ValueError("empty evaluation set")
    if len(preds) != len(gts):
        raise ValueError(f"unpaired sets: {len(preds)} predictions vs {len(gts)} ground truths")
    return preds, gts


def mae(preds, gts) -> float:
    preds, gts = _pair(preds, gts)
    errs = []
    for p, g in zip(preds, gts):
        g = _as_gt(g)
        errs.append(np.mean(np.abs(_as_pred(p, g.shape) - g)))
    return float(np.mean(errs))


def evaluate(preds, gts, beta2: float = BETA2) -> EvalResult:
    preds, gts = _pair(preds, gts)
    ps, rs, errs = [], [], []
    empty = 0
    for p, g in zip(preds, gts):
        g = _as_gt(g)
        p = _as_pred(p, g.shape)
        errs.append(np.mean(np.abs(p - g)))
        if not g.any():
            empty += 1
            continue
        prec, rec = pr_curve(p, g)
        ps.append(prec)
        rs.append(rec)
    if not ps:
        raise ValueError("every ground-truth map is empty; F-measure is undefined")
    precision = np.mean(ps, axis=0)
    recall = np.mean(rs, axis=0)
    fm = f_beta(precision, recall, beta2)
    return EvalResult(
        precision=precision,
        recall=recall,
        fmeasure=fm,
        f_max=float(fm.max()),
        mae=float(np.mean(errs)),
        frame_count=len(preds),
        empty_gt_frames=empty,
        beta2=beta2,
    )


max_f_measure = evaluate
