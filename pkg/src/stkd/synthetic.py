"""Synthetic moving-square video sequences for toy-scale runs and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from stkd.persistence import write_pair


def moving_square_sequence(
    rng: np.random.Generator,
    n_frames: int = 5,
    size: int = 64,
    side: tuple[int, int] = (14, 24),
    speed: float = 1.0,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """A saturated square drifting over a dull textured background.

    ``speed`` bounds the per-axis displacement in pixels per frame. Returns
    ``n_frames`` uint8 RGB frames (size, size, 3) and float32 binary masks.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(70, 150, size=3)
    tilt = rng.uniform(-30, 30, size=(2, 3))
    background = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]
    color = np.zeros(3)
    color[rng.integers(3)] = 255
    color[rng.integers(3)] = rng.uniform(0, 255)
    s = int(rng.integers(side[0], side[1] + 1))
    pos = rng.uniform(0, size - s, size=2)
    vel = rng.uniform(-speed, speed, size=2)
    frames, masks = [], []
    for _ in range(n_frames):
        pos = np.clip(pos + vel, 0, size - s)
        y, x = int(round(pos[0])), int(round(pos[1]))
        img = background + rng.normal(0, 6, size=background.shape)
        mask = np.zeros((size, size), np.float32)
        mask[y : y + s, x : x + s] = 1
        img[mask > 0] = color + rng.normal(0, 6, size=(int(mask.sum()), 3))
        frames.append(np.clip(img, 0, 255).astype(np.uint8))
        masks.append(mask)
    return frames, masks


def write_davis(root: str | Path, sequences: dict, resolution: str = "480p") -> Path:
    """Write ``{name: (frames, masks)}`` in the DAVIS directory layout."""
    root = Path(root)
    for name, (frames, masks) in sequences.items():
        for i, (f, m) in enumerate(zip(frames, masks)):
            write_pair(
                root / "JPEGImages" / resolution / name / f"{i:05d}.png",
                root / "Annotations" / resolution / name / f"{i:05d}.png",
                f,
                m,
            )
    return root


def make_dataset(
    root: str | Path, n_sequences: int, n_frames: int = 5, size: int = 64, seed: int = 0, speed: float = 1.0
) -> Path:
    rng = np.random.default_rng(seed)
    seqs = {f"seq{k:02d}": moving_square_sequence(rng, n_frames, size, speed=speed) for k in range(n_sequences)}
    return write_davis(root, seqs)
