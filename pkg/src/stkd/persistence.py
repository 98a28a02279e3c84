"""Dataset indexing, image io and the checkpoint container.

Checkpoint file layout (all integers little-endian)::

    b"STKDCKPT"            8-byte magic
    u32                    format version
    u64                    header length in bytes
    header                 UTF-8 JSON, sorted keys, no whitespace
    blobs                  tensor data, concatenated in header order
    sha256                 32-byte digest of everything above

The header holds ``stage``, ``iteration``, the flat run ``config``,
``removable_prefixes`` and one ``tensors`` entry per array with ``name``,
``dtype`` (``<f4`` or ``<i8``), ``shape``, ``offset`` and ``nbytes``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from stkd.config import RunConfig, config_from_dict
from stkd.errors import CheckpointError, DataError
from stkd.model import ENCODER_PREFIX, ParameterStore

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
DATA_ROOT_ENV = "STKD_DATA_ROOT"
MAGIC = b"STKDCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Sequence:
    name: str
    frames: list[Path]
    masks: list[Path | None]

    def __len__(self):
        return len(self.frames)

    @property
    def annotated(self) -> list[int]:
        return [i for i, m in enumerate(self.masks) if m is not None]


@dataclass
class DatasetIndex:
    root: Path
    kind: str  # "video" or "still"
    sequences: list[Sequence]
    exceptions: list[str] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return sum(len(s) for s in self.sequences)

    def select(self, names) -> "DatasetIndex":
        names = list(names)
        known = {s.name for s in self.sequences}
        unknown = [n for n in names if n not in known]
        if unknown:
            raise DataError(f"unknown sequences: {unknown}")
        seqs = [s for s in self.sequences if s.name in names]
        return DatasetIndex(self.root, self.kind, seqs, list(self.exceptions))


def resolve_data_root(path: str | Path) -> Path:
    """Relative paths are taken against ``$STKD_DATA_ROOT`` when it is set."""
    p = Path(path)
    env = os.environ.get(DATA_ROOT_ENV)
    if env and not p.is_absolute():
        p = Path(env) / p
    return p


def _images(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()}


def _pair(name: str, frame_dir: Path, mask_dir: Path, exceptions: list[str]) -> Sequence | None:
    frames = _images(frame_dir)
    if not frames:
        return None
    masks = _images(mask_dir)
    stems = sorted(frames)
    for stem in stems:
        if stem not in masks:
            exceptions.append(f"{name}/{stem}: no annotation")
    return Sequence(name, [frames[s] for s in stems], [masks.get(s) for s in stems])


def detect_layout(root: Path) -> str:
    if (root / "JPEGImages").is_dir():
        return "davis"
    if (root / "frames").is_dir():
        return "flat_pairs"
    raise DataError(f"cannot detect dataset layout under {root} (expected JPEGImages/ or frames/)")


def index_dataset(root: str | Path, layout: str = "auto", resolution: str = "480p") -> DatasetIndex:
    root = resolve_data_root(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    if layout == "auto":
        layout = detect_layout(root)
    exceptions: list[str] = []
    sequences = []
    if layout == "davis":
        img_root = root / "JPEGImages" / resolution
        ann_root = root / "Annotations" / resolution
        if not img_root.is_dir():
            img_root, ann_root = root / "JPEGImages", root / "Annotations"
        for seq_dir in sorted(p for p in img_root.iterdir() if p.is_dir()):
            seq = _pair(seq_dir.name, seq_dir, ann_root / seq_dir.name, exceptions)
            if seq is not None:
                sequences.append(seq)
        kind = "video"
    elif layout == "flat_pairs":
        seq = _pair(root.name, root / "frames", root / "masks", exceptions)
        if seq is not None:
            sequences.append(seq)
        kind = "still"
    else:
        raise DataError(f"unknown layout {layout!r}")
    if not sequences:
        raise DataError(f"no frames found under {root} ({layout} layout)")
    for e in exceptions:
        log.warning("dataset %s: %s", root, e)
    return DatasetIndex(root, kind, sequences, exceptions)


def load_image(path: str | Path) -> np.ndarray:
    """RGB uint8 array (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_mask(path: str | Path) -> np.ndarray:
    """Binary float32 mask (H, W). Grayscale masks split at 128; palette
    masks (DAVIS style) treat any non-zero index as foreground."""
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                arr = np.asarray(im) > 0
            else:
                arr = np.asarray(im.convert("L")) >= 128
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return arr.astype(np.float32)


def load_prediction(path: str | Path) -> np.ndarray:
    """8-bit saliency map as float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read saliency map {path}: {exc}") from exc


def save_map(path: str | Path, saliency: np.ndarray):
    from stkd.inference import to_uint8

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(saliency)).save(path)


def write_pair(frame_path: Path, mask_path: Path, frame: np.ndarray, mask: np.ndarray):
    frame_path.parent.mkdir(parents=True, exist_ok=True)
    mask_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame).save(frame_path)
    Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255).save(mask_path)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict
    stage: int
    iteration: int
    removable_prefixes: list[str] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @classmethod
    def from_store(cls, store: ParameterStore, cfg: RunConfig, stage: int, iteration: int) -> "Checkpoint":
        removable = [ENCODER_PREFIX] if (cfg.ablation.fe_o and not cfg.ablation.fe_t) else []
        return cls(dict(store.tensors), cfg.to_dict(), stage, iteration, removable)

    def run_config(self) -> RunConfig:
        return config_from_dict(self.config)

    def store(self) -> ParameterStore:
        return ParameterStore(dict(self.tensors), {"stage": self.stage, "iteration": self.iteration})

    @property
    def has_encoder(self) -> bool:
        return any(k.startswith(ENCODER_PREFIX) for k in self.tensors)

    @property
    def encoder_at_test(self) -> bool:
        return bool(self.config.get("ablation.fe_t", False))

    def strip_removable(self) -> "Checkpoint":
        kept = {k: v for k, v in self.tensors.items() if not k.startswith(tuple(self.removable_prefixes))}
        return Checkpoint(kept, dict(self.config), self.stage, self.iteration, list(self.removable_prefixes))


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu()
        if t.is_floating_point():
            arr, dtype = t.to(torch.float32).numpy().astype("<f4"), "<f4"
        else:
            arr, dtype = t.to(torch.int64).numpy().astype("<i8"), "<i8"
        data = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": {k: _jsonable(v) for k, v in ckpt.config.items()},
        "iteration": ckpt.iteration,
        "removable_prefixes": list(ckpt.removable_prefixes),
        "stage": ckpt.stage,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", ckpt.version, len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    fixed = len(MAGIC) + 12
    if len(data) < fixed + _DIGEST or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file or truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch (file corrupt or truncated)")
    version, head_len = struct.unpack("<IQ", data[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {version}, this library reads {FORMAT_VERSION}")
    header = json.loads(body[fixed : fixed + head_len])
    blob = body[fixed + head_len :]
    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    return Checkpoint(
        tensors=tensors,
        config=header["config"],
        stage=header["stage"],
        iteration=header["iteration"],
        removable_prefixes=header["removable_prefixes"],
        version=version,
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data, str(path))


def config_diff(a: dict, b: dict, prefix: str = "arch.") -> dict:
    """Keys under ``prefix`` whose values differ, as ``{key: (a, b)}``."""
    keys = sorted(k for k in set(a) | set(b) if k.startswith(prefix))
    norm = lambda v: list(v) if isinstance(v, (tuple, list)) else v  # noqa: E731
    return {k: (a.get(k), b.get(k)) for k in keys if norm(a.get(k)) != norm(b.get(k))}
