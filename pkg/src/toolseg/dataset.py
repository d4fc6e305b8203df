"""Sequence-structured image/mask ingestion and label encoding.

Expected directory layout::

    root/<sequence_id>/images/*.png
    root/<sequence_id>/masks/*.png

Image and mask files pair up by shared stem. Masks are single-channel
8-bit rasters whose pixel values are class IDs. The stored class map is
background-first, ``{background: 0, shaft: 1, manipulator: 2}``, which
makes the binary collapse (tool vs background) a one-liner; reports may
present classes in a different order.

Images are normalized to [0, 1] and then standardized with explicit
per-channel mean/std constants (:class:`Preprocessing`), so the exact
preprocessing is reproducible from a checkpoint alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidLabelError, MissingAnnotationError

__all__ = [
    "DEFAULT_CLASS_MAP",
    "BINARY_CLASS_MAP",
    "DEFAULT_PALETTE",
    "Preprocessing",
    "FrameRecord",
    "SequenceDataset",
    "load_dataset",
    "load_image",
    "load_mask",
    "encode_one_hot",
    "decode_one_hot",
    "to_binary",
    "split_train_val",
    "render_overlay",
    "read_palette",
]

DEFAULT_CLASS_MAP = {"background": 0, "shaft": 1, "manipulator": 2}
BINARY_CLASS_MAP = {"background": 0, "tool": 1}

DEFAULT_PALETTE = {1: (220, 60, 60), 2: (60, 90, 220)}


@dataclass(frozen=True)
class Preprocessing:
    """Per-channel standardization constants applied after the [0, 1]
    normalization."""

    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class FrameRecord:
    sequence_id: str
    frame_id: str
    image_path: Path
    mask_path: Path


@dataclass(frozen=True)
class SequenceDataset:
    sequences: tuple[tuple[str, tuple[FrameRecord, ...]], ...]
    class_map: tuple[tuple[str, int], ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_map)

    @property
    def class_names(self) -> dict[int, str]:
        return {cid: name for name, cid in self.class_map}

    def frames(self) -> list[FrameRecord]:
        return [f for _, frames in self.sequences for f in frames]

    def __len__(self) -> int:
        return sum(len(frames) for _, frames in self.sequences)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.height, im.width


def load_dataset(root_dir, class_map: dict[str, int] | None = None) -> SequenceDataset:
    """Scan a dataset root and validate every image/mask pair.

    Frames are ordered lexicographically within each sequence and
    sequences lexicographically by ID, so repeated loads give identical
    ordering. A missing mask raises :class:`MissingAnnotationError`
    naming the frame; a mask with an ID >= C raises
    :class:`InvalidLabelError`; an image/mask size disagreement raises
    ``ValueError``.
    """
    root = Path(root_dir)
    if class_map is None:
        class_map = DEFAULT_CLASS_MAP
    num_classes = len(class_map)
    if sorted(class_map.values()) != list(range(num_classes)):
        raise ValueError(f"class map IDs must be 0..{num_classes - 1}")
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not seq_dirs:
        raise ValueError(f"dataset root {root} has no sequence directories")
    sequences = []
    for seq_dir in seq_dirs:
        images_dir = seq_dir / "images"
        masks_dir = seq_dir / "masks"
        if not images_dir.is_dir():
            raise ValueError(f"{seq_dir.name}: missing images/ directory")
        if not masks_dir.is_dir():
            raise ValueError(f"{seq_dir.name}: missing masks/ directory")
        frames = []
        for image_path in sorted(images_dir.glob("*.png")):
            stem = image_path.stem
            mask_path = masks_dir / f"{stem}.png"
            if not mask_path.is_file():
                raise MissingAnnotationError(
                    f"no mask for frame {seq_dir.name}/{stem}")
            if _image_size(image_path) != _image_size(mask_path):
                raise ValueError(
                    f"frame {seq_dir.name}/{stem}: image size "
                    f"{_image_size(image_path)} != mask size {_image_size(mask_path)}")
            mask = np.asarray(Image.open(mask_path))
            if mask.ndim != 2:
                raise InvalidLabelError(
                    f"mask {seq_dir.name}/{stem} is not single-channel")
            if mask.max(initial=0) >= num_classes:
                raise InvalidLabelError(
                    f"mask {seq_dir.name}/{stem} contains label "
                    f"{int(mask.max())} >= {num_classes}")
            frames.append(FrameRecord(seq_dir.name, stem, image_path, mask_path))
        sequences.append((seq_dir.name, tuple(frames)))
    return SequenceDataset(tuple(sequences),
                           tuple(sorted(class_map.items(), key=lambda kv: kv[1])))


def load_image(record: FrameRecord,
               preprocessing: Preprocessing | None = None) -> np.ndarray:
    """Read a frame as standardized float64 h x w x 3."""
    if preprocessing is None:
        preprocessing = Preprocessing()
    with Image.open(record.image_path) as im:
        raw = np.asarray(im.convert("RGB"), dtype=np.float64)
    x = raw / 255.0
    mean = np.asarray(preprocessing.mean, dtype=np.float64)
    std = np.asarray(preprocessing.std, dtype=np.float64)
    return (x - mean) / std


def load_mask(record: FrameRecord) -> np.ndarray:
    with Image.open(record.mask_path) as im:
        return np.asarray(im, dtype=np.int64)


def encode_one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """h x w class IDs -> h x w x C one-hot, out[p, c] = 1 iff mask[p] == c."""
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= num_classes:
        bad = mask.min() if mask.min() < 0 else mask.max()
        raise InvalidLabelError(f"label {int(bad)} outside 0..{num_classes - 1}")
    out = np.zeros(mask.shape + (num_classes,), dtype=np.uint8)
    np.put_along_axis(out, mask[..., None].astype(np.intp), 1, axis=-1)
    return out


def decode_one_hot(one_hot: np.ndarray) -> np.ndarray:
    return np.argmax(one_hot, axis=-1).astype(np.int64)


def to_binary(mask: np.ndarray) -> np.ndarray:
    """Collapse {background, shaft, manipulator} to {background, tool}."""
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 2:
        raise InvalidLabelError("binary collapse expects labels in {0, 1, 2}")
    return (mask > 0).astype(mask.dtype)


def split_train_val(dataset: SequenceDataset, val_fraction: float,
                    seed: int = 0) -> tuple[SequenceDataset, SequenceDataset]:
    """Deterministic split: the tail fraction of every sequence becomes
    validation, so adjacent near-duplicate frames never straddle the
    split. The seed only pins the API; the split itself is order-based.
    """
    del seed
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    train_seqs, val_seqs = [], []
    for seq_id, frames in dataset.sequences:
        n_val = int(len(frames) * val_fraction + 0.5)
        cut = len(frames) - n_val
        if frames[:cut]:
            train_seqs.append((seq_id, frames[:cut]))
        if frames[cut:]:
            val_seqs.append((seq_id, frames[cut:]))
    train = SequenceDataset(tuple(train_seqs), dataset.class_map)
    val = SequenceDataset(tuple(val_seqs), dataset.class_map)
    if len(train) == 0 or len(val) == 0:
        raise ValueError(
            f"val_fraction {val_fraction} leaves an empty split "
            f"({len(train)} train / {len(val)} val frames)")
    return train, val


def render_overlay(image: np.ndarray, mask: np.ndarray,
                   palette: dict[int, tuple[int, int, int]] | None = None,
                   alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend class colors over an image (0..255 value range).

    Background pixels (class 0) pass through untouched. Every non-zero
    class present in the mask must have a palette entry.
    """
    if palette is None:
        palette = DEFAULT_PALETTE
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} disagree")
    out = image.copy()
    for cid in np.unique(mask):
        if cid == 0:
            continue
        if int(cid) not in palette:
            raise ValueError(f"palette has no color for class {int(cid)}")
        color = np.asarray(palette[int(cid)], dtype=np.float64)
        sel = mask == cid
        out[sel] = (1.0 - alpha) * out[sel] + alpha * color
    return out


def read_palette(path) -> dict[int, tuple[int, int, int]]:
    """Parse a palette file of lines ``class_id R G B``."""
    palette = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"palette line {line_no}: expected 'class_id R G B'")
        cid, r, g, b = (int(p) for p in parts)
        palette[cid] = (r, g, b)
    return palette
