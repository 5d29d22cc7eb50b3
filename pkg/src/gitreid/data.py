"""Datasets, P x K identity batches, and training-time augmentation."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

NAME_PATTERN = re.compile(r"^(\d+)_c(\d+)_[^/]*\.(png|jpe?g|bmp)$", re.IGNORECASE)


@dataclass
class DatasetRecord:
    vehicle_id: int
    camera_id: int
    path: Path | None = None
    pixels: np.ndarray | None = None  # [C, H, W] in [0, 1]

    def __post_init__(self):
        if self.vehicle_id < 0 or self.camera_id < 0:
            raise ValueError("ids and cameras must be non-negative")

    def image(self, size: tuple[int, int] | None = None) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        return load_image(self.path, size)


class EmptyDatasetError(ValueError):
    pass


def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an RGB image as float32 ``[3, H, W]`` in [0, 1], resized to ``(H, W)``."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_folder(root) -> tuple[list[DatasetRecord], int]:
    """Parse ``<id>_c<cam>_<anything>.<ext>`` files; returns records and the skip count."""
    root = Path(root)
    records, skipped = [], 0
    for path in sorted(p for p in root.iterdir() if p.is_file()):
        m = NAME_PATTERN.match(path.name)
        if not m:
            skipped += 1
            continue
        records.append(DatasetRecord(int(m.group(1)), int(m.group(2)), path=path))
    if skipped:
        logger.warning("%s: skipped %d files with malformed names", root, skipped)
    if not records:
        raise EmptyDatasetError(f"no usable images under {root}")
    return records, skipped


@dataclass
class SyntheticSpec:
    id_count: int = 8
    images_per_id: int = 6
    height: int = 32
    width: int = 32
    channels: int = 3
    blocks: int = 4  # colour blocks per side
    jitter: float = 0.05
    cameras: int = 4
    seed: int = 0


def synth_dataset(spec: SyntheticSpec) -> list[DatasetRecord]:
    """Per-id random colour-block layouts plus bounded uniform per-pixel jitter.

    Cameras are assigned round-robin within each id.
    """
    if spec.height % spec.blocks or spec.width % spec.blocks:
        raise ValueError("image size must be divisible by the block count")
    rng = np.random.default_rng(spec.seed)
    bh, bw = spec.height // spec.blocks, spec.width // spec.blocks
    records = []
    for vid in range(spec.id_count):
        colours = rng.random((spec.channels, spec.blocks, spec.blocks))
        base = np.repeat(np.repeat(colours, bh, axis=1), bw, axis=2).astype(np.float32)
        for k in range(spec.images_per_id):
            noise = rng.uniform(-spec.jitter, spec.jitter, base.shape).astype(np.float32)
            records.append(DatasetRecord(vid, k % spec.cameras, pixels=base + noise))
    return records


def stack(records: list[DatasetRecord], size=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([r.image(size) for r in records]).astype(np.float32)
    ids = np.array([r.vehicle_id for r in records])
    cams = np.array([r.camera_id for r in records])
    return images, ids, cams


def nearest_neighbour_separates(images: np.ndarray, ids: np.ndarray) -> bool:
    """Leave-one-out 1-NN on raw pixels gets every identity right."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    d = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    return bool((ids[d.argmin(axis=1)] == ids).all())


def relabel(ids: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    """Map arbitrary ids to contiguous class indices ``0..K-1``."""
    uniq = sorted(set(int(i) for i in ids))
    mapping = {v: i for i, v in enumerate(uniq)}
    return np.array([mapping[int(i)] for i in ids]), mapping


# -- sampling ------------------------------------------------------------------------------
class PKSampler:
    """Batches of ``P`` identities with ``K`` images each.

    An epoch visits the identities in a seeded random order; when the id
    count is not a multiple of ``P`` the last batch is topped up with other
    randomly drawn ids so every batch keeps the exact P x K shape.
    """

    def __init__(self, ids, p_ids: int, k_imgs: int, seed: int = 0):
        ids = np.asarray(ids)
        self.p_ids, self.k_imgs, self.seed = p_ids, k_imgs, seed
        self.by_id = {int(v): np.flatnonzero(ids == v) for v in np.unique(ids)}
        if len(self.by_id) < p_ids:
            raise ValueError(f"need at least {p_ids} identities, have {len(self.by_id)}")
        short = [v for v, idx in self.by_id.items() if len(idx) < k_imgs]
        if short:
            logger.warning("%d ids have fewer than %d images; sampling them with replacement", len(short), k_imgs)

    def __len__(self) -> int:
        return math.ceil(len(self.by_id) / self.p_ids)

    def epoch(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch])
        order = list(rng.permutation(sorted(self.by_id)))
        batches = []
        for start in range(0, len(order), self.p_ids):
            chosen = order[start:start + self.p_ids]
            if len(chosen) < self.p_ids:
                rest = [v for v in order if v not in chosen]
                extra = rng.choice(rest, self.p_ids - len(chosen), replace=False)
                chosen = chosen + list(extra)
            batch = []
            for vid in chosen:
                pool = self.by_id[int(vid)]
                batch.extend(rng.choice(pool, self.k_imgs, replace=len(pool) < self.k_imgs))
            batches.append(np.asarray(batch))
        return batches

    def __iter__(self):
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


# -- augmentation ----------------------------------------------------------------------------
ERASE_AREA = (0.02, 0.33)
ERASE_RATIO = (0.3, 3.3)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over a ``[B, C, H, W]`` array."""
    mean = images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = images.std(axis=(0, 2, 3)).astype(np.float32)
    return mean, np.maximum(std, 1e-6).astype(np.float32)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def random_erase(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Replace a random rectangle (2-33 % of the area) with uniform noise."""
    c, h, w = img.shape
    for _ in range(100):
        area = rng.uniform(*ERASE_AREA) * h * w
        ratio = math.exp(rng.uniform(math.log(ERASE_RATIO[0]), math.log(ERASE_RATIO[1])))
        eh = int(round(math.sqrt(area * ratio)))
        ew = int(round(math.sqrt(area / ratio)))
        if 0 < eh < h and 0 < ew < w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            out = img.copy()
            out[:, y:y + eh, x:x + ew] = rng.random((c, eh, ew), dtype=np.float32)
            return out
    return img


def normalize(img: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    shape = (-1, 1, 1) if img.ndim == 3 else (1, -1, 1, 1)
    return ((img - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def augment(img: np.ndarray, rng: np.random.Generator, mean: np.ndarray, std: np.ndarray,
            flip_p: float = 0.5, erase_p: float = 0.5) -> np.ndarray:
    """Flip, random-erase, then z-score one ``[C, H, W]`` image."""
    if rng.random() < flip_p:
        img = hflip(img)
    if rng.random() < erase_p:
        img = random_erase(img, rng)
    return normalize(img, mean, std)


def augment_batch(images: np.ndarray, seed: int, step: int, mean, std,
                  flip_p: float = 0.5, erase_p: float = 0.5) -> np.ndarray:
    rng = np.random.default_rng([seed, step, 1])
    return np.stack([augment(im, rng, mean, std, flip_p, erase_p) for im in images])
