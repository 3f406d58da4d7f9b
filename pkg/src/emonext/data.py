"""FER2013 CSV ingestion, augmentation, resizing and batch iteration."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import CLASS_NAMES, NUM_CLASSES
from .rng import AUGMENT, SHUFFLE, stream
from .tensor import Tensor

IMAGE_SIDE = 48
NUM_PIXELS = IMAGE_SIDE * IMAGE_SIDE
USAGES = ("Training", "PublicTest", "PrivateTest")
SPLITS = {"train": "Training", "val": "PublicTest", "test": "PrivateTest"}
HEADER = ["emotion", "pixels", "Usage"]

# Published per-class counts of the full corpus, rows in CLASS_NAMES order,
# columns Training / PublicTest / PrivateTest.
FER2013_COUNTS = np.array(
    [
        [3995, 467, 491],
        [436, 56, 55],
        [4097, 496, 528],
        [7215, 895, 879],
        [4830, 653, 594],
        [3171, 415, 416],
        [4965, 607, 626],
    ]
)

CROP_PAD = 4
MAX_ROTATION_DEG = 10.0


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # 48 x 48 float32 in [0, 1]
    label: int
    usage: str = "Training"


@dataclass
class DatasetSummary:
    counts: np.ndarray  # NUM_CLASSES x 3, columns ordered as USAGES

    def split_total(self, usage: str) -> int:
        return int(self.counts[:, USAGES.index(usage)].sum())

    def class_total(self, label: int) -> int:
        return int(self.counts[label].sum())

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def table(self) -> str:
        lines = [f"{'class':<10}{'Training':>10}{'PublicTest':>12}{'PrivateTest':>13}{'total':>8}"]
        for k, name in enumerate(CLASS_NAMES):
            row = self.counts[k]
            lines.append(f"{name:<10}{row[0]:>10}{row[1]:>12}{row[2]:>13}{row.sum():>8}")
        tot = self.counts.sum(axis=0)
        lines.append(f"{'Total':<10}{tot[0]:>10}{tot[1]:>12}{tot[2]:>13}{tot.sum():>8}")
        return "\n".join(lines)


def summarize(samples: Sequence[Sample]) -> DatasetSummary:
    counts = np.zeros((NUM_CLASSES, len(USAGES)), dtype=np.int64)
    for s in samples:
        counts[s.label, USAGES.index(s.usage)] += 1
    return DatasetSummary(counts)


def parse_csv(path: str | Path) -> tuple[list[Sample], DatasetSummary]:
    """Read a FER2013-format CSV. Row numbers in errors are file line numbers."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    samples: list[Sample] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise DataError(f"{path}: expected header {','.join(HEADER)!r}, got {header!r}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}: row {line}: expected 3 fields, got {len(row)}")
            emotion, pixels, usage = row
            try:
                label = int(emotion)
            except ValueError:
                raise DataError(f"{path}: row {line}: emotion {emotion!r} is not an integer") from None
            if not 0 <= label < NUM_CLASSES:
                raise DataError(f"{path}: row {line}: label {label} outside 0..{NUM_CLASSES - 1}")
            usage = usage.strip()
            if usage not in USAGES:
                raise DataError(f"{path}: row {line}: unknown Usage {usage!r}")
            try:
                values = np.array(pixels.split(), dtype=np.int64)
            except ValueError:
                raise DataError(f"{path}: row {line}: non-integer pixel value") from None
            if values.size != NUM_PIXELS:
                raise DataError(f"{path}: row {line}: expected {NUM_PIXELS} pixels, got {values.size}")
            if values.min() < 0 or values.max() > 255:
                raise DataError(f"{path}: row {line}: pixel values must lie in 0..255")
            image = (values.reshape(IMAGE_SIDE, IMAGE_SIDE) / 255.0).astype(np.float32)
            samples.append(Sample(image=image, label=label, usage=usage))
    return samples, summarize(samples)


def write_csv(path: str | Path, samples: Sequence[Sample]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        for s in samples:
            pixels = np.rint(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.int64).reshape(-1)
            writer.writerow([s.label, " ".join(map(str, pixels)), s.usage])


def select(samples: Sequence[Sample], split: str) -> list[Sample]:
    """Filter by ``train``/``val``/``test`` (or a raw Usage value)."""
    usage = SPLITS.get(split, split)
    if usage not in USAGES:
        raise DataError(f"unknown split {split!r}; expected one of {', '.join(SPLITS)}")
    return [s for s in samples if s.usage == usage]


# ---------------------------------------------------------------------------
# image transforms
# ---------------------------------------------------------------------------


def bilinear_lookup(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional pixel coordinates, zero outside."""
    h, w = image.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(np.broadcast(ys, xs).shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(valid, wy * wx * vals, 0.0)
    return out


def crop_rotate(image: np.ndarray, top: int, left: int, angle_deg: float) -> np.ndarray:
    """Reflect-pad, crop back to the original size at (top, left), then
    rotate about the center with bilinear resampling and zero fill."""
    h, w = image.shape
    padded = np.pad(image, CROP_PAD, mode="reflect")
    crop = padded[top : top + h, left : left + w]
    if angle_deg == 0.0:
        return np.array(crop, dtype=image.dtype)
    a = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source pixel
    src_x = math.cos(a) * (xx - cx) + math.sin(a) * (yy - cy) + cx
    src_y = -math.sin(a) * (xx - cx) + math.cos(a) * (yy - cy) + cy
    out = bilinear_lookup(crop.astype(np.float64), src_y, src_x)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    top, left = rng.integers(0, 2 * CROP_PAD + 1, size=2)
    angle = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
    return crop_rotate(image, int(top), int(left), float(angle))


def resize(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize with align-corners sampling."""
    if target < 1:
        raise ValueError(f"resize target must be >= 1, got {target}")
    h, w = image.shape
    if (h, w) == (target, target):
        return image.copy()

    def coords(n_in: int) -> np.ndarray:
        if target == 1:
            return np.array([(n_in - 1) / 2.0])
        return np.arange(target) * (n_in - 1) / (target - 1)

    ys = coords(h)[:, None]
    xs = coords(w)[None, :]
    return bilinear_lookup(image.astype(np.float64), ys, xs).astype(image.dtype)


def normalize(image: np.ndarray) -> np.ndarray:
    return (image - 0.5) / 0.5


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    x: Tensor  # N x 1 x S x S
    y: np.ndarray  # N int labels
    indices: np.ndarray  # positions in the source sample list


def prepare(sample: Sample, image_size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    img = sample.image
    if rng is not None:
        img = augment(img, rng)
    return normalize(resize(img, image_size)).astype(np.float32)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return stream(seed, SHUFFLE, epoch).permutation(n)


def batches(
    samples: Sequence[Sample],
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    *,
    image_size: int = 224,
    train: bool = True,
    workers: int = 0,
    dtype=np.float32,
) -> Iterator[Batch]:
    """Yield batches; ``train`` enables shuffling and augmentation.

    Augmentation for sample ``i`` draws from the stream (seed, epoch, i), so
    the output does not depend on ``workers`` or on scheduling.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not samples:
        raise DataError("cannot iterate over an empty dataset")
    order = epoch_order(len(samples), seed, epoch, shuffle=train)

    def load(i: int) -> np.ndarray:
        rng = stream(seed, AUGMENT, epoch, int(i)) if train else None
        return prepare(samples[i], image_size, rng)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            images = list(pool.map(load, idx)) if pool else [load(i) for i in idx]
            x = np.stack(images)[:, None].astype(dtype)
            y = np.array([samples[i].label for i in idx], dtype=np.int64)
            yield Batch(x=Tensor(x), y=y, indices=idx)
    finally:
        if pool:
            pool.shutdown()


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def class_templates(seed: int = 0, grid: int = 4) -> np.ndarray:
    """One coarse bright/dark layout per class (grid x grid cells), chosen so
    every pair of classes differs in at least a quarter of the cells."""
    rng = np.random.default_rng(seed)
    cells = grid * grid
    chosen: list[np.ndarray] = []
    while len(chosen) < NUM_CLASSES:
        cand = rng.integers(0, 2, size=cells)
        if not 4 <= cand.sum() <= cells - 4:
            continue
        if all(np.sum(cand != c) >= cells // 4 for c in chosen):
            chosen.append(cand)
    side = IMAGE_SIDE // grid
    layouts = np.stack(chosen).reshape(NUM_CLASSES, grid, grid)
    return np.kron(layouts, np.ones((side, side))).astype(np.float64)


def synthetic_samples(per_class: int = 10, seed: int = 0, usage: str = "Training") -> list[Sample]:
    """Class-coded block layouts with per-sample contrast, brightness and
    pixel noise, quantized to 8 bits like real FER2013 rows."""
    rng = np.random.default_rng(seed)
    templates = class_templates(seed)
    out = []
    for k in range(NUM_CLASSES):
        for _ in range(per_class):
            lo = rng.uniform(0.15, 0.3)
            hi = rng.uniform(0.7, 0.85)
            img = lo + (hi - lo) * templates[k] + rng.normal(0.0, 0.05, size=templates[k].shape)
            img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
            out.append(Sample(image=img.astype(np.float32), label=k, usage=usage))
    return out
