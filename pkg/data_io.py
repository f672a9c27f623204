"""Datasets, the CIFAR-10 binary format, synthetic data and perturbations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import map_coordinates

from shared import DataFormatError, DatasetIOError, TruncatedFileError, ValidationError, get_logger

logger = get_logger(__name__)

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_RECORD = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
CIFAR_COUNTS = (50000, 10000)
CIFAR_CLASSES = 10
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

PERCENT_GRID = (15, 30, 45, 60)
PERTURB_MODES = ("hshift", "vshift", "scale")
PAD_ANCHORS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def validate(self) -> "Dataset":
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValidationError(
                f"{self.split}: {self.images.shape} images do not pair with {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError(f"{self.split}: labels outside [0, {self.class_count})")
        return self

    def take(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.class_count, self.split)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels, self.class_count, self.split)

    def batches(
        self, batch_size: int, rng: Optional[np.random.Generator] = None
    ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Mini-batches in a permuted order when `rng` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


# CIFAR-10 binary format


def read_cifar_batch(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """One binary batch: records of 1 label byte + R, G, B planes of 32×32."""
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise TruncatedFileError(
            f"{path}: {raw.size} bytes is not a whole number of {CIFAR_RECORD}-byte records"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / 255.0
    if labels.max() >= CIFAR_CLASSES:
        raise DataFormatError(f"{path}: label byte {labels.max()} outside [0, {CIFAR_CLASSES})")
    return images, labels


def write_cifar_batch(path: Union[str, Path], images: np.ndarray, labels: Sequence[int]) -> Path:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[1:] != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE) or len(images) != len(labels):
        raise ValidationError(f"CIFAR records need [M, 3, 32, 32] images with M labels, got {images.shape}")
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(len(images), -1)
    records = np.concatenate([labels.astype(np.uint8)[:, None], pixels], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records.tofile(path)
    return path


def _load_split(directory: Path, names: Sequence[str], split: str, expected: Optional[int]) -> Dataset:
    parts = [read_cifar_batch(directory / name) for name in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if expected is not None and len(labels) != expected:
        raise DataFormatError(f"{directory}: {split} split has {len(labels)} records, expected {expected}")
    return Dataset(images, labels, CIFAR_CLASSES, split)


def load_cifar10(
    directory: Union[str, Path], expected_counts: Optional[Tuple[int, int]] = CIFAR_COUNTS
) -> Tuple[Dataset, Dataset]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetIOError(f"CIFAR-10 directory not found: {directory}")
    train_n, test_n = expected_counts if expected_counts else (None, None)
    train = _load_split(directory, CIFAR_TRAIN_FILES, "train", train_n)
    test = _load_split(directory, CIFAR_TEST_FILES, "test", test_n)
    logger.info("loaded CIFAR-10 from %s: %d train / %d test", directory, len(train), len(test))
    return train, test


# synthetic data


def synthetic_dataset(
    seed: int,
    n: int,
    classes: int,
    grid: int,
    image_size: int = 32,
    channels: int = 3,
    split: str = "train",
) -> Dataset:
    """Bright square at a class-specific cell of a `grid`×`grid` layout on noise.

    Labels are assigned round-robin, so classes are balanced.
    """
    if classes < 1 or classes > grid * grid:
        raise ValidationError(f"{classes} classes do not fit a {grid}x{grid} grid")
    if image_size % grid:
        raise ValidationError(f"image_size {image_size} is not divisible by grid {grid}")
    rng = np.random.default_rng(seed)
    cell = image_size // grid
    labels = np.arange(n) % classes
    images = rng.uniform(0.0, 0.25, size=(n, channels, image_size, image_size)).astype(np.float32)
    for k in range(classes):
        r, c = divmod(k, grid)
        images[labels == k, :, r * cell : (r + 1) * cell, c * cell : (c + 1) * cell] = 1.0
    return Dataset(images, labels, classes, split)


# perturbations


@dataclass(frozen=True)
class PerturbSpec:
    mode: str
    percent: float = 0.0

    def validate(self) -> "PerturbSpec":
        if self.mode not in PERTURB_MODES:
            raise ValidationError(f"perturbation mode must be one of {PERTURB_MODES}, got {self.mode!r}")
        if self.percent != 0 and self.percent not in PERCENT_GRID:
            raise ValidationError(f"perturbation percent must be 0 or one of {PERCENT_GRID}, got {self.percent}")
        return self

    @staticmethod
    def parse_sweep(text: str) -> List["PerturbSpec"]:
        """`mode:percent` or `mode:all` (the whole percent grid)."""
        mode, sep, amount = text.partition(":")
        if not sep:
            raise ValidationError(f"perturbation must look like mode:percent, got {text!r}")
        if amount.strip().lower() == "all":
            return [PerturbSpec(mode, p).validate() for p in PERCENT_GRID]
        try:
            percent = float(amount)
        except ValueError:
            raise ValidationError(f"bad perturbation percent {amount!r}") from None
        return [PerturbSpec(mode, percent).validate()]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _axis_index(axis: Union[str, int]) -> int:
    if axis in ("horizontal", "h", -1):
        return -1
    if axis in ("vertical", "v", -2):
        return -2
    raise ValidationError(f"axis must be horizontal or vertical, got {axis!r}")


def shift_pixels(image: np.ndarray, offset: int, axis: Union[str, int]) -> np.ndarray:
    """Translate by `offset` pixels (positive = right/down), zero-filling."""
    arr = np.moveaxis(np.asarray(image), _axis_index(axis), -1)
    out = np.zeros_like(arr)
    n, k = arr.shape[-1], abs(int(offset))
    if k < n:
        if offset > 0:
            out[..., k:] = arr[..., : n - k]
        elif offset < 0:
            out[..., : n - k] = arr[..., k:]
        else:
            out[...] = arr
    return np.moveaxis(out, -1, _axis_index(axis))


def shift_transform(image: np.ndarray, percent: float, axis: Union[str, int]) -> np.ndarray:
    if not 0.0 <= percent <= 100.0:
        raise ValidationError(f"shift percent must lie in [0, 100], got {percent}")
    extent = np.asarray(image).shape[_axis_index(axis)]
    return shift_pixels(image, _round_half_up(percent / 100.0 * extent), axis)


def _bilinear_resize(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = plane.shape
    ys = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0, in_w - 1)
    coords = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(plane, coords, order=1, mode="nearest")


def scale_transform(image: np.ndarray, percent: float, pad_anchor: str = "top_left") -> np.ndarray:
    """Shrink each side by `percent` (bilinear) and zero-pad back to size."""
    if not 0.0 <= percent < 100.0:
        raise ValidationError(f"scale percent must lie in [0, 100), got {percent}")
    if pad_anchor not in PAD_ANCHORS:
        raise ValidationError(f"pad_anchor must be one of {PAD_ANCHORS}, got {pad_anchor!r}")
    image = np.asarray(image)
    h, w = image.shape[-2:]
    new_h = _round_half_up((1.0 - percent / 100.0) * h)
    new_w = _round_half_up((1.0 - percent / 100.0) * w)
    if new_h < 1 or new_w < 1:
        raise ValidationError(f"scaling {h}x{w} by {percent}% leaves no pixels")
    if (new_h, new_w) == (h, w):
        return image.copy()

    planes = image.reshape(-1, h, w)
    small = np.stack([_bilinear_resize(p, new_h, new_w) for p in planes])
    top = {"top": 0, "bottom": h - new_h}.get(pad_anchor.split("_")[0], (h - new_h) // 2)
    left = {"left": 0, "right": w - new_w}.get(pad_anchor.split("_")[-1], (w - new_w) // 2)
    out = np.zeros_like(planes)
    out[:, top : top + new_h, left : left + new_w] = small
    return out.reshape(image.shape)


def apply_perturbation(images: np.ndarray, spec: PerturbSpec, pad_anchor: str = "top_left") -> np.ndarray:
    spec.validate()
    if spec.mode == "hshift":
        return shift_transform(images, spec.percent, "horizontal")
    if spec.mode == "vshift":
        return shift_transform(images, spec.percent, "vertical")
    return scale_transform(images, spec.percent, pad_anchor)


# normalisation


def _channel_stats(mean: Sequence[float], std: Sequence[float], channels: int) -> Tuple[np.ndarray, np.ndarray]:
    m = np.asarray(mean, dtype=np.float32).reshape(-1)
    s = np.asarray(std, dtype=np.float32).reshape(-1)
    if m.size != channels or s.size != channels:
        raise ValidationError(f"need {channels} per-channel mean/std values, got {m.size}/{s.size}")
    if (s <= 0).any():
        raise ValidationError("std must be strictly positive for every channel")
    return m[:, None, None], s[:, None, None]


def normalize(dataset: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    m, s = _channel_stats(mean, std, dataset.images.shape[1])
    return dataset.with_images((dataset.images - m) / s)


def denormalize(dataset: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    m, s = _channel_stats(mean, std, dataset.images.shape[1])
    return dataset.with_images(dataset.images * s + m)


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std applied to model inputs after any perturbation."""

    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def apply(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        m, s = _channel_stats(self.mean, self.std, images.shape[-3])
        return (images - m) / s

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> Optional["ChannelStats"]:
        if not data:
            return None
        return cls(tuple(data["mean"]), tuple(data["std"]))


CIFAR_STATS = ChannelStats(CIFAR_MEAN, CIFAR_STD)
