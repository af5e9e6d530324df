"""
Image datasets for training and evaluation.

Reads and writes the CIFAR-10 binary batch layout (one label byte followed by
the R, G and B planes of a 32x32 image, 3073 bytes per record), builds a
seeded synthetic 10-class set for desk-scale runs, and augments images on the
fly with per-sample random streams so every epoch is reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import affine_transform

from errors import DatasetFormatError
from tensor import Prng, Tensor

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (32, 32, 3)
NUM_CLASSES = 10
RECORD_BYTES = 1 + 32 * 32 * 3
RECORDS_PER_FILE = 10_000
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
ARCHIVE_DIR = "cifar-10-batches-bin"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[1:] != IMAGE_SHAPE or len(self.images) != len(self.labels):
            raise DatasetFormatError(
                f"{self.split}: images {self.images.shape} and labels {self.labels.shape} do not line up"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DatasetFormatError(f"{self.split}: labels must lie in 0..{NUM_CLASSES - 1}")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetFormatError(f"{self.split}: pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    h_shift_frac: float = Field(0.10, ge=0)
    v_shift_frac: float = Field(0.10, ge=0)
    zoom_frac: float = Field(0.20, ge=0, lt=1)
    hflip: bool = True
    rot_deg: float = Field(5.0, ge=0)
    enabled: bool = True


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["synthetic"] = "synthetic"
    n_per_class: int = Field(10, ge=1)
    test_per_class: int = Field(10, ge=1)
    seed: int = 0
    noise: float = Field(0.1, ge=0)


class Cifar10Spec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["cifar10"] = "cifar10"
    path: Optional[str] = None
    limit: Optional[int] = Field(None, ge=1)
    test_limit: Optional[int] = Field(None, ge=1)
    # None accepts batch files of any whole number of records
    records_per_file: Optional[int] = Field(RECORDS_PER_FILE, ge=1)


DatasetSpec = Union[SyntheticSpec, Cifar10Spec]


# --- CIFAR-10 binary batches ------------------------------------------------

def read_cifar_file(path: Path, expected_records: Optional[int] = RECORDS_PER_FILE) -> Tuple[np.ndarray, np.ndarray]:
    """Decode one binary batch into (images in [0, 1], labels)."""
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError(f"Missing CIFAR-10 batch file: {path}")
    raw = path.read_bytes()
    if expected_records is not None and len(raw) != expected_records * RECORD_BYTES:
        raise DatasetFormatError(
            f"{path.name}: expected {expected_records * RECORD_BYTES:,} bytes, found {len(raw):,}"
        )
    if not raw or len(raw) % RECORD_BYTES:
        raise DatasetFormatError(f"{path.name}: {len(raw):,} bytes is not a whole number of {RECORD_BYTES}-byte records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise DatasetFormatError(f"{path.name}: record {bad[0]} has label {labels[bad[0]]} > {NUM_CLASSES - 1}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return images, labels


def _resolve_cifar_dir(directory: Path) -> Path:
    nested = directory / ARCHIVE_DIR
    return nested if nested.is_dir() else directory


def load_cifar10(directory, records_per_file: Optional[int] = RECORDS_PER_FILE) -> Tuple[Dataset, Dataset]:
    directory = _resolve_cifar_dir(Path(directory))
    parts = [read_cifar_file(directory / name, records_per_file) for name in TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), "train")
    test = Dataset(*read_cifar_file(directory / TEST_FILE, records_per_file), "test")
    logger.info(f"Loaded CIFAR-10 from {directory}: {len(train):,} train, {len(test):,} test images")
    return train, test


def write_cifar_file(path: Path, dataset: Dataset) -> None:
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def write_cifar10(train: Dataset, test: Dataset, directory) -> Path:
    """Write a dataset pair in the CIFAR-10 binary layout (train spread over five batch files)."""
    if len(train) < len(TRAIN_FILES):
        raise ValueError(f"Need at least {len(TRAIN_FILES)} training images to fill the batch files")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, index in zip(TRAIN_FILES, np.array_split(np.arange(len(train)), len(TRAIN_FILES))):
        write_cifar_file(directory / name, Dataset(train.images[index], train.labels[index], "train"))
    write_cifar_file(directory / TEST_FILE, test)
    logger.info(f"Wrote {len(train):,} train and {len(test):,} test images to {directory}")
    return directory


# --- Synthetic prototypes ---------------------------------------------------

def synthetic_prototypes(classes: int = NUM_CLASSES, seed: int = 0) -> np.ndarray:
    """One fixed two-level (0.1 / 0.9) random image per class."""
    rng = Prng(seed).substream("prototypes")
    return rng.choice(np.array([0.1, 0.9]), size=(classes,) + IMAGE_SHAPE)


def make_synthetic(n_per_class: int, classes: int = NUM_CLASSES, seed: int = 0,
                   noise: float = 0.1, split: str = "train") -> Dataset:
    """Prototype per class plus Gaussian noise, clipped to [0, 1]; deterministic per (seed, split)."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    prototypes = synthetic_prototypes(classes, seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    jitter = Prng(seed).substream(f"noise/{split}").normal(0.0, noise, size=(len(labels),) + IMAGE_SHAPE)
    images = np.clip(prototypes[labels] + jitter, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, split)


def load_dataset(spec: DatasetSpec, data_dir: Optional[str] = None) -> Tuple[Dataset, Dataset]:
    """Materialize the (train, validation) pair a run configuration names."""
    if isinstance(spec, SyntheticSpec):
        train = make_synthetic(spec.n_per_class, seed=spec.seed, noise=spec.noise, split="train")
        test = make_synthetic(spec.test_per_class, seed=spec.seed, noise=spec.noise, split="test")
        return train, test
    directory = spec.path or data_dir
    if not directory:
        raise DatasetFormatError("No CIFAR-10 directory given (dataset.path, --data or LOWBIT_DATA_DIR)")
    train, test = load_cifar10(directory, spec.records_per_file)
    if spec.limit is not None:
        train = train.take(spec.limit)
    if spec.test_limit is not None:
        test = test.take(spec.test_limit)
    return train, test


# --- Augmentation -----------------------------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def _inverse_affine(angle_deg: float, zoom: float, dy: float, dx: float, height: int, width: int):
    """Output -> input coordinate map for rotate-about-centre, zoom, then shift."""
    theta = math.radians(angle_deg)
    rotate_back = np.array([[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]])
    matrix = rotate_back / zoom
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    offset = center - matrix @ (center + np.array([dy, dx]))
    return matrix, offset


def augment(img: np.ndarray, cfg: AugmentConfig, rng: Prng) -> np.ndarray:
    """
    Flip (p = 0.5), rotate, zoom and shift one image, in that order, with a
    single bilinear resampling; pixels from outside the image are 0.
    """
    if not cfg.enabled:
        return img
    height, width, _ = img.shape
    coin = rng.random()
    angle = rng.uniform(-cfg.rot_deg, cfg.rot_deg)
    zoom = rng.uniform(1.0 - cfg.zoom_frac, 1.0 + cfg.zoom_frac)
    dy = rng.uniform(-cfg.v_shift_frac * height, cfg.v_shift_frac * height)
    dx = rng.uniform(-cfg.h_shift_frac * width, cfg.h_shift_frac * width)

    out = hflip(img) if cfg.hflip and coin < 0.5 else img
    matrix, offset = _inverse_affine(angle, zoom, dy, dx, height, width)
    if np.allclose(matrix, np.eye(2), rtol=0, atol=0) and not offset.any():
        return np.array(out, dtype=np.float32)
    full = np.eye(3)
    full[:2, :2] = matrix
    resampled = affine_transform(out, full, offset=np.append(offset, 0.0), order=1, mode="constant", cval=0.0)
    return np.clip(resampled, 0.0, 1.0).astype(np.float32)


# --- Batching ---------------------------------------------------------------

def one_hot(labels, classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    encoded = np.zeros(labels.shape + (classes,), dtype=np.float32)
    np.put_along_axis(encoded, labels[..., None], 1.0, axis=-1)
    return encoded


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batches(ds: Dataset, batch_size: int = 256, rng: Optional[Prng] = None, shuffle: bool = True,
            epoch: int = 0, augment_cfg: Optional[AugmentConfig] = None) -> Iterator[Tuple[Tensor, Tensor]]:
    """
    Yield (images, one-hot labels) batches; the final batch may be partial.

    The order comes from the ("shuffle", epoch) substream and each augmented
    sample from ("augment", epoch, dataset index).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    augmenting = augment_cfg is not None and augment_cfg.enabled
    if (shuffle or augmenting) and rng is None:
        raise ValueError("Shuffling or augmenting batches needs a random stream")
    order = rng.substream("shuffle", epoch).permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        index = order[start:start + batch_size]
        if augmenting:
            images = np.stack([augment(ds.images[i], augment_cfg, rng.substream("augment", epoch, i)) for i in index])
        else:
            images = ds.images[index]
        yield Tensor(images), Tensor(one_hot(ds.labels[index]))


def class_balance(ds: Dataset) -> List[int]:
    return np.bincount(ds.labels, minlength=NUM_CLASSES).tolist()
