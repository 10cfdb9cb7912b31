"""Desk-scale workloads: synthetic multi-tone classification and S/PS-MNIST.

MNIST comes from the four standard IDX files on disk; nothing here touches
the network except :func:`fetch_mnist`, which the CLI calls explicitly.
"""

from __future__ import annotations

import gzip
import os
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import MNIST_LENGTH, DRFError, RealSequence, RunConfig, ShapeError, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
MNIST_COUNTS = {"train": 60000, "test": 10000}
IDENTITY_PERMUTATION = -1
MIRROR_ENV = "DRF_MNIST_MIRROR"
DATA_ROOT_ENV = "DRF_DATA_ROOT"
DEFAULT_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"


class DataError(DRFError):
    pass


class MissingDataFile(DataError, FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing data file: {self.path}")


class BadMagic(DataError):
    def __init__(self, value: int, path=""):
        self.value = value
        super().__init__(f"bad IDX magic 0x{value:08x} in {path}")


class TruncatedFile(DataError):
    def __init__(self, path, expected: int, got: int):
        super().__init__(f"{path}: expected {expected} bytes, found {got}")


class TaskSpecError(DataError, ValueError):
    pass


@dataclass(frozen=True)
class LabeledSequenceBatch:
    inputs: RealSequence
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != self.inputs.shape[0]:
            raise ShapeError(f"{labels.shape[0]} labels for {self.inputs.shape[0]} sequences")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "LabeledSequenceBatch":
        return LabeledSequenceBatch(RealSequence(self.inputs.values[idx]), self.labels[idx])


@dataclass(frozen=True)
class TaskSpec:
    id: str = "multitone"
    length: int = 512
    classes: int = 4
    tones_per_class: int = 3
    noise: float = 0.1
    amplitude: float = 1.0
    train_size: int = 2000
    test_size: int = 500
    permutation_seed: int = 20250917
    delta: float = 1.0
    frequencies: tuple | None = None

    def __post_init__(self):
        if self.length < 16:
            raise TaskSpecError("length must be ≥ 16")
        if self.classes < 2:
            raise TaskSpecError("need at least 2 classes")
        if not self.amplitude > 0:
            raise TaskSpecError("tone amplitude must be > 0")
        if self.noise < 0:
            raise TaskSpecError("noise must be ≥ 0")

    @classmethod
    def from_config(cls, config: RunConfig) -> "TaskSpec":
        t = config.task
        return cls(t.id, t.sequence_length, t.classes, t.tones_per_class, t.noise, 1.0,
                   t.train_size, t.test_size, t.permutation_seed, config.delta)

    def class_frequencies(self) -> np.ndarray:
        """(classes, tones) angular frequencies in rad/s.

        Default layout puts every tone on an exact DFT bin and interleaves the
        classes across the band, so each class owns a low, middle and high tone.
        """
        if self.frequencies is not None:
            f = np.asarray(self.frequencies, dtype=float)
        else:
            total = self.classes * self.tones_per_class
            lo, hi = 8, int(0.45 * self.length)
            if hi - lo + 1 < total:
                raise TaskSpecError("sequence too short for that many distinct tones")
            bins = np.round(np.geomspace(lo, hi, total)).astype(int)
            for i in range(1, total):  # keep bins strictly increasing after rounding
                bins[i] = max(bins[i], bins[i - 1] + 1)
            omega = 2 * np.pi * bins / (self.length * self.delta)
            f = omega.reshape(self.tones_per_class, self.classes).T
        if f.ndim != 2 or f.shape[0] != self.classes:
            raise TaskSpecError("frequencies must be shaped (classes, tones)")
        flat = f.reshape(-1)
        if np.any(flat <= 0) or np.any(flat >= np.pi / self.delta):
            raise TaskSpecError("every tone must lie in (0, pi/delta)")
        if len(np.unique(np.round(flat, 12))) != flat.size:
            raise TaskSpecError("class frequency sets overlap")
        return f


def balanced_labels(size: int, classes: int, rng) -> np.ndarray:
    labels = np.arange(size) % classes
    return labels[rng.permutation(size)]


def gen_multitone(spec: TaskSpec, rng, size: int | None = None, dtype=np.float64) -> LabeledSequenceBatch:
    """Sum of the class's unit tones with random phases plus white noise."""
    freqs = spec.class_frequencies()
    size = spec.train_size if size is None else size
    labels = balanced_labels(size, spec.classes, rng)
    t = np.arange(spec.length) * spec.delta
    phases = rng.uniform((size, spec.tones_per_class), 0.0, 2 * np.pi)
    omega = freqs[labels]  # (size, tones)
    x = spec.amplitude * np.sum(np.sin(omega[:, :, None] * t + phases[:, :, None]), axis=1)
    if spec.noise > 0:
        x = x + spec.noise * rng.normal((size, spec.length))
    return LabeledSequenceBatch(RealSequence(x[:, None, :].astype(dtype)), labels)


def multitone_splits(spec: TaskSpec, rng, dtype=np.float64):
    train = gen_multitone(spec, rng.fork(1), spec.train_size, dtype)
    test = gen_multitone(spec, rng.fork(2), spec.test_size, dtype)
    return train, test


# --------------------------------------------------------------------- IDX


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _resolve(data_dir: Path, stem: str) -> Path:
    for cand in (data_dir / stem, data_dir / (stem + ".gz")):
        if cand.is_file():
            return cand
    raise MissingDataFile(data_dir / stem)


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian magic, u32 dims, u8 payload)."""
    path = Path(path)
    if not path.is_file():
        raise MissingDataFile(path)
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedFile(path, 4, len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise BadMagic(magic, path)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile(path, head, len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    expected = head + int(np.prod(dims))
    if len(raw) != expected:
        raise TruncatedFile(path, expected, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        f.write(a.tobytes())


def mnist_permutation(seed: int, length: int = MNIST_LENGTH) -> np.ndarray:
    if seed == IDENTITY_PERMUTATION:
        return np.arange(length)
    return make_rng(seed).permutation(length)


def load_mnist_sequential(data_dir, spec: TaskSpec, dtype=np.float64):
    """(train, test) batches with pixels in [0, 1] as one channel of 784 steps."""
    data_dir = Path(data_dir)
    out = []
    for split, prefix in (("train", "train"), ("test", "test")):
        images = read_idx(_resolve(data_dir, MNIST_FILES[f"{prefix}_images"]))
        labels = read_idx(_resolve(data_dir, MNIST_FILES[f"{prefix}_labels"]))
        if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
            raise DataError(f"{split} images/labels disagree: {images.shape} vs {labels.shape}")
        x = images.reshape(images.shape[0], -1).astype(dtype) / 255.0
        if spec.id == "psmnist":
            x = x[:, mnist_permutation(spec.permutation_seed, x.shape[1])]
        out.append(LabeledSequenceBatch(RealSequence(x[:, None, :]), labels.astype(np.int64)))
    return out[0], out[1]


def fetch_mnist(data_dir, mirror: str | None = None) -> list[Path]:
    """Download the four gzip'd IDX files and verify their payload lengths."""
    mirror = mirror or os.environ.get(MIRROR_ENV, DEFAULT_MIRROR)
    if not mirror.endswith("/"):
        mirror += "/"
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, stem in MNIST_FILES.items():
        target = data_dir / (stem + ".gz")
        with urllib.request.urlopen(mirror + stem + ".gz", timeout=60) as resp:
            blob = resp.read()
        tmp = target.with_suffix(".part")
        tmp.write_bytes(blob)
        arr = read_idx(tmp.rename(target))
        count = MNIST_COUNTS["train" if key.startswith("train") else "test"]
        if arr.shape[0] != count:
            target.unlink()
            raise TruncatedFile(target, count, arr.shape[0])
        written.append(target)
    return written


def load_task(config: RunConfig, data_dir=None, rng=None):
    """(train, test, spec) for the configured task."""
    spec = TaskSpec.from_config(config)
    if spec.id == "multitone":
        rng = rng or make_rng(config.seed).fork(0x7A5C)
        train, test = multitone_splits(spec, rng, config.dtype)
        return train, test, spec
    root = data_dir or os.environ.get(DATA_ROOT_ENV) or config.task.data_dir
    train, test = load_mnist_sequential(root, spec, config.dtype)
    return train, test, spec
