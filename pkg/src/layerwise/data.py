"""Dataset ingestion, augmentation and the metrics stream."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, c, h, w) float32, normalized
    labels: np.ndarray  # (n,) int64
    split: str
    classes: int
    mean: tuple = ()
    std: tuple = ()

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError(f"empty {self.split} split")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        if n is None or n >= len(self):
            return self
        return LabeledDataset(self.images[:n], self.labels[:n], self.split, self.classes, self.mean, self.std)


def normalize(train_u8, test_u8):
    """Per-channel standardization with statistics of the training split."""
    scaled = train_u8.astype(np.float64) / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = scaled.std(axis=(0, 2, 3))
    std[std == 0] = 1.0

    def apply(u8):
        return ((u8.astype(np.float64) / 255.0 - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)

    return apply(train_u8), apply(test_u8), tuple(float(m) for m in mean), tuple(float(s) for s in std)


# -- CIFAR-10 -----------------------------------------------------------------------------------


def read_cifar_batch(path, expected=None):
    """Parse one CIFAR-10 binary batch file into ``(uint8 images, labels)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing CIFAR-10 file {path}")
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise DataError(
            f"{path.name}: truncated record at byte offset {offset} "
            f"({len(raw) - offset} of {CIFAR_RECORD} bytes present)"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    if expected is not None and len(records) != expected:
        raise DataError(f"{path.name}: {len(records)} records, expected {expected}")
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{path.name}: label {labels[i]} out of range at record {i} (byte offset {i * CIFAR_RECORD})")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory, max_train=None, max_test=None, expected_counts=(50000, 10000)):
    """Train/test splits from the CIFAR-10 binary distribution directory."""
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    per_file = expected_counts[0] // len(CIFAR_TRAIN_FILES) if expected_counts else None
    parts = [read_cifar_batch(directory / name, per_file) for name in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_cifar_batch(directory / CIFAR_TEST_FILE, expected_counts[1] if expected_counts else None)
    train_f, test_f, mean, std = normalize(train_x, test_x)
    train = LabeledDataset(train_f, train_y, "train", 10, mean, std)
    test = LabeledDataset(test_f, test_y, "test", 10, mean, std)
    return train.subset(max_train), test.subset(max_test)


# -- MNIST IDX ------------------------------------------------------------------------------------


def _open(path):
    path = Path(path)
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            return gzip.open(candidate, "rb") if candidate.suffix == ".gz" else open(candidate, "rb")
    raise DataError(f"missing IDX file {path}(.gz)")


def read_idx(path, magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataError(f"{Path(path).name}: file too short for an IDX header")
    found, count = struct.unpack(">II", raw[:8])
    if found != magic:
        raise DataError(f"{Path(path).name}: unexpected magic {found}, expected {magic}")
    if magic == IDX_IMAGES_MAGIC:
        rows, cols = struct.unpack(">II", raw[8:16])
        body, shape = raw[16:], (count, 1, rows, cols)
    else:
        body, shape = raw[8:], (count,)
    size = int(np.prod(shape))
    if len(body) != size:
        raise DataError(f"{Path(path).name}: {len(body)} data bytes, header promises {size}")
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def write_idx(path, array):
    """Write uint8 images ``(n, rows, cols)``/``(n, 1, rows, cols)`` or labels ``(n,)``."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, len(array))
    else:
        array = array.reshape(len(array), array.shape[-2], array.shape[-1])
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, len(array), array.shape[1], array.shape[2])
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_mnist(directory, max_train=None, max_test=None):
    directory = Path(directory)
    splits = {}
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        images = read_idx(directory / img_name, IDX_IMAGES_MAGIC)
        labels = read_idx(directory / lbl_name, IDX_LABELS_MAGIC).astype(np.int64)
        if len(images) != len(labels):
            raise DataError(f"{split}: {len(images)} images but {len(labels)} labels")
        if labels.max() > 9:
            raise DataError(f"{split}: label {labels.max()} out of range")
        splits[split] = (images, labels)
    train_f, test_f, mean, std = normalize(splits["train"][0], splits["test"][0])
    train = LabeledDataset(train_f, splits["train"][1], "train", 10, mean, std)
    test = LabeledDataset(test_f, splits["test"][1], "test", 10, mean, std)
    return train.subset(max_train), test.subset(max_test)


def load_dataset(name, directory, max_train=None, max_test=None):
    if not directory:
        raise DataError(f"no data directory given for {name}")
    if name == "cifar10":
        return load_cifar10(directory, max_train, max_test)
    if name == "mnist":
        return load_mnist(directory, max_train, max_test)
    raise DataError(f"no loader for dataset {name!r} (ImageNet presets are shape-only)")


# -- augmentation ------------------------------------------------------------------------------------


def random_crop(image, dy, dx, pad=4):
    """Crop of the zero-padded image at offset ``(dy, dx)``, same size as input."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, dy:dy + h, dx:dx + w]


def hflip(image):
    return image[:, :, ::-1]


def augment(image, rng, pad=4):
    """Pad-4 random crop followed by a horizontal flip with probability 1/2."""
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = random_crop(image, dy, dx, pad)
    if rng.random() < 0.5:
        out = hflip(out)
    return np.ascontiguousarray(out)


def augment_batch(images, rng, pad=4):
    n, c, h, w = images.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# -- metrics stream -------------------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    run_id: str
    layer: int
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float | None
    lr: float | None
    wall_time: float = 0.0
    candidate: str = "epoch"
    kind: str = "epoch"


@dataclass
class MetricsWriter:
    """Append-only JSON-lines writer.

    Wall-clock times go to a separate ``timings`` file so that the metrics
    file itself is byte-identical across repeated seeded runs.
    """

    path: Path
    timings_path: Path | None = None
    _last: tuple = field(default=(-1, -1), init=False)

    def __post_init__(self):
        self.path = Path(self.path)
        for rec in read_metrics(self.path):
            if rec.get("kind") == "epoch":
                self._last = (rec["layer"], rec["epoch"])

    def write(self, record):
        rec = asdict(record) if not isinstance(record, dict) else dict(record)
        if rec.get("kind", "epoch") == "epoch":
            key = (rec["layer"], rec["epoch"])
            if key <= self._last:
                raise ValueError(f"metrics out of order: {key} after {self._last}")
            self._last = key
        wall = rec.pop("wall_time", None)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if self.timings_path is not None and wall is not None:
            with open(self.timings_path, "a") as fh:
                fh.write(json.dumps({"layer": rec.get("layer"), "epoch": rec.get("epoch"),
                                     "kind": rec.get("kind"), "wall_time": wall}) + "\n")


def read_metrics(path):
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
