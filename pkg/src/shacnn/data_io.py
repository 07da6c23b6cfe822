"""Dataset loaders (MNIST IDX, CIFAR-10/100 binary) and a synthetic hierarchical task."""

from __future__ import annotations

import gzip
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .label_tree import LabelTree

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR10_RECORD = 1 + 3072
CIFAR100_RECORD = 2 + 3072
DATA_DIR_ENV = "SHACNN_DATA_DIR"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    fine_labels: np.ndarray  # (N,) int64
    name: str = ""
    class_names: list[str] = field(default_factory=list)
    checksums: dict[str, str] = field(default_factory=dict)
    warnings: int = 0

    def __post_init__(self):
        if len(self.images) != len(self.fine_labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.fine_labels)} labels")

    def __len__(self) -> int:
        return len(self.fine_labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.fine_labels[idx], self.name, self.class_names, self.checksums)

    def check_against(self, tree: LabelTree) -> None:
        if len(self) and int(self.fine_labels.max()) >= tree.num_leaves:
            raise DataFormatError(
                f"label {int(self.fine_labels.max())} has no leaf in a tree of {tree.num_leaves} leaves"
            )


def data_dir(explicit: str | Path | None = None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else Path.home() / ".cache" / "shacnn"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if str(path).endswith(".gz") else raw


def parse_idx(data: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload (big-endian header)."""
    if len(data) < 8:
        raise DataFormatError("IDX file shorter than its header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != count:
        raise DataFormatError(
            f"IDX payload has {len(data) - header} bytes, header declares {count} ({'x'.join(map(str, dims))})"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(images_path: str | Path, labels_path: str | Path) -> Dataset:
    img_bytes = _read_bytes(images_path)
    lbl_bytes = _read_bytes(labels_path)
    images = parse_idx(img_bytes, IDX_IMAGES_MAGIC)
    labels = parse_idx(lbl_bytes, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"image file holds {len(images)} items, label file {len(labels)}")
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"MNIST label {int(labels.max())} out of range")
    return Dataset(
        images=images[:, None, :, :].astype(np.float64) / 255.0,
        fine_labels=labels.astype(np.int64),
        name="mnist",
        class_names=[str(d) for d in range(10)],
        checksums={Path(images_path).name: _sha256(img_bytes), Path(labels_path).name: _sha256(lbl_bytes)},
    )


def _planar(pixels: np.ndarray) -> np.ndarray:
    return pixels.reshape(-1, 3, 32, 32).astype(np.float64) / 255.0


def load_cifar10(batch_paths: Sequence[str | Path]) -> Dataset:
    images, labels, sums = [], [], {}
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR10_RECORD:
            raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR10_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
        if rec[:, 0].max() > 9:
            raise DataFormatError(f"{path}: label {int(rec[:, 0].max())} > 9")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(_planar(rec[:, 1:]))
        sums[Path(path).name] = _sha256(raw)
    return Dataset(np.concatenate(images), np.concatenate(labels), "cifar10", checksums=sums)


def load_cifar100(path: str | Path, tree: LabelTree | None = None, coarse_level: int | None = None) -> Dataset:
    """Load a CIFAR-100 binary file.

    The stored coarse byte is compared against the class index at
    ``coarse_level`` (taken from the tree's ``coarse_level`` pragma when not
    given).  Disagreements are counted in ``Dataset.warnings`` and logged; they
    never fail the load.
    """
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR100_RECORD:
        raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR100_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR100_RECORD)
    coarse = rec[:, 0].astype(np.int64)
    fine = rec[:, 1].astype(np.int64)
    if fine.max() >= 100:
        raise DataFormatError(f"{path}: fine label {int(fine.max())} >= 100")
    ds = Dataset(_planar(rec[:, 2:]), fine, "cifar100", checksums={Path(path).name: _sha256(raw)})
    if tree is None:
        return ds
    ds.check_against(tree)
    level = coarse_level if coarse_level is not None else tree.coarse_level
    if level is None:
        log.warning("tree declares no coarse_level; stored coarse labels ignored")
        ds.warnings = 1
        return ds
    mismatched = int((tree.level_label_matrix(fine)[:, level - 1] != coarse).sum())
    if mismatched:
        log.warning("%d records disagree with the tree's level-%d grouping", mismatched, level)
    ds.warnings = mismatched
    return ds


def make_synthetic(tree: LabelTree, n_per_leaf: int, image_shape: Sequence[int] = (1, 12, 12),
                   seed: int = 0, noise: float = 0.3, pattern_seed: int = 0) -> Dataset:
    """Hierarchical blob images.

    Every tree node owns a smooth random pattern; an image of leaf ``k`` is the
    sum of the patterns along its root path (coarser levels weighted more), plus
    pixel noise, squashed into [0, 1].  Siblings therefore share most of their
    appearance and differ by their own leaf pattern.

    ``pattern_seed`` fixes the class prototypes and ``seed`` the sampling, so a
    train and a test set of the same task differ only in ``seed``.
    """
    c, h, w = (int(v) for v in image_shape)
    rng = np.random.default_rng(seed)
    pattern_rng = np.random.default_rng([pattern_seed, 7])
    yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, w - 1, 1)

    def pattern() -> np.ndarray:
        out = np.zeros((c, h, w))
        for ch in range(c):
            for _ in range(3):
                cy, cx = pattern_rng.uniform(0, 1, 2)
                sigma = pattern_rng.uniform(0.12, 0.3)
                amp = pattern_rng.choice([-1.0, 1.0]) * pattern_rng.uniform(0.5, 1.0)
                out[ch] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        return out

    node_patterns = [pattern() for _ in tree.nodes]
    weights = {lvl: 1.0 / lvl for lvl in range(1, tree.levels + 1)}
    protos = np.zeros((tree.num_leaves, c, h, w))
    for fine, node_id in enumerate(tree.leaf_index):
        cur = node_id
        while tree.nodes[cur].level > 0:
            protos[fine] += weights[tree.nodes[cur].level] * node_patterns[cur]
            cur = tree.nodes[cur].parent

    labels = np.repeat(np.arange(tree.num_leaves, dtype=np.int64), n_per_leaf)
    rng.shuffle(labels)
    raw = protos[labels] + noise * rng.standard_normal((len(labels), c, h, w))
    images = 1.0 / (1.0 + np.exp(-2.0 * raw))
    return Dataset(images, labels, "synthetic", class_names=tree.class_names(tree.levels))


def train_val_split(ds: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    n = len(ds)
    order = np.random.default_rng([seed, 11]).permutation(n)
    n_val = int(round(n * val_fraction))
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


def standardize(train: Dataset, *others: Dataset) -> None:
    """Per-channel mean/std standardisation using train statistics, in place."""
    mean = train.images.mean(axis=(0, 2, 3), keepdims=True)
    std = train.images.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    for ds in (train, *others):
        ds.images = (ds.images - mean) / std


def write_idx(path: str | Path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 IDX file (used for fixtures)."""
    arr = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())
