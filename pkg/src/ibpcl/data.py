"""Datasets and task streams: IDX files, split/permuted streams, synthetic generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on example count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")
        if not np.all(np.isfinite(self.inputs)) or np.any(self.inputs < 0) or np.any(self.inputs > 1):
            raise ValueError("inputs must be finite and within [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class Task:
    train: Dataset
    test: Dataset
    n_classes: int
    class_map: tuple = ()  # original class id per remapped label

    def original_labels(self, labels) -> np.ndarray:
        if not self.class_map:
            return np.asarray(labels)
        return np.asarray(self.class_map)[np.asarray(labels)]


@dataclass
class TaskStream:
    tasks: list[Task] = field(default_factory=list)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)


# --- IDX ---------------------------------------------------------------------------

def read_idx_raw(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an integer array of its declared shape."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    zero0, zero1, dtype, ndim = blob[:4]
    if zero0 != 0 or zero1 != 0:
        raise IdxFormatError(f"{path}: bad magic {blob[:4].hex()}")
    if dtype != IDX_UBYTE:
        raise IdxFormatError(f"{path}: unsupported IDX dtype 0x{dtype:02x} (only 0x08 unsigned byte)")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", blob[4:header])
    expected = int(np.prod(shape, dtype=np.int64))
    actual = len(blob) - header
    if actual != expected:
        raise IdxFormatError(f"{path}: expected {expected} payload bytes, found {actual}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(shape)


def read_idx(path) -> np.ndarray:
    """IDX pixels rescaled to [0, 1] by /255."""
    return read_idx_raw(path).astype(np.float64) / 255.0


def write_idx(path, array):
    """Write an unsigned-byte IDX file. Float input in [0, 1] is scaled by 255."""
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = np.rint(arr * 255.0)
    arr = arr.astype(np.uint8)
    header = bytes([0, 0, IDX_UBYTE, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx_dataset(images_path, labels_path, n_classes: int = 10) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx_raw(labels_path).astype(np.int64)
    return Dataset(images.reshape(images.shape[0], -1), labels, n_classes)


# --- desk-scale digits -----------------------------------------------------------------

def block_edges(n: int, m: int) -> np.ndarray:
    """Partition n pixels into m nearly equal contiguous blocks (nearest rounding)."""
    return np.rint(np.arange(m + 1) * n / m).astype(int)


def downsample(images, out: int = 8) -> np.ndarray:
    """Block-mean downsample (N, H, W) images to (N, out, out)."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    rows, cols = block_edges(h, out), block_edges(w, out)
    res = np.empty((n, out, out))
    for i in range(out):
        for j in range(out):
            res[:, i, j] = images[:, rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean(axis=(1, 2))
    return res


def cap_per_class(data: Dataset, cap: int, rng: np.random.Generator) -> Dataset:
    keep = []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size > cap:
            idx = np.sort(rng.choice(idx, cap, replace=False))
        keep.append(idx)
    return data.subset(np.sort(np.concatenate(keep)))


def train_test_split(data: Dataset, test_fraction: float, rng: np.random.Generator):
    """Stratified split; every example lands in exactly one side."""
    train_idx, test_idx = [], []
    for c in range(data.n_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        n_test = int(round(test_fraction * idx.size))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return data.subset(np.sort(np.concatenate(train_idx))), data.subset(np.sort(np.concatenate(test_idx)))


def load_digits_8x8(seed: int = 0, train_cap: int = 500, test_cap: int = 200, test_fraction: float = 1 / 3):
    """scikit-learn's bundled 8x8 digits (pixels 0..16 rescaled to [0, 1]), split and capped per class."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    data = Dataset(raw.data / 16.0, raw.target.astype(np.int64), 10)
    rng = np.random.default_rng(seed)
    train, test = train_test_split(data, test_fraction, rng)
    return cap_per_class(train, train_cap, rng), cap_per_class(test, test_cap, rng)


def load_mnist_8x8(train_images, train_labels, test_images, test_labels, seed: int = 0,
                   train_cap: int = 500, test_cap: int = 200):
    """IDX-format 28x28 data downsampled to 8x8, capped per class."""
    rng = np.random.default_rng(seed)
    out = []
    for img_path, lab_path, cap in ((train_images, train_labels, train_cap), (test_images, test_labels, test_cap)):
        imgs = read_idx(img_path)
        labels = read_idx_raw(lab_path).astype(np.int64)
        small = downsample(imgs, 8).reshape(len(labels), -1)
        out.append(cap_per_class(Dataset(small, labels, int(labels.max()) + 1), cap, rng))
    return tuple(out)


# --- streams ---------------------------------------------------------------------------

def make_split_stream(train: Dataset, test: Dataset, pairs) -> TaskStream:
    """One binary task per class pair, labels remapped to {0, 1} in pair order."""
    seen = set()
    for pair in pairs:
        for c in pair:
            if c in seen:
                raise ValueError(f"class {c} appears in more than one pair")
            seen.add(c)
    tasks = []
    for pair in pairs:
        parts = []
        for data in (train, test):
            idx = np.flatnonzero(np.isin(data.labels, pair))
            for c in pair:
                if not np.any(data.labels == c):
                    raise ValueError(f"class {c} missing from dataset")
            remap = np.zeros(max(data.n_classes, max(pair) + 1), dtype=np.int64)
            for new, old in enumerate(pair):
                remap[old] = new
            parts.append(Dataset(data.inputs[idx], remap[data.labels[idx]], len(pair)))
        tasks.append(Task(parts[0], parts[1], len(pair), tuple(int(c) for c in pair)))
    return TaskStream(tasks)


def make_permuted_stream(train: Dataset, test: Dataset, n_tasks: int, seed: int) -> TaskStream:
    """Task 1 is the identity; later tasks apply fixed seeded pixel permutations."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    rng = np.random.default_rng(seed)
    d = train.inputs.shape[1]
    tasks = []
    for t in range(n_tasks):
        perm = np.arange(d) if t == 0 else rng.permutation(d)
        tasks.append(Task(Dataset(train.inputs[:, perm], train.labels, train.n_classes),
                          Dataset(test.inputs[:, perm], test.labels, test.n_classes),
                          train.n_classes))
    return TaskStream(tasks)


def make_synthetic(kind: str, n_per_class: int = 100, n_classes: int = 2, dim: int = 2,
                   separation: float = 4.0, spread: float = 1.0, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Seeded toy data: ``gauss-blobs``, ``two-moons`` or ``cluster-images`` (8x8).

    Inputs are affinely squashed into [0, 1] for the two vector kinds; images are
    clipped.
    """
    if n_per_class < 1 or n_classes < 1 or spread <= 0:
        raise ValueError("counts must be >= 1 and spread > 0")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    if kind == "gauss-blobs":
        centers = rng.standard_normal((n_classes, dim))
        centers = centers / np.linalg.norm(centers, axis=1, keepdims=True) * separation * spread / 2
        if n_classes == 2:
            centers[1] = -centers[0]
        x = centers[labels] + spread * rng.standard_normal((labels.size, dim))
        x = _squash(x)
    elif kind == "two-moons":
        if n_classes != 2:
            raise ValueError("two-moons has exactly 2 classes")
        t = rng.uniform(0, np.pi, labels.size)
        x = np.where(labels[:, None] == 0,
                     np.stack([np.cos(t), np.sin(t)], 1),
                     np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
        x = _squash(x + noise * rng.standard_normal(x.shape), lo=-1.5, hi=2.5)
    elif kind == "cluster-images":
        protos = cluster_prototypes(n_classes, seed=seed)
        x = protos[labels] + noise * rng.standard_normal((labels.size, 64))
        x = np.clip(x, 0.0, 1.0)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], n_classes)


def _squash(x, lo=None, hi=None):
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def cluster_prototypes(n_classes: int, seed: int = 0) -> np.ndarray:
    """Blurred random 8x8 templates, one per class, flattened to 64 pixels."""
    rng = np.random.default_rng(10_000 + seed)
    protos = []
    kernel = np.array([0.25, 0.5, 0.25])
    for _ in range(n_classes):
        img = (rng.random((8, 8)) < 0.3).astype(float)
        for axis in (0, 1):
            img = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), axis, img)
        img = img / max(img.max(), 1e-12)
        protos.append(img.ravel())
    return np.array(protos)


def split_tasks_by_class(train: Dataset, test: Dataset) -> TaskStream:
    """One single-class task per class (generative streams); labels kept as-is."""
    tasks = []
    for c in range(train.n_classes):
        tr = train.subset(np.flatnonzero(train.labels == c))
        te = test.subset(np.flatnonzero(test.labels == c))
        tasks.append(Task(tr, te, 1, (c,)))
    return TaskStream(tasks)
