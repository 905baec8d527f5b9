"""Toy datasets, IDX ingestion, stratified splits and ZCA whitening."""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import LabeledBatch

NAMES = ("blobs3", "moons2", "digits8x8", "idx-file")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class DatasetError(ValueError):
    pass


class IdxFormatError(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "blobs3"
    split_seed: int = 0
    train_fraction: float = 0.8
    zca: bool = False
    normalization: str = "none"
    n_samples: int = 600
    input_dim: int = 2
    noise: float | None = None
    images_path: str | None = None
    labels_path: str | None = None
    zca_epsilon: float = 1e-6

    def __post_init__(self):
        if self.name not in NAMES:
            raise DatasetError(f"unknown dataset {self.name!r}; expected one of {NAMES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise DatasetError("train_fraction must lie in (0, 1)")
        if self.normalization not in ("none", "per-feature-standardize"):
            raise DatasetError(f"unknown normalization {self.normalization!r}")
        if self.name == "idx-file" and not (self.images_path and self.labels_path):
            raise DatasetError("idx-file datasets need images_path and labels_path")


# -- generators -------------------------------------------------------------


def make_blobs3(n_samples: int, dim: int, noise: float, seed: int):
    """Three isotropic Gaussians with unit-circle centres in the first two axes."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(3) / 3
    centers = np.zeros((3, dim))
    centers[:, 0] = 2.0 * np.cos(angles)
    if dim > 1:
        centers[:, 1] = 2.0 * np.sin(angles)
    labels = np.arange(n_samples) % 3
    x = centers[labels] + noise * rng.standard_normal((n_samples, dim))
    return x, labels


def make_moons2(n_samples: int, noise: float, seed: int):
    rng = np.random.default_rng(seed)
    n_out = n_samples // 2
    n_in = n_samples - n_out
    t_out = np.linspace(0, np.pi, n_out)
    t_in = np.linspace(0, np.pi, n_in)
    x = np.vstack(
        [
            np.column_stack([np.cos(t_out), np.sin(t_out)]),
            np.column_stack([1 - np.cos(t_in), 1 - np.sin(t_in) - 0.5]),
        ]
    )
    labels = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    x = x + noise * rng.standard_normal(x.shape)
    return x, labels


def load_digits8x8():
    from sklearn.datasets import load_digits

    d = load_digits()
    return d.data.astype(np.float64) / 16.0, d.target.astype(np.int64)


# -- IDX --------------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian header, row-major payload)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES or ndim < 1:
        raise IdxFormatError(f"{path}: bad magic 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header:]
    if len(payload) < expected:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    return np.frombuffer(payload[:expected], dtype=dtype).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">")
    code = next((c for c, d in _IDX_DTYPES.items() if d == dtype), None)
    if code is None:
        raise IdxFormatError(f"dtype {array.dtype} has no IDX code")
    header = struct.pack(">HBB", 0, code, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dtype).tobytes())


def load_idx_pair(images_path, labels_path):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    magic_img = struct.unpack(">I", Path(images_path).read_bytes()[:4])[0]
    magic_lbl = struct.unpack(">I", Path(labels_path).read_bytes()[:4])[0]
    if magic_img != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: expected magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic_img:08x}")
    if magic_lbl != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: expected magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic_lbl:08x}")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError("image and label counts differ")
    return images.reshape(images.shape[0], -1).astype(np.float64) / 255.0, labels.astype(np.int64)


# -- splits and transforms ---------------------------------------------------


def stratified_split(labels: np.ndarray, train_fraction: float, seed: int):
    """Per-class shuffled split whose class proportions track ``train_fraction``.

    Per-class train counts are floors of ``fraction * n_c``; the remainder up
    to ``round(fraction * n)`` goes to the classes with the largest
    fractional parts, so each class is within one sample of exact.
    """
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    sizes = np.array([np.sum(labels == c) for c in classes])
    exact = train_fraction * sizes
    n_train = np.floor(exact).astype(int)
    extra = int(round(train_fraction * len(labels))) - n_train.sum()
    order = np.argsort(-(exact - n_train), kind="stable")
    n_train[order[:extra]] += 1
    train_idx, test_idx = [], []
    for c, k in zip(classes, n_train):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


@dataclass
class ZcaTransform:
    mean: np.ndarray
    whitening_matrix: np.ndarray
    epsilon: float
    eigenvalues: np.ndarray = field(repr=False, default=None)


def zca_fit(train_features: np.ndarray, epsilon: float = 1e-6) -> ZcaTransform:
    x = np.asarray(train_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DatasetError("ZCA needs at least two training rows")
    if epsilon <= 0:
        raise DatasetError("epsilon must be positive")
    with np.errstate(invalid="ignore", over="ignore"):
        mean = x.mean(axis=0)
        xc = x - mean
        cov = xc.T @ xc / x.shape[0]
    if not np.all(np.isfinite(cov)):
        raise DatasetError("non-finite covariance")
    lam, vecs = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    w = (vecs * (lam + epsilon) ** -0.5) @ vecs.T
    w = 0.5 * (w + w.T)
    return ZcaTransform(mean=mean, whitening_matrix=w, epsilon=epsilon, eigenvalues=lam)


def zca_apply(transform: ZcaTransform, features: np.ndarray) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - transform.mean) @ transform.whitening_matrix


# -- entry point -------------------------------------------------------------


@dataclass
class LoadedDataset:
    train: LabeledBatch
    test: LabeledBatch
    num_classes: int
    class_counts: dict
    zca: ZcaTransform | None = None


def raw_samples(spec: DatasetSpec):
    if spec.name == "blobs3":
        return make_blobs3(spec.n_samples, spec.input_dim, 1.0 if spec.noise is None else spec.noise, spec.split_seed)
    if spec.name == "moons2":
        return make_moons2(spec.n_samples, 0.1 if spec.noise is None else spec.noise, spec.split_seed)
    if spec.name == "digits8x8":
        return load_digits8x8()
    return load_idx_pair(spec.images_path, spec.labels_path)


def load_dataset(spec: DatasetSpec) -> LoadedDataset:
    """Generate or read the data, split it, then normalize and whiten on train stats."""
    x, y = raw_samples(spec)
    num_classes = int(y.max()) + 1
    counts = np.bincount(y, minlength=num_classes)
    if np.any(counts == 0):
        raise DatasetError(f"empty class(es): {np.flatnonzero(counts == 0).tolist()}")
    tr, te = stratified_split(y, spec.train_fraction, spec.split_seed)
    xtr, xte = x[tr], x[te]
    if spec.normalization == "per-feature-standardize":
        mu = xtr.mean(axis=0)
        sd = xtr.std(axis=0)
        sd[sd == 0] = 1.0
        xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    zca = None
    if spec.zca:
        zca = zca_fit(xtr, spec.zca_epsilon)
        xtr, xte = zca_apply(zca, xtr), zca_apply(zca, xte)
    train = LabeledBatch(xtr, y[tr])
    test = LabeledBatch(xte, y[te])
    per_class = {
        int(c): (int(np.sum(y[tr] == c)), int(np.sum(y[te] == c))) for c in range(num_classes)
    }
    return LoadedDataset(train, test, num_classes, per_class, zca)


def fingerprint(batch: LabeledBatch) -> bytes:
    """SHA-256 over little-endian float64 features and int64 labels (32 bytes)."""
    h = hashlib.sha256()
    h.update(struct.pack("<II", *batch.features.shape))
    h.update(np.ascontiguousarray(batch.features, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(batch.labels, dtype="<i8").tobytes())
    return h.digest()


def write_csv(batch: LabeledBatch, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{j}" for j in range(batch.features.shape[1])] + ["label"])
        for row, label in zip(batch.features, batch.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
