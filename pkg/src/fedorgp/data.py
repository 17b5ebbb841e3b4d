"""Datasets, IDX container I/O and non-IID client partitioning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, FormatError, IdxIOError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray   # (N, D) float64
    labels: np.ndarray     # (N,) int64
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DatasetError(f"features {self.features.shape} / labels {self.labels.shape} misaligned")
        if self.labels.size and self.labels.min() < 0:
            raise DatasetError("negative label")
        present = np.unique(self.labels)
        if present.size != self.n_classes:
            raise DatasetError("every class in 0..C-1 needs at least one sample")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def generate_synthetic(n_classes: int, dim: int, n_per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs around random unit-sphere centers."""
    if n_classes < 2 or dim < 2 or n_per_class < 2:
        raise ConfigError("synthetic data needs C >= 2, D >= 2, n_per_class >= 2")
    if not spread > 0:
        raise ConfigError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = rng.standard_normal((n_classes, n_per_class, dim)) * spread
    X = (centers[:, None, :] + noise).reshape(-1, dim)
    y = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(X, y, provenance=f"synthetic(C={n_classes},D={dim},n={n_per_class},spread={spread!r},seed={seed})")


# ----------------------------------------------------------------------------
# IDX container
# ----------------------------------------------------------------------------

def _open(path, mode):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise IdxIOError(f"truncated IDX file while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_idx(path, magic, ndim):
    with _open(path, "rb") as f:
        (found,) = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if found != magic:
            raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
        dims = struct.unpack(">" + "I" * ndim, _read_exact(f, 4 * ndim, "dimensions"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = _read_exact(f, size, "payload")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an unsigned-byte IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), provenance=f"idx({Path(images_path).name})")


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)``."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise FormatError("images must be (N, rows, cols) with N labels")
    with _open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.astype(np.uint8).tobytes())
    with _open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def write_dataset_idx(images_path, labels_path, ds: Dataset, rows: int | None = None) -> None:
    """Quantize a [0, 1] dataset to bytes and store it as a single-row image stack."""
    rows = 1 if rows is None else rows
    if ds.dim % rows:
        raise FormatError(f"dim {ds.dim} not divisible into {rows} rows")
    lo, hi = ds.features.min(), ds.features.max()
    scaled = (ds.features - lo) / (hi - lo) if hi > lo else np.zeros_like(ds.features)
    pix = np.rint(scaled * 255.0).astype(np.uint8).reshape(ds.n_samples, rows, ds.dim // rows)
    write_idx(images_path, labels_path, pix, ds.labels)


# ----------------------------------------------------------------------------
# partitioning
# ----------------------------------------------------------------------------

@dataclass
class PartitionPlan:
    """Per-client sample indices into one dataset. ``train``/``test`` are filled
    by :func:`split_train_test`."""

    assigned: list[np.ndarray]
    train: list[np.ndarray] = field(default_factory=list)
    test: list[np.ndarray] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return len(self.assigned)

    @property
    def is_split(self) -> bool:
        return len(self.train) == self.n_clients

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assigned]


def _class_indices(ds: Dataset, rng) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]


def partition_pathological(ds: Dataset, n_clients: int, classes_per_client: int, seed: int) -> PartitionPlan:
    """Every client holds exactly ``classes_per_client`` classes.

    Classes are dealt round-robin over a seeded class permutation, so each class
    has at least one owner when ``n_clients * classes_per_client >= C``. A
    class's samples are cut among its owners at uniformly random boundaries,
    each owner receiving at least one sample.
    """
    C = ds.n_classes
    if n_clients < 1 or not 1 <= classes_per_client <= C:
        raise ConfigError(f"classes_per_client must be in [1, {C}] and clients >= 1")
    if n_clients * classes_per_client < C:
        raise ConfigError(f"{n_clients} clients x {classes_per_client} classes cannot cover {C} classes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(C)
    owners: list[list[int]] = [[] for _ in range(C)]
    for k in range(n_clients):
        for j in range(classes_per_client):
            owners[perm[(k * classes_per_client + j) % C]].append(k)
    pools = _class_indices(ds, rng)
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(C):
        idx, own = pools[c], owners[c]
        if len(idx) < len(own):
            raise ConfigError(f"class {c} has {len(idx)} samples for {len(own)} owners")
        cuts = np.sort(rng.choice(np.arange(1, len(idx)), size=len(own) - 1, replace=False)) if len(own) > 1 else []
        for k, shard in zip(own, np.split(idx, cuts)):
            parts[k].append(shard)
    return PartitionPlan([np.sort(np.concatenate(p)) for p in parts])


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, ties broken toward lower index."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(ds: Dataset, n_clients: int, alpha: float, seed: int,
                        min_samples: int = 0, max_tries: int = 100) -> PartitionPlan:
    """Split each class across clients with Dirichlet(alpha) proportions.

    With ``min_samples > 0`` the draw is repeated (up to ``max_tries``) until
    every client has at least that many samples.
    """
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    if n_clients < 1:
        raise ConfigError("need at least one client")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        pools = _class_indices(ds, rng)
        parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for idx in pools:
            p = rng.dirichlet(np.full(n_clients, alpha))
            counts = largest_remainder(p, len(idx))
            for k, shard in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                parts[k].append(shard)
        plan = PartitionPlan([np.sort(np.concatenate(p)) for p in parts])
        if min(plan.sizes()) >= min_samples:
            return plan
    raise ConfigError(f"no Dirichlet(alpha={alpha}) draw gave every client >= {min_samples} samples "
                      f"in {max_tries} tries")


def split_train_test(plan: PartitionPlan, labels: np.ndarray, ratio: float = 0.75, seed: int = 0) -> PartitionPlan:
    """Stratified per-class split inside every client.

    A class with ``m >= 2`` samples puts ``floor(ratio * m)`` in train; a
    singleton class goes to train. If that leaves a client with at least four
    samples and an empty test set, one sample of its largest class moves to test.
    """
    if not 0 < ratio < 1:
        raise ConfigError("ratio must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k, idx in enumerate(plan.assigned):
        if len(idx) < 2:
            raise ConfigError(f"client {k} has {len(idx)} samples; need at least 2")
        tr, te = [], []
        for c in np.unique(labels[idx]):
            members = rng.permutation(idx[labels[idx] == c])
            m = len(members)
            cut = int(np.floor(ratio * m)) if m >= 2 else 1
            tr.append(members[:cut])
            te.append(members[cut:])
        if len(idx) >= 4 and sum(len(t) for t in te) == 0:
            big = int(np.argmax([len(t) for t in tr]))
            te[big] = tr[big][-1:]
            tr[big] = tr[big][:-1]
        train.append(np.sort(np.concatenate(tr)))
        test.append(np.sort(np.concatenate(te)))
    return PartitionPlan([a.copy() for a in plan.assigned], train, test)


def label_entropy(labels: np.ndarray, n_classes: int) -> float:
    """Shannon entropy (nats) of a label histogram."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
