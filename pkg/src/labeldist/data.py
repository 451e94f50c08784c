"""Labeled datasets: loading, label distributions, resampling and balancing."""

from __future__ import annotations

import csv
import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with one-hot labels.

    ``index`` holds each row's position in the pool it was drawn from; it is
    what makes aux/shadow disjointness checkable after resampling.
    """

    features: np.ndarray
    labels: np.ndarray
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError(f"features {x.shape} and labels {y.shape} do not conform")
        if y.size and not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
            raise DataError("labels must be one-hot rows")
        idx = np.arange(x.shape[0]) if self.index is None else np.asarray(self.index, dtype=np.int64)
        if idx.shape != (x.shape[0],):
            raise DataError("index length does not match the number of rows")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "index", idx)

    @classmethod
    def from_class_ids(cls, features, class_ids, n_classes: int, index=None) -> "LabeledDataset":
        class_ids = np.asarray(class_ids, dtype=np.int64)
        if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= n_classes):
            raise DataError("class id out of range")
        labels = np.zeros((class_ids.size, n_classes))
        labels[np.arange(class_ids.size), class_ids] = 1.0
        x = np.asarray(features, dtype=float)
        if x.ndim != 2:
            x = x.reshape(class_ids.size, -1) if x.size else np.zeros((class_ids.size, 0))
        return cls(x, labels, index)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def class_ids(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    @property
    def class_counts(self) -> np.ndarray:
        return self.labels.sum(axis=0).astype(np.int64)

    def take(self, rows: np.ndarray) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.features[rows], self.labels[rows], self.index[rows])


def compute_label_distribution(dataset: LabeledDataset) -> np.ndarray:
    if len(dataset) == 0:
        raise DataError("label distribution of an empty dataset")
    return dataset.class_counts / len(dataset)


def largest_remainder_counts(p: Sequence[float], n: int) -> np.ndarray:
    """Integer counts summing to ``n`` closest to ``n * p``.

    Leftover units go to the largest fractional parts; ties go to the lower
    class index.
    """
    p = np.asarray(p, dtype=float)
    raw = n * p
    # absorb float noise such as 0.07 * 100 = 7.000000000000001
    raw = np.where(np.abs(raw - np.round(raw)) < 1e-9, np.round(raw), raw)
    counts = np.floor(raw).astype(np.int64)
    remainder = raw - counts
    short = int(n - counts.sum())
    order = sorted(range(p.size), key=lambda c: (-remainder[c], c))
    for c in order[:short]:
        counts[c] += 1
    return counts


def resample_to_distribution(pool: LabeledDataset, p: Sequence[float], n: int, seed) -> LabeledDataset:
    """Draw ``n`` rows without replacement with class proportions ``p``."""
    p = np.asarray(p, dtype=float)
    if p.size != pool.n_classes:
        raise DataError(f"distribution has {p.size} entries, pool has {pool.n_classes} classes")
    counts = largest_remainder_counts(p, n)
    rng = np.random.default_rng(seed)
    ids = pool.class_ids
    picked = []
    for c, k in enumerate(counts):
        members = np.flatnonzero(ids == c)
        if members.size < k:
            raise DataError(f"pool has {members.size} samples of class {c}, {k} needed for p={p.tolist()}")
        picked.append(rng.choice(members, size=k, replace=False))
    rows = np.concatenate(picked)
    return pool.take(rows[rng.permutation(rows.size)])


def random_oversample(dataset: LabeledDataset, seed) -> LabeledDataset:
    """Duplicate minority-class rows at random until every class has the majority count."""
    counts = dataset.class_counts
    if np.any(counts == 0):
        raise DataError(f"cannot oversample: class {int(np.argmin(counts))} has no samples")
    rng = np.random.default_rng(seed)
    ids = dataset.class_ids
    extra = []
    for c, k in enumerate(counts):
        need = counts.max() - k
        if need:
            extra.append(rng.choice(np.flatnonzero(ids == c), size=need, replace=True))
    if not extra:
        return dataset
    rows = np.concatenate([np.arange(len(dataset)), *extra])
    return dataset.take(rows)


def split_aux(pool: LabeledDataset, n_aux: int, seed) -> tuple[LabeledDataset, LabeledDataset]:
    """Withdraw ``n_aux`` rows per class; returns ``(aux, remaining_pool)``.

    The aux rows are ordered by class, ``n_aux`` consecutive rows per class.
    """
    if n_aux < 0:
        raise ConfigError("n_aux must be nonnegative")
    rng = np.random.default_rng(seed)
    ids = pool.class_ids
    taken = []
    for c in range(pool.n_classes):
        members = np.flatnonzero(ids == c)
        if members.size < n_aux:
            raise DataError(f"class {c} has {members.size} samples, n_aux={n_aux} requested")
        taken.append(np.sort(rng.choice(members, size=n_aux, replace=False)))
    aux_rows = np.concatenate(taken).astype(np.int64)
    keep = np.ones(len(pool), dtype=bool)
    keep[aux_rows] = False
    return pool.take(aux_rows), pool.take(np.flatnonzero(keep))


def synth_gaussians(means, covariances, counts, seed) -> LabeledDataset:
    """Per-class multivariate Gaussian samples, class blocks in order."""
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n_classes, dim = means.shape
    if covariances is None:
        covariances = [np.eye(dim)] * n_classes
    covariances = [np.atleast_2d(np.asarray(c, dtype=float)) for c in covariances]
    if len(covariances) != n_classes or len(counts) != n_classes:
        raise ConfigError("need one covariance and one count per class")
    rng = np.random.default_rng(seed)
    xs, ids = [], []
    for c, (mu, cov, k) in enumerate(zip(means, covariances, counts)):
        if k < 0:
            raise ConfigError("class counts must be nonnegative")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigError(f"covariance of class {c} is not positive definite") from exc
        xs.append(mu + rng.standard_normal((int(k), dim)) @ chol.T)
        ids.append(np.full(int(k), c))
    return LabeledDataset.from_class_ids(np.concatenate(xs), np.concatenate(ids), n_classes)


# -- delimited text ----------------------------------------------------------


@dataclass(frozen=True)
class TabularSchema:
    """Column roles for a comma-separated file with a header row.

    Rows whose label (whitespace-stripped) is in ``positive_labels`` become
    class 0, everything else class 1, so ``p[0]`` is the positive fraction.
    ``categories`` optionally fixes the vocabulary of a categorical column;
    values outside it land in an extra "other" slot.
    """

    label_column: str
    positive_labels: tuple[str, ...]
    categorical: tuple[str, ...] = ()
    numeric: tuple[str, ...] = ()
    categories: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        return cls(
            label_column=d["label_column"],
            positive_labels=tuple(d["positive_labels"]),
            categorical=tuple(d.get("categorical", ())),
            numeric=tuple(d.get("numeric", ())),
            categories={k: tuple(v) for k, v in d.get("categories", {}).items()},
        )


def load_tabular(path: str | Path, schema: TabularSchema) -> LabeledDataset:
    """Read a CSV file into one-hot categoricals followed by standardized numerics."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        for name in (schema.label_column, *schema.categorical, *schema.numeric):
            if name not in col:
                raise DataError(f"{path}: column {name!r} missing from header")
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            label = row[col[schema.label_column]].strip().rstrip(".")
            if not label:
                raise DataError(f"{path}:{line}: missing label")
            labels.append(0 if label in schema.positive_labels else 1)
            rows.append((line, [v.strip() for v in row]))
    if not rows:
        raise DataError(f"{path}: no data rows")

    blocks = []
    for name in schema.categorical:
        values = [r[col[name]] for _, r in rows]
        if name in schema.categories:
            vocab = list(schema.categories[name])
            width = len(vocab) + 1
        else:
            vocab = sorted(set(values))
            width = len(vocab)
        slot = {v: i for i, v in enumerate(vocab)}
        block = np.zeros((len(rows), width))
        for i, v in enumerate(values):
            block[i, slot.get(v, len(vocab))] = 1.0
        blocks.append(block)
    for name in schema.numeric:
        vals = np.empty(len(rows))
        for i, (line, r) in enumerate(rows):
            try:
                vals[i] = float(r[col[name]])
            except ValueError:
                raise DataError(f"{path}:{line}: column {name!r} is not numeric: {r[col[name]]!r}") from None
        std = vals.std()
        blocks.append(((vals - vals.mean()) / (std if std > 0 else 1.0))[:, None])
    features = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    logger.info("loaded %d rows, %d features from %s", len(rows), features.shape[1], path)
    return LabeledDataset.from_class_ids(features, labels, 2)


# -- IDX ---------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, magic: int, path) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    if len(body) < int(np.prod(dims)):
        raise DataError(f"{path}: truncated file, {len(body)} of {int(np.prod(dims))} data bytes")
    return dims, body


def load_idx(images_path: str | Path, labels_path: str | Path, keep_classes: Iterable[int]) -> LabeledDataset:
    """Load IDX images/labels (optionally gzipped), keeping only ``keep_classes``.

    Pixels are scaled to [0, 1]; kept digits are re-indexed in sorted order.
    """
    dims, img_body = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    (n_labels,), lab_body = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    n_images = dims[0]
    if n_images != n_labels:
        raise DataError(f"{n_images} images but {n_labels} labels")
    dim = int(np.prod(dims[1:]))
    images = np.frombuffer(img_body, dtype=np.uint8, count=n_images * dim).reshape(n_images, dim)
    digits = np.frombuffer(lab_body, dtype=np.uint8, count=n_labels)
    keep = sorted(set(int(k) for k in keep_classes))
    if len(keep) < 2:
        raise ConfigError("keep at least two classes")
    remap = np.full(256, -1)
    remap[keep] = np.arange(len(keep))
    rows = np.flatnonzero(remap[digits] >= 0)
    return LabeledDataset.from_class_ids(images[rows] / 255.0, remap[digits[rows]], len(keep))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    header = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(f">{images.ndim}I", *images.shape)
    Path(images_path).write_bytes(header + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
