"""Labeled image data: IDX ingestion, a synthetic Gaussian-mixture task with an
exact Bayes oracle, and nearest-neighbour distances against a dataset."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import (
    CountMismatch,
    DegenerateSpec,
    EmptyDataset,
    MagicMismatch,
    TruncatedFile,
)

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049

# one quantization level of a byte image; used as the l0 "differs" tolerance
L0_TOLERANCE = 1.0 / 255.0


@dataclass
class LabeledDataset:
    """Examples as flat pixel rows in [-1, 1] with integer class labels."""

    pixels: np.ndarray  # (n, input_dim) float32
    labels: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 2 or len(self.pixels) == 0:
            raise EmptyDataset("dataset must contain at least one example")
        if len(self.pixels) != len(self.labels):
            raise CountMismatch("pixels", "labels", len(self.pixels), len(self.labels))
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [-1, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError("labels must lie in [0, class_count)")

    @property
    def input_dim(self) -> int:
        return self.pixels.shape[1]

    def __len__(self) -> int:
        return len(self.pixels)

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset(self.pixels[indices], self.labels[indices], self.class_count)

    def to_csv(self, path) -> None:
        """One row per example: label, then coordinates."""
        with open(path, "w") as fh:
            for y, row in zip(self.labels, self.pixels):
                fh.write(str(int(y)) + "," + ",".join(repr(float(v)) for v in row) + "\n")

    @staticmethod
    def from_csv(path, class_count: int) -> "LabeledDataset":
        labels, rows = [], []
        with open(path) as fh:
            for line in fh:
                parts = line.strip().split(",")
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
        return LabeledDataset(np.array(rows, dtype=np.float32), np.array(labels), class_count)


def normalize_bytes(raw: np.ndarray) -> np.ndarray:
    """Map byte pixels [0, 255] onto the generator's tanh range [-1, 1]."""
    return (raw.astype(np.float32) * (2.0 / 255.0) - 1.0).astype(np.float32)


def denormalize_to_bytes(pixels: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_bytes`; exact on round trips."""
    return np.rint((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5).astype(np.uint8)


def _read_exact(fh, path, offset, n):
    buf = fh.read(n)
    if len(buf) < n:
        raise TruncatedFile(path, offset, n, len(buf))
    return buf


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (optionally gzip-compressed)."""

    def open_maybe_gz(path):
        with open(path, "rb") as fh:
            head = fh.read(2)
        return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")

    with open_maybe_gz(images_path) as fh:
        header = _read_exact(fh, images_path, 0, 16)
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGES_MAGIC:
            raise MagicMismatch(images_path, 0, IMAGES_MAGIC, magic)
        payload = _read_exact(fh, images_path, 16, count * rows * cols)
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)

    with open_maybe_gz(labels_path) as fh:
        header = _read_exact(fh, labels_path, 0, 8)
        magic, label_count = struct.unpack(">II", header)
        if magic != LABELS_MAGIC:
            raise MagicMismatch(labels_path, 0, LABELS_MAGIC, magic)
        payload = _read_exact(fh, labels_path, 8, label_count)
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise CountMismatch(images_path, labels_path, count, label_count)
    class_count = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(normalize_bytes(raw), labels, max(class_count, 10))


class Oracle(Protocol):
    """Ground-truth labeling: a total classify function plus a domain predicate."""

    def classify(self, x: np.ndarray) -> np.ndarray: ...

    def in_domain(self, x: np.ndarray) -> np.ndarray: ...


def _square_corner_means(classes: int, radius: float) -> np.ndarray:
    corners = np.array([[-1, -1], [1, 1], [-1, 1], [1, -1]], dtype=np.float64)
    if classes > 4:
        raise DegenerateSpec("square mixture supports at most 4 classes")
    return radius * corners[:classes]


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture; one component per class, equal priors."""

    means: np.ndarray
    variance: float = 0.02
    per_class: int = 500
    seed: int = 0
    # inputs whose max class posterior falls below this are "unrecognisable"
    recognisability_threshold: float = 0.8

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "means", means)
        if self.variance <= 0:
            raise DegenerateSpec("variance must be positive")
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 1e-9:
            raise DegenerateSpec("component means must be pairwise distinct")

    @property
    def class_count(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @staticmethod
    def square(classes: int = 4, radius: float = 0.5, variance: float = 0.02,
               per_class: int = 500, seed: int = 0,
               recognisability_threshold: float = 0.8) -> "MixtureSpec":
        """Default desk-scale task: classes at the corners of a square."""
        return MixtureSpec(_square_corner_means(classes, radius), variance,
                           per_class, seed, recognisability_threshold)


@dataclass(frozen=True)
class GaussianMixtureOracle:
    """Analytic Bayes rule of the generating mixture (equal priors).

    Ties in the posterior break toward the lower class index. The domain is
    the set of inputs whose max posterior reaches the recognisability
    threshold, i.e. everything except a band around the decision boundaries.
    """

    means: np.ndarray
    variance: float
    threshold: float = 0.8

    def log_posterior(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(-1)
        log_lik = -sq / (2.0 * self.variance)
        log_norm = np.logaddexp.reduce(log_lik, axis=1, keepdims=True)
        return log_lik - log_norm

    def posterior(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_posterior(x))

    def classify(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.log_posterior(x), axis=1).astype(np.int64)

    def in_domain(self, x: np.ndarray) -> np.ndarray:
        return self.log_posterior(x).max(axis=1) >= np.log(self.threshold)


def make_gaussian_mixture(spec: MixtureSpec) -> tuple[LabeledDataset, GaussianMixtureOracle]:
    """Sample a labeled dataset from the mixture and return it with its oracle.

    Samples are rejection-truncated to the [-1, 1] box so the dataset
    invariant holds; with the symmetric default means the truncation leaves
    class posteriors (and hence the Bayes rule) unchanged inside the box.
    """
    rng = np.random.default_rng(spec.seed)
    sigma = float(np.sqrt(spec.variance))
    per_class = []
    for mean in spec.means:
        rows = np.empty((0, spec.dim))
        while len(rows) < spec.per_class:
            draw = rng.normal(mean, sigma, size=(spec.per_class, spec.dim))
            ok = draw[(np.abs(draw) <= 1.0).all(axis=1)]
            rows = np.concatenate([rows, ok])
        per_class.append(rows[: spec.per_class])
    pixels = np.concatenate(per_class).astype(np.float32)
    labels = np.repeat(np.arange(spec.class_count, dtype=np.int64), spec.per_class)
    order = rng.permutation(len(pixels))
    dataset = LabeledDataset(pixels[order], labels[order], spec.class_count)
    oracle = GaussianMixtureOracle(spec.means, spec.variance, spec.recognisability_threshold)
    return dataset, oracle


METRICS = ("l0", "l1", "l2", "linf")


def nearest_in_dataset(x: np.ndarray, dataset: LabeledDataset, metric: str,
                       l0_tolerance: float = L0_TOLERANCE) -> tuple[float, int]:
    """Distance and index of the nearest dataset example under an lp metric.

    l0 counts coordinates differing by more than `l0_tolerance`. Ties break
    to the lowest index.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if len(dataset) == 0:
        raise EmptyDataset("nearest_in_dataset on empty dataset")
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != dataset.input_dim:
        raise ValueError(f"query has dim {x.shape[0]}, dataset has {dataset.input_dim}")
    diff = np.abs(dataset.pixels.astype(np.float64) - x)
    if metric == "l0":
        dists = (diff > l0_tolerance).sum(axis=1).astype(np.float64)
    elif metric == "l1":
        dists = diff.sum(axis=1)
    elif metric == "l2":
        dists = np.sqrt((diff**2).sum(axis=1))
    else:
        dists = diff.max(axis=1)
    idx = int(np.argmin(dists))  # first occurrence wins ties
    return float(dists[idx]), idx
