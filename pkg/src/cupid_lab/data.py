"""Synthetic datasets: piecewise-sine regression toys and Gaussian blobs.

Every generator is a pure function of its arguments and seed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .rng import Rng


@dataclass(frozen=True)
class Branch:
    region: int
    intervals: tuple  # ((lo, hi), ...) half-open
    offset: float
    noise_std: float
    extra_sin2x: bool = False

    def mean(self, x):
        y = 3.0 * np.sin(0.8 * x) + self.offset
        if self.extra_sin2x:
            y = y + np.sin(2.0 * x)
        return y


TOY1 = (
    Branch(1, ((5.0, 8.0), (12.0, 14.0)), 5.3, 0.7),
    Branch(2, ((8.0, 12.0),), 5.7, 0.3),
)
TOY2 = (
    Branch(1, ((5.0, 9.0),), 1.3, 0.7, extra_sin2x=True),
    Branch(2, ((11.0, 13.0),), 1.8, 0.2, extra_sin2x=True),
)
TOYS = {"toy1": TOY1, "toy2": TOY2}


@dataclass
class RegressionData:
    x: np.ndarray
    y: np.ndarray
    region: np.ndarray

    def __len__(self):
        return self.x.size


def _uniform_on_union(rng: Rng, intervals, n: int) -> np.ndarray:
    lengths = np.array([hi - lo for lo, hi in intervals])
    u = rng.uniform(n) * lengths.sum()
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    x = np.empty(n)
    for (lo, hi), left, right in zip(intervals, bounds[:-1], bounds[1:]):
        inside = (u >= left) & (u < right)
        # clamp keeps the half-open upper end exclusive under rounding
        x[inside] = np.minimum(lo + (u[inside] - left), np.nextafter(hi, lo))
    return x


def gen_toy(branches, n_per_region: int, seed: int, density=None) -> RegressionData:
    """Sample every branch uniformly over its intervals.

    ``density`` optionally scales the per-branch counts (default all 1).
    """
    if n_per_region < 1:
        raise ValueError("n_per_region must be >= 1")
    density = density or [1.0] * len(branches)
    rng = Rng(seed).child("toy-data")
    xs, ys, regions = [], [], []
    for branch, factor in zip(branches, density):
        n = max(1, int(round(n_per_region * factor)))
        x = _uniform_on_union(rng, branch.intervals, n)
        y = branch.mean(x) + rng.normal(n, scale=branch.noise_std)
        xs.append(x)
        ys.append(y)
        regions.append(np.full(n, branch.region, dtype=np.int64))
    return RegressionData(np.concatenate(xs), np.concatenate(ys), np.concatenate(regions))


def gen_toy1(n_per_region: int, seed: int, density=None) -> RegressionData:
    return gen_toy(TOY1, n_per_region, seed, density)


def gen_toy2(n_per_region: int, seed: int, density=None) -> RegressionData:
    return gen_toy(TOY2, n_per_region, seed, density)


# --- blobs ------------------------------------------------------------------


@dataclass(frozen=True)
class BlobsConfig:
    classes: int = 3
    n_per_class: int = 200
    dim: int = 4
    spread: float = 0.5
    radius: float = 1.0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dim < 2:
            raise ValueError("need at least 2 feature dimensions")


@dataclass
class ClassificationData:
    features: np.ndarray
    labels: np.ndarray
    is_ood: np.ndarray

    def __len__(self):
        return self.labels.size

    def subset(self, idx) -> "ClassificationData":
        return ClassificationData(self.features[idx], self.labels[idx], self.is_ood[idx])


def blob_centers(classes: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """Scaled unit vectors when ``dim >= classes``, else points on a circle."""
    centers = np.zeros((classes, dim))
    if dim >= classes:
        centers[np.arange(classes), np.arange(classes)] = radius
    else:
        angle = 2.0 * np.pi * np.arange(classes) / classes
        centers[:, 0] = radius * np.cos(angle)
        centers[:, 1] = radius * np.sin(angle)
    return centers


def shift_direction(classes: int, dim: int) -> np.ndarray:
    """Unit vector along which OOD sets are translated.

    Orthogonal to the span of the centers whenever a spare axis exists.
    """
    v = np.zeros(dim)
    if dim > classes:
        v[-1] = 1.0
    elif dim > 2:
        v[2:] = 1.0
    else:
        v[:] = 1.0
    return v / np.linalg.norm(v)


def gen_blobs(cfg: BlobsConfig, seed: int, shift: float = 0.0, is_ood: bool = False) -> ClassificationData:
    rng = Rng(seed).child("blobs")
    centers = blob_centers(cfg.classes, cfg.dim, cfg.radius) + shift * shift_direction(cfg.classes, cfg.dim)
    labels = np.repeat(np.arange(cfg.classes), cfg.n_per_class)
    noise = rng.normal((labels.size, cfg.dim), scale=cfg.spread)
    feats = centers[labels] + noise
    return ClassificationData(feats, labels, np.full(labels.size, bool(is_ood)))


def gen_ood_shift(cfg: BlobsConfig, shift: float, seed: int) -> ClassificationData:
    """Blobs translated by ``shift`` along :func:`shift_direction`, all flagged OOD."""
    if shift < 0:
        raise ValueError("shift magnitude must be non-negative")
    return gen_blobs(cfg, Rng(seed).child("ood").seed, shift=shift, is_ood=True)


def inject_label_noise(labels, classes: int, rate: float, seed: int) -> np.ndarray:
    """Replace a ``rate`` fraction of labels (exact count) with a different class."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    rng = Rng(seed).child("label-noise")
    n_flip = int(round(rate * labels.size))
    idx = rng.permutation(labels.size)[:n_flip]
    offset = 1 + rng.integers(classes - 1, n_flip)
    labels[idx] = (labels[idx] + offset) % classes
    return labels


def train_test_split(n: int, seed: int, train_fraction: float = 0.8):
    order = Rng(seed).child("split").permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


# --- CSV --------------------------------------------------------------------


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def regression_csv(data: RegressionData) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "region"])
    for x, y, r in zip(data.x, data.y, data.region):
        w.writerow([fmt(x), fmt(y), int(r)])
    return buf.getvalue()


def classification_csv(data: ClassificationData) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = data.features.shape[1]
    w.writerow([f"f{i}" for i in range(dim)] + ["class", "is_ood"])
    for f, c, o in zip(data.features, data.labels, data.is_ood):
        w.writerow([fmt(v) for v in f] + [int(c), int(o)])
    return buf.getvalue()


def read_regression_csv(text: str) -> RegressionData:
    rows = list(csv.DictReader(io.StringIO(text)))
    return RegressionData(
        np.array([float(r["x"]) for r in rows]),
        np.array([float(r["y"]) for r in rows]),
        np.array([int(r["region"]) for r in rows], dtype=np.int64),
    )


def read_classification_csv(text: str) -> ClassificationData:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    dim = sum(1 for h in header if h.startswith("f"))
    feats = np.array([[float(v) for v in r[:dim]] for r in body]).reshape(len(body), dim)
    return ClassificationData(
        feats,
        np.array([int(r[dim]) for r in body], dtype=np.int64),
        np.array([bool(int(r[dim + 1])) for r in body]),
    )
