"""Synthetic shifted-classification tasks, stochastic views, and dataset files.

A task is three splits drawn from a C-class Gaussian mixture whose means sit
equally spaced on a circle of radius ``separation`` in the first two
coordinates (remaining coordinates are zero-mean noise only):

* ``source``   -- labeled, unshifted, tag 0
* ``target``   -- labeled (labels are withheld by callers that adapt without
  supervision), rotated in the first two coordinates and translated, tag 1
* ``pool``     -- unlabeled auxiliary rows; a ``pool_target_mix`` fraction is
  drawn from the target distribution (tag 1), the rest from far-away
  distractor clusters (tags 2, 3, ...) centered at six times the class
  separation so they never overlap the task classes

Sample IDs are globally unique and sequential across the three splits, in the
order source, target, pool, so retrieval structures and memory-bank entries
can always tell rows apart.

Views add per-sample Gaussian noise whose stream depends only on
``(seed, sample_id, step)`` -- never on batch composition -- so any run that
visits the same sample at the same step sees bit-identical noise.  The strong
view additionally zeroes each coordinate with probability 0.2 (noise first,
then the drop mask).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .io import read_array_container, write_array_container
from .numerics import REAL, Rng, l2_normalize

TAG_SOURCE = 0
TAG_TARGET = 1
TAG_DISTRACTOR_BASE = 2

WEAK_NOISE_FACTOR = 0.05
STRONG_NOISE_FACTOR = 0.25
STRONG_DROP_RATE = 0.2

# distractor cluster centers sit at this multiple of the class separation
_DISTRACTOR_RADIUS_FACTOR = 6.0

# rng channels (children of the data seed / augmentation seed)
_CH_SOURCE = 0
_CH_TARGET = 1
_CH_POOL = 2
_CH_WEAK = 10
_CH_STRONG = 11
_CH_SUBSAMPLE = 12
_CH_PROJECTION = 13


@dataclass
class Dataset:
    """Rows plus identity/provenance metadata; labels are optional."""

    samples: np.ndarray  # (n, d) float32
    ids: np.ndarray  # (n,) uint64
    tags: np.ndarray  # (n,) uint16
    labels: np.ndarray | None = None  # (n,) int64

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=REAL)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-d array")
        n = self.samples.shape[0]
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.tags = np.asarray(self.tags, dtype=np.uint16)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        lengths = [len(self.ids), len(self.tags)]
        if self.labels is not None:
            lengths.append(len(self.labels))
        if any(m != n for m in lengths):
            raise ValueError("metadata length does not match sample count")
        if len(np.unique(self.ids)) != n:
            raise ValueError("duplicate ids in dataset")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.samples[rows].copy(),
            self.ids[rows].copy(),
            self.tags[rows].copy(),
            None if self.labels is None else self.labels[rows].copy(),
        )

    def without_labels(self) -> "Dataset":
        return Dataset(self.samples.copy(), self.ids.copy(), self.tags.copy(), None)


@dataclass(frozen=True)
class ShiftSpec:
    """Covariate shift: rotate every class-hosting plane, then translate.

    Class means live on a circle replicated across ``num_planes`` disjoint
    coordinate pairs ((0,1), (2,3), ...); the rotation turns each hosting
    plane by the same angle.  Spreading the class signal over several
    planes makes it partially survive the strong view's coordinate drops.
    """

    rotation: float = 0.0  # radians
    translation: tuple[float, ...] = ()
    num_planes: int = 1

    def __post_init__(self) -> None:
        if self.num_planes < 1:
            raise ValueError("num_planes must be at least 1")

    @staticmethod
    def identity() -> "ShiftSpec":
        return ShiftSpec()


def class_means(
    num_classes: int, dim: int, separation: float, num_planes: int = 1
) -> np.ndarray:
    """Means on a circle replicated across hosting planes.

    Per-plane radii shrink with sqrt(num_planes) so the total inter-class
    distances stay what a single plane of radius ``separation`` gives.
    """
    if dim < 2 * num_planes:
        raise ValueError("need two dimensions per hosting plane")
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    radius = separation / math.sqrt(num_planes)
    means = np.zeros((num_classes, dim))
    for p in range(num_planes):
        means[:, 2 * p] = radius * np.cos(angles)
        means[:, 2 * p + 1] = radius * np.sin(angles)
    return means


def apply_shift(points: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    """Rotate each hosting plane by ``shift.rotation``, add the translation."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] < 2 * shift.num_planes:
        raise ValueError("need two dimensions per hosting plane")
    out = points.copy()
    c, s = math.cos(shift.rotation), math.sin(shift.rotation)
    for p in range(shift.num_planes):
        a, b = 2 * p, 2 * p + 1
        out[..., a] = c * points[..., a] - s * points[..., b]
        out[..., b] = s * points[..., a] + c * points[..., b]
    translation = np.asarray(shift.translation, dtype=np.float64)
    if translation.size:
        if translation.size > points.shape[-1]:
            raise ValueError("translation longer than sample dimension")
        out[..., : translation.size] += translation
    return out


def _distractor_means(
    num_distractors: int, dim: int, separation: float, num_planes: int
) -> np.ndarray:
    """Far clusters, angularly offset so they never sit on a class mean."""
    offsets = 2.0 * np.pi * (np.arange(num_distractors) + 0.5) / num_distractors
    radius = _DISTRACTOR_RADIUS_FACTOR * separation / math.sqrt(num_planes)
    means = np.zeros((num_distractors, dim))
    for p in range(num_planes):
        means[:, 2 * p] = radius * np.cos(offsets)
        means[:, 2 * p + 1] = radius * np.sin(offsets)
    return means


def make_shifted_task(
    num_classes: int,
    dim: int,
    n_source: int,
    n_target: int,
    n_pool: int,
    shift: ShiftSpec,
    pool_target_mix: float = 0.5,
    num_distractors: int = 3,
    separation: float = 4.0,
    scale: float = 1.0,
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Draw (source, target, pool) for one task.

    The pool shares the target's shift for its target-like portion; the
    remaining rows come from the distractor clusters.  Source and target
    noise streams are independent of the pool's, so regenerating the pool
    with a different ``pool_target_mix`` leaves source and target untouched.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if dim < 2 * shift.num_planes:
        raise ValueError("need two dimensions per hosting plane")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if scale < 0:
        raise ValueError("scale must be non-negative")
    if not 0.0 <= pool_target_mix <= 1.0:
        raise ValueError("pool_target_mix must lie in [0, 1]")
    if min(n_source, n_target) < num_classes:
        raise ValueError("split sizes must cover every class")
    if n_pool < 1:
        raise ValueError("pool must contain at least one row")
    n_pool_like = int(round(pool_target_mix * n_pool))
    if n_pool_like < n_pool and num_distractors < 1:
        raise ValueError("need at least one distractor cluster")

    rng = Rng(seed)
    means = class_means(num_classes, dim, separation, shift.num_planes)

    def draw_split(n: int, channel: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.arange(n, dtype=np.int64) % num_classes
        noise = rng.split(channel).normal(size=(n, dim))
        return means[labels] + scale * noise, labels

    src_points, src_labels = draw_split(n_source, _CH_SOURCE)
    tgt_points, tgt_labels = draw_split(n_target, _CH_TARGET)
    tgt_points = apply_shift(tgt_points, shift)

    pool_noise = rng.split(_CH_POOL).normal(size=(n_pool, dim))
    pool_points = np.empty((n_pool, dim))
    pool_tags = np.empty(n_pool, dtype=np.uint16)
    if n_pool_like:
        like_labels = np.arange(n_pool_like, dtype=np.int64) % num_classes
        like = means[like_labels] + scale * pool_noise[:n_pool_like]
        pool_points[:n_pool_like] = apply_shift(like, shift)
        pool_tags[:n_pool_like] = TAG_TARGET
    n_rest = n_pool - n_pool_like
    if n_rest:
        clusters = np.arange(n_rest) % num_distractors
        far = _distractor_means(num_distractors, dim, separation, shift.num_planes)
        pool_points[n_pool_like:] = far[clusters] + scale * pool_noise[n_pool_like:]
        pool_tags[n_pool_like:] = TAG_DISTRACTOR_BASE + clusters

    next_id = 0

    def take_ids(n: int) -> np.ndarray:
        nonlocal next_id
        out = np.arange(next_id, next_id + n, dtype=np.uint64)
        next_id += n
        return out

    source = Dataset(
        src_points, take_ids(n_source), np.full(n_source, TAG_SOURCE, np.uint16), src_labels
    )
    target = Dataset(
        tgt_points, take_ids(n_target), np.full(n_target, TAG_TARGET, np.uint16), tgt_labels
    )
    pool = Dataset(pool_points, take_ids(n_pool), pool_tags, None)
    return source, target, pool


def pool_eval_labels(pool: Dataset, num_classes: int) -> np.ndarray:
    """Ground-truth labels of pool rows, for retriever evaluation only.

    Adaptation never sees these.  ``pool`` must be as generated (all rows,
    generation order): target-like rows then repeat the class cycle they
    were drawn with, and distractor rows get synthetic classes above the
    task's label space (``num_classes + cluster``), so a majority vote can
    be scored over the whole pool.
    """
    labels = np.empty(len(pool), dtype=np.int64)
    like = pool.tags == TAG_TARGET
    labels[like] = np.arange(int(np.sum(like)), dtype=np.int64) % num_classes
    labels[~like] = num_classes + (pool.tags[~like].astype(np.int64) - TAG_DISTRACTOR_BASE)
    return labels


def weak_view(
    sample: np.ndarray, sample_id: int, step: int, rng: Rng, scale: float
) -> np.ndarray:
    """Light Gaussian jitter; stream keyed by (rng seed, sample id, step)."""
    stream = rng.split(_CH_WEAK, int(sample_id), int(step))
    noisy = np.asarray(sample, np.float64) + WEAK_NOISE_FACTOR * scale * stream.normal(
        size=np.shape(sample)
    )
    return noisy.astype(REAL)


def strong_view(
    sample: np.ndarray, sample_id: int, step: int, rng: Rng, scale: float
) -> np.ndarray:
    """Heavy jitter followed by random coordinate drops at rate 0.2."""
    stream = rng.split(_CH_STRONG, int(sample_id), int(step))
    noisy = np.asarray(sample, np.float64) + STRONG_NOISE_FACTOR * scale * stream.normal(
        size=np.shape(sample)
    )
    keep = stream.random(size=np.shape(sample)) >= STRONG_DROP_RATE
    return (noisy * keep).astype(REAL)


def weak_batch(
    samples: np.ndarray, ids: np.ndarray, step: int, rng: Rng, scale: float
) -> np.ndarray:
    return np.stack(
        [weak_view(row, sid, step, rng, scale) for row, sid in zip(samples, ids)]
    )


def strong_batch(
    samples: np.ndarray, ids: np.ndarray, step: int, rng: Rng, scale: float
) -> np.ndarray:
    return np.stack(
        [strong_view(row, sid, step, rng, scale) for row, sid in zip(samples, ids)]
    )


def stratified_subsample(dataset: Dataset, fraction: float, rng: Rng) -> Dataset:
    """Keep ``ceil(fraction * n_c)`` rows of every class, then shuffle.

    ``fraction=1.0`` therefore returns a permutation of the full dataset.
    """
    if dataset.labels is None:
        raise ValueError("stratified subsampling needs labels")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    chosen: list[np.ndarray] = []
    for c in np.unique(dataset.labels):
        rows = np.flatnonzero(dataset.labels == c)
        m = math.ceil(fraction * len(rows))
        picks = rng.split(_CH_SUBSAMPLE, int(c)).choice_without_replacement(len(rows), m)
        chosen.append(rows[np.sort(picks)])
    rows = np.concatenate(chosen)
    rows = rows[rng.split(_CH_SUBSAMPLE, -1).permutation(len(rows))]
    return dataset.subset(rows)


def make_projection(in_dim: int, out_dim: int, seed: int) -> np.ndarray:
    """Gaussian random projection, scaled to roughly preserve norms."""
    if min(in_dim, out_dim) < 1:
        raise ValueError("projection dimensions must be positive")
    stream = Rng(seed).split(_CH_PROJECTION)
    return stream.normal(size=(in_dim, out_dim)) / math.sqrt(in_dim)


def embed_for_retrieval(
    samples: np.ndarray, projection: np.ndarray | None = None
) -> np.ndarray:
    """Unit-norm retrieval embeddings; identity map unless projected."""
    x = np.asarray(samples, dtype=np.float64)
    if projection is not None:
        if projection.shape[0] != x.shape[1]:
            raise ValueError("projection does not match sample dimension")
        x = x @ np.asarray(projection, dtype=np.float64)
    return l2_normalize(x).astype(REAL)


def save_dataset(path: str, dataset: Dataset) -> None:
    write_array_container(path, dataset.samples, dataset.ids, dataset.tags, dataset.labels)


def load_dataset(path: str) -> Dataset:
    samples, ids, tags, labels = read_array_container(path)
    return Dataset(samples, ids, tags, labels)
