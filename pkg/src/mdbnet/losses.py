"""Class statistics, K-means class re-weighting and the training losses."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AllZeroFrequencies, EmptyMask, InvalidK, LabelOutOfRange, NonFinite, ShapeMismatch
from .geometry import Visibility, VisibilityGrid

N_CLASSES = 12
IGNORE_LABEL = 255
WEIGHT_CLAMP = (0.01, 100.0)


class WeightingMode(str, enum.Enum):
    KMEANS = "kmeans"
    RESAMPLE = "resample"


@dataclass(frozen=True)
class CombinedLossConfig:
    lam: float = 1.0
    smoothing: float = 0.1
    weighting: WeightingMode = WeightingMode.KMEANS
    kmeans_k: int = 3
    resample_ratio: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "weighting", WeightingMode(self.weighting))
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (N_CLASSES,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError(f"class weights must be {N_CLASSES} positive finite values")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls(np.ones(N_CLASSES))

    def save(self, path):
        lines = [f"{c} {float(w)!r}" for c, w in enumerate(self.weights)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ClassWeights":
        weights = np.ones(N_CLASSES)
        for line in Path(path).read_text().splitlines():
            if line.strip():
                idx, value = line.split()
                weights[int(idx)] = float(value)
        return cls(weights)


def valid_label_mask(labels: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Mask with sentinel voxels removed; raises on any other out-of-range label inside it."""
    labels = np.asarray(labels)
    keep = labels != IGNORE_LABEL
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    bad = keep & ((labels < 0) | (labels >= N_CLASSES))
    if np.any(bad):
        raise LabelOutOfRange(f"labels outside 0..{N_CLASSES - 1}: {np.unique(labels[bad])[:5]}")
    return keep


def class_frequencies(label_grids, masks=None) -> np.ndarray:
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    masks = [None] * len(label_grids) if masks is None else masks
    for labels, mask in zip(label_grids, masks):
        keep = valid_label_mask(labels, mask)
        counts += np.bincount(np.asarray(labels)[keep].astype(np.int64), minlength=N_CLASSES)
    return counts


def _lloyd(x, centroids, max_iters):
    assign = None
    for _ in range(max_iters):
        new = np.argmin(np.abs(x[:, None] - centroids[None, :]), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(centroids)):
            members = x[assign == j]
            if members.size:
                centroids[j] = members.mean()
    return assign, centroids


def kmeans_1d(values, k: int, max_iters: int = 100, seed: int = 0, n_init: int = 10):
    """Lloyd's algorithm on scalars with k-means++ seeding, best of ``n_init`` restarts.

    Values are processed in sorted order, so the result does not depend on
    input order. Cluster ids are ordered by ascending centroid.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    if not 1 <= k <= n:
        raise InvalidK(f"need 1 <= k <= n, got k={k}, n={n}")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(n_init, 1)):
        centroids = [xs[rng.integers(n)]]
        for _ in range(1, k):
            d2 = np.min((xs[:, None] - np.array(centroids)[None, :]) ** 2, axis=1)
            total = d2.sum()
            pick = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
            centroids.append(xs[pick])
        assign, cents = _lloyd(xs, np.array(centroids, dtype=np.float64), max_iters)
        inertia = float(((xs - cents[assign]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, assign, cents)
    _, assign, cents = best
    rank = np.argsort(cents, kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[rank] = np.arange(k)
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = relabel[assign]
    return assignments, cents[rank]


def reweight_classes(freqs, k: int = 3, seed: int = 0) -> ClassWeights:
    """Inverse cluster-median frequency weights from K-means over log class frequencies.

    Present classes are clustered on ``log(freq)``; each gets the reciprocal
    of its cluster's median frequency, rescaled so present-class weights
    average 1. Absent classes get 1; everything is clamped to [0.01, 100].
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    present = np.flatnonzero(freqs > 0)
    if present.size == 0:
        raise AllZeroFrequencies("no class has a nonzero frequency")
    assign, _ = kmeans_1d(np.log(freqs[present]), min(k, present.size), seed=seed)
    raw = np.empty(present.size)
    for j in np.unique(assign):
        raw[assign == j] = 1.0 / np.median(freqs[present][assign == j])
    weights = np.ones(N_CLASSES)
    weights[present] = raw / raw.mean()
    return ClassWeights(np.clip(weights, *WEIGHT_CLAMP))


def rare_classes(freqs, k: int = 3, seed: int = 0) -> list:
    """Object classes (ids >= 1) in the lowest-frequency K-means cluster over log frequencies."""
    freqs = np.asarray(freqs, dtype=np.float64)
    present = np.flatnonzero(freqs > 0)
    if present.size == 0:
        raise AllZeroFrequencies("no class has a nonzero frequency")
    assign, _ = kmeans_1d(np.log(freqs[present]), min(k, present.size), seed=seed)
    return [int(c) for c in present[assign == 0] if c > 0]


def _class_axis(logits: Tensor, labels: np.ndarray) -> int:
    if logits.shape[1:] == labels.shape and logits.shape[0] == N_CLASSES:
        return 0
    if logits.ndim >= 2 and logits.shape[:1] + logits.shape[2:] == labels.shape:
        return 1
    raise ShapeMismatch(f"logits {logits.shape} do not align with labels {labels.shape}")


def _onehot(labels, keep, axis, n_classes, dtype):
    safe = np.where(keep, labels, 0).astype(np.int64)
    onehot = (np.expand_dims(safe, axis) == np.arange(n_classes).reshape(
        (-1,) + (1,) * (labels.ndim - axis))).astype(dtype)
    return onehot * np.expand_dims(keep, axis)


def weighted_ce(logits, labels, weights: ClassWeights | None = None, mask=None) -> Tensor:
    """Sum of ``w_v * -log p_v[y_v]`` over masked-in voxels, divided by the sum of ``w_v``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    axis = _class_axis(logits, labels)
    keep = valid_label_mask(labels, mask)
    w = (weights or ClassWeights.uniform()).weights
    per_voxel = np.where(keep, w[np.where(keep, labels, 0).astype(np.int64)], 0.0)
    total = per_voxel.sum()
    if not keep.any() or total <= 0:
        raise EmptyMask("no voxel contributes to the loss")
    coef = _onehot(labels, keep, axis, logits.shape[axis], logits.dtype) * np.expand_dims(per_voxel / total, axis)
    return ad.mul(ad.reduce_sum(ad.mul(ad.log_softmax(logits, axis), coef.astype(logits.dtype))), -1.0)


def smooth_ce(logits, labels, smoothing: float = 0.1, ignore_mask=None) -> Tensor:
    """Label-smoothed cross-entropy averaged over non-ignored pixels."""
    if not 0 <= smoothing < 1:
        raise ValueError("smoothing must lie in [0, 1)")
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    axis = _class_axis(logits, labels)
    keep = valid_label_mask(labels, None if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool))
    count = int(keep.sum())
    if count == 0:
        raise EmptyMask("every pixel is ignored")
    n_classes = logits.shape[axis]
    target = (1 - smoothing) * _onehot(labels, keep, axis, n_classes, np.float64)
    target = target + (smoothing / n_classes) * np.expand_dims(keep, axis)
    coef = (target / count).astype(logits.dtype)
    return ad.mul(ad.reduce_sum(ad.mul(ad.log_softmax(logits, axis), coef)), -1.0)


def resample_mask(labels, visibility: VisibilityGrid | np.ndarray, ratio: float = 2.0, seed: int = 0) -> np.ndarray:
    """All occupied voxels plus up to ``ratio`` times as many randomly drawn empty ones."""
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    labels = np.asarray(labels)
    states = visibility.states if isinstance(visibility, VisibilityGrid) else np.asarray(visibility)
    if states.shape != labels.shape:
        raise ShapeMismatch(f"visibility {states.shape} vs labels {labels.shape}")
    usable = (states != Visibility.OUTSIDE_FRUSTUM) & (labels != IGNORE_LABEL)
    occupied = usable & (labels > 0)
    empty_idx = np.flatnonzero(usable & (labels == 0))
    quota = min(empty_idx.size, int(np.floor(ratio * occupied.sum())))
    mask = occupied.copy()
    if quota:
        chosen = np.random.default_rng(seed).choice(empty_idx, size=quota, replace=False)
        mask.reshape(-1)[chosen] = True
    return mask


def combined_loss(l_ss, l_ssc, lam: float):
    """``lam * l_ss + l_ssc``."""
    for name, term in (("l_ss", l_ss), ("l_ssc", l_ssc)):
        value = term.data if isinstance(term, Tensor) else np.asarray(term)
        if not np.all(np.isfinite(value)):
            raise NonFinite(f"{name} is not finite")
    if isinstance(l_ss, Tensor) or isinstance(l_ssc, Tensor):
        return ad.add(ad.mul(l_ss, lam), l_ssc)
    return lam * l_ss + l_ssc
