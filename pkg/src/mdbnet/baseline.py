"""Multinomial logistic regression baselines for the desk-scale mIoU threshold.

The reference is per-voxel: each full-resolution voxel is classified from
its own F-TSDF value and projected colour, and the predictions are
majority-pooled to the output grid like the ground truth. A pooled
coarse-cell variant with neighbourhood statistics is kept for comparison.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, LrSchedule, Parameter
from .data.sample import IGNORE_LABEL, N_CLASSES, _cells, downsample_labels
from .geometry import Visibility, scatter_mean
from .losses import class_frequencies, reweight_classes, weighted_ce


def voxel_features(sample, prep) -> np.ndarray:
    """(F, nx, ny, nz) inputs of each voxel on its own: F-TSDF value, projected RGB, projection hit flag."""
    vol = prep.ftsdf[0]
    n_vox = vol.size
    rgb = sample.rgb.reshape(3, -1).astype(np.float64)
    proj = scatter_mean(rgb, prep.pixel_index, n_vox).reshape((3,) + vol.shape)
    hits = np.bincount(prep.pixel_index[prep.pixel_index >= 0], minlength=n_vox).reshape(vol.shape) > 0
    return np.concatenate([vol[None].astype(np.float64), proj, hits[None].astype(np.float64)])


def cell_features(sample, prep, factor: int = 4) -> np.ndarray:
    """(F, cx, cy, cz) context features per coarse cell (a stronger, non-per-voxel reference).

    F-TSDF mean/min/max and sign fractions, visibility-state fractions,
    mean projected RGB with projection coverage, and normalised cell position.
    """
    vol = prep.ftsdf[0]
    cells = _cells(vol, factor)
    feats = [cells.mean(-1), cells.min(-1), cells.max(-1), (cells > 0).mean(-1), (cells < 0).mean(-1)]
    vis = _cells(prep.visibility, factor)
    feats += [(vis == s).mean(-1) for s in Visibility]
    per_voxel = voxel_features(sample, prep)
    cover = _cells(per_voxel[4], factor).sum(-1)
    for ch in per_voxel[1:4]:
        feats.append(_cells(ch, factor).sum(-1) / np.maximum(cover, 1))
    feats.append(cover / factor ** 3)
    shape = cells.shape[:-1]
    grids = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in shape], indexing="ij")
    feats += list(grids)
    return np.stack(feats).astype(np.float64)


class LogisticBaseline:
    """Softmax regression ``W f + b`` on standardised features.

    Fitted with AdamW on the cross-entropy, optionally class-weighted.
    """

    def __init__(self, n_features: int, n_classes: int = N_CLASSES, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weight = Parameter(rng.normal(0, 0.01, (n_classes, n_features)), name="weight")
        self.bias = Parameter(np.zeros((n_classes, 1)), name="bias", weight_decay_exempt=True)
        self.mean = np.zeros((n_features, 1))
        self.std = np.ones((n_features, 1))
        self.per_voxel = True

    def fit(self, feats, labels, iters: int = 400, lr: float = 0.05, weights=None):
        """``feats`` (F, M) and ``labels`` (M,) with 255 for ignored cells."""
        self.mean = feats.mean(axis=1, keepdims=True)
        self.std = feats.std(axis=1, keepdims=True) + 1e-8
        x = (feats - self.mean) / self.std
        opt = AdamW([self.weight, self.bias], LrSchedule.cosine_decay(lr, iters), weight_decay=1e-4)
        history = []
        for i in range(iters):
            loss = weighted_ce(_matmul_bias(self.weight, self.bias, x), labels[None], weights)
            opt.zero_grad()
            loss.backward()
            opt.step(i)
            history.append(float(loss.data))
        return history

    def predict(self, feats) -> np.ndarray:
        x = (feats - self.mean) / self.std
        return np.argmax(self.weight.data @ x + self.bias.data, axis=0)


def _matmul_bias(weight: Parameter, bias: Parameter, x: np.ndarray):
    """``(W x + b)`` as a (1, K, M) tensor, with gradients for ``W`` and ``b``."""
    out = weight.data @ x + bias.data

    def backward_fn(g):
        g2 = g[0]
        return g2 @ x.T, g2.sum(axis=1, keepdims=True)

    return ad.Tensor(out[None], requires_grad=True, parents=(weight, bias), backward_fn=backward_fn)


def _training_rows(samples, prepared, idx, per_voxel: bool):
    feats, labels = [], []
    for i in idx:
        prep = prepared[i]
        if per_voxel:
            f = voxel_features(samples[i], prep)
            usable = prep.visibility != Visibility.OUTSIDE_FRUSTUM
            lab = np.where(usable, samples[i].gt_labels, IGNORE_LABEL)
        else:
            f = cell_features(samples[i], prep)
            lab = np.where(prep.valid3d, prep.labels3d, IGNORE_LABEL)
        feats.append(f.reshape(f.shape[0], -1))
        labels.append(lab.reshape(-1))
    return np.concatenate(feats, axis=1), np.concatenate(labels)


def fit_baseline(samples, prepared, train_idx, seed: int = 0, iters: int = 400,
                 per_voxel: bool = True, max_rows: int = 50_000,
                 balanced: bool = True) -> LogisticBaseline:
    """Fit on full-resolution voxels (``per_voxel``) or on pooled coarse-cell features.

    ``balanced`` applies the same K-means class re-weighting as the network.
    At most ``max_rows`` labelled rows, drawn with a seeded generator, enter the fit.
    """
    feats, labels = _training_rows(samples, prepared, train_idx, per_voxel)
    rows = np.flatnonzero(labels != IGNORE_LABEL)
    if rows.size > max_rows:
        rows = np.sort(np.random.default_rng(seed).choice(rows, size=max_rows, replace=False))
    feats, labels = feats[:, rows], labels[rows]
    model = LogisticBaseline(feats.shape[0], seed=seed)
    model.per_voxel = per_voxel
    weights = reweight_classes(class_frequencies([labels]), k=3, seed=seed) if balanced else None
    model.fit(feats, labels, iters=iters, weights=weights)
    return model


def baseline_predictions(model: LogisticBaseline, samples, prepared, idx, factor: int = 4) -> list:
    """Coarse label volumes; per-voxel predictions are majority-pooled like the ground truth."""
    out = []
    for i in idx:
        if model.per_voxel:
            f = voxel_features(samples[i], prepared[i])
            fine = model.predict(f.reshape(f.shape[0], -1)).reshape(f.shape[1:])
            coarse, _ = downsample_labels(fine.astype(np.uint8), prepared[i].visibility, factor)
            out.append(coarse)
        else:
            f = cell_features(samples[i], prepared[i], factor)
            out.append(model.predict(f.reshape(f.shape[0], -1)).reshape(f.shape[1:]).astype(np.uint8))
    return out
