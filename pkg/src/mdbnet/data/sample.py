"""Scene samples and the per-sample tensors derived from them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionMismatch
from ..geometry import (
    CameraModel,
    GridSpec,
    Visibility,
    VisibilityGrid,
    VoxelGrid,
    backproject_depth,
    classify_voxels,
    compute_ftsdf,
    pixel_voxel_index,
)

IGNORE_LABEL = 255
N_CLASSES = 12


def quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels; identical to what decoding an 8-bit PNG gives back."""
    return np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8).astype(np.float32) / np.float32(255)


def rgb_from_u8(rgb_u8: np.ndarray) -> np.ndarray:
    return np.asarray(rgb_u8, dtype=np.uint8).astype(np.float32) / np.float32(255)


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    """Round to whole millimetres (the 16-bit PNG unit)."""
    mm = np.round(np.asarray(depth, dtype=np.float64) * 1000).clip(0, 65535).astype(np.uint16)
    return depth_from_mm(mm)


def depth_from_mm(mm: np.ndarray) -> np.ndarray:
    return np.asarray(mm, dtype=np.uint16).astype(np.float64) / 1000.0


@dataclass(eq=False)
class Sample:
    rgb: np.ndarray  # (3, H, W) float32 in [0, 1]
    depth: np.ndarray  # (H, W) metres, 0 = missing
    camera: CameraModel
    gt_labels: np.ndarray  # grid dims, uint8 in 0..11 or 255
    grid: GridSpec
    sample_id: str = "sample"
    class_counts: np.ndarray | None = field(default=None, compare=False)
    boxes: list | None = field(default=None, compare=False, repr=False)
    _ftsdf: VoxelGrid | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        h, w = self.camera.image_height, self.camera.image_width
        if self.rgb.shape != (3, h, w) or self.depth.shape != (h, w):
            raise DimensionMismatch(f"rgb {self.rgb.shape} / depth {self.depth.shape} vs camera {(h, w)}")
        if self.gt_labels.shape != self.grid.dims:
            raise DimensionMismatch(f"labels {self.gt_labels.shape} vs grid {self.grid.dims}")

    @property
    def ftsdf(self) -> VoxelGrid:
        if self._ftsdf is None:
            self._ftsdf = compute_ftsdf(self.camera, self.depth, self.grid)
        return self._ftsdf


def surface_labels(camera: CameraModel, depth: np.ndarray, labels: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Per-pixel class of the solid just behind each observed surface point; 255 if unknown."""
    out = np.full(depth.size, IGNORE_LABEL, dtype=np.uint8)
    points, flat = backproject_depth(camera, depth)
    if len(points):
        ray = points - camera.center
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        probe = points + 0.5 * grid.voxel_size * ray
        idx = np.floor((probe - np.asarray(grid.origin)) / grid.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
        vals = np.full(len(points), IGNORE_LABEL, dtype=np.uint8)
        vals[inside] = labels[tuple(idx[inside].T)]
        vals[vals == 0] = IGNORE_LABEL
        out[flat] = vals
    return out.reshape(depth.shape)


def _cells(arr: np.ndarray, factor: int) -> np.ndarray:
    """(nx, ny, nz) -> (nx/f, ny/f, nz/f, f**3) view of each coarse cell's voxels."""
    nx, ny, nz = arr.shape
    f = factor
    blocks = arr.reshape(nx // f, f, ny // f, f, nz // f, f).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(nx // f, ny // f, nz // f, f ** 3)


def _category_counts(cells: np.ndarray, n_categories: int) -> np.ndarray:
    flat = cells.reshape(-1, cells.shape[-1]).astype(np.int64)
    offsets = (np.arange(flat.shape[0]) * n_categories)[:, None]
    counts = np.bincount((flat + offsets).ravel(), minlength=flat.shape[0] * n_categories)
    return counts.reshape(cells.shape[:-1] + (n_categories,))


def downsample_labels(labels: np.ndarray, states: np.ndarray, factor: int = 4):
    """Majority-vote label per coarse cell (ties -> smallest class, sentinel counts as largest).

    Returns ``(coarse_labels, valid)`` where ``valid`` drops cells whose voxels
    are mostly outside the frustum and cells whose majority is the sentinel.
    """
    cat = np.where(labels == IGNORE_LABEL, N_CLASSES, labels).astype(np.int64)
    counts = _category_counts(_cells(cat, factor), N_CLASSES + 1)
    winner = np.argmax(counts, axis=-1)
    coarse = np.where(winner == N_CLASSES, IGNORE_LABEL, winner).astype(np.uint8)
    outside = _cells(states == Visibility.OUTSIDE_FRUSTUM, factor).sum(axis=-1)
    valid = (outside * 2 <= factor ** 3) & (coarse != IGNORE_LABEL)
    return coarse, valid


def pool_visibility(states: np.ndarray, factor: int = 4) -> np.ndarray:
    """Coarse visibility: outside if mostly outside, else surface if any surface voxel,
    else occluded when occluded voxels outnumber visible-empty ones."""
    counts = _category_counts(_cells(states.astype(np.int64), factor), 4)
    out = np.full(counts.shape[:-1], Visibility.VISIBLE_EMPTY, dtype=np.uint8)
    out[counts[..., Visibility.OCCLUDED] > counts[..., Visibility.VISIBLE_EMPTY]] = Visibility.OCCLUDED
    out[counts[..., Visibility.SURFACE] > 0] = Visibility.SURFACE
    out[counts[..., Visibility.OUTSIDE_FRUSTUM] * 2 > factor ** 3] = Visibility.OUTSIDE_FRUSTUM
    return out


@dataclass
class Prepared:
    """Network-ready arrays for one sample."""

    ftsdf: np.ndarray  # (1, nx, ny, nz) float32
    pixel_index: np.ndarray  # (H*W,) flat voxel index per pixel, -1 if none
    labels2d: np.ndarray  # (H, W) uint8, 255 = ignore
    labels3d: np.ndarray  # coarse (nx/4, ny/4, nz/4) uint8
    valid3d: np.ndarray  # coarse bool: usable for loss/metrics
    visibility3d: np.ndarray  # coarse Visibility states
    visibility: np.ndarray  # full-resolution Visibility states


def prepare(sample: Sample, scale_factor: int = 4) -> Prepared:
    vis = classify_voxels(sample.camera, sample.depth, sample.grid)
    if sample._ftsdf is None:
        sample._ftsdf = compute_ftsdf(sample.camera, sample.depth, sample.grid, vis)
    labels3d, valid3d = downsample_labels(sample.gt_labels, vis.states, scale_factor)
    return Prepared(
        ftsdf=sample.ftsdf.values.astype(np.float32),
        pixel_index=pixel_voxel_index(sample.camera, sample.depth, sample.grid),
        labels2d=surface_labels(sample.camera, sample.depth, sample.gt_labels, sample.grid),
        labels3d=labels3d,
        valid3d=valid3d,
        visibility3d=pool_visibility(vis.states, scale_factor),
        visibility=vis.states,
    )


def coarse_visibility_grid(prep: Prepared, grid: GridSpec, scale_factor: int = 4) -> VisibilityGrid:
    return VisibilityGrid(grid.coarsen(scale_factor), prep.visibility3d)
