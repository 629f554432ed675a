"""Camera projection, voxel visibility, F-TSDF encoding and 2D->3D feature projection.

Conventions
-----------
* World points map to the camera frame as ``p_cam = R @ p_world + t``.
* The camera frame has x to the right, y down and z forward; ``depth`` is
  always the camera-frame z coordinate, never the ray length.
* Pixel ``(u, v)`` is column ``u`` and row ``v``; pixel centres sit on
  integer coordinates, so a projected point belongs to pixel
  ``(floor(u + 0.5), floor(v + 0.5))``.
* Voxel ``(i, j, k)`` has its centre at ``origin + (index + 0.5) * voxel_size``.

The nearest-surface distance used by :func:`compute_ftsdf` is Euclidean
(over the back-projected depth point cloud), not measured along camera rays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, InvalidSpec, NonPositiveDepth

ORTHONORMAL_TOL = 1e-9


def _f32(x) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidSpec(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise InvalidSpec("image dimensions must be positive")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidSpec("rotation is not orthonormal")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, fx, fy, cx, cy, image_width, image_height):
        """Build a camera at ``eye`` looking toward ``target`` with world ``up`` pointing to the top of the image."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(fx, fy, cx, cy, rot, -rot @ eye, image_width, image_height)

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy, self.image_width, self.image_height)
            == (other.fx, other.fy, other.cx, other.cy, other.image_width, other.image_height)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) world points into the camera frame.

        Written out per component (no matmul) so that vectorised and scalar
        evaluations round identically.
        """
        p = np.asarray(points, dtype=np.float64)
        r, t = self.rotation, self.translation
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        return np.stack(
            [
                r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0],
                r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1],
                r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2],
            ],
            axis=-1,
        )

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - self.translation
        return p @ self.rotation


@dataclass(frozen=True)
class GridSpec:
    """Voxel lattice geometry.

    Float fields are canonicalised to float32-representable values so a grid
    spec survives a round trip through the binary VXG1 header unchanged.
    """

    dims: tuple = (240, 144, 240)
    origin: tuple = (0.0, 0.0, 0.0)
    voxel_size: float = 0.02
    truncation: float = 0.24

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(_f32(o) for o in self.origin)
        if len(dims) != 3 or len(origin) != 3:
            raise InvalidSpec("dims and origin must have three components")
        if min(dims) < 1:
            raise InvalidSpec(f"all dims must be >= 1, got {dims}")
        if not (self.voxel_size > 0 and self.truncation > 0):
            raise InvalidSpec("voxel_size and truncation must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", _f32(self.voxel_size))
        object.__setattr__(self, "truncation", _f32(self.truncation))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def extent(self) -> tuple:
        return tuple(d * self.voxel_size for d in self.dims)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape (nx, ny, nz, 3)."""
        axes = [
            o + (np.arange(n, dtype=np.float64) + 0.5) * self.voxel_size
            for o, n in zip(self.origin, self.dims)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def coarsen(self, factor: int) -> "GridSpec":
        if any(d % factor for d in self.dims):
            raise InvalidSpec(f"dims {self.dims} not divisible by {factor}")
        return GridSpec(
            tuple(d // factor for d in self.dims),
            self.origin,
            self.voxel_size * factor,
            self.truncation,
        )


FULL_SCALE_GRID = GridSpec((240, 144, 240), (0.0, 0.0, 0.0), 0.02, 0.24)
DESK_GRID = GridSpec((24, 16, 24), (0.0, 0.0, 0.0), 0.2, 0.24)


@dataclass
class VoxelGrid:
    spec: GridSpec
    values: np.ndarray  # (channels, nx, ny, nz)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 3:
            values = values[None]
        if values.shape[1:] != self.spec.dims:
            raise DimensionMismatch(f"payload {values.shape} does not match dims {self.spec.dims}")
        self.values = values

    @property
    def channels(self) -> int:
        return self.values.shape[0]


class Visibility(enum.IntEnum):
    VISIBLE_EMPTY = 0
    SURFACE = 1
    OCCLUDED = 2
    OUTSIDE_FRUSTUM = 3


@dataclass
class VisibilityGrid:
    spec: GridSpec
    states: np.ndarray  # (nx, ny, nz) uint8 of Visibility values

    def mask(self, *states: Visibility) -> np.ndarray:
        return np.isin(self.states, [int(s) for s in states])


def project_point(camera: CameraModel, point) -> tuple:
    xc, yc, zc = (float(c) for c in camera.world_to_camera(np.asarray(point, dtype=np.float64)))
    if zc <= 0:
        raise NonPositiveDepth(f"point lies behind the camera (z={zc})")
    return camera.fx * xc / zc + camera.cx, camera.fy * yc / zc + camera.cy, zc


def backproject_pixel(camera: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    p_cam = np.array([(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth])
    return camera.camera_to_world(p_cam)


def backproject_depth(camera: CameraModel, depth_map: np.ndarray):
    """Back-project every valid pixel; returns (world points (M, 3), flat pixel indices (M,))."""
    depth = np.asarray(depth_map, dtype=np.float64)
    rows, cols = np.nonzero(depth > 0)
    z = depth[rows, cols]
    p_cam = np.stack([(cols - camera.cx) * z / camera.fx, (rows - camera.cy) * z / camera.fy, z], axis=-1)
    return camera.camera_to_world(p_cam), rows * depth.shape[1] + cols


def _check_depth(camera: CameraModel, depth_map) -> np.ndarray:
    depth = np.asarray(depth_map, dtype=np.float64)
    if depth.shape != (camera.image_height, camera.image_width):
        raise DimensionMismatch(
            f"depth map {depth.shape} vs camera image {(camera.image_height, camera.image_width)}"
        )
    return depth


def _project_centers(camera: CameraModel, spec: GridSpec, depth: np.ndarray):
    """Per-voxel camera depth, pixel depth (0 where unavailable) and in-frustum flag."""
    p_cam = camera.world_to_camera(spec.voxel_centers())
    z = p_cam[..., 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    u = camera.fx * p_cam[..., 0] / safe_z + camera.cx
    v = camera.fy * p_cam[..., 1] / safe_z + camera.cy
    iu = np.floor(u + 0.5)
    iv = np.floor(v + 0.5)
    on_image = in_front & (iu >= 0) & (iu < camera.image_width) & (iv >= 0) & (iv < camera.image_height)
    iu = np.where(on_image, iu, 0).astype(np.int64)
    iv = np.where(on_image, iv, 0).astype(np.int64)
    pixel_depth = np.where(on_image, depth[iv, iu], 0.0)
    return z, pixel_depth, on_image & (pixel_depth > 0)


def classify_voxels(camera: CameraModel, depth_map, spec: GridSpec) -> VisibilityGrid:
    depth = _check_depth(camera, depth_map)
    z, pixel_depth, valid = _project_centers(camera, spec, depth)
    states = np.full(spec.dims, Visibility.OUTSIDE_FRUSTUM, dtype=np.uint8)
    surface = valid & (np.abs(z - pixel_depth) <= spec.voxel_size)
    states[valid & (z < pixel_depth)] = Visibility.VISIBLE_EMPTY
    states[valid & (z > pixel_depth)] = Visibility.OCCLUDED
    states[surface] = Visibility.SURFACE
    return VisibilityGrid(spec, states)


def compute_ftsdf(camera: CameraModel, depth_map, spec: GridSpec,
                  visibility: VisibilityGrid | None = None) -> VoxelGrid:
    """Flipped TSDF: ``sign * (1 - min(1, d / truncation))``.

    ``d`` is the Euclidean distance from the voxel centre to the nearest
    back-projected depth point, searched exactly up to twice the truncation.
    For voxels with a valid pixel it is additionally capped by the gap between
    the voxel and that pixel's depth along the camera axis, which keeps every
    Surface voxel within one voxel of the surface.
    """
    depth = _check_depth(camera, depth_map)
    if visibility is None:
        visibility = classify_voxels(camera, depth, spec)
    z, pixel_depth, valid = _project_centers(camera, spec, depth)
    states = visibility.states

    dist = np.full(spec.dims, np.inf)
    points, _ = backproject_depth(camera, depth)
    in_frustum = states != Visibility.OUTSIDE_FRUSTUM
    if len(points):
        tree = cKDTree(points)
        query, _ = tree.query(spec.voxel_centers()[in_frustum], k=1, distance_upper_bound=2 * spec.truncation)
        dist[in_frustum] = query
    dist = np.where(valid, np.minimum(dist, np.abs(z - pixel_depth)), dist)

    sign = np.zeros(spec.dims)
    sign[(states == Visibility.VISIBLE_EMPTY) | (states == Visibility.SURFACE)] = 1.0
    sign[states == Visibility.OCCLUDED] = -1.0
    magnitude = 1.0 - np.minimum(1.0, dist / spec.truncation)
    return VoxelGrid(spec, (sign * magnitude)[None].astype(np.float32))


def pixel_voxel_index(camera: CameraModel, depth_map, spec: GridSpec) -> np.ndarray:
    """Flat voxel index (C-order over dims) of each pixel's back-projected point; -1 if none."""
    depth = np.asarray(depth_map, dtype=np.float64)
    out = np.full(depth.size, -1, dtype=np.int64)
    points, flat_pixels = backproject_depth(camera, depth)
    idx = np.floor((points - np.asarray(spec.origin)) / spec.voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    out[flat_pixels[inside]] = np.ravel_multi_index(idx[inside].T, spec.dims)
    return out


def scatter_mean(features: np.ndarray, index: np.ndarray, n_voxels: int) -> np.ndarray:
    """Average (C, P) pixel features into (C, n_voxels) bins given per-pixel voxel indices (-1 = drop)."""
    keep = index >= 0
    counts = np.bincount(index[keep], minlength=n_voxels).astype(np.float64)
    out = np.zeros((features.shape[0], n_voxels), dtype=np.float64)
    for c in range(features.shape[0]):
        out[c] = np.bincount(index[keep], weights=features[c][keep], minlength=n_voxels)
    np.divide(out, counts, out=out, where=counts > 0)
    return out


def project_features(camera: CameraModel, feature_map, depth_map, spec: GridSpec) -> VoxelGrid:
    feats = np.asarray(feature_map)
    if feats.ndim == 2:
        feats = feats[None]
    depth = np.asarray(depth_map, dtype=np.float64)
    if feats.shape[1:] != depth.shape:
        raise DimensionMismatch(f"feature map {feats.shape[1:]} vs depth map {depth.shape}")
    index = pixel_voxel_index(camera, depth, spec)
    volume = scatter_mean(feats.reshape(feats.shape[0], -1).astype(np.float64), index, spec.n_voxels)
    return VoxelGrid(spec, volume.reshape((feats.shape[0],) + spec.dims).astype(feats.dtype))
