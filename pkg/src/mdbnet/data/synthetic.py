"""Procedural indoor scenes: a room shell of slabs plus axis-aligned furniture boxes.

Every solid is an axis-aligned box tagged with a class. Depth comes from an
exact per-pixel ray/box z-buffer, labels from rasterising voxel centres, RGB
from a per-class palette with Gaussian noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import InvalidSpec
from ..geometry import CameraModel, GridSpec
from .sample import Sample, quantize_depth, quantize_rgb

CEILING, FLOOR, WALL, WINDOW, CHAIR, BED, SOFA, TABLE, TV, FURNITURE, OBJECTS = range(1, 12)
SHELL_CLASSES = (CEILING, FLOOR, WALL)
PANEL_CLASSES = (WINDOW, TV)
FLOOR_CLASSES = (CHAIR, BED, SOFA, TABLE, FURNITURE, OBJECTS)
# sampling order for the skew law: earlier entries stay common, later ones become rare
OBJECT_CLASS_ORDER = (FURNITURE, CHAIR, TABLE, SOFA, BED, OBJECTS, WINDOW, TV)

PALETTE = np.array([
    [0.0, 0.0, 0.0],     # empty (never rendered)
    [0.90, 0.90, 0.85],  # ceiling
    [0.55, 0.35, 0.20],  # floor
    [0.75, 0.75, 0.60],  # wall
    [0.45, 0.75, 0.95],  # window
    [0.85, 0.20, 0.20],  # chair
    [0.30, 0.30, 0.85],  # bed
    [0.20, 0.65, 0.30],  # sofa
    [0.90, 0.60, 0.10],  # table
    [0.10, 0.10, 0.10],  # tv
    [0.60, 0.25, 0.60],  # furniture
    [0.95, 0.90, 0.20],  # objects
])

# footprint (x, z) and height ranges in metres, before snapping
SIZE_RANGES = {
    CHAIR: ((0.4, 0.8), (0.4, 0.8), (0.6, 0.9)),
    BED: ((1.4, 2.0), (0.8, 1.6), (0.4, 0.8)),
    SOFA: ((1.2, 2.0), (0.6, 0.9), (0.6, 0.9)),
    TABLE: ((0.8, 1.6), (0.6, 1.0), (0.6, 0.8)),
    FURNITURE: ((0.6, 1.6), (0.4, 0.8), (0.8, 1.6)),
    OBJECTS: ((0.2, 0.6), (0.2, 0.6), (0.2, 0.6)),
    WINDOW: ((0.6, 1.2), (0.0, 0.0), (0.6, 1.0)),
    TV: ((0.6, 1.2), (0.0, 0.0), (0.4, 0.8)),
}


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    label: int

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((points >= lo) & (points < hi), axis=-1)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    grid: GridSpec = field(default_factory=lambda: GridSpec((24, 16, 24), (0, 0, 0), 0.2, 0.6))
    image_size: tuple = (64, 48)  # (width, height)
    focal: float = 40.0
    shell_thickness: float = 0.8
    object_count: tuple = (3, 6)
    panel_count: tuple = (1, 2)
    skew: float = 0.0
    snap: float = 0.8
    rgb_noise: float = 0.03
    missing_depth: float = 0.0
    seed: int = 0

    def validate(self):
        extent = np.asarray(self.grid.extent)
        t = self.shell_thickness
        if t <= 0 or np.any(extent - 2 * t <= 0.4):
            raise InvalidSpec("shell leaves no interior room")
        lo_obj, hi_obj = self.object_count
        lo_pan, hi_pan = self.panel_count
        if not (0 <= lo_obj <= hi_obj and 0 <= lo_pan <= hi_pan):
            raise InvalidSpec("count ranges must satisfy 0 <= min <= max")
        if self.skew < 0 or self.snap <= 0 or self.rgb_noise < 0 or not 0 <= self.missing_depth < 1:
            raise InvalidSpec("skew, snap, noise or missing_depth out of range")
        if self.focal <= 0 or min(self.image_size) < 1:
            raise InvalidSpec("camera parameters out of range")


def easy_tier(**overrides) -> SyntheticSceneSpec:
    """Balanced classes, lattice-snapped objects, low colour noise."""
    return replace(SyntheticSceneSpec(), **overrides)


def skewed_tier(**overrides) -> SyntheticSceneSpec:
    """Strong class-frequency skew and noisier colours."""
    base = SyntheticSceneSpec(object_count=(4, 7), panel_count=(0, 2), skew=0.5, rgb_noise=0.08)
    return replace(base, **overrides)


TIERS = {"easy": easy_tier, "skewed": skewed_tier}


def class_probabilities(skew: float, classes=OBJECT_CLASS_ORDER) -> np.ndarray:
    logits = -skew * np.arange(len(classes), dtype=np.float64)
    p = np.exp(logits - logits.max())
    return p / p.sum()


def _snap_len(x, snap):
    n = max(1, int(round(x / snap)))
    return n * snap


def room_shell(spec: SyntheticSceneSpec) -> list:
    w, h, d = spec.grid.extent
    t = spec.shell_thickness
    return [
        Box((0, 0, 0), (w, t, d), FLOOR),
        Box((0, h - t, 0), (w, h, d), CEILING),
        Box((0, t, 0), (t, h - t, d), WALL),
        Box((w - t, t, 0), (w, h - t, d), WALL),
        Box((t, t, 0), (w - t, h - t, t), WALL),
        Box((t, t, d - t), (w - t, h - t, d), WALL),
    ]


def _place_panel(rng, spec, label, occupied_walls):
    """A window/tv panel replacing part of the back or a side wall slab."""
    w, h, d = spec.grid.extent
    t, snap = spec.shell_thickness, spec.snap
    (wlo, whi), _, (hlo, hhi) = SIZE_RANGES[label]
    width = _snap_len(rng.uniform(wlo, whi), snap)
    height = min(_snap_len(rng.uniform(hlo, hhi), snap), h - 2 * t)
    wall = int(rng.integers(3))  # 0 back, 1 left, 2 right
    span = (w if wall == 0 else d) - 2 * t
    width = min(width, span)
    slots = int(round((span - width) / snap)) + 1
    start = t + snap * int(rng.integers(slots))
    vslots = int(round((h - 2 * t - height) / snap)) + 1
    y0 = t + snap * int(rng.integers(vslots))
    if (wall, start, y0) in occupied_walls:
        return None
    occupied_walls.add((wall, start, y0))
    if wall == 0:
        return Box((start, y0, d - t), (start + width, y0 + height, d), label)
    x0, x1 = (0, t) if wall == 1 else (w - t, w)
    return Box((x0, y0, start), (x1, y0 + height, start + width), label)


def _overlaps(a: Box, b: Box) -> bool:
    return all(a.lo[i] < b.hi[i] - 1e-9 and b.lo[i] < a.hi[i] - 1e-9 for i in range(3))


def _place_floor_object(rng, spec, label, placed):
    w, h, d = spec.grid.extent
    t, snap = spec.shell_thickness, spec.snap
    (xlo, xhi), (zlo, zhi), (hlo, hhi) = SIZE_RANGES[label]
    sx = min(_snap_len(rng.uniform(xlo, xhi), snap), w - 2 * t)
    sz = min(_snap_len(rng.uniform(zlo, zhi), snap), d - 2 * t)
    sy = min(_snap_len(rng.uniform(hlo, hhi), snap), h - 2 * t)
    if rng.random() < 0.5:
        sx, sz = sz, sx
    for _ in range(20):
        x0 = t + snap * int(rng.integers(int(round((w - 2 * t - sx) / snap)) + 1))
        z0 = t + snap * int(rng.integers(int(round((d - 2 * t - sz) / snap)) + 1))
        box = Box((x0, t, z0), (x0 + sx, t + sy, z0 + sz), label)
        if not any(_overlaps(box, other) for other in placed):
            return box
    return None


def ray_box_hits(origin: np.ndarray, dirs: np.ndarray, boxes) -> tuple:
    """Nearest positive entry parameter per ray and the index of the box hit (-1 for none).

    Boxes later in the list win exact ties, matching label rasterisation order.
    """
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_box = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for b, box in enumerate(boxes):
        t1 = (np.asarray(box.lo) - origin) * inv
        t2 = (np.asarray(box.hi) - origin) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        t_near = np.max(np.minimum(t1, t2), axis=1)
        t_far = np.min(np.maximum(t1, t2), axis=1)
        hit = (t_near <= t_far) & (t_near > 0)
        better = hit & (t_near <= best_t)
        best_t = np.where(better, t_near, best_t)
        best_box = np.where(better, b, best_box)
    return best_t, best_box


def pixel_rays(camera: CameraModel):
    """World-space ray directions scaled so the camera-frame z component is 1 (so t = depth)."""
    v, u = np.mgrid[0: camera.image_height, 0: camera.image_width]
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones(u.shape)], axis=-1)
    return d_cam.reshape(-1, 3) @ camera.rotation


def render_depth(camera: CameraModel, boxes) -> tuple:
    """Exact z-buffer depth (H, W) and hit class (H, W); 0 depth / class where nothing is hit."""
    t, idx = ray_box_hits(camera.center, pixel_rays(camera), boxes)
    labels = np.array([b.label for b in boxes] + [0])
    depth = np.where(np.isfinite(t), t, 0.0)
    shape = (camera.image_height, camera.image_width)
    return depth.reshape(shape), labels[idx].reshape(shape)


def rasterize(boxes, grid: GridSpec):
    """Label grid plus per-class counts maintained incrementally while painting."""
    labels = np.zeros(grid.dims, dtype=np.uint8)
    counts = np.zeros(12, dtype=np.int64)
    counts[0] = grid.n_voxels
    centers = grid.voxel_centers()
    for box in boxes:
        inside = box.contains(centers)
        old = np.bincount(labels[inside], minlength=12)
        counts -= old[:12]
        counts[box.label] += int(inside.sum())
        labels[inside] = box.label
    return labels, counts


def random_camera(rng, spec: SyntheticSceneSpec) -> CameraModel:
    w, h, d = spec.grid.extent
    t = spec.shell_thickness
    eye = np.array([
        w / 2 + rng.uniform(-0.4, 0.4),
        t + (h - 2 * t) * rng.uniform(0.6, 0.9),
        t + rng.uniform(0.05, 0.3),
    ])
    target = np.array([w / 2 + rng.uniform(-0.8, 0.8), t + (h - 2 * t) * rng.uniform(0.0, 0.4), d - t])
    width, height = spec.image_size
    return CameraModel.look_at(eye, target, fx=spec.focal, fy=spec.focal, cx=(width - 1) / 2,
                               cy=(height - 1) / 2, image_width=width, image_height=height)


def _eye_clear(eye, boxes, margin=0.1) -> bool:
    return not any(np.all((eye > np.asarray(b.lo) - margin) & (eye < np.asarray(b.hi) + margin)) for b in boxes)


def place_camera(rng, spec: SyntheticSceneSpec, boxes, tries: int = 50):
    """Random camera whose eye is clear of every solid; objects still enclosing it after ``tries`` are dropped."""
    for _ in range(tries):
        camera = random_camera(rng, spec)
        if _eye_clear(camera.center, boxes):
            return camera, boxes
    shell = room_shell(spec)
    kept = [b for b in boxes if b in shell or _eye_clear(camera.center, [b])]
    return camera, kept


def scene_boxes(rng, spec: SyntheticSceneSpec) -> list:
    boxes = room_shell(spec)
    probs = class_probabilities(spec.skew)
    n_obj = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    n_pan = int(rng.integers(spec.panel_count[0], spec.panel_count[1] + 1))
    walls_used, placed = set(), []
    for _ in range(n_pan):
        label = WINDOW if rng.random() < 0.5 else TV
        box = _place_panel(rng, spec, label, walls_used)
        if box is not None:
            boxes.append(box)
    for _ in range(n_obj):
        label = OBJECT_CLASS_ORDER[int(rng.choice(len(OBJECT_CLASS_ORDER), p=probs))]
        if label in PANEL_CLASSES:
            box = _place_panel(rng, spec, label, walls_used)
        else:
            box = _place_floor_object(rng, spec, label, placed)
            if box is not None:
                placed.append(box)
        if box is not None:
            boxes.append(box)
    return boxes


def generate_scene(spec: SyntheticSceneSpec, seed: int | None = None, sample_id: str | None = None) -> Sample:
    spec.validate()
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    camera, boxes = place_camera(rng, spec, scene_boxes(rng, spec))
    depth, hit = render_depth(camera, boxes)
    if spec.missing_depth > 0:
        depth = np.where(rng.random(depth.shape) < spec.missing_depth, 0.0, depth)
    noise = rng.normal(0.0, spec.rgb_noise, size=(3,) + depth.shape)
    rgb = np.moveaxis(PALETTE[hit], -1, 0) + noise
    labels, counts = rasterize(boxes, spec.grid)
    sample = Sample(
        rgb=quantize_rgb(rgb),
        depth=quantize_depth(depth),
        camera=camera,
        gt_labels=labels,
        grid=spec.grid,
        sample_id=sample_id or f"scene_{seed:06d}",
    )
    sample.class_counts = counts
    sample.boxes = boxes
    return sample
