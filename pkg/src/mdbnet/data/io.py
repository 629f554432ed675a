"""On-disk formats: VXG1 voxel grids, camera text files, PNG images, dataset manifests.

VXG1 layout (little-endian)::

    b"VXG1"
    u32 channels, nx, ny, nz
    f32 origin[3], f32 voxel_size, f32 truncation
    u8  dtype tag (0 = uint8, 1 = float32, 2 = float64)
    payload in (channel, x, y, z) C order

Camera file: four whitespace-separated rows ``fx fy cx cy``, three rows of
the world-to-camera rotation, one row with the translation (metres).

Manifest: one sample per line, ``rgb depth labels camera`` paths relative
to the manifest; ``#`` starts a comment.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import FormatViolation
from ..geometry import CameraModel, GridSpec, VoxelGrid
from .sample import Sample, depth_from_mm, rgb_from_u8

VXG_MAGIC = b"VXG1"
_HEADER = struct.Struct("<4I5fB")
_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {v.newbyteorder("<") if v.kind == "f" else v: k for k, v in _DTYPES.items()}


def write_vxg(path, grid: VoxelGrid):
    values = np.asarray(grid.values)
    dtype = values.dtype.newbyteorder("<") if values.dtype.kind == "f" else values.dtype
    if dtype not in _TAGS:
        raise FormatViolation(f"unsupported VXG1 dtype {values.dtype}")
    spec = grid.spec
    header = _HEADER.pack(values.shape[0], *spec.dims, *spec.origin, spec.voxel_size, spec.truncation, _TAGS[dtype])
    with open(path, "wb") as fh:
        fh.write(VXG_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype=dtype).tobytes())


def read_vxg(path) -> VoxelGrid:
    buf = Path(path).read_bytes()
    if buf[:4] != VXG_MAGIC:
        raise FormatViolation(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 4 + _HEADER.size:
        raise FormatViolation(f"{path}: truncated header")
    channels, nx, ny, nz, ox, oy, oz, voxel_size, truncation, tag = _HEADER.unpack_from(buf, 4)
    if tag not in _DTYPES:
        raise FormatViolation(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    payload = buf[4 + _HEADER.size:]
    expected = channels * nx * ny * nz * dtype.itemsize
    if len(payload) != expected:
        raise FormatViolation(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    spec = GridSpec((nx, ny, nz), (ox, oy, oz), voxel_size, truncation)
    values = np.frombuffer(payload, dtype=dtype).reshape(channels, nx, ny, nz)
    return VoxelGrid(spec, values.astype(dtype.newbyteorder("=")))


def write_camera(path, camera: CameraModel):
    rows = [[camera.fx, camera.fy, camera.cx, camera.cy], *camera.rotation.tolist(), camera.translation.tolist()]
    Path(path).write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in rows) + "\n")


def read_camera(path, image_width: int, image_height: int) -> CameraModel:
    try:
        rows = [[float(x) for x in line.split()] for line in Path(path).read_text().splitlines() if line.strip()]
    except ValueError as exc:
        raise FormatViolation(f"{path}: {exc}") from None
    if len(rows) != 5 or len(rows[0]) != 4 or any(len(r) != 3 for r in rows[1:]):
        raise FormatViolation(f"{path}: expected rows 'fx fy cx cy', 3 rotation rows, 1 translation row")
    fx, fy, cx, cy = rows[0]
    return CameraModel(fx, fy, cx, cy, np.array(rows[1:4]), np.array(rows[4]), image_width, image_height)


def write_depth_png(path, depth: np.ndarray):
    mm = np.round(np.asarray(depth, dtype=np.float64) * 1000).clip(0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png(path) -> np.ndarray:
    with Image.open(path) as img:
        mm = np.array(img)
    if mm.ndim != 2:
        raise FormatViolation(f"{path}: depth PNG must be single-channel")
    return depth_from_mm(mm.astype(np.uint16))


def write_rgb_png(path, rgb: np.ndarray):
    u8 = np.round(np.clip(np.moveaxis(rgb, 0, -1), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.array(img.convert("RGB"))
    return np.moveaxis(rgb_from_u8(arr), -1, 0).copy()


@dataclass(frozen=True)
class SamplePaths:
    rgb: Path
    depth: Path
    labels: Path
    camera: Path

    @property
    def sample_id(self) -> str:
        name = self.labels.name
        return name[: -len("_labels.vxg")] if name.endswith("_labels.vxg") else self.labels.stem


def save_sample(sample: Sample, directory) -> SamplePaths:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sid = sample.sample_id
    paths = SamplePaths(directory / f"{sid}_rgb.png", directory / f"{sid}_depth.png",
                        directory / f"{sid}_labels.vxg", directory / f"{sid}_camera.txt")
    write_rgb_png(paths.rgb, sample.rgb)
    write_depth_png(paths.depth, sample.depth)
    write_vxg(paths.labels, VoxelGrid(sample.grid, sample.gt_labels[None].astype(np.uint8)))
    write_camera(paths.camera, sample.camera)
    return paths


def load_sample(paths: SamplePaths) -> Sample:
    depth = read_depth_png(paths.depth)
    rgb = read_rgb_png(paths.rgb)
    labels = read_vxg(paths.labels)
    if labels.channels != 1 or labels.values.dtype != np.uint8:
        raise FormatViolation(f"{paths.labels}: label grid must be one uint8 channel")
    camera = read_camera(paths.camera, depth.shape[1], depth.shape[0])
    return Sample(rgb, depth, camera, labels.values[0].copy(), labels.spec, paths.sample_id)


def write_manifest(path, entries):
    path = Path(path)
    base = path.parent
    lines = ["# rgb depth labels camera"]
    for e in entries:
        lines.append(" ".join(str(Path(p).relative_to(base)) for p in (e.rgb, e.depth, e.labels, e.camera)))
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatViolation(f"{path}:{lineno}: expected 4 paths, got {len(parts)}")
        out.append(SamplePaths(*(path.parent / p for p in parts)))
    return out


def load_dataset(manifest) -> list:
    return [load_sample(p) for p in read_manifest(manifest)]
