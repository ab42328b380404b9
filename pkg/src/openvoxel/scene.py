"""Sparse voxel scene containers and their on-disk formats.

A scene is an ordered list of axis-aligned cubic voxels (center, edge length,
density, color) plus optional per-voxel annotation arrays. Scenes are stored
in the OVX container: a magic tag, a JSON section table, and raw
little-endian arrays.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

OVX_MAGIC = b"OVX1"


class SceneFormatError(ValueError):
    """A scene file or scene contents violate the format contract."""


class CameraFormatError(ValueError):
    """A camera file or camera parameters are invalid."""


# name -> (dtype, per-voxel shape tail, required)
OVX_SECTIONS = {
    "centers": ("<f4", (3,), True),
    "sizes": ("<f4", (), True),
    "densities": ("<f4", (), True),
    "colors": ("<f4", (3,), True),
    "gt_labels": ("<i4", (), False),
    "group_F": ("<f4", (3,), False),
    "group_W": ("<f4", (), False),
    "group_ids": ("<i4", (), False),
}


@dataclass
class VoxelScene:
    """Sparse voxel scene: N axis-aligned cubes with density and color.

    Optional arrays: ``gt_labels`` (ground-truth instance ids, 0 = unlabeled)
    and persisted grouping output (``group_F``, ``group_W``, ``group_ids``).
    """

    centers: np.ndarray  # (N, 3) float32, meters
    sizes: np.ndarray  # (N,) float32, edge length in meters
    densities: np.ndarray  # (N,) float32, 1/meter
    colors: np.ndarray  # (N, 3) float32 in [0, 1]
    gt_labels: np.ndarray | None = None  # (N,) int32
    group_F: np.ndarray | None = None  # (N, 3) float32
    group_W: np.ndarray | None = None  # (N,) float32
    group_ids: np.ndarray | None = None  # (N,) int32

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float32)
        self.sizes = np.ascontiguousarray(self.sizes, dtype=np.float32)
        self.densities = np.ascontiguousarray(self.densities, dtype=np.float32)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
        if self.gt_labels is not None:
            self.gt_labels = np.ascontiguousarray(self.gt_labels, dtype=np.int32)
        if self.group_F is not None:
            self.group_F = np.ascontiguousarray(self.group_F, dtype=np.float32)
        if self.group_W is not None:
            self.group_W = np.ascontiguousarray(self.group_W, dtype=np.float32)
        if self.group_ids is not None:
            self.group_ids = np.ascontiguousarray(self.group_ids, dtype=np.int32)
        self.validate()

    @property
    def n_voxels(self) -> int:
        return int(self.centers.shape[0])

    def validate(self):
        n = self.centers.shape[0] if self.centers.ndim == 2 else 0
        if self.centers.ndim != 2 or self.centers.shape[1] != 3 or n < 1:
            raise SceneFormatError("centers must be a non-empty N x 3 array")
        if self.sizes.shape != (n,):
            raise SceneFormatError("sizes must have length N")
        if self.densities.shape != (n,):
            raise SceneFormatError("densities must have length N")
        if self.colors.shape != (n, 3):
            raise SceneFormatError("colors must be N x 3")
        if not np.all(np.isfinite(self.centers)):
            raise SceneFormatError("centers must be finite")
        if not np.all(np.isfinite(self.sizes)) or not np.all(self.sizes > 0):
            raise SceneFormatError("sizes must be positive")
        if not np.all(np.isfinite(self.densities)) or np.any(self.densities < 0):
            raise SceneFormatError("densities must be non-negative")
        if not np.all(np.isfinite(self.colors)) or np.any(self.colors < 0) or np.any(self.colors > 1):
            raise SceneFormatError("colors must lie in [0, 1]")
        for name in ("gt_labels", "group_W", "group_ids"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise SceneFormatError(f"{name} must have length N")
        if self.group_F is not None and self.group_F.shape != (n, 3):
            raise SceneFormatError("group_F must be N x 3")

    def equals(self, other: "VoxelScene") -> bool:
        """Field-by-field equality, including the optional sections."""
        for name in OVX_SECTIONS:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def save_scene(scene: VoxelScene, path: str | Path, meta: dict | None = None) -> None:
    """Write a scene to an OVX file. Deterministic bytes for identical input."""
    sections = []
    blobs = []
    offset = 0
    for name, (dtype, tail, _required) in OVX_SECTIONS.items():
        arr = getattr(scene, name)
        if arr is None:
            continue
        blob = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        sections.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": [scene.n_voxels] + list(tail),
                "offset": offset,
                "byte_len": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "n_voxels": scene.n_voxels,
        "sections": sections,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(OVX_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_scene(path: str | Path) -> VoxelScene:
    """Read an OVX file, validating the header, sections, and invariants."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != OVX_MAGIC:
        raise SceneFormatError("malformed header: missing OVX1 magic")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    if 12 + header_len > len(raw):
        raise SceneFormatError("malformed header: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict) or "n_voxels" not in header or "sections" not in header:
        raise SceneFormatError("malformed header: missing n_voxels or sections")
    n = int(header["n_voxels"])
    body = raw[12 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for sec in header["sections"]:
        name = sec.get("name")
        if name not in OVX_SECTIONS:
            raise SceneFormatError(f"unknown section {name!r}")
        dtype, tail, _ = OVX_SECTIONS[name]
        if sec.get("dtype") != dtype:
            raise SceneFormatError(f"section {name}: dtype must be {dtype}")
        shape = tuple(sec.get("shape", ()))
        if shape != (n,) + tail:
            raise SceneFormatError(f"section {name}: shape must be {(n,) + tail}")
        off, blen = int(sec["offset"]), int(sec["byte_len"])
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if blen != expected:
            raise SceneFormatError(f"section {name}: byte_len does not match shape")
        if off < 0 or off + blen > len(body):
            raise SceneFormatError(f"section {name}: truncated data")
        arrays[name] = np.frombuffer(body[off : off + blen], dtype=np.dtype(dtype)).reshape(shape)
    for name, (_, _, required) in OVX_SECTIONS.items():
        if required and name not in arrays:
            raise SceneFormatError(f"missing required section {name}")
    return VoxelScene(
        centers=arrays["centers"],
        sizes=arrays["sizes"],
        densities=arrays["densities"],
        colors=arrays["colors"],
        gt_labels=arrays.get("gt_labels"),
        group_F=arrays.get("group_F"),
        group_W=arrays.get("group_W"),
        group_ids=arrays.get("group_ids"),
    )


@dataclass
class CameraView:
    """Pinhole camera: +x right, +y down, +z forward in the camera frame."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) camera-to-world
    translation: np.ndarray  # (3,) camera origin in world
    name: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise CameraFormatError("width and height must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise CameraFormatError("fx and fy must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise CameraFormatError("rotation must be orthonormal with determinant +1")

    @property
    def origin(self) -> np.ndarray:
        return self.translation

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray direction per pixel, shape (H, W, 3)."""
        u = (np.arange(self.width, dtype=np.float64) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height, dtype=np.float64) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        dirs = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        return dirs @ self.rotation.T

    def c2w_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def save_cameras(views: list[CameraView], path: str | Path) -> None:
    if not views:
        raise CameraFormatError("cannot save an empty camera list")
    v0 = views[0]
    payload = {
        "width": v0.width,
        "height": v0.height,
        "fx": v0.fx,
        "fy": v0.fy,
        "cx": v0.cx,
        "cy": v0.cy,
        "frames": [
            {"name": v.name or f"view_{i:03d}", "c2w": [float(x) for x in v.c2w_matrix().reshape(16)]}
            for i, v in enumerate(views)
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_cameras(path: str | Path) -> list[CameraView]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CameraFormatError(f"malformed camera file: {exc}") from exc
    for key in ("width", "height", "fx", "fy", "cx", "cy", "frames"):
        if key not in payload:
            raise CameraFormatError(f"camera file missing {key!r}")
    views = []
    for frame in payload["frames"]:
        c2w = np.asarray(frame["c2w"], dtype=np.float64)
        if c2w.shape != (16,):
            raise CameraFormatError("c2w must hold 16 row-major reals")
        m = c2w.reshape(4, 4)
        views.append(
            CameraView(
                width=int(payload["width"]),
                height=int(payload["height"]),
                fx=float(payload["fx"]),
                fy=float(payload["fy"]),
                cx=float(payload["cx"]),
                cy=float(payload["cy"]),
                rotation=m[:3, :3],
                translation=m[:3, 3],
                name=str(frame.get("name", "")),
            )
        )
    return views


@dataclass
class PointMap:
    """Per-pixel expected ray-hit position and its validity flag."""

    positions: np.ndarray  # (H, W, 3) float64
    validity: np.ndarray  # (H, W) bool


@dataclass
class RayHits:
    """Front-to-back voxel intersections of a single ray."""

    voxel_indices: np.ndarray  # (M,) int64
    segment_lengths: np.ndarray  # (M,) float64, meters
    alphas: np.ndarray  # (M,) float64 in [0, 1]
    weights: np.ndarray  # (M,) float64

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


def save_mask(labels: np.ndarray, path: str | Path) -> None:
    """Write an instance-label image as 16-bit single-channel PNG."""
    arr = np.asarray(labels)
    if arr.ndim != 2 or arr.min() < 0 or arr.max() > 65535:
        raise ValueError("mask must be 2-D with labels in [0, 65535]")
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    return arr.astype(np.int32)
