"""Procedural labeled scenes, camera orbits, and ground-truth sidecars.

Everything here is deterministic in the spec seed: each consumer draws from
its own named RNG stream, so adding consumers never perturbs existing ones.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .render import render_group_ids
from .scene import CameraView, VoxelScene
from .util import stream


class SynthError(ValueError):
    pass


DEFAULT_COLORS = [
    ("red", (0.85, 0.15, 0.15)),
    ("green", (0.20, 0.70, 0.20)),
    ("blue", (0.20, 0.30, 0.80)),
    ("yellow", (0.90, 0.85, 0.20)),
    ("purple", (0.60, 0.25, 0.70)),
    ("orange", (0.95, 0.55, 0.10)),
    ("white", (0.92, 0.92, 0.92)),
    ("brown", (0.55, 0.35, 0.20)),
]

# category nouns per shape; unique categories are drawn without replacement
CATEGORY_POOL = {
    "sphere": ["apple", "melon", "ball", "globe", "pumpkin"],
    "box": ["crate", "book", "dice", "carton", "brick"],
    "ell": ["sofa", "bench", "bracket", "pipe", "lamp"],
}

GROUND_CATEGORY = "floor"
GROUND_COLOR = ("gray", (0.6, 0.6, 0.6))
# the ground uses a coarser lattice than the objects so that every visible
# floor voxel spans at least one pixel footprint from any orbit view and
# therefore accumulates strong direct votes during grouping
GROUND_VOXEL_SIZE = 0.05


@dataclass
class SceneSpec:
    seed: int = 0
    n_objects: int = 5
    shape_palette: tuple[str, ...] = ("box", "sphere", "ell")
    color_names: list[tuple[str, tuple[float, float, float]]] = field(
        default_factory=lambda: list(DEFAULT_COLORS)
    )
    surface: float = 1.5  # ground-plane extent (meters, square side)
    voxel_size: float = 0.02
    density_solid: float = 300.0
    size_range: tuple[float, float] = (0.10, 0.16)  # object radius bounds

    def __post_init__(self):
        if self.n_objects < 1:
            raise SynthError("n_objects must be >= 1")
        if self.voxel_size <= 0:
            raise SynthError("voxel_size must be positive")
        names = [n for n, _ in self.color_names]
        if len(set(names)) != len(names):
            raise SynthError("color names must be unique")
        unknown = set(self.shape_palette) - set(CATEGORY_POOL)
        if unknown:
            raise SynthError(f"unknown shapes in palette: {sorted(unknown)}")

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_objects": self.n_objects,
            "shape_palette": list(self.shape_palette),
            "color_names": [[n, list(rgb)] for n, rgb in self.color_names],
            "surface": self.surface,
            "voxel_size": self.voxel_size,
            "density_solid": self.density_solid,
            "size_range": list(self.size_range),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        kwargs = dict(d)
        if "shape_palette" in kwargs:
            kwargs["shape_palette"] = tuple(kwargs["shape_palette"])
        if "color_names" in kwargs:
            kwargs["color_names"] = [(n, tuple(rgb)) for n, rgb in kwargs["color_names"]]
        if "size_range" in kwargs:
            kwargs["size_range"] = tuple(kwargs["size_range"])
        return cls(**kwargs)


@dataclass
class ObjectRecord:
    gt_id: int
    category: str
    color_name: str
    shape: str
    placement: str
    center: tuple[float, float, float]


def _lattice(lo: np.ndarray, hi: np.ndarray, h: float):
    """Voxel-center lattice covering [lo, hi); centers at (i + 0.5) * h."""
    i0 = np.floor(lo / h).astype(np.int64)
    i1 = np.ceil(hi / h).astype(np.int64)
    ax = [np.arange(i0[a], i1[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    idx = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    return (idx + 0.5) * h


def _solid_mask(shape: str, pts: np.ndarray, center: np.ndarray, r: float,
                rng: np.random.Generator) -> np.ndarray:
    d = pts - center
    if shape == "sphere":
        return (d ** 2).sum(axis=1) <= r * r
    if shape == "box":
        return np.all(np.abs(d) <= r * np.array([1.0, 0.8, 0.9]), axis=1)
    if shape == "ell":
        # union of an upright bar and a foot bar
        bar = np.all(np.abs(d - np.array([0, 0, 0])) <= r * np.array([0.45, 0.8, 1.0]), axis=1)
        foot = np.all(np.abs(d - np.array([r * 0.55, 0, -r * 0.6])) <= r * np.array([1.0, 0.8, 0.4]), axis=1)
        return bar | foot
    raise SynthError(f"unknown shape {shape!r}")


def generate_scene(spec: SceneSpec) -> tuple[VoxelScene, list[ObjectRecord]]:
    """Voxelize non-overlapping solids above a labeled ground plane.

    gt ids 1..n_objects are the objects; the ground plane is its own
    instance with gt id n_objects + 1.
    """
    h = spec.voxel_size
    half = spec.surface / 2.0
    rng_shape = stream(spec.seed, "shapes")
    rng_place = stream(spec.seed, "placement")

    pools = {s: list(CATEGORY_POOL[s]) for s in spec.shape_palette}
    shapes, categories, colors = [], [], []
    for i in range(spec.n_objects):
        avail = [s for s in spec.shape_palette if pools[s]]
        if not avail:
            raise SynthError("category pools exhausted; reduce n_objects or widen shape_palette")
        s = avail[int(rng_shape.integers(len(avail)))]
        pool = pools[s]
        categories.append(pool.pop(int(rng_shape.integers(len(pool)))))
        shapes.append(s)
        colors.append(spec.color_names[int(rng_shape.integers(len(spec.color_names)))])

    # place objects with bounded retries, rejecting horizontal overlap; a
    # dead-ended arrangement is thrown away and placement restarts fresh
    placed = []  # (x, y, r)
    for _ in range(50):
        placed = []
        for i in range(spec.n_objects):
            r = float(rng_place.uniform(*spec.size_range))
            ok = False
            for _ in range(200):
                x = float(rng_place.uniform(-half + r + 2 * h, half - r - 2 * h))
                y = float(rng_place.uniform(-half + r + 2 * h, half - r - 2 * h))
                if all((x - px) ** 2 + (y - py) ** 2 >= (1.25 * (r + pr) + 2 * h) ** 2
                       for px, py, pr in placed):
                    ok = True
                    break
            if not ok:
                break
            placed.append((x, y, r))
        if len(placed) == spec.n_objects:
            break
    if len(placed) != spec.n_objects:
        raise SynthError("object placement failed; try a larger surface")
    radii = [r for _, _, r in placed]
    positions = [(x, y) for x, y, _ in placed]

    records = []
    object_pts = []
    for i in range(spec.n_objects):
        gt_id = i + 1
        r = radii[i]
        x, y = positions[i]
        cz = r if shapes[i] == "sphere" else r * (1.0 if shapes[i] != "box" else 0.9)
        center = np.array([x, y, cz])
        lo = center - 1.6 * r
        hi = center + 1.6 * r
        lo[2] = 0.0
        pts = _lattice(lo, hi, h)
        pts = pts[pts[:, 2] > 0]
        inside = _solid_mask(shapes[i], pts, center, r, rng_shape)
        pts = pts[inside]
        if len(pts) == 0:
            raise SynthError("object voxelization produced no voxels; voxel_size too large")
        object_pts.append(pts)
        mean = pts.astype(np.float32).astype(np.float64).mean(axis=0)
        records.append(
            ObjectRecord(
                gt_id=gt_id,
                category=categories[i],
                color_name=colors[i][0],
                shape=shapes[i],
                placement="on table",
                center=(float(mean[0]), float(mean[1]), float(mean[2])),
            )
        )

    # ground plane: one coarse voxel layer below z = 0; cells entirely inside
    # an object's footprint are skipped, the way a scanner that never observes
    # them would leave them unreconstructed
    ground_id = spec.n_objects + 1
    gh = max(h, GROUND_VOXEL_SIZE)
    g_lo = np.array([-half, -half, -gh])
    g_hi = np.array([half, half, 0.0])
    g_pts = _lattice(g_lo, g_hi, gh)
    keep = np.all((g_pts[:, :2] >= -half) & (g_pts[:, :2] <= half), axis=1) & (g_pts[:, 2] < 0)
    g_pts = g_pts[keep]
    occupied = {
        (int(math.floor(p[0] / h)), int(math.floor(p[1] / h)))
        for pts in object_pts
        for p in pts
    }
    offsets = np.linspace(-0.5 + 0.1, 0.5 - 0.1, 5) * gh
    visible = np.ones(len(g_pts), bool)
    for gi, p in enumerate(g_pts):
        covered = all(
            (int(math.floor((p[0] + du) / h)), int(math.floor((p[1] + dv) / h))) in occupied
            for du in offsets
            for dv in offsets
        )
        if covered:
            visible[gi] = False
    g_pts = g_pts[visible]

    all_centers = [g_pts] + object_pts
    all_labels = [np.full(len(g_pts), ground_id, np.int32)] + [
        np.full(len(pts), i + 1, np.int32) for i, pts in enumerate(object_pts)
    ]
    all_colors = [np.tile(np.array(GROUND_COLOR[1]), (len(g_pts), 1))] + [
        np.tile(np.array(colors[i][1]), (len(pts), 1)) for i, pts in enumerate(object_pts)
    ]
    all_sizes = [np.full(len(g_pts), gh, np.float32)] + [
        np.full(len(pts), h, np.float32) for pts in object_pts
    ]

    g_mean = g_pts.astype(np.float32).astype(np.float64).mean(axis=0)
    records.append(
        ObjectRecord(
            gt_id=ground_id,
            category=GROUND_CATEGORY,
            color_name=GROUND_COLOR[0],
            shape="plane",
            placement="ground",
            center=(float(g_mean[0]), float(g_mean[1]), float(g_mean[2])),
        )
    )

    centers = np.concatenate(all_centers)
    labels = np.concatenate(all_labels)
    colors_arr = np.concatenate(all_colors)
    scene = VoxelScene(
        centers=centers,
        sizes=np.concatenate(all_sizes),
        densities=np.full(len(centers), spec.density_solid, np.float32),
        colors=colors_arr,
        gt_labels=labels,
    )
    return scene, records


def generate_orbit(scene: VoxelScene, n_views: int, radius: float = 2.3,
                   elevation: float = 70.0, width: int = 64, height: int = 64,
                   fov_deg: float = 55.0, check_visibility: bool = True) -> list[CameraView]:
    """Cameras on a circle around the scene centroid, all looking at it."""
    if n_views < 1:
        raise SynthError("n_views must be >= 1")
    target = scene.centers.astype(np.float64).mean(axis=0)
    el = math.radians(elevation)
    fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    views = []
    for i in range(n_views):
        az = 2 * math.pi * i / n_views
        eye = target + radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.array([0.0, 0.0, 1.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        views.append(
            CameraView(
                width=width,
                height=height,
                fx=fx,
                fy=fx,
                cx=width / 2.0,
                cy=height / 2.0,
                rotation=np.stack([x, y, z], axis=1),
                translation=eye,
                name=f"view_{i:03d}",
            )
        )
    if check_visibility and scene.gt_labels is not None:
        seen: set[int] = set()
        for mask in render_gt_masks(scene, views):
            seen.update(np.unique(mask).tolist())
        missing = sorted(set(np.unique(scene.gt_labels).tolist()) - seen - {0})
        if missing:
            raise SynthError(f"gt ids not visible from any orbit view: {missing}")
    return views


def render_gt_masks(scene: VoxelScene, views: list[CameraView], tau_bg: float = 0.5) -> list[np.ndarray]:
    """Ground-truth instance masks per view, labels = gt ids."""
    if scene.gt_labels is None:
        raise SynthError("scene has no gt_labels")
    return [render_group_ids(scene, v, scene.gt_labels, tau_bg) for v in views]


def save_records(records: list[ObjectRecord], path: str | Path) -> None:
    payload = {
        "objects": [
            {
                "gt_id": r.gt_id,
                "category": r.category,
                "color_name": r.color_name,
                "shape": r.shape,
                "placement": r.placement,
                "center": list(r.center),
            }
            for r in records
        ]
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_records(path: str | Path) -> list[ObjectRecord]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        ObjectRecord(
            gt_id=int(o["gt_id"]),
            category=o["category"],
            color_name=o["color_name"],
            shape=o["shape"],
            placement=o["placement"],
            center=tuple(o["center"]),
        )
        for o in payload["objects"]
    ]
