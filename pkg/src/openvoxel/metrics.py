"""Evaluation metrics: IoU, boundary IoU, adjusted Rand index, k-NN label
transfer, and the referring-query evaluation harness."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .clients import ChatClient
from .query import QueryRequest, answer_query
from .scene import CameraView, VoxelScene
from .scene_map import SceneMap

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; both-empty counts 1.0."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return float((a & b).sum()) / union


def boundary_band(mask: np.ndarray, d: int) -> np.ndarray:
    """Pixels of the mask within Euclidean distance d of its boundary."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        return mask.copy()
    # distance of each foreground pixel to the nearest background pixel;
    # an image-border foreground pixel is on the boundary by convention
    inv = np.pad(~mask, 1, constant_values=True)
    dist = ndimage.distance_transform_edt(~inv)[1:-1, 1:-1]
    return mask & (dist <= d)


def boundary_iou(a: np.ndarray, b: np.ndarray, d: int | None = None) -> float:
    """IoU restricted to each mask's boundary band of width d
    (default: 2% of the image diagonal, rounded up)."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if d is None:
        d = int(math.ceil(0.02 * math.hypot(*a.shape)))
    return iou(boundary_band(a, d), boundary_band(b, d))


def adjusted_rand_index(pred: np.ndarray, gt: np.ndarray) -> float:
    """ARI over the indices labeled in both partitions (pred != 0, gt != 0)."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise MetricError("label arrays must have equal length")
    sel = (pred != 0) & (gt != 0)
    if not sel.any():
        raise MetricError("no indices are labeled in both partitions")
    p, g = pred[sel], gt[sel]
    _, pi = np.unique(p, return_inverse=True)
    _, gi = np.unique(g, return_inverse=True)
    C = np.zeros((pi.max() + 1, gi.max() + 1), np.int64)
    np.add.at(C, (pi, gi), 1)
    n = C.sum()

    def comb2(x):
        return x * (x - 1) / 2.0

    s = comb2(C).sum()
    sa = comb2(C.sum(axis=1)).sum()
    sb = comb2(C.sum(axis=0)).sum()
    expected = sa * sb / comb2(n)
    denom = (sa + sb) / 2.0 - expected
    if denom == 0:
        return 1.0
    return float((s - expected) / denom)


def semseg_transfer(points: np.ndarray, voxel_positions: np.ndarray,
                    voxel_classes: np.ndarray, protocol: str = "nearest",
                    k: int = 25) -> np.ndarray:
    """Transfer voxel class labels onto query points.

    ``nearest`` takes the 1-NN label; ``majority_knn`` the modal label of
    the k nearest voxels, ties resolved to the smallest class id.
    """
    points = np.asarray(points, np.float64).reshape(-1, 3)
    voxel_positions = np.asarray(voxel_positions, np.float64).reshape(-1, 3)
    voxel_classes = np.asarray(voxel_classes).ravel()
    if len(voxel_positions) == 0:
        raise MetricError("voxel set is empty")
    if len(voxel_classes) != len(voxel_positions):
        raise MetricError("one class label per voxel is required")
    tree = cKDTree(voxel_positions)
    if protocol == "nearest":
        _, idx = tree.query(points, k=1)
        return voxel_classes[np.atleast_1d(idx)]
    if protocol == "majority_knn":
        if k < 1:
            raise MetricError("k must be >= 1")
        k = min(k, len(voxel_positions))
        _, idx = tree.query(points, k=k)
        idx = np.asarray(idx).reshape(len(points), -1)
        out = np.empty(len(points), voxel_classes.dtype)
        for i, row in enumerate(idx):
            labels, counts = np.unique(voxel_classes[row], return_counts=True)
            out[i] = labels[np.lexsort((labels, -counts))[0]]
        return out
    raise MetricError(f"unknown protocol {protocol!r}")


@dataclass
class QueryItem:
    query: str
    view: CameraView
    gt_mask: np.ndarray
    name: str = ""


@dataclass
class EvalReport:
    per_query: list[dict] = field(default_factory=list)
    miou: float = 0.0
    mbiou: float = 0.0

    def to_json_dict(self) -> dict:
        return {"per_query": self.per_query, "miou": self.miou, "mbiou": self.mbiou}

    def to_json_str(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"{'query':40s} {'iou':>8s} {'biou':>8s}"]
        for q in self.per_query:
            note = f"  [{q['error']}]" if q.get("error") else ""
            lines.append(f"{q['query'][:40]:40s} {q['iou']:8.4f} {q['biou']:8.4f}{note}")
        lines.append(f"{'mean':40s} {self.miou:8.4f} {self.mbiou:8.4f}")
        return "\n".join(lines)


def evaluate_queries(scene: VoxelScene, voxel_ids: np.ndarray, scene_map: SceneMap,
                     items: list[QueryItem], chat: ChatClient,
                     tau_mask: float = 0.5) -> EvalReport:
    """Answer every query and aggregate IoU / boundary IoU against the gt
    masks. Per-item failures score 0 with an error note; the suite never
    aborts."""
    if not items:
        raise MetricError("query set is empty")
    per_query = []
    for item in items:
        entry = {"name": item.name, "query": item.query, "iou": 0.0, "biou": 0.0,
                 "ids": [], "canonical": ""}
        try:
            ans = answer_query(scene, voxel_ids, scene_map,
                               QueryRequest(item.query, item.view), chat, tau_mask)
            entry["iou"] = iou(ans.mask, item.gt_mask)
            entry["biou"] = boundary_iou(ans.mask, item.gt_mask)
            entry["ids"] = list(ans.ids)
            entry["canonical"] = ans.canonical_query
        except Exception as exc:  # noqa: BLE001 - harness must keep going
            log.warning("query %r failed: %s", item.query, exc)
            entry["error"] = str(exc)
        per_query.append(entry)
    miou = float(np.mean([q["iou"] for q in per_query]))
    mbiou = float(np.mean([q["biou"] for q in per_query]))
    return EvalReport(per_query=per_query, miou=miou, mbiou=mbiou)
