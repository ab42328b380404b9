"""Per-view instance segmentation interface and its implementations.

The oracle segmenter derives masks from a synthetic scene's ground truth and
can corrupt them on purpose (fragmentation, erosion, per-view label
permutation) so the cross-view matching logic is genuinely exercised. The
remote segmenter forwards images and prompts to an HTTP service.
"""
from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .remote import TransportError, post_json, resolve_endpoint
from .scene import CameraView, VoxelScene
from .synth import render_gt_masks
from .util import image_to_png_b64, png_b64_to_array, stream


class SegmenterError(ValueError):
    pass


@dataclass
class PointPrompt:
    u: int
    v: int
    positive: bool = True


@dataclass
class MaskPrompt:
    """Dense prompt: +20 inside the group of interest, -20 on other known
    groups, 0 where unknown."""

    values: np.ndarray  # (H, W) int8

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        bad = set(np.unique(self.values).tolist()) - {20, -20, 0}
        if bad:
            raise SegmenterError(f"mask prompt may only contain 20, -20, 0; got {sorted(bad)}")


@dataclass
class NoiseConfig:
    fragment_prob: float = 0.0  # chance a gt instance splits in two per view
    erode_px: int = 0
    permute_ids: bool = True
    seed: int = 0
    # fragment size as a fraction of the instance's pixels (fingertip-style
    # small pieces, not halves)
    fragment_fraction: tuple[float, float] = (0.04, 0.12)

    def __post_init__(self):
        if not 0.0 <= self.fragment_prob <= 1.0:
            raise SegmenterError("fragment_prob must lie in [0, 1]")
        if self.erode_px < 0:
            raise SegmenterError("erode_px must be non-negative")


@dataclass
class PromptedSegmentation:
    mask: np.ndarray  # (H, W) bool
    no_object: bool = False


class Segmenter:
    """Whole-image and prompted segmentation over known views."""

    def segment(self, image: np.ndarray | None, view_index: int) -> np.ndarray:
        raise NotImplementedError

    def segment_prompted(self, image: np.ndarray | None, view_index: int,
                         prompts: list[PointPrompt],
                         mask_prompt: MaskPrompt | None = None) -> PromptedSegmentation:
        raise NotImplementedError


class OracleSegmenter(Segmenter):
    """Ground-truth segmentation with configurable corruption.

    ``segment`` labels carry no cross-view meaning (per-view permutation is
    on by default). ``segment_prompted`` always answers from the clean gt
    projection: prompting inside a fragment returns the whole object, which
    is what the merge step relies on.
    """

    def __init__(self, scene: VoxelScene, views: list[CameraView],
                 noise: NoiseConfig | None = None, tau_bg: float = 0.5):
        if scene.gt_labels is None:
            raise SegmenterError("oracle segmenter requires a scene with gt_labels")
        self.scene = scene
        self.views = views
        self.noise = noise or NoiseConfig()
        self.tau_bg = tau_bg
        self._gt_masks: dict[int, np.ndarray] = {}

    def _gt(self, view_index: int) -> np.ndarray:
        if view_index not in self._gt_masks:
            self._gt_masks[view_index] = render_gt_masks(
                self.scene, [self.views[view_index]], self.tau_bg
            )[0]
        return self._gt_masks[view_index]

    def segment(self, image: np.ndarray | None, view_index: int) -> np.ndarray:
        noise = self.noise
        gt = self._gt(view_index)
        rng = stream(noise.seed, "segment", view_index)
        work = gt.astype(np.int64).copy()
        next_label = int(work.max()) + 1

        for label in sorted(np.unique(gt).tolist()):
            if label == 0:
                continue
            ys, xs = np.nonzero(gt == label)
            if noise.fragment_prob > 0 and rng.uniform() < noise.fragment_prob and len(ys) >= 2:
                theta = rng.uniform(0, 2 * np.pi)
                frac = rng.uniform(*noise.fragment_fraction)
                proj = np.cos(theta) * (xs - xs.mean()) + np.sin(theta) * (ys - ys.mean())
                cut = np.quantile(proj, 1.0 - frac)
                side = proj > cut
                if not side.any() or side.all():
                    order = np.argsort(proj)
                    side = np.zeros(len(ys), bool)
                    side[order[-max(1, int(round(frac * len(ys)))):]] = True
                    if side.all():
                        side[order[0]] = False
                work[ys[side], xs[side]] = next_label
                next_label += 1

        if noise.erode_px > 0:
            eroded = np.zeros_like(work)
            for label in np.unique(work):
                if label == 0:
                    continue
                region = ndimage.binary_erosion(work == label, iterations=noise.erode_px)
                eroded[region] = label
            work = eroded

        labels = [l for l in sorted(np.unique(work).tolist()) if l != 0]
        new_ids = np.arange(1, len(labels) + 1)
        if noise.permute_ids:
            new_ids = rng.permutation(new_ids)
        out = np.zeros_like(work, dtype=np.int32)
        for label, nid in zip(labels, new_ids):
            out[work == label] = nid
        return out

    def segment_prompted(self, image: np.ndarray | None, view_index: int,
                         prompts: list[PointPrompt],
                         mask_prompt: MaskPrompt | None = None) -> PromptedSegmentation:
        gt = self._gt(view_index)
        h, w = gt.shape
        positives = [p for p in prompts if p.positive]
        negatives = [p for p in prompts if not p.positive]
        if not positives:
            raise SegmenterError("at least one positive point prompt is required")
        for p in prompts:
            if not (0 <= p.u < w and 0 <= p.v < h):
                raise SegmenterError(f"prompt ({p.u}, {p.v}) outside image bounds")
        votes: dict[int, int] = {}
        for p in positives:
            label = int(gt[p.v, p.u])
            votes[label] = votes.get(label, 0) + 1
        best = min(votes, key=lambda l: (-votes[l], l))
        if best == 0:
            return PromptedSegmentation(mask=np.zeros_like(gt, bool), no_object=True)
        mask = gt == best
        for p in negatives:
            label = int(gt[p.v, p.u])
            # a negative landing on the positively-selected instance is a
            # conflicting prompt; the positive majority wins, as with a real
            # promptable segmenter
            if label != 0 and label != best:
                mask &= gt != label
        return PromptedSegmentation(mask=mask, no_object=False)


class RemoteSegmenter(Segmenter):
    """Thin client for the /v1/segment and /v1/segment_prompted endpoints."""

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0, retries: int = 2):
        self.endpoint = resolve_endpoint(endpoint)
        self.timeout = timeout
        self.retries = retries

    def segment(self, image: np.ndarray | None, view_index: int) -> np.ndarray:
        if image is None:
            raise SegmenterError("remote segmentation requires the view image")
        reply = post_json(self.endpoint, "/v1/segment", {"image": image_to_png_b64(image)},
                          self.timeout, self.retries)
        if "mask" not in reply:
            raise TransportError("segment reply missing 'mask'")
        return png_b64_to_array(reply["mask"]).astype(np.int32)

    def segment_prompted(self, image: np.ndarray | None, view_index: int,
                         prompts: list[PointPrompt],
                         mask_prompt: MaskPrompt | None = None) -> PromptedSegmentation:
        if image is None:
            raise SegmenterError("remote segmentation requires the view image")
        payload = {
            "image": image_to_png_b64(image),
            "points": [{"u": p.u, "v": p.v, "label": 1 if p.positive else 0} for p in prompts],
        }
        if mask_prompt is not None:
            payload["mask_prompt"] = base64.b64encode(
                np.ascontiguousarray(mask_prompt.values, dtype="<i1").tobytes()
            ).decode("ascii")
        reply = post_json(self.endpoint, "/v1/segment_prompted", payload, self.timeout, self.retries)
        if "mask" not in reply:
            raise TransportError("segment_prompted reply missing 'mask'")
        mask = png_b64_to_array(reply["mask"]) > 0
        return PromptedSegmentation(mask=mask, no_object=not mask.any())
