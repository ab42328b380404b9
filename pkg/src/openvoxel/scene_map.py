"""Canonical scene map construction.

For every voxel group: pick the clearest views, render its binary masks,
caption the masked region, rewrite the caption into the canonical retrieval
template through the chat client, and persist the resulting (id, center,
caption) table.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clients import (CaptionFrame, CaptionRequest, Captioner, ChatClient, ChatRequest,
                      ClientError, FORBIDDEN_LEADING_NOUNS, ImagePart, ParseError,
                      STOPWORDS, TextPart, leading_noun, load_prompt, parse_canonical,
                      tokenize)
from .grouping import GroupDictionary
from .remote import TransportError
from .render import render_color, render_group_mask
from .scene import CameraView, VoxelScene

log = logging.getLogger(__name__)


class SceneMapError(ValueError):
    pass


class InvisibleGroup(SceneMapError):
    """The group renders to an empty mask in every view."""


@dataclass
class SceneMapEntry:
    id: int
    center: tuple[float, float, float]
    caption: str
    voxel_count: int
    flagged: bool = False

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        if len(self.center) != 3 or not all(math.isfinite(c) for c in self.center):
            raise SceneMapError(f"entry {self.id}: center must be 3 finite reals")
        if not self.caption:
            raise SceneMapError(f"entry {self.id}: caption must be non-empty")


@dataclass
class SceneMap:
    entries: list[SceneMapEntry]
    scene_name: str = "scene"

    def __post_init__(self):
        if not self.entries:
            raise SceneMapError("scene map must carry at least one entry")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise SceneMapError("scene map ids must be unique")
        self.entries = sorted(self.entries, key=lambda e: e.id)

    def to_json_dict(self) -> dict:
        return {
            "scene_name": self.scene_name,
            "groups": [
                {
                    "id": e.id,
                    "center": list(e.center),
                    "caption": e.caption,
                    "voxel_count": e.voxel_count,
                    "flagged": e.flagged,
                }
                for e in self.entries
            ],
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def sample_caption_frames(group_id: int, scene: VoxelScene, views: list[CameraView],
                          voxel_ids: np.ndarray, k: int = 8,
                          tau_bg: float = 0.5) -> CaptionRequest:
    """Top-k views by the group's rendered mask area, padded to k pairs."""
    masks = [render_group_mask(scene, v, {int(group_id)}, voxel_ids, tau_bg) for v in views]
    areas = [int(m.sum()) for m in masks]
    if max(areas) == 0:
        raise InvisibleGroup(f"group {group_id} is invisible in all views")
    order = sorted(range(len(views)), key=lambda i: (-areas[i], i))
    chosen = [i for i in order if areas[i] > 0][:k]
    frames = [CaptionFrame(image=render_color(scene, views[i]), mask=masks[i]) for i in chosen]
    return CaptionRequest(frames=frames).padded(k)


def build_visual_prompt(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Darken outside the mask (x0.3) and add a red dot at the mask centroid.

    If the centroid falls outside the mask (e.g. a crescent), the dot moves
    to the nearest mask pixel.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise SceneMapError("visual prompt requires a non-empty mask")
    image = np.asarray(image, np.float64)
    out = image * 0.3
    out[mask] = image[mask]
    ys, xs = np.nonzero(mask)
    cy, cx = float(ys.mean()), float(xs.mean())
    ci, cj = int(round(cy)), int(round(cx))
    h, w = mask.shape
    if not (0 <= ci < h and 0 <= cj < w and mask[ci, cj]):
        k = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        ci, cj = int(ys[k]), int(xs[k])
    radius = max(2, int(round(0.01 * math.hypot(h, w))))
    yy, xx = np.ogrid[:h, :w]
    disc = (yy - ci) ** 2 + (xx - cj) ** 2 <= radius * radius
    out[disc] = (1.0, 0.0, 0.0)
    return out


def _repair_caption(phrase: str | None, raw_caption: str) -> str:
    """Swap a forbidden leading noun for the most frequent usable noun of
    the raw caption."""
    counts: dict[str, int] = {}
    order: dict[str, int] = {}
    for tok in tokenize(raw_caption):
        if tok in STOPWORDS or tok in FORBIDDEN_LEADING_NOUNS or tok == "possibly":
            continue
        counts[tok] = counts.get(tok, 0) + 1
        order.setdefault(tok, len(order))
    noun = min(counts, key=lambda t: (-counts[t], order[t])) if counts else "unknown"
    base = phrase if phrase else raw_caption
    parts = [p.strip() for p in base.split(",")]
    parts[0] = noun
    return ", ".join(p for p in parts if p)


def canonicalize_caption(raw_caption: str, prompted_frames: list[np.ndarray],
                         chat: ChatClient) -> tuple[str, bool]:
    """Rewrite a rough caption into the canonical template.

    Returns (caption, flagged). An invalid reply is retried once; if the
    retry also fails, the caption is repaired mechanically and flagged.
    """
    if not raw_caption:
        raise SceneMapError("raw caption must be non-empty")
    req = ChatRequest(
        system_prompt=load_prompt("canonical_caption"),
        user_parts=[TextPart("caption: " + raw_caption)]
        + [ImagePart(f) for f in prompted_frames],
    )
    last_reply = ""
    for _ in range(2):
        last_reply = chat.chat(req)
        try:
            return parse_canonical(last_reply), False
        except ParseError as exc:
            log.warning("canonical caption rejected (%s): %r", exc, last_reply)
    phrase = None
    try:
        obj = json.loads(last_reply.strip())
        if isinstance(obj, dict) and isinstance(obj.get("canonical"), str):
            phrase = obj["canonical"]
    except json.JSONDecodeError:
        pass
    return _repair_caption(phrase, raw_caption), True


def build_scene_map(scene: VoxelScene, dictionary: GroupDictionary, voxel_ids: np.ndarray,
                    views: list[CameraView], captioner: Captioner, chat: ChatClient,
                    scene_name: str = "scene", k_frames: int = 8, tau_bg: float = 0.5,
                    canonicalize: bool = True) -> SceneMap:
    """One entry per group present in voxel_ids; per-group failures flag the
    entry instead of aborting the map."""
    voxel_ids = np.asarray(voxel_ids)
    ids, counts = np.unique(voxel_ids[voxel_ids > 0], return_counts=True)
    count_of = dict(zip(ids.tolist(), counts.tolist()))
    entries = []
    for gid in sorted(count_of):
        center = tuple(dictionary.entries[dictionary.resolve(gid)].centroid.tolist())
        try:
            creq = sample_caption_frames(gid, scene, views, voxel_ids, k_frames, tau_bg)
            raw = captioner.caption(creq)
            if canonicalize:
                prompted = [build_visual_prompt(f.image, f.mask) for f in creq.frames]
                caption, flagged = canonicalize_caption(raw, prompted, chat)
            else:
                # raw captions never satisfy the canonical contract; keep
                # them verbatim but flagged
                caption, flagged = " ".join(raw.split()), True
        except (SceneMapError, ClientError, TransportError) as exc:
            log.warning("group %d: caption failed (%s)", gid, exc)
            caption, flagged = "unknown, caption unavailable", True
        entries.append(SceneMapEntry(id=int(gid), center=center, caption=caption,
                                     voxel_count=int(count_of[gid]), flagged=flagged))
    return SceneMap(entries=entries, scene_name=scene_name)


def save_scene_map(scene_map: SceneMap, path: str | Path) -> None:
    Path(path).write_text(scene_map.to_json_str() + "\n", encoding="utf-8")


def load_scene_map(path: str | Path) -> SceneMap:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneMapError(f"malformed scene map JSON: {exc}") from exc
    if not isinstance(payload, dict) or "groups" not in payload:
        raise SceneMapError("scene map file missing 'groups'")
    entries = []
    for g in payload["groups"]:
        try:
            entry = SceneMapEntry(
                id=int(g["id"]),
                center=tuple(g["center"]),
                caption=str(g["caption"]),
                voxel_count=int(g["voxel_count"]),
                flagged=bool(g.get("flagged", False)),
            )
        except KeyError as exc:
            raise SceneMapError(f"scene map entry missing field {exc}") from exc
        if not entry.flagged and leading_noun(entry.caption) in FORBIDDEN_LEADING_NOUNS:
            log.warning("entry %d leads with a forbidden noun; flagging", entry.id)
            entry.flagged = True
        entries.append(entry)
    return SceneMap(entries=entries, scene_name=str(payload.get("scene_name", "scene")))
