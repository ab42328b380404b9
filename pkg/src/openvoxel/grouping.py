"""Progressive, training-free construction of the voxel group field.

Per view: instance centroids are reduced from the point map, lifted into the
per-voxel vote field (F, W) through the blending weights, and reconciled with
the existing grouping by projecting current ids into the view and matching by
IoU. Fragmented groups are healed by re-prompting the segmenter and merging
masks contained inside another group's projection.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .render import accumulate_group_votes, render_group_ids, render_point_map
from .scene import CameraView, PointMap, VoxelScene
from .segmenter import MaskPrompt, PointPrompt, Segmenter, SegmenterError
from .util import stream

log = logging.getLogger(__name__)


class GroupingError(ValueError):
    pass


@dataclass
class GroupingConfig:
    iou_match_threshold: float = 0.3
    # fallback for partially-voted projections: match when this fraction of
    # the projected instance lies inside the best new mask even if the IoU
    # floor is unreachable
    proj_containment_match: float = 0.5
    containment_merge_threshold: float = 0.9
    merge_every: int = 3
    max_views: int = 150
    tau_bg: float = 0.5
    min_instance_pixels: int = 16
    merge_enabled: bool = True
    n_positive_prompts: int = 5
    n_negative_prompts: int = 8
    # a merge proposal is only trusted when the prompted mask's 3D centroid
    # lies within this radius of the prompting group's centroid
    merge_centroid_radius: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.iou_match_threshold <= 1.0:
            raise GroupingError("iou_match_threshold must lie in [0, 1]")
        if not 0.0 <= self.containment_merge_threshold <= 1.0:
            raise GroupingError("containment_merge_threshold must lie in [0, 1]")
        if self.merge_every < 1 or self.max_views < 1:
            raise GroupingError("merge_every and max_views must be >= 1")


@dataclass
class GroupField:
    """Accumulated weighted centroid votes F and confidence weights W."""

    F: np.ndarray  # (N, 3) float64
    W: np.ndarray  # (N,) float64

    @classmethod
    def zeros(cls, n_voxels: int) -> "GroupField":
        return cls(F=np.zeros((n_voxels, 3)), W=np.zeros(n_voxels))

    def normalized(self) -> np.ndarray:
        """F / W where voted, zeros elsewhere."""
        out = np.zeros_like(self.F)
        voted = self.W > 0
        out[voted] = self.F[voted] / self.W[voted, None]
        return out


@dataclass
class GroupEntry:
    centroid: np.ndarray  # (3,)
    support: float  # accumulated pixel count


class GroupDictionary:
    """Registry of instance ids and centroids, with a merge alias table.

    Merged ids keep their centroid as a voting anchor; ``resolve`` maps any
    id to its canonical survivor.
    """

    def __init__(self):
        self.entries: dict[int, GroupEntry] = {}
        self.alias: dict[int, int] = {}
        self.next_id: int = 1

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, centroid: np.ndarray, support: float) -> int:
        gid = self.next_id
        self.next_id += 1
        self.entries[gid] = GroupEntry(np.asarray(centroid, float).copy(), float(support))
        return gid

    def update(self, gid: int, centroid: np.ndarray, support: float) -> None:
        """Support-weighted running mean of the per-view centroids."""
        e = self.entries[self.resolve(gid)]
        total = e.support + support
        e.centroid = (e.centroid * e.support + np.asarray(centroid, float) * support) / total
        e.support = total

    def resolve(self, gid: int) -> int:
        while gid in self.alias:
            gid = self.alias[gid]
        return gid

    def merge(self, src: int, dst: int) -> None:
        src, dst = self.resolve(src), self.resolve(dst)
        if src == dst:
            return
        self.alias[src] = dst
        e_src, e_dst = self.entries[src], self.entries[dst]
        total = e_src.support + e_dst.support
        e_dst.centroid = (e_src.centroid * e_src.support + e_dst.centroid * e_dst.support) / total
        e_dst.support = total

    def canonical_ids(self) -> list[int]:
        return sorted({self.resolve(g) for g in self.entries})

    def voting_table(self) -> tuple[np.ndarray, np.ndarray]:
        """(ids ascending, centroids) over canonical entries.

        Merged-away ids do not act as voting anchors: their support already
        lives in the survivor's support-weighted centroid.
        """
        ids = np.array(self.canonical_ids(), dtype=np.int64)
        cents = np.stack([self.entries[int(i)].centroid for i in ids]) if len(ids) else np.zeros((0, 3))
        return ids, cents


def compute_instance_centroids(mask: np.ndarray, pmap: PointMap,
                               min_instance_pixels: int = 1) -> dict[int, np.ndarray]:
    """Masked average of the point map per instance id (>= 1).

    Ids with fewer than ``min_instance_pixels`` valid pixels are omitted.
    """
    if mask.shape != pmap.validity.shape:
        raise GroupingError("mask and point map dimensions differ")
    out: dict[int, np.ndarray] = {}
    valid = pmap.validity
    for k in np.unique(mask):
        if k < 1:
            continue
        sel = (mask == k) & valid
        n = int(sel.sum())
        if n >= max(min_instance_pixels, 1):
            out[int(k)] = pmap.positions[sel].mean(axis=0)
    return out


def instance_pixel_counts(mask: np.ndarray, pmap: PointMap) -> dict[int, int]:
    """Valid-pixel count per instance id, the support used for centroids."""
    out: dict[int, int] = {}
    for k in np.unique(mask):
        if k >= 1:
            out[int(k)] = int(((mask == k) & pmap.validity).sum())
    return out


def lift_masks(scene: VoxelScene, view: CameraView, mask: np.ndarray,
               centroids: dict[int, np.ndarray], field: GroupField) -> GroupField:
    """Accumulate centroid votes into (F, W) in one rendering pass."""
    accumulate_group_votes(scene, view, mask, centroids, field.F, field.W)
    return field


def assign_voxel_ids(field: GroupField, dictionary: GroupDictionary,
                     resolve: bool = True) -> np.ndarray:
    """Nearest dictionary centroid per voted voxel; 0 where W = 0.

    Ties go to the smaller id. With ``resolve`` the merge alias table is
    applied to the output.
    """
    if len(dictionary) == 0:
        raise GroupingError("group dictionary is empty")
    ids, cents = dictionary.voting_table()
    n = field.W.shape[0]
    out = np.zeros(n, dtype=np.int64)
    voted = np.nonzero(field.W > 0)[0]
    emb = field.F[voted] / field.W[voted, None]
    chunk = 65536
    for s in range(0, len(voted), chunk):
        block = emb[s : s + chunk]
        d2 = ((block[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        out[voted[s : s + chunk]] = ids[np.argmin(d2, axis=1)]
    if resolve and dictionary.alias:
        out = np.array([dictionary.resolve(int(g)) if g else 0 for g in out], dtype=np.int64)
    return out.astype(np.int32)


@dataclass
class MatchResult:
    mapping: dict[int, int]  # raw new-mask id -> final id (0 = dropped)
    relabeled: np.ndarray
    matched: dict[int, int]  # existing id -> raw new-mask id
    fresh: list[int]  # final ids newly allocated


def match_masks(m_proj: np.ndarray, m_new: np.ndarray, iou_match_threshold: float = 0.3,
                dictionary: GroupDictionary | None = None,
                min_instance_pixels: int = 0,
                proj_containment_match: float = 0.5) -> MatchResult:
    """Greedy highest-IoU matching of new per-view instances to projected ids.

    Existing ids claim, in descending projected-size order, the unclaimed new
    instance with the highest IoU. A claim succeeds when the IoU reaches the
    floor, or when most of the smaller of the two regions lies inside the
    other (``proj_containment_match``) -- a projection seeded from few views
    can be far smaller or larger than the visible mask of the object it
    belongs to, making the IoU floor unreachable.
    Unmatched new instances either receive fresh ids from the
    dictionary counter or, below ``min_instance_pixels``, are dropped as
    noise.
    """
    if m_proj.shape != m_new.shape:
        raise GroupingError("mask dimensions differ")
    exist_ids, exist_counts = np.unique(m_proj[m_proj > 0], return_counts=True)
    new_ids, new_counts = np.unique(m_new[m_new > 0], return_counts=True)
    new_count_of = dict(zip(new_ids.tolist(), new_counts.tolist()))

    # contingency of pixel overlaps
    inter: dict[tuple[int, int], int] = {}
    both = (m_proj > 0) & (m_new > 0)
    pairs, counts = np.unique(
        np.stack([m_proj[both], m_new[both]]).astype(np.int64), axis=1, return_counts=True
    ) if both.any() else (np.zeros((2, 0), np.int64), np.zeros(0, np.int64))
    for (e, n), c in zip(pairs.T.tolist(), counts.tolist()):
        inter[(e, n)] = int(c)

    order = sorted(zip(exist_ids.tolist(), exist_counts.tolist()), key=lambda t: (-t[1], t[0]))
    claimed: set[int] = set()
    matched: dict[int, int] = {}
    for e, e_count in order:
        best_iou, best_n, best_i = 0.0, None, 0
        for n in new_ids.tolist():
            if n in claimed:
                continue
            i = inter.get((e, n), 0)
            if i == 0:
                continue
            iou = i / (e_count + new_count_of[n] - i)
            if iou > best_iou or (iou == best_iou and best_n is not None and n < best_n):
                best_iou, best_n, best_i = iou, n, i
        smaller = min(e_count, new_count_of[best_n]) if best_n is not None else 1
        if best_n is not None and (best_iou >= iou_match_threshold
                                   or best_i / smaller >= proj_containment_match):
            matched[e] = best_n
            claimed.add(best_n)

    mapping: dict[int, int] = {n: e for e, n in matched.items()}
    fresh: list[int] = []
    for n in new_ids.tolist():
        if n in mapping:
            continue
        if new_count_of[n] < min_instance_pixels:
            mapping[n] = 0
            continue
        gid = dictionary.next_id if dictionary is not None else (max(exist_ids.tolist() or [0]) + 1 + len(fresh))
        if dictionary is not None:
            dictionary.next_id += 1
        mapping[n] = gid
        fresh.append(gid)

    relabeled = np.zeros_like(m_new)
    for n, gid in mapping.items():
        if gid:
            relabeled[m_new == n] = gid
    return MatchResult(mapping=mapping, relabeled=relabeled, matched=matched, fresh=fresh)


def merge_step(scene: VoxelScene, view: CameraView, view_index: int, voxel_ids: np.ndarray,
               dictionary: GroupDictionary, segmenter: Segmenter, config: GroupingConfig,
               image: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Re-prompt the segmenter per visible group and merge contained masks.

    A group whose prompted mask lies at least ``containment_merge_threshold``
    inside another group's projection is merged (smaller projection into
    larger). Segmenter failures skip the step with a warning.
    """
    m_proj = render_group_ids(scene, view, voxel_ids, config.tau_bg)
    pmap = render_point_map(scene, view, config.tau_bg)
    visible, sizes = np.unique(m_proj[m_proj > 0], return_counts=True)
    size_of = dict(zip(visible.tolist(), sizes.tolist()))
    if len(visible) < 2:
        return []
    region_centers = {}
    for g in visible.tolist():
        ys, xs = np.nonzero(m_proj == g)
        cy, cx = ys.mean(), xs.mean()
        k = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        region_centers[g] = (int(xs[k]), int(ys[k]))

    proposals: list[tuple[int, int]] = []
    rng = stream(config.seed, "merge-prompts", view_index)
    for a in visible.tolist():
        # prompt from the region's interior: the projection's one-pixel halo
        # can overlap neighbouring surfaces and mislead the segmenter
        region = m_proj == a
        interior = ndimage.binary_erosion(region)
        ys, xs = np.nonzero(interior if interior.any() else region)
        n_pos = min(config.n_positive_prompts, len(ys))
        pick = rng.choice(len(ys), size=n_pos, replace=False)
        prompts = [PointPrompt(u=int(xs[i]), v=int(ys[i]), positive=True) for i in sorted(pick)]
        others = [g for g in visible.tolist() if g != a]
        for g in sorted(others, key=lambda g: (-size_of[g], g))[: config.n_negative_prompts]:
            u, v = region_centers[g]
            prompts.append(PointPrompt(u=u, v=v, positive=False))
        values = np.zeros(m_proj.shape, np.int8)
        values[m_proj == a] = 20
        values[(m_proj > 0) & (m_proj != a)] = -20
        try:
            result = segmenter.segment_prompted(image, view_index, prompts, MaskPrompt(values))
        except SegmenterError as exc:
            log.warning("merge step skipped at view %d: %s", view_index, exc)
            return []
        if result.no_object or not result.mask.any():
            continue
        area = float(result.mask.sum())
        # prompt-consistency guard: the returned mask must re-cover most of
        # the prompting group's own region, otherwise the prompts drifted
        # onto a different surface and containment would be meaningless
        own_cover = float((result.mask & region).sum()) / size_of[a]
        if own_cover < 0.8:
            continue
        # the mask must describe the surface this group actually sits on: a
        # fragment's centroid lies inside the object the mask came back as
        mask_valid = result.mask & pmap.validity
        if mask_valid.any():
            mask_centroid = pmap.positions[mask_valid].mean(axis=0)
            anchor = dictionary.entries[dictionary.resolve(a)].centroid
            if float(np.linalg.norm(mask_centroid - anchor)) > config.merge_centroid_radius:
                continue
        for b in others:
            containment = float((result.mask & (m_proj == b)).sum()) / area
            if containment >= config.containment_merge_threshold:
                small, big = (a, b) if size_of[a] <= size_of[b] else (b, a)
                proposals.append((small, big))
                break

    applied = []
    for small, big in proposals:
        s, b = dictionary.resolve(small), dictionary.resolve(big)
        if s != b:
            dictionary.merge(s, b)
            applied.append((s, b))
    return applied


@dataclass
class GroupingResult:
    field: GroupField
    dictionary: GroupDictionary
    voxel_ids: np.ndarray  # (N,) int32, 0 = unvoted
    merges: list[tuple[int, int]] = field(default_factory=list)


def run_grouping(scene: VoxelScene, views: list[CameraView], segmenter: Segmenter,
                 config: GroupingConfig | None = None,
                 images: list[np.ndarray] | None = None) -> GroupingResult:
    """Full progressive grouping over the views.

    View 1 seeds (F, W) and the dictionary directly; every later view is
    matched against the projected grouping, optionally merge-checked, and
    lifted. The final per-voxel ids come from the nearest-centroid vote
    after the last view.
    """
    if not views:
        raise GroupingError("at least one view is required")
    config = config or GroupingConfig()
    stride = max(1, -(-len(views) // config.max_views))
    indices = list(range(0, len(views), stride))

    gfield = GroupField.zeros(scene.n_voxels)
    dictionary = GroupDictionary()
    merges: list[tuple[int, int]] = []

    for step, vi in enumerate(indices):
        view = views[vi]
        image = images[vi] if images is not None else None
        raw = segmenter.segment(image, vi)
        pmap = render_point_map(scene, view, config.tau_bg)
        cents = compute_instance_centroids(raw, pmap, config.min_instance_pixels)

        if step == 0:
            if not cents:
                raise GroupingError("no instances in first view")
            relabeled = np.zeros_like(raw)
            counts = instance_pixel_counts(raw, pmap)
            for k in sorted(cents):
                gid = dictionary.add(cents[k], counts[k])
                relabeled[raw == k] = gid
        else:
            current = assign_voxel_ids(gfield, dictionary)
            m_proj = render_group_ids(scene, view, current, config.tau_bg)
            filtered = np.where(np.isin(raw, list(cents)), raw, 0)
            match = match_masks(m_proj, filtered, config.iou_match_threshold,
                                dictionary, config.min_instance_pixels,
                                config.proj_containment_match)
            counts = instance_pixel_counts(raw, pmap)
            for n, gid in match.mapping.items():
                if gid == 0 or n not in cents:
                    continue
                if gid in match.fresh:
                    # register the fresh instance at its per-view centroid
                    dictionary.entries[gid] = GroupEntry(np.asarray(cents[n], float).copy(),
                                                         float(counts[n]))
                else:
                    dictionary.update(gid, cents[n], counts[n])
            relabeled = match.relabeled
            if config.merge_enabled and step % config.merge_every == 0:
                current = assign_voxel_ids(gfield, dictionary)
                step_merges = merge_step(scene, view, vi, current, dictionary,
                                         segmenter, config, image)
                merges.extend(step_merges)
            if dictionary.alias:
                relabeled = np.vectorize(lambda g: dictionary.resolve(int(g)) if g else 0)(relabeled)

        final_cents = compute_instance_centroids(relabeled, pmap, 1)
        lift_masks(scene, view, relabeled, final_cents, gfield)

    voxel_ids = assign_voxel_ids(gfield, dictionary)
    return GroupingResult(field=gfield, dictionary=dictionary, voxel_ids=voxel_ids, merges=merges)
