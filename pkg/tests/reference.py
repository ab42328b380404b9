"""Independent brute-force reference implementations used as test oracles.

Nothing here shares code with the package renderer or metrics: rays are
slab-tested against every voxel, boundary bands use per-pixel distance
minimization, k-NN uses exhaustive sorting, and ARI counts pairs directly.
"""
from __future__ import annotations

import math

import numpy as np

EARLY_STOP_T = 1.0e-4


def ray_hits_reference(scene, origin, direction):
    """All voxel intersections of one ray, front to back, with alpha
    compositing weights. Returns (indices, lengths, alphas, weights)."""
    origin = np.asarray(origin, np.float64).reshape(3)
    direction = np.asarray(direction, np.float64).reshape(3)
    direction = direction / np.linalg.norm(direction)
    centers = scene.centers.astype(np.float64)
    half = scene.sizes.astype(np.float64)[:, None] * 0.5
    lo, hi = centers - half, centers + half
    hits = []
    for v in range(scene.n_voxels):
        t0, t1 = -np.inf, np.inf
        miss = False
        for a in range(3):
            d, o = direction[a], origin[a]
            if abs(d) < 1e-300:
                if o < lo[v, a] or o > hi[v, a]:
                    miss = True
                    break
            else:
                ta, tb = (lo[v, a] - o) / d, (hi[v, a] - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                t0, t1 = max(t0, ta), min(t1, tb)
        if miss or t1 <= t0:
            continue
        entry = max(t0, 0.0)
        seg = t1 - entry
        if seg <= 1e-12:
            continue
        hits.append((entry, seg, v))
    hits.sort(key=lambda h: h[0])
    dens = scene.densities.astype(np.float64)
    T = 1.0
    idx, lengths, alphas, weights = [], [], [], []
    for entry, seg, v in hits:
        a = 1.0 - math.exp(-dens[v] * seg)
        idx.append(v)
        lengths.append(seg)
        alphas.append(a)
        weights.append(a * T)
        T *= 1.0 - a
        if T < EARLY_STOP_T:
            break
    return (np.array(idx, np.int64), np.array(lengths), np.array(alphas), np.array(weights))


def pixel_color_reference(scene, view, x, y):
    d = view.ray_directions()[y, x]
    idx, _, _, w = ray_hits_reference(scene, view.origin, d)
    colors = scene.colors.astype(np.float64)
    return (w[:, None] * colors[idx]).sum(axis=0) if len(idx) else np.zeros(3)


def pixel_point_reference(scene, view, x, y, tau_bg):
    d = view.ray_directions()[y, x]
    idx, _, _, w = ray_hits_reference(scene, view.origin, d)
    tw = w.sum()
    if tw < tau_bg:
        return None, tw
    centers = scene.centers.astype(np.float64)
    return (w[:, None] * centers[idx]).sum(axis=0) / tw, tw


def pixel_group_id_reference(scene, view, voxel_ids, tau_bg, x, y):
    d = view.ray_directions()[y, x]
    idx, _, _, w = ray_hits_reference(scene, view.origin, d)
    if w.sum() < tau_bg:
        return 0
    acc = {}
    for v, wv in zip(idx, w):
        gid = int(voxel_ids[v])
        if gid >= 1:
            acc[gid] = acc.get(gid, 0.0) + wv
    if not acc:
        return 0
    return min(acc, key=lambda g: (-acc[g], g))


def lift_reference(scene, view, mask, centroids):
    """Explicit double sum over (pixel, voxel) pairs of the vote lift."""
    F = np.zeros((scene.n_voxels, 3))
    W = np.zeros(scene.n_voxels)
    dirs = view.ray_directions()
    for y in range(view.height):
        for x in range(view.width):
            k = int(mask[y, x])
            if k < 1 or k not in centroids:
                continue
            idx, _, _, w = ray_hits_reference(scene, view.origin, dirs[y, x])
            for v, wv in zip(idx, w):
                F[v] += wv * np.asarray(centroids[k], float)
                W[v] += wv
    return F, W


def boundary_band_reference(mask, d):
    """Foreground pixels within Euclidean distance d of any background pixel
    (image border counts as background)."""
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    bg = [(y, x) for y in range(h) for x in range(w) if not mask[y, x]]
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            dist2 = min(
                min(((y - by) ** 2 + (x - bx) ** 2 for by, bx in bg), default=np.inf),
                min(y + 1, h - y, x + 1, w - x) ** 2,
            )
            out[y, x] = dist2 <= d * d
    return out


def boundary_iou_reference(a, b, d):
    ba = boundary_band_reference(a, d)
    bb = boundary_band_reference(b, d)
    union = (ba | bb).sum()
    if union == 0:
        return 1.0
    return float((ba & bb).sum()) / union


def knn_reference(points, voxel_positions, voxel_classes, k):
    """Exhaustive-sort k-NN majority labels, ties to the smallest class."""
    points = np.asarray(points, float).reshape(-1, 3)
    vox = np.asarray(voxel_positions, float).reshape(-1, 3)
    classes = np.asarray(voxel_classes).ravel()
    out = []
    for p in points:
        order = np.argsort(((vox - p) ** 2).sum(axis=1), kind="stable")[: min(k, len(vox))]
        labels = classes[order]
        uniq = sorted(set(labels.tolist()))
        counts = {u: int((labels == u).sum()) for u in uniq}
        out.append(min(uniq, key=lambda u: (-counts[u], u)))
    return np.array(out, classes.dtype)


def ari_reference(pred, gt):
    """Pair-counting ARI over indices labeled in both partitions."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    sel = (pred != 0) & (gt != 0)
    p, g = pred[sel], gt[sel]
    n = len(p)
    a = b = c = d = 0
    for i in range(n):
        for j in range(i + 1, n):
            sp = p[i] == p[j]
            sg = g[i] == g[j]
            if sp and sg:
                a += 1
            elif sp:
                b += 1
            elif sg:
                c += 1
            else:
                d += 1
    denom = (a + b) * (b + d) + (a + c) * (c + d)
    if denom == 0:
        return 1.0
    return 2.0 * (a * d - b * c) / denom
