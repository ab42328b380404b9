"""Ray traversal and renderers over sparse voxel scenes.

All renderers share one traversal core: a uniform acceleration grid is walked
cell by cell (Amanatides-Woo), candidate voxels are slab-tested exactly, hits
are sorted by entry depth, and weights follow the classical front-to-back
alpha compositing recurrence with alpha = 1 - exp(-density * chord_length).
Traversal stops once transmittance drops below ``EARLY_STOP_T``.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .scene import PointMap, RayHits, VoxelScene, CameraView

EARLY_STOP_T = 1.0e-4
_MAX_HITS = 8192


class RenderError(ValueError):
    pass


@njit(cache=True)
def _build_grid(lo, hi, bmin, cell, dims):
    n = lo.shape[0]
    ncell = dims[0] * dims[1] * dims[2]
    counts = np.zeros(ncell, np.int64)
    c0 = np.empty((n, 3), np.int64)
    c1 = np.empty((n, 3), np.int64)
    for i in range(n):
        for a in range(3):
            a0 = int(math.floor((lo[i, a] - bmin[a]) / cell))
            a1 = int(math.floor((hi[i, a] - bmin[a]) / cell))
            if a0 < 0:
                a0 = 0
            if a1 > dims[a] - 1:
                a1 = dims[a] - 1
            if a1 < a0:
                a1 = a0
            c0[i, a] = a0
            c1[i, a] = a1
    for i in range(n):
        for x in range(c0[i, 0], c1[i, 0] + 1):
            for y in range(c0[i, 1], c1[i, 1] + 1):
                for z in range(c0[i, 2], c1[i, 2] + 1):
                    counts[(x * dims[1] + y) * dims[2] + z] += 1
    cell_start = np.zeros(ncell + 1, np.int64)
    for c in range(ncell):
        cell_start[c + 1] = cell_start[c] + counts[c]
    fill = cell_start[:-1].copy()
    items = np.empty(cell_start[-1], np.int64)
    for i in range(n):
        for x in range(c0[i, 0], c1[i, 0] + 1):
            for y in range(c0[i, 1], c1[i, 1] + 1):
                for z in range(c0[i, 2], c1[i, 2] + 1):
                    c = (x * dims[1] + y) * dims[2] + z
                    items[fill[c]] = i
                    fill[c] += 1
    return cell_start, items


@njit(cache=True)
def _collect_hits(ox, oy, oz, dx, dy, dz, bmin, cell, dims, cell_start, cell_items,
                  lo, hi, active, stamp, pix, t_buf, l_buf, i_buf):
    """Gather (entry_t, chord_length, voxel) hits along one ray, unsorted."""
    # clip ray against the grid bounding box
    t0 = -1.0e300
    t1 = 1.0e300
    o3 = (ox, oy, oz)
    d3 = (dx, dy, dz)
    for a in range(3):
        g0 = bmin[a]
        g1 = bmin[a] + cell * dims[a]
        d = d3[a]
        o = o3[a]
        if abs(d) < 1e-300:
            if o < g0 or o > g1:
                return 0
        else:
            ta = (g0 - o) / d
            tb = (g1 - o) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t0 < 0.0:
        t0 = 0.0
    if t1 <= t0:
        return 0
    eps = 1e-9 * (1.0 + cell)
    px = ox + (t0 + eps) * dx
    py = oy + (t0 + eps) * dy
    pz = oz + (t0 + eps) * dz
    ix = int(math.floor((px - bmin[0]) / cell))
    iy = int(math.floor((py - bmin[1]) / cell))
    iz = int(math.floor((pz - bmin[2]) / cell))
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if ix > dims[0] - 1:
        ix = dims[0] - 1
    if iy > dims[1] - 1:
        iy = dims[1] - 1
    if iz > dims[2] - 1:
        iz = dims[2] - 1
    sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
    sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
    sz = 1 if dz > 0 else (-1 if dz < 0 else 0)
    big = 1.0e300
    if sx != 0:
        tnx = ((bmin[0] + (ix + (1 if sx > 0 else 0)) * cell) - ox) / dx
        tdx = cell / abs(dx)
    else:
        tnx = big
        tdx = big
    if sy != 0:
        tny = ((bmin[1] + (iy + (1 if sy > 0 else 0)) * cell) - oy) / dy
        tdy = cell / abs(dy)
    else:
        tny = big
        tdy = big
    if sz != 0:
        tnz = ((bmin[2] + (iz + (1 if sz > 0 else 0)) * cell) - oz) / dz
        tdz = cell / abs(dz)
    else:
        tnz = big
        tdz = big
    n = 0
    cap = t_buf.shape[0]
    while True:
        c = (ix * dims[1] + iy) * dims[2] + iz
        for k in range(cell_start[c], cell_start[c + 1]):
            v = cell_items[k]
            if stamp[v] == pix:
                continue
            stamp[v] = pix
            if active[v] == 0:
                continue
            vt0 = -1.0e300
            vt1 = 1.0e300
            miss = False
            for a in range(3):
                d = d3[a]
                o = o3[a]
                la = lo[v, a]
                ha = hi[v, a]
                if abs(d) < 1e-300:
                    if o < la or o > ha:
                        miss = True
                        break
                else:
                    ta = (la - o) / d
                    tb = (ha - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > vt0:
                        vt0 = ta
                    if tb < vt1:
                        vt1 = tb
            if miss or vt1 <= vt0:
                continue
            entry = vt0 if vt0 > 0.0 else 0.0
            seg = vt1 - entry
            if seg <= 1e-12:
                continue
            if n < cap:
                t_buf[n] = entry
                l_buf[n] = seg
                i_buf[n] = v
                n += 1
        # step to the next cell
        if tnx <= tny and tnx <= tnz:
            if tnx >= t1:
                break
            ix += sx
            if ix < 0 or ix >= dims[0]:
                break
            tnx += tdx
        elif tny <= tnz:
            if tny >= t1:
                break
            iy += sy
            if iy < 0 or iy >= dims[1]:
                break
            tny += tdy
        else:
            if tnz >= t1:
                break
            iz += sz
            if iz < 0 or iz >= dims[2]:
                break
            tnz += tdz
    return n


@njit(cache=True)
def _sort_hits(t_buf, l_buf, i_buf, n):
    for i in range(1, n):
        t = t_buf[i]
        l = l_buf[i]
        v = i_buf[i]
        j = i - 1
        while j >= 0 and t_buf[j] > t:
            t_buf[j + 1] = t_buf[j]
            l_buf[j + 1] = l_buf[j]
            i_buf[j + 1] = i_buf[j]
            j -= 1
        t_buf[j + 1] = t
        l_buf[j + 1] = l
        i_buf[j + 1] = v


@njit(cache=True)
def _k_color(origin, dirs, bmin, cell, dims, cs, ci, lo, hi, dens, colors, active, out, outw):
    H, W = dirs.shape[0], dirs.shape[1]
    n_vox = lo.shape[0]
    stamp = np.full(n_vox, -1, np.int64)
    tb = np.empty(_MAX_HITS, np.float64)
    lb = np.empty(_MAX_HITS, np.float64)
    ib = np.empty(_MAX_HITS, np.int64)
    pix = 0
    for y in range(H):
        for x in range(W):
            n = _collect_hits(origin[0], origin[1], origin[2],
                              dirs[y, x, 0], dirs[y, x, 1], dirs[y, x, 2],
                              bmin, cell, dims, cs, ci, lo, hi, active, stamp, pix, tb, lb, ib)
            pix += 1
            _sort_hits(tb, lb, ib, n)
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            tw = 0.0
            for h in range(n):
                v = ib[h]
                a = 1.0 - math.exp(-dens[v] * lb[h])
                w = a * T
                r += w * colors[v, 0]
                g += w * colors[v, 1]
                b += w * colors[v, 2]
                tw += w
                T *= 1.0 - a
                if T < EARLY_STOP_T:
                    break
            out[y, x, 0] = r
            out[y, x, 1] = g
            out[y, x, 2] = b
            outw[y, x] = tw


@njit(cache=True)
def _k_point(origin, dirs, bmin, cell, dims, cs, ci, lo, hi, dens, centers, active, out, outw):
    H, W = dirs.shape[0], dirs.shape[1]
    n_vox = lo.shape[0]
    stamp = np.full(n_vox, -1, np.int64)
    tb = np.empty(_MAX_HITS, np.float64)
    lb = np.empty(_MAX_HITS, np.float64)
    ib = np.empty(_MAX_HITS, np.int64)
    pix = 0
    for y in range(H):
        for x in range(W):
            n = _collect_hits(origin[0], origin[1], origin[2],
                              dirs[y, x, 0], dirs[y, x, 1], dirs[y, x, 2],
                              bmin, cell, dims, cs, ci, lo, hi, active, stamp, pix, tb, lb, ib)
            pix += 1
            _sort_hits(tb, lb, ib, n)
            T = 1.0
            px = 0.0
            py = 0.0
            pz = 0.0
            tw = 0.0
            for h in range(n):
                v = ib[h]
                a = 1.0 - math.exp(-dens[v] * lb[h])
                w = a * T
                px += w * centers[v, 0]
                py += w * centers[v, 1]
                pz += w * centers[v, 2]
                tw += w
                T *= 1.0 - a
                if T < EARLY_STOP_T:
                    break
            out[y, x, 0] = px
            out[y, x, 1] = py
            out[y, x, 2] = pz
            outw[y, x] = tw


@njit(cache=True)
def _k_group(origin, dirs, bmin, cell, dims, cs, ci, lo, hi, dens, vox_ids, n_labels,
             active, tau_bg, out):
    H, W = dirs.shape[0], dirs.shape[1]
    n_vox = lo.shape[0]
    stamp = np.full(n_vox, -1, np.int64)
    tb = np.empty(_MAX_HITS, np.float64)
    lb = np.empty(_MAX_HITS, np.float64)
    ib = np.empty(_MAX_HITS, np.int64)
    acc = np.zeros(n_labels, np.float64)
    astamp = np.full(n_labels, -1, np.int64)
    touched = np.empty(n_labels, np.int64)
    pix = 0
    for y in range(H):
        for x in range(W):
            n = _collect_hits(origin[0], origin[1], origin[2],
                              dirs[y, x, 0], dirs[y, x, 1], dirs[y, x, 2],
                              bmin, cell, dims, cs, ci, lo, hi, active, stamp, pix, tb, lb, ib)
            _sort_hits(tb, lb, ib, n)
            T = 1.0
            tw = 0.0
            ntouch = 0
            for h in range(n):
                v = ib[h]
                a = 1.0 - math.exp(-dens[v] * lb[h])
                w = a * T
                gid = vox_ids[v]
                if astamp[gid] != pix:
                    astamp[gid] = pix
                    acc[gid] = 0.0
                    touched[ntouch] = gid
                    ntouch += 1
                acc[gid] += w
                tw += w
                T *= 1.0 - a
                if T < EARLY_STOP_T:
                    break
            pix += 1
            # label 0 never competes: unlabeled voxels contribute to the
            # background test (tw) but a pixel on a labeled surface should
            # show that label even when unlabeled voxels soak up weight
            label = 0
            if tw >= tau_bg:
                best = -1.0
                best_id = 0
                for k in range(ntouch):
                    gid = touched[k]
                    if gid == 0:
                        continue
                    w = acc[gid]
                    if w > best or (w == best and gid < best_id):
                        best = w
                        best_id = gid
                label = best_id
            out[y, x] = label


@njit(cache=True)
def _k_total_weight(origin, dirs, bmin, cell, dims, cs, ci, lo, hi, dens, active, outw):
    H, W = dirs.shape[0], dirs.shape[1]
    n_vox = lo.shape[0]
    stamp = np.full(n_vox, -1, np.int64)
    tb = np.empty(_MAX_HITS, np.float64)
    lb = np.empty(_MAX_HITS, np.float64)
    ib = np.empty(_MAX_HITS, np.int64)
    pix = 0
    for y in range(H):
        for x in range(W):
            n = _collect_hits(origin[0], origin[1], origin[2],
                              dirs[y, x, 0], dirs[y, x, 1], dirs[y, x, 2],
                              bmin, cell, dims, cs, ci, lo, hi, active, stamp, pix, tb, lb, ib)
            pix += 1
            _sort_hits(tb, lb, ib, n)
            T = 1.0
            tw = 0.0
            for h in range(n):
                v = ib[h]
                a = 1.0 - math.exp(-dens[v] * lb[h])
                tw += a * T
                T *= 1.0 - a
                if T < EARLY_STOP_T:
                    break
            outw[y, x] = tw


@njit(cache=True)
def _k_lift(origin, dirs, bmin, cell, dims, cs, ci, lo, hi, dens, active,
            mask, cents, has_cent, F, W_acc):
    H, Wd = dirs.shape[0], dirs.shape[1]
    n_vox = lo.shape[0]
    stamp = np.full(n_vox, -1, np.int64)
    tb = np.empty(_MAX_HITS, np.float64)
    lb = np.empty(_MAX_HITS, np.float64)
    ib = np.empty(_MAX_HITS, np.int64)
    n_labels = has_cent.shape[0]
    pix = 0
    for y in range(H):
        for x in range(Wd):
            pix += 1
            k = mask[y, x]
            if k <= 0 or k >= n_labels or has_cent[k] == 0:
                continue
            n = _collect_hits(origin[0], origin[1], origin[2],
                              dirs[y, x, 0], dirs[y, x, 1], dirs[y, x, 2],
                              bmin, cell, dims, cs, ci, lo, hi, active, stamp, pix - 1, tb, lb, ib)
            _sort_hits(tb, lb, ib, n)
            T = 1.0
            for h in range(n):
                v = ib[h]
                a = 1.0 - math.exp(-dens[v] * lb[h])
                w = a * T
                F[v, 0] += w * cents[k, 0]
                F[v, 1] += w * cents[k, 1]
                F[v, 2] += w * cents[k, 2]
                W_acc[v] += w
                T *= 1.0 - a
                if T < EARLY_STOP_T:
                    break


@njit(cache=True)
def _k_single_ray(origin, direction, bmin, cell, dims, cs, ci, lo, hi, dens, active,
                  t_buf, l_buf, i_buf, a_buf, w_buf):
    stamp = np.full(lo.shape[0], -1, np.int64)
    n = _collect_hits(origin[0], origin[1], origin[2],
                      direction[0], direction[1], direction[2],
                      bmin, cell, dims, cs, ci, lo, hi, active, stamp, 0, t_buf, l_buf, i_buf)
    _sort_hits(t_buf, l_buf, i_buf, n)
    T = 1.0
    kept = 0
    for h in range(n):
        v = i_buf[h]
        a = 1.0 - math.exp(-dens[v] * l_buf[h])
        a_buf[h] = a
        w_buf[h] = a * T
        T *= 1.0 - a
        kept += 1
        if T < EARLY_STOP_T:
            break
    return kept


class _Accel:
    """Per-scene acceleration grid (float64 geometry + CSR cell table)."""

    def __init__(self, scene: VoxelScene):
        centers = scene.centers.astype(np.float64)
        half = scene.sizes.astype(np.float64)[:, None] * 0.5
        self.lo = np.ascontiguousarray(centers - half)
        self.hi = np.ascontiguousarray(centers + half)
        self.dens = scene.densities.astype(np.float64)
        self.colors = scene.colors.astype(np.float64)
        self.centers = centers
        cell = float(scene.sizes.max())
        bmin = self.lo.min(axis=0) - 1e-9
        bmax = self.hi.max(axis=0) + 1e-9
        dims = np.maximum(np.ceil((bmax - bmin) / cell).astype(np.int64), 1)
        self.bmin = np.ascontiguousarray(bmin)
        self.cell = cell
        self.dims = np.ascontiguousarray(dims)
        self.cell_start, self.cell_items = _build_grid(self.lo, self.hi, self.bmin, cell, dims)
        self.all_active = np.ones(scene.n_voxels, np.uint8)


def _accel(scene: VoxelScene) -> _Accel:
    acc = getattr(scene, "_render_accel", None)
    if acc is None:
        acc = _Accel(scene)
        scene._render_accel = acc
    return acc


def traverse_ray(scene: VoxelScene, origin, direction) -> RayHits:
    """Intersect one ray with the scene, front to back with compositing weights."""
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise RenderError("ray direction must be non-zero")
    direction = direction / norm
    acc = _accel(scene)
    tb = np.empty(_MAX_HITS, np.float64)
    lb = np.empty(_MAX_HITS, np.float64)
    ib = np.empty(_MAX_HITS, np.int64)
    ab = np.empty(_MAX_HITS, np.float64)
    wb = np.empty(_MAX_HITS, np.float64)
    kept = _k_single_ray(origin, direction, acc.bmin, acc.cell, acc.dims,
                         acc.cell_start, acc.cell_items, acc.lo, acc.hi, acc.dens,
                         acc.all_active, tb, lb, ib, ab, wb)
    return RayHits(
        voxel_indices=ib[:kept].copy(),
        segment_lengths=lb[:kept].copy(),
        alphas=ab[:kept].copy(),
        weights=wb[:kept].copy(),
    )


def render_color(scene: VoxelScene, view: CameraView) -> np.ndarray:
    """Alpha-composited color image, (H, W, 3) float64 in [0, 1]."""
    acc = _accel(scene)
    dirs = view.ray_directions()
    out = np.zeros((view.height, view.width, 3), np.float64)
    outw = np.zeros((view.height, view.width), np.float64)
    _k_color(view.origin, dirs, acc.bmin, acc.cell, acc.dims, acc.cell_start, acc.cell_items,
             acc.lo, acc.hi, acc.dens, acc.colors, acc.all_active, out, outw)
    return out


def render_point_map(scene: VoxelScene, view: CameraView, tau_bg: float = 0.5) -> PointMap:
    """Weighted-mean ray-hit world position per pixel, valid where the
    accumulated weight reaches ``tau_bg``."""
    if not 0.0 < tau_bg <= 1.0:
        raise RenderError("tau_bg must lie in (0, 1]")
    acc = _accel(scene)
    dirs = view.ray_directions()
    out = np.zeros((view.height, view.width, 3), np.float64)
    outw = np.zeros((view.height, view.width), np.float64)
    _k_point(view.origin, dirs, acc.bmin, acc.cell, acc.dims, acc.cell_start, acc.cell_items,
             acc.lo, acc.hi, acc.dens, acc.centers, acc.all_active, out, outw)
    validity = outw >= tau_bg
    positions = np.zeros_like(out)
    np.divide(out, outw[..., None], out=positions, where=outw[..., None] > 0)
    positions[~validity] = 0.0
    return PointMap(positions=positions, validity=validity)


def render_group_ids(scene: VoxelScene, view: CameraView, voxel_ids: np.ndarray,
                     tau_bg: float = 0.5) -> np.ndarray:
    """Project per-voxel group ids into the view.

    Each pixel takes the id with the largest accumulated blending weight
    along its ray (ties to the smaller id); 0 where the ray is background.
    """
    voxel_ids = np.ascontiguousarray(voxel_ids, dtype=np.int64)
    if voxel_ids.shape != (scene.n_voxels,):
        raise RenderError("voxel_ids must have one entry per voxel")
    if voxel_ids.min() < 0:
        raise RenderError("voxel_ids must be non-negative")
    acc = _accel(scene)
    dirs = view.ray_directions()
    out = np.zeros((view.height, view.width), np.int64)
    n_labels = int(voxel_ids.max()) + 1
    _k_group(view.origin, dirs, acc.bmin, acc.cell, acc.dims, acc.cell_start, acc.cell_items,
             acc.lo, acc.hi, acc.dens, voxel_ids, n_labels, acc.all_active, tau_bg, out)
    return out.astype(np.int32)


def render_group_mask(scene: VoxelScene, view: CameraView, selected_ids, voxel_ids,
                      tau_mask: float = 0.5) -> np.ndarray:
    """Binary mask of the selected groups: only their voxels are traversed;
    a pixel is set where their accumulated weight reaches ``tau_mask``."""
    if not 0.0 < tau_mask <= 1.0:
        raise RenderError("tau_mask must lie in (0, 1]")
    voxel_ids = np.ascontiguousarray(voxel_ids, dtype=np.int64)
    if voxel_ids.shape != (scene.n_voxels,):
        raise RenderError("voxel_ids must have one entry per voxel")
    selected = sorted(int(i) for i in selected_ids)
    if not selected:
        raise RenderError("selected_ids must be non-empty")
    known = set(np.unique(voxel_ids).tolist())
    unknown = [i for i in selected if i not in known]
    if unknown:
        raise RenderError(f"unknown group ids: {unknown}")
    acc = _accel(scene)
    active = np.ascontiguousarray(np.isin(voxel_ids, selected).astype(np.uint8))
    dirs = view.ray_directions()
    outw = np.zeros((view.height, view.width), np.float64)
    _k_total_weight(view.origin, dirs, acc.bmin, acc.cell, acc.dims, acc.cell_start,
                    acc.cell_items, acc.lo, acc.hi, acc.dens, active, outw)
    return outw >= tau_mask


def accumulate_group_votes(scene: VoxelScene, view: CameraView, mask: np.ndarray,
                           centroids: dict[int, np.ndarray], F: np.ndarray,
                           W: np.ndarray) -> None:
    """One rendering pass of centroid voting: for every pixel labeled k,
    add weight * centroid_k into F and weight into W for every voxel the
    pixel's ray blends through. Mutates F and W in place."""
    mask = np.ascontiguousarray(mask, dtype=np.int64)
    if mask.shape != (view.height, view.width):
        raise RenderError("mask dimensions must match the view")
    acc = _accel(scene)
    n_labels = int(mask.max()) + 1 if mask.size else 1
    cents = np.zeros((max(n_labels, 1), 3), np.float64)
    has = np.zeros(max(n_labels, 1), np.uint8)
    for k, c in centroids.items():
        if 1 <= k < n_labels:
            cents[k] = np.asarray(c, dtype=np.float64)
            has[k] = 1
    dirs = view.ray_directions()
    _k_lift(view.origin, dirs, acc.bmin, acc.cell, acc.dims, acc.cell_start, acc.cell_items,
            acc.lo, acc.hi, acc.dens, acc.all_active, mask, cents, has, F, W)
