"""Generalized matching: rotations+scales, k-NN fields, pluggable descriptors.

Three extensions of the translation engine share its acceptance rule
(strict improvement) and its deterministic draw streams:

* a 4-D field over (x, y, theta, scale) whose propagation advances targets
  by the neighbor transform's linearization and whose random search shrinks
  a window in all four dimensions;
* k-nearest-neighbor fields kept as per-coordinate bounded max-heaps with
  duplicate rejection;
* matching over arbitrary fixed-length descriptor grids, either through the
  fast sum-of-squares kernels or any caller-supplied distance function.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from patchfield import _rng
from patchfield._rng import (
    PURPOSE_GNNF_INIT,
    PURPOSE_GNNF_SWEEP,
    PURPOSE_KNN_INIT,
    PURPOSE_KNN_SWEEP,
    draw_int,
    draw_pm1,
    draw_u01,
    stream_key,
)
from patchfield.annf import Nnf, SearchParams, _init_kernel, _sweep_kernel, _strip_bounds
from patchfield.core import (
    ImageBuffer,
    InputError,
    PatchGeometry,
    Rect,
    _patch_ssd,
)

_EMPTY_U8 = np.zeros((0, 0), dtype=np.uint8)
_EMPTY_I32 = np.zeros((0, 0), dtype=np.int32)
_EMPTY_ROW_I = np.zeros(0, dtype=np.int32)
_EMPTY_ROW_D = np.zeros(0, dtype=np.float64)
_EMPTY_POOL = np.zeros(0, dtype=np.int64)
_EMPTY_COORD = np.zeros(0, dtype=np.int32)
_EMPTY_ROW_KI = np.zeros((0, 0), dtype=np.int32)


# ---------------------------------------------------------------------------
# Transformed patch sampling and distance

@njit(cache=True, nogil=True, inline="always")
def _bilinear(b, px, py, ch):
    x0 = int(math.floor(px))
    y0 = int(math.floor(py))
    fx = px - x0
    fy = py - y0
    x1 = x0 + 1
    y1 = y0 + 1
    if x1 > b.shape[1] - 1:
        x1 = b.shape[1] - 1
    if y1 > b.shape[0] - 1:
        y1 = b.shape[0] - 1
    return ((1.0 - fx) * (1.0 - fy) * b[y0, x0, ch]
            + fx * (1.0 - fy) * b[y0, x1, ch]
            + (1.0 - fx) * fy * b[y1, x0, ch]
            + fx * fy * b[y1, x1, ch])


@njit(cache=True, nogil=True, inline="always")
def _footprint_half_extent(theta, s, r):
    return s * r * (abs(math.cos(theta)) + abs(math.sin(theta)))


@njit(cache=True, nogil=True)
def _gpm_dist(a, ax, ay, b, cx, cy, theta, s, p, bilinear, early):
    """SSD between A's patch and B sampled under the similarity about (cx,cy)."""
    r = p // 2
    c = a.shape[2]
    ct = math.cos(theta)
    st = math.sin(theta)
    acc = 0.0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            px = cx + s * (ct * dx - st * dy)
            py = cy + s * (st * dx + ct * dy)
            if bilinear:
                for ch in range(c):
                    d = np.float64(a[ay + dy, ax + dx, ch]) - _bilinear(b, px, py, ch)
                    acc += d * d
            else:
                xi = int(math.floor(px + 0.5))
                yi = int(math.floor(py + 0.5))
                for ch in range(c):
                    d = np.float64(a[ay + dy, ax + dx, ch]) - np.float64(b[yi, xi, ch])
                    acc += d * d
        if acc >= early:
            return acc
    return acc


@njit(cache=True, nogil=True)
def _gpm_dist_normalized(a, ax, ay, b, cx, cy, theta, s, p, bilinear):
    """As :func:`_gpm_dist` but with both patches mean/std normalized per channel.

    Uses the closed form sum((a_hat - b_hat)^2) = 2n - 2*corr so a single pass
    suffices; standard deviations are floored to keep flat patches finite.
    """
    r = p // 2
    c = a.shape[2]
    n = float(p * p)
    ct = math.cos(theta)
    st = math.sin(theta)
    acc = 0.0
    for ch in range(c):
        sa = 0.0
        saa = 0.0
        sb = 0.0
        sbb = 0.0
        sab = 0.0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                av = np.float64(a[ay + dy, ax + dx, ch])
                px = cx + s * (ct * dx - st * dy)
                py = cy + s * (st * dx + ct * dy)
                if bilinear:
                    bv = _bilinear(b, px, py, ch)
                else:
                    xi = int(math.floor(px + 0.5))
                    yi = int(math.floor(py + 0.5))
                    bv = np.float64(b[yi, xi, ch])
                sa += av
                saa += av * av
                sb += bv
                sbb += bv * bv
                sab += av * bv
        mua = sa / n
        mub = sb / n
        va = saa / n - mua * mua
        vb = sbb / n - mub * mub
        sda = math.sqrt(va) if va > 1e-8 else 1e-4
        sdb = math.sqrt(vb) if vb > 1e-8 else 1e-4
        corr = (sab - n * mua * mub) / (sda * sdb)
        term = 2.0 * n - 2.0 * corr
        if term > 0.0:
            acc += term
    return acc


def sample_transformed_patch(b: ImageBuffer, center: tuple[float, float],
                             theta: float, s: float, geom: PatchGeometry,
                             filter: str = "bilinear") -> np.ndarray:
    """p x p x C samples of `b` under the similarity transform about `center`.

    The sample for patch offset (dx, dy) sits at center + s*R(theta)@(dx, dy).
    `filter` is "bilinear" (default) or "nearest".
    """
    if filter not in ("bilinear", "nearest"):
        raise ValueError(f"filter must be bilinear or nearest, got {filter!r}")
    cx, cy = float(center[0]), float(center[1])
    r = geom.radius
    e = _footprint_half_extent(theta, s, r)
    if cx - e < 0 or cx + e > b.width - 1 or cy - e < 0 or cy + e > b.height - 1:
        raise ValueError(
            f"patch footprint at {center} (theta={theta}, s={s}) escapes the image")
    ct, st = math.cos(theta), math.sin(theta)
    out = np.empty((geom.patch_size, geom.patch_size, b.channels), dtype=np.float32)
    bilinear = filter == "bilinear"
    for j, dy in enumerate(range(-r, r + 1)):
        for i, dx in enumerate(range(-r, r + 1)):
            px = cx + s * (ct * dx - st * dy)
            py = cy + s * (st * dx + ct * dy)
            if bilinear:
                x0, y0 = int(math.floor(px)), int(math.floor(py))
                fx, fy = px - x0, py - y0
                x1, y1 = min(x0 + 1, b.width - 1), min(y0 + 1, b.height - 1)
                out[j, i] = ((1 - fx) * (1 - fy) * b.data[y0, x0]
                             + fx * (1 - fy) * b.data[y0, x1]
                             + (1 - fx) * fy * b.data[y1, x0]
                             + fx * fy * b.data[y1, x1])
            else:
                out[j, i] = b.data[int(math.floor(py + 0.5)), int(math.floor(px + 0.5))]
    return out


def transformed_patch_distance(a: ImageBuffer, a_coord: tuple[int, int],
                               b: ImageBuffer, entry: tuple[float, float, float, float],
                               geom: PatchGeometry, *, filter: str = "bilinear",
                               normalize: bool = False) -> float:
    """Distance of one generalized entry (cx, cy, theta, s); test/oracle hook."""
    ax, ay = a_coord
    cx, cy, theta, s = entry
    bilinear = filter == "bilinear"
    if normalize:
        return float(_gpm_dist_normalized(a.data, ax, ay, b.data, cx, cy,
                                          np.float64(theta), np.float64(s),
                                          geom.patch_size, bilinear))
    return float(_gpm_dist(a.data, ax, ay, b.data, cx, cy, np.float64(theta),
                           np.float64(s), geom.patch_size, bilinear, np.inf))


# ---------------------------------------------------------------------------
# Generalized 4-D field

@dataclass
class GeneralizedNnf:
    """Per-coordinate (x', y', theta, s) target transform plus distance."""

    target_x: np.ndarray
    target_y: np.ndarray
    theta: np.ndarray
    scale: np.ndarray
    dist: np.ndarray
    geom: PatchGeometry
    a_dims: tuple[int, int]
    b_dims: tuple[int, int]
    theta_range: tuple[float, float]
    scale_range: tuple[float, float]
    rng_seed: int = 0
    filter: str = "bilinear"
    normalize: bool = False
    sweep_changes: list = field(default_factory=list)

    @property
    def a_rect(self) -> Rect:
        return self.geom.valid_rect(*self.a_dims)

    def rect_view(self, arr: np.ndarray) -> np.ndarray:
        r = self.a_rect
        return arr[r.y0 : r.y1, r.x0 : r.x1]

    @property
    def valid_dist(self) -> np.ndarray:
        return self.rect_view(self.dist)


@njit(cache=True, nogil=True, inline="always")
def _gpm_center_box(theta, s, r, w, h):
    e = _footprint_half_extent(theta, s, r)
    lo_x = int(math.ceil(e))
    hi_x = int(math.floor(w - 1 - e))
    lo_y = int(math.ceil(e))
    hi_y = int(math.floor(h - 1 - e))
    return lo_x, hi_x, lo_y, hi_y


@njit(cache=True, nogil=True, inline="always")
def _gpm_eval(a, b, xx, yy, cx, cy, th, s, p, r, bilinear, normalize,
              best_x, best_y, best_th, best_s, best_d, use_early):
    """Clamp a 4-D candidate into its footprint-safe box, score, compare."""
    w = b.shape[1]
    h = b.shape[0]
    lo_x, hi_x, lo_y, hi_y = _gpm_center_box(th, s, r, w, h)
    if lo_x > hi_x or lo_y > hi_y:
        return best_x, best_y, best_th, best_s, best_d
    if cx < lo_x:
        cx = lo_x
    elif cx > hi_x:
        cx = hi_x
    if cy < lo_y:
        cy = lo_y
    elif cy > hi_y:
        cy = hi_y
    if cx == best_x and cy == best_y and th == best_th and s == best_s:
        return best_x, best_y, best_th, best_s, best_d
    if normalize:
        d = _gpm_dist_normalized(a, xx, yy, b, np.float64(cx), np.float64(cy),
                                 th, s, p, bilinear)
    else:
        early = best_d if use_early else np.inf
        d = _gpm_dist(a, xx, yy, b, np.float64(cx), np.float64(cy), th, s, p,
                      bilinear, early)
    if d < best_d:
        return cx, cy, th, s, d
    return best_x, best_y, best_th, best_s, best_d


@njit(cache=True, nogil=True)
def _gpm_init_kernel(a, b, tx, ty, tth, ts, td, p,
                     ax0, ay0, ax1, ay1, seed, level,
                     th1, th2, s1, s2, bilinear, normalize):
    r = p // 2
    w = b.shape[1]
    h = b.shape[0]
    for yy in range(ay0, ay1):
        for xx in range(ax0, ax1):
            key = stream_key(seed, PURPOSE_GNNF_INIT, level, 0, xx, yy)
            th = th1 + draw_u01(key, 0) * (th2 - th1)
            s = s1 + draw_u01(key, 1) * (s2 - s1)
            lo_x, hi_x, lo_y, hi_y = _gpm_center_box(th, s, r, w, h)
            cx = lo_x + draw_int(key, 2, hi_x - lo_x + 1)
            cy = lo_y + draw_int(key, 3, hi_y - lo_y + 1)
            tx[yy, xx] = cx
            ty[yy, xx] = cy
            tth[yy, xx] = th
            ts[yy, xx] = s
            if normalize:
                td[yy, xx] = _gpm_dist_normalized(a, xx, yy, b, np.float64(cx),
                                                  np.float64(cy), th, s, p, bilinear)
            else:
                td[yy, xx] = _gpm_dist(a, xx, yy, b, np.float64(cx), np.float64(cy),
                                       th, s, p, bilinear, np.inf)


@njit(cache=True, nogil=True)
def _gpm_sweep_kernel(a, b, tx, ty, tth, ts, td, p,
                      ax0, ay0, ax1, ay1, y_lo, y_hi,
                      sweep, level, seed, alpha, w_radius,
                      th1, th2, s1, s2, bilinear, normalize, use_early,
                      snap_tx, snap_ty, snap_th, snap_ts, snap_row):
    r = p // 2
    reverse = (sweep & 1) == 1
    changed = 0
    th_radius0 = 0.5 * (th2 - th1)
    ls_radius0 = 0.5 * (math.log(s2) - math.log(s1))
    n_rows = y_hi - y_lo
    n_cols = ax1 - ax0
    for row in range(n_rows):
        yy = (y_hi - 1 - row) if reverse else (y_lo + row)
        for col in range(n_cols):
            xx = (ax1 - 1 - col) if reverse else (ax0 + col)
            old_x = tx[yy, xx]
            old_y = ty[yy, xx]
            old_th = tth[yy, xx]
            old_s = ts[yy, xx]
            best_x = old_x
            best_y = old_y
            best_th = old_th
            best_s = old_s
            best_d = td[yy, xx]

            # propagation: neighbor target advanced by its own linearization
            for ndir in range(2):
                if not reverse:
                    if ndir == 0:
                        nx = xx - 1
                        ny = yy
                        dpx = 1.0
                        dpy = 0.0
                    else:
                        nx = xx
                        ny = yy - 1
                        dpx = 0.0
                        dpy = 1.0
                else:
                    if ndir == 0:
                        nx = xx + 1
                        ny = yy
                        dpx = -1.0
                        dpy = 0.0
                    else:
                        nx = xx
                        ny = yy + 1
                        dpx = 0.0
                        dpy = -1.0
                if nx < ax0 or nx >= ax1 or ny < ay0 or ny >= ay1:
                    continue
                if ny < y_lo or ny >= y_hi:
                    if ny != snap_row:
                        continue
                    sx = snap_tx[nx]
                    sy = snap_ty[nx]
                    sth = snap_th[nx]
                    ss = snap_ts[nx]
                else:
                    sx = tx[ny, nx]
                    sy = ty[ny, nx]
                    sth = tth[ny, nx]
                    ss = ts[ny, nx]
                ct = math.cos(sth)
                st = math.sin(sth)
                cx = sx + int(math.floor(ss * (ct * dpx - st * dpy) + 0.5))
                cy = sy + int(math.floor(ss * (st * dpx + ct * dpy) + 0.5))
                best_x, best_y, best_th, best_s, best_d = _gpm_eval(
                    a, b, xx, yy, cx, cy, sth, ss, p, r, bilinear, normalize,
                    best_x, best_y, best_th, best_s, best_d, use_early)

            # shrinking-window search over all four dimensions
            key = stream_key(seed, PURPOSE_GNNF_SWEEP, level, sweep, xx, yy)
            radius = w_radius
            th_radius = th_radius0
            ls_radius = ls_radius0
            idx = 0
            while radius >= 1.0:
                cx = int(math.floor(best_x + radius * draw_pm1(key, idx) + 0.5))
                cy = int(math.floor(best_y + radius * draw_pm1(key, idx + 1) + 0.5))
                th = best_th + th_radius * draw_pm1(key, idx + 2)
                if th < th1:
                    th = th1
                elif th > th2:
                    th = th2
                s = math.exp(math.log(best_s) + ls_radius * draw_pm1(key, idx + 3))
                if s < s1:
                    s = s1
                elif s > s2:
                    s = s2
                idx += 4
                best_x, best_y, best_th, best_s, best_d = _gpm_eval(
                    a, b, xx, yy, cx, cy, th, s, p, r, bilinear, normalize,
                    best_x, best_y, best_th, best_s, best_d, use_early)
                radius *= alpha
                th_radius *= alpha
                ls_radius *= alpha

            tx[yy, xx] = best_x
            ty[yy, xx] = best_y
            tth[yy, xx] = best_th
            ts[yy, xx] = best_s
            td[yy, xx] = best_d
            if (best_x != old_x or best_y != old_y
                    or best_th != old_th or best_s != old_s):
                changed += 1
    return changed


def compute_gnnf(a: ImageBuffer, b: ImageBuffer, geom: PatchGeometry | None = None,
                 theta_range: tuple[float, float] = (0.0, 0.0),
                 scale_range: tuple[float, float] = (1.0, 1.0),
                 params: SearchParams | None = None, *, seed: int = 0,
                 workers: int = 1, filter: str = "bilinear",
                 normalize: bool = False) -> GeneralizedNnf:
    """Field over (x, y, theta, s): rotated/scaled targets for A's patches.

    Initialization samples the 4-D box uniformly (theta and s continuous);
    propagation advances the neighbor's target by its own rotated/scaled unit
    step; random search shrinks spatial, angular, and log-scale radii together
    on the usual alpha schedule. Every stored target's transformed footprint
    lies fully inside B.
    """
    geom = geom or PatchGeometry()
    params = params or SearchParams()
    if filter not in ("bilinear", "nearest"):
        raise ValueError(f"filter must be bilinear or nearest, got {filter!r}")
    th1, th2 = float(theta_range[0]), float(theta_range[1])
    s1, s2 = float(scale_range[0]), float(scale_range[1])
    if th1 > th2:
        raise ValueError(f"theta range is inverted: {theta_range}")
    if not 0 < s1 <= s2:
        raise ValueError(f"scale range must satisfy 0 < s1 <= s2, got {scale_range}")
    if geom.valid_rect_of(a).area <= 0:
        raise InputError(f"first image {a.width}x{a.height} is smaller than the patch")
    worst = s2 * geom.radius * math.sqrt(2.0)
    if 2 * worst >= min(b.width, b.height) - 1:
        raise InputError(
            f"scale range up to {s2} makes rotated patches exceed the "
            f"{b.width}x{b.height} target image")
    if a.channels != b.channels:
        raise ValueError(f"channel mismatch: {a.channels} vs {b.channels}")

    h, w = a.height, a.width
    tx = np.full((h, w), -1, dtype=np.int32)
    ty = np.full((h, w), -1, dtype=np.int32)
    tth = np.zeros((h, w), dtype=np.float64)
    ts = np.ones((h, w), dtype=np.float64)
    td = np.full((h, w), np.inf, dtype=np.float64)
    ar = geom.valid_rect_of(a)
    bilinear = filter == "bilinear"
    _gpm_init_kernel(a.data, b.data, tx, ty, tth, ts, td, geom.patch_size,
                     ar.x0, ar.y0, ar.x1, ar.y1, seed, 0,
                     th1, th2, s1, s2, bilinear, normalize)
    f = GeneralizedNnf(tx, ty, tth, ts, td, geom, (a.width, a.height),
                       (b.width, b.height), (th1, th2), (s1, s2), seed,
                       filter, normalize)
    w_radius = _resolve_w(params, b)
    for s in range(params.iterations):
        c = _gpm_iterate(f, a, b, params, w_radius, sweep=s, workers=workers)
        f.sweep_changes.append(c)
    return f


def _resolve_w(params: SearchParams, b: ImageBuffer) -> float:
    return float(params.w) if params.w is not None else float(max(b.width, b.height))


def _gpm_iterate(f: GeneralizedNnf, a: ImageBuffer, b: ImageBuffer,
                 params: SearchParams, w_radius: float, *, sweep: int,
                 workers: int = 1) -> int:
    ar = f.a_rect
    th1, th2 = f.theta_range
    s1, s2 = f.scale_range
    bilinear = f.filter == "bilinear"
    strips = _strip_bounds(ar.y0, ar.y1, workers)
    if len(strips) == 1:
        return _gpm_sweep_kernel(
            a.data, b.data, f.target_x, f.target_y, f.theta, f.scale, f.dist,
            f.geom.patch_size, ar.x0, ar.y0, ar.x1, ar.y1,
            strips[0][0], strips[0][1], sweep, 0, f.rng_seed, params.alpha,
            w_radius, th1, th2, s1, s2, bilinear, f.normalize, params.early_stop,
            _EMPTY_ROW_I, _EMPTY_ROW_I, _EMPTY_ROW_D, _EMPTY_ROW_D, -2)
    reverse = (sweep & 1) == 1
    snaps = []
    for (y_lo, y_hi) in strips:
        row = y_hi if reverse else y_lo - 1
        if ar.y0 <= row < ar.y1:
            snaps.append((f.target_x[row].copy(), f.target_y[row].copy(),
                          f.theta[row].copy(), f.scale[row].copy(), row))
        else:
            snaps.append((_EMPTY_ROW_I, _EMPTY_ROW_I, _EMPTY_ROW_D, _EMPTY_ROW_D, -2))
    results = [0] * len(strips)

    def run(i: int) -> None:
        y_lo, y_hi = strips[i]
        stx, sty, sth, sts, row = snaps[i]
        results[i] = _gpm_sweep_kernel(
            a.data, b.data, f.target_x, f.target_y, f.theta, f.scale, f.dist,
            f.geom.patch_size, ar.x0, ar.y0, ar.x1, ar.y1, y_lo, y_hi,
            sweep, 0, f.rng_seed, params.alpha, w_radius,
            th1, th2, s1, s2, bilinear, f.normalize, params.early_stop,
            stx, sty, sth, sts, row)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(strips))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return sum(results)


def jacobian_propagate(entry: tuple[float, float, float, float],
                       delta_p: tuple[int, int]) -> tuple[int, int, float, float]:
    """Advance a neighbor's 4-D entry by its transform's linearization.

    The unit scan step is rotated by the entry's angle and stretched by its
    scale; angle and scale carry over unchanged.
    """
    x, y, theta, s = entry
    dpx, dpy = delta_p
    ct, st = math.cos(theta), math.sin(theta)
    nx = int(math.floor(x + s * (ct * dpx - st * dpy) + 0.5))
    ny = int(math.floor(y + s * (st * dpx + ct * dpy) + 0.5))
    return nx, ny, theta, s


# ---------------------------------------------------------------------------
# k-nearest-neighbor fields

@dataclass
class KnnField:
    """k best targets per coordinate, stored as a bounded max-heap.

    Slot 0 of each coordinate's k-vector holds the worst (largest) distance;
    children of slot i sit at 2i+1 and 2i+2. No two slots of one coordinate
    hold the same target.
    """

    target_x: np.ndarray  # (H, W, k) int32
    target_y: np.ndarray
    dist: np.ndarray      # (H, W, k) float64
    k: int
    geom: PatchGeometry
    a_dims: tuple[int, int]
    b_dims: tuple[int, int]
    rng_seed: int = 0
    self_matching: bool = False  # targets live in the queried image itself
    sweep_changes: list = field(default_factory=list)

    @property
    def a_rect(self) -> Rect:
        return self.geom.valid_rect(*self.a_dims)

    @property
    def b_rect(self) -> Rect:
        return self.geom.valid_rect(*self.b_dims)

    def rect_view(self, arr: np.ndarray) -> np.ndarray:
        r = self.a_rect
        return arr[r.y0 : r.y1, r.x0 : r.x1]

    def sorted_entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x, y, dist) over the valid rect, ascending by distance per coord."""
        r = self.a_rect
        d = self.rect_view(self.dist)
        order = np.argsort(d, axis=2, kind="stable")
        xs = np.take_along_axis(self.rect_view(self.target_x), order, axis=2)
        ys = np.take_along_axis(self.rect_view(self.target_y), order, axis=2)
        ds = np.take_along_axis(d, order, axis=2)
        return xs, ys, ds

    def copy(self) -> "KnnField":
        return KnnField(self.target_x.copy(), self.target_y.copy(),
                        self.dist.copy(), self.k, self.geom, self.a_dims,
                        self.b_dims, self.rng_seed, self.self_matching,
                        list(self.sweep_changes))


def _same_image(a: ImageBuffer, b: ImageBuffer) -> bool:
    return a is b or (a.data.shape == b.data.shape
                      and bool(np.array_equal(a.data, b.data)))


@njit(cache=True, nogil=True, inline="always")
def _heap_sift_down(kd, kx, ky, k, i):
    while True:
        left = 2 * i + 1
        right = left + 1
        largest = i
        if left < k and kd[left] > kd[largest]:
            largest = left
        if right < k and kd[right] > kd[largest]:
            largest = right
        if largest == i:
            return
        kd[i], kd[largest] = kd[largest], kd[i]
        kx[i], kx[largest] = kx[largest], kx[i]
        ky[i], ky[largest] = ky[largest], ky[i]
        i = largest


@njit(cache=True, nogil=True, inline="always")
def _heap_try_insert(kd, kx, ky, k, cx, cy, d):
    """Replace the root iff strictly better and the target is not present."""
    if d >= kd[0]:
        return False
    for j in range(k):
        if kx[j] == cx and ky[j] == cy:
            return False
    kd[0] = d
    kx[0] = cx
    ky[0] = cy
    _heap_sift_down(kd, kx, ky, k, 0)
    return True


@njit(cache=True, nogil=True, inline="always")
def _excluded(xx, yy, cx, cy, excl):
    return excl > 0 and abs(cx - xx) <= excl and abs(cy - yy) <= excl


@njit(cache=True, nogil=True)
def _knn_init_kernel(a, b, kx, ky, kd, p, k,
                     ax0, ay0, ax1, ay1, bx0, by0, bx1, by1,
                     seed, level, excl):
    bw = bx1 - bx0
    bh = by1 - by0
    for yy in range(ay0, ay1):
        for xx in range(ax0, ax1):
            key = stream_key(seed, PURPOSE_KNN_INIT, level, 0, xx, yy)
            cnt = 0
            idx = 0
            limit = 64 * k + 256
            while cnt < k and idx < limit:
                cx = bx0 + draw_int(key, idx, bw)
                cy = by0 + draw_int(key, idx + 1, bh)
                idx += 2
                if _excluded(xx, yy, cx, cy, excl):
                    continue
                dup = False
                for j in range(cnt):
                    if kx[yy, xx, j] == cx and ky[yy, xx, j] == cy:
                        dup = True
                        break
                if dup:
                    continue
                kx[yy, xx, cnt] = cx
                ky[yy, xx, cnt] = cy
                kd[yy, xx, cnt] = _patch_ssd(a, xx, yy, b, cx, cy, p, np.inf)
                cnt += 1
            if cnt < k:
                # deterministic fallback: raster-scan the rect for the rest
                for cy in range(by0, by1):
                    if cnt >= k:
                        break
                    for cx in range(bx0, bx1):
                        if cnt >= k:
                            break
                        if _excluded(xx, yy, cx, cy, excl):
                            continue
                        dup = False
                        for j in range(cnt):
                            if kx[yy, xx, j] == cx and ky[yy, xx, j] == cy:
                                dup = True
                                break
                        if dup:
                            continue
                        kx[yy, xx, cnt] = cx
                        ky[yy, xx, cnt] = cy
                        kd[yy, xx, cnt] = _patch_ssd(a, xx, yy, b, cx, cy, p, np.inf)
                        cnt += 1
            # heapify (max at root)
            for i in range(k // 2 - 1, -1, -1):
                _heap_sift_down(kd[yy, xx], kx[yy, xx], ky[yy, xx], k, i)


@njit(cache=True, nogil=True)
def _knn_sweep_kernel(a, b, kx, ky, kd, p, k, n_rs,
                      ax0, ay0, ax1, ay1, bx0, by0, bx1, by1,
                      y_lo, y_hi, sweep, level, seed, alpha, w, use_early,
                      excl, work_x, work_y,
                      snap_kx, snap_ky, snap_row):
    """One k-NN sweep: k propagation candidates per scan neighbor plus a
    shrinking-window random search taking n_rs samples around each stored
    neighbor at every radius (so n_rs*k samples per scale)."""
    reverse = (sweep & 1) == 1
    changed = 0
    n_rows = y_hi - y_lo
    n_cols = ax1 - ax0
    for row in range(n_rows):
        yy = (y_hi - 1 - row) if reverse else (y_lo + row)
        for col in range(n_cols):
            xx = (ax1 - 1 - col) if reverse else (ax0 + col)
            hd = kd[yy, xx]
            hx = kx[yy, xx]
            hy = ky[yy, xx]

            for ndir in range(2):
                if not reverse:
                    if ndir == 0:
                        nx = xx - 1
                        ny = yy
                        dpx = 1
                        dpy = 0
                    else:
                        nx = xx
                        ny = yy - 1
                        dpx = 0
                        dpy = 1
                else:
                    if ndir == 0:
                        nx = xx + 1
                        ny = yy
                        dpx = -1
                        dpy = 0
                    else:
                        nx = xx
                        ny = yy + 1
                        dpx = 0
                        dpy = -1
                if nx < ax0 or nx >= ax1 or ny < ay0 or ny >= ay1:
                    continue
                use_snap = False
                if ny < y_lo or ny >= y_hi:
                    if ny != snap_row:
                        continue
                    use_snap = True
                for i in range(k):
                    if use_snap:
                        cx = snap_kx[nx, i] + dpx
                        cy = snap_ky[nx, i] + dpy
                    else:
                        cx = kx[ny, nx, i] + dpx
                        cy = ky[ny, nx, i] + dpy
                    if cx < bx0:
                        cx = bx0
                    elif cx >= bx1:
                        cx = bx1 - 1
                    if cy < by0:
                        cy = by0
                    elif cy >= by1:
                        cy = by1 - 1
                    if _excluded(xx, yy, cx, cy, excl):
                        continue
                    early = hd[0] if use_early else np.inf
                    d = _patch_ssd(a, xx, yy, b, cx, cy, p, early)
                    if _heap_try_insert(hd, hx, hy, k, cx, cy, d):
                        changed += 1

            # random search around a snapshot of the current k targets
            for i in range(k):
                work_x[i] = hx[i]
                work_y[i] = hy[i]
            key = stream_key(seed, PURPOSE_KNN_SWEEP, level, sweep, xx, yy)
            radius = w
            idx = 0
            while radius >= 1.0:
                for i in range(k):
                    for _ in range(n_rs):
                        cx = int(math.floor(work_x[i] + radius * draw_pm1(key, idx) + 0.5))
                        cy = int(math.floor(work_y[i] + radius * draw_pm1(key, idx + 1) + 0.5))
                        idx += 2
                        if cx < bx0:
                            cx = bx0
                        elif cx >= bx1:
                            cx = bx1 - 1
                        if cy < by0:
                            cy = by0
                        elif cy >= by1:
                            cy = by1 - 1
                        if _excluded(xx, yy, cx, cy, excl):
                            continue
                        early = hd[0] if use_early else np.inf
                        d = _patch_ssd(a, xx, yy, b, cx, cy, p, early)
                        if _heap_try_insert(hd, hx, hy, k, cx, cy, d):
                            changed += 1
                radius *= alpha
    return changed


def compute_knn(a: ImageBuffer, b: ImageBuffer, geom: PatchGeometry | None = None,
                k: int = 8, params: SearchParams | None = None, *, seed: int = 0,
                workers: int = 1, samples_per_neighbor: int = 1,
                exclude_radius: int = 0) -> KnnField:
    """k approximate nearest targets per coordinate.

    Each coordinate keeps a bounded max-heap with distinct targets. Per sweep
    it sees k candidates from each scan neighbor and `samples_per_neighbor`
    random samples around each stored target (the sampling window starts at
    the full image and shrinks with the sweep index, never below one pixel).
    `exclude_radius` > 0 bans targets within that Chebyshev distance of the
    query coordinate — the self-matching guard.
    """
    geom = geom or PatchGeometry()
    params = params or SearchParams()
    if a.channels != b.channels:
        raise ValueError(f"channel mismatch: {a.channels} vs {b.channels}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ar = geom.valid_rect_of(a)
    br = geom.valid_rect_of(b)
    if ar.area <= 0 or br.area <= 0:
        raise InputError("image smaller than the patch")
    worst_excluded = (2 * exclude_radius + 1) ** 2 if exclude_radius > 0 else 0
    if br.area - worst_excluded < k:
        raise InputError(
            f"k={k} exceeds the {br.area - worst_excluded} distinct targets available")

    h, w = a.height, a.width
    kx = np.full((h, w, k), -1, dtype=np.int32)
    ky = np.full((h, w, k), -1, dtype=np.int32)
    kd = np.full((h, w, k), np.inf, dtype=np.float64)
    _knn_init_kernel(a.data, b.data, kx, ky, kd, geom.patch_size, k,
                     ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
                     seed, 0, exclude_radius)
    f = KnnField(kx, ky, kd, k, geom, (a.width, a.height), (b.width, b.height),
                 seed, self_matching=_same_image(a, b))
    for s in range(params.iterations):
        c = knn_iterate(f, a, b, params, sweep=s, workers=workers,
                        samples_per_neighbor=samples_per_neighbor,
                        exclude_radius=exclude_radius)
        f.sweep_changes.append(c)
    return f


def knn_iterate(f: KnnField, a: ImageBuffer, b: ImageBuffer,
                params: SearchParams | None = None, *, sweep: int = 0,
                workers: int = 1, samples_per_neighbor: int = 1,
                exclude_radius: int = 0) -> int:
    """One k-NN sweep in place; returns the number of heap insertions."""
    params = params or SearchParams()
    ar = f.a_rect
    br = f.b_rect
    w = _resolve_w(params, b)
    strips = _strip_bounds(ar.y0, ar.y1, workers)
    if len(strips) == 1:
        work_x = np.empty(f.k, dtype=np.int64)
        work_y = np.empty(f.k, dtype=np.int64)
        return _knn_sweep_kernel(
            a.data, b.data, f.target_x, f.target_y, f.dist, f.geom.patch_size,
            f.k, samples_per_neighbor,
            ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
            strips[0][0], strips[0][1], sweep, 0, f.rng_seed,
            params.alpha, w, params.early_stop, exclude_radius,
            work_x, work_y, _EMPTY_ROW_KI, _EMPTY_ROW_KI, -2)
    reverse = (sweep & 1) == 1
    snaps = []
    for (y_lo, y_hi) in strips:
        row = y_hi if reverse else y_lo - 1
        if ar.y0 <= row < ar.y1:
            snaps.append((f.target_x[row].copy(), f.target_y[row].copy(), row))
        else:
            snaps.append((_EMPTY_ROW_KI, _EMPTY_ROW_KI, -2))
    results = [0] * len(strips)

    def run(i: int) -> None:
        y_lo, y_hi = strips[i]
        skx, sky, row = snaps[i]
        work_x = np.empty(f.k, dtype=np.int64)
        work_y = np.empty(f.k, dtype=np.int64)
        results[i] = _knn_sweep_kernel(
            a.data, b.data, f.target_x, f.target_y, f.dist, f.geom.patch_size,
            f.k, samples_per_neighbor,
            ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
            y_lo, y_hi, sweep, 0, f.rng_seed,
            params.alpha, w, params.early_stop, exclude_radius,
            work_x, work_y, skx, sky, row)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(strips))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return sum(results)


def brute_force_knn(a: ImageBuffer, b: ImageBuffer, geom: PatchGeometry | None = None,
                    k: int = 8, *, exclude_radius: int = 0) -> KnnField:
    """Exact k-NN oracle: full scan keeping the k best per coordinate."""
    geom = geom or PatchGeometry()
    ar = geom.valid_rect_of(a)
    br = geom.valid_rect_of(b)
    h, w = a.height, a.width
    kx = np.full((h, w, k), -1, dtype=np.int32)
    ky = np.full((h, w, k), -1, dtype=np.int32)
    kd = np.full((h, w, k), np.inf, dtype=np.float64)
    _brute_knn_kernel(a.data, b.data, kx, ky, kd, geom.patch_size, k,
                      ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
                      exclude_radius)
    return KnnField(kx, ky, kd, k, geom, (a.width, a.height), (b.width, b.height),
                    self_matching=_same_image(a, b))


@njit(cache=True, nogil=True)
def _brute_knn_kernel(a, b, kx, ky, kd, p, k,
                      ax0, ay0, ax1, ay1, bx0, by0, bx1, by1, excl):
    for yy in range(ay0, ay1):
        for xx in range(ax0, ax1):
            hd = kd[yy, xx]
            hx = kx[yy, xx]
            hy = ky[yy, xx]
            for cy in range(by0, by1):
                for cx in range(bx0, bx1):
                    if _excluded(xx, yy, cx, cy, excl):
                        continue
                    d = _patch_ssd(a, xx, yy, b, cx, cy, p, hd[0])
                    _heap_try_insert(hd, hx, hy, k, cx, cy, d)


KNNF_MAGIC = b"KNNF"


def write_knnf(f: KnnField, path: str) -> None:
    """Binary dump like the translation field's, plus u16 k after the patch
    size; each coordinate stores its k (i16 dx, i16 dy, f32 dist) triples
    ascending by distance."""
    r = f.a_rect
    xs_s, ys_s, ds_s = f.sorted_entries()
    xs = np.arange(r.x0, r.x1, dtype=np.int32)[np.newaxis, :, np.newaxis]
    ys = np.arange(r.y0, r.y1, dtype=np.int32)[:, np.newaxis, np.newaxis]
    rec = np.empty(r.area * f.k, dtype=np.dtype([("dx", "<i2"), ("dy", "<i2"), ("d", "<f4")]))
    rec["dx"] = (xs_s - xs).reshape(-1)
    rec["dy"] = (ys_s - ys).reshape(-1)
    rec["d"] = ds_s.reshape(-1)
    with open(path, "wb") as fh:
        fh.write(KNNF_MAGIC)
        fh.write(struct.pack("<IIHH", f.a_dims[0], f.a_dims[1], f.geom.patch_size, f.k))
        fh.write(rec.tobytes())


def read_knnf(path: str, b_dims: tuple[int, int] | None = None) -> KnnField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != KNNF_MAGIC:
            raise InputError(f"{path}: not a k-NN field dump (bad magic {magic!r})")
        w, h, p, k = struct.unpack("<IIHH", fh.read(12))
        geom = PatchGeometry(p)
        r = geom.valid_rect(w, h)
        raw = fh.read(r.area * k * 8)
    if len(raw) != r.area * k * 8:
        raise InputError(f"{path}: truncated k-NN field dump")
    rec = np.frombuffer(raw, dtype=np.dtype([("dx", "<i2"), ("dy", "<i2"), ("d", "<f4")]))
    kx = np.full((h, w, k), -1, dtype=np.int32)
    ky = np.full((h, w, k), -1, dtype=np.int32)
    kd = np.full((h, w, k), np.inf, dtype=np.float64)
    xs = np.arange(r.x0, r.x1, dtype=np.int32)[np.newaxis, :, np.newaxis]
    ys = np.arange(r.y0, r.y1, dtype=np.int32)[:, np.newaxis, np.newaxis]
    kx[r.y0:r.y1, r.x0:r.x1] = rec["dx"].reshape(r.height, r.width, k) + xs
    ky[r.y0:r.y1, r.x0:r.x1] = rec["dy"].reshape(r.height, r.width, k) + ys
    kd[r.y0:r.y1, r.x0:r.x1] = rec["d"].reshape(r.height, r.width, k)
    # restore the heap layout invariant (max at slot 0)
    f = KnnField(kx, ky, kd, k, geom, (w, h), b_dims if b_dims else (w, h))
    order = np.argsort(kd[r.y0:r.y1, r.x0:r.x1], axis=2)[:, :, ::-1]
    for arr in (kx, ky, kd):
        arr[r.y0:r.y1, r.x0:r.x1] = np.take_along_axis(arr[r.y0:r.y1, r.x0:r.x1], order, axis=2)
    _reheap(kd, kx, ky, k, r.y0, r.y1, r.x0, r.x1)
    return f


@njit(cache=True, nogil=True)
def _reheap(kd, kx, ky, k, y0, y1, x0, x1):
    for yy in range(y0, y1):
        for xx in range(x0, x1):
            for i in range(k // 2 - 1, -1, -1):
                _heap_sift_down(kd[yy, xx], kx[yy, xx], ky[yy, xx], k, i)


# ---------------------------------------------------------------------------
# Descriptor matching

@dataclass
class DescriptorField:
    """A fixed-length real vector at every grid coordinate.

    `valid_rect` marks the coordinates that carry meaningful vectors (fields
    built from image patches inherit the patch margin).
    """

    data: np.ndarray  # (H, W, D) float32
    valid_rect: Rect | None = None

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"descriptor grid must be 3-D, got shape {arr.shape}")
        self.data = arr
        if self.valid_rect is None:
            self.valid_rect = Rect(0, 0, arr.shape[1], arr.shape[0])

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def raw_patch_descriptors(img: ImageBuffer, geom: PatchGeometry) -> DescriptorField:
    """Flattened p x p x C pixel values as the descriptor at each coordinate.

    Sum-of-squares distance over these vectors equals the patch distance, so
    descriptor matching with the default distance reproduces image matching.
    """
    r = geom.radius
    h, w = img.height, img.width
    d = geom.patch_size ** 2 * img.channels
    out = np.zeros((h, w, d), dtype=np.float32)
    rect = geom.valid_rect_of(img)
    for j, dy in enumerate(range(-r, r + 1)):
        for i, dx in enumerate(range(-r, r + 1)):
            base = (j * geom.patch_size + i) * img.channels
            out[rect.y0:rect.y1, rect.x0:rect.x1, base:base + img.channels] = (
                img.data[rect.y0 + dy:rect.y1 + dy, rect.x0 + dx:rect.x1 + dx])
    return DescriptorField(out, rect)


def _geom_for_rect(rect: Rect, w: int, h: int) -> PatchGeometry:
    m = rect.x0
    geom = PatchGeometry(2 * m + 1)
    if geom.valid_rect(w, h) != rect:
        raise ValueError(f"valid rect {rect} is not a symmetric patch margin of {w}x{h}")
    return geom


def match_descriptors(desc_a: DescriptorField, desc_b: DescriptorField,
                      distance_fn=None, params: SearchParams | None = None,
                      *, seed: int = 0) -> Nnf:
    """Translation matching over descriptor grids.

    With no `distance_fn` the compiled sum-of-squares path runs — identical
    to image matching when descriptors are raw pixels. A callable
    `distance_fn(vec_a, vec_b) -> float` switches to an equivalent pure-Python
    engine; the function only needs to induce a total order (asymmetry is
    fine), and early termination is skipped since only full values exist.
    """
    params = params or SearchParams()
    if desc_a.dim != desc_b.dim:
        raise ValueError(f"descriptor length mismatch: {desc_a.dim} vs {desc_b.dim}")
    ha, wa = desc_a.data.shape[:2]
    hb, wb = desc_b.data.shape[:2]
    ar = desc_a.valid_rect
    br = desc_b.valid_rect
    geom = _geom_for_rect(ar, wa, ha)
    geom_b = _geom_for_rect(br, wb, hb)
    if geom_b.patch_size != geom.patch_size:
        raise ValueError("descriptor grids carry different patch margins")
    w_radius = float(params.w) if params.w is not None else float(max(wb, hb))

    tx = np.full((ha, wa), -1, dtype=np.int32)
    ty = np.full((ha, wa), -1, dtype=np.int32)
    td = np.full((ha, wa), np.inf, dtype=np.float64)

    if distance_fn is None:
        _init_kernel(desc_a.data, desc_b.data, tx, ty, td, 1,
                     ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
                     seed, 0, _EMPTY_I32, _EMPTY_POOL, _EMPTY_COORD, _EMPTY_COORD,
                     _EMPTY_U8)
        f = Nnf(tx, ty, td, geom, (wa, ha), (wb, hb), seed)
        for s in range(params.iterations):
            c = _sweep_kernel(
                desc_a.data, desc_b.data, tx, ty, td, 1,
                ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
                ar.y0, ar.y1, s, 0, seed, params.alpha, w_radius,
                params.early_stop, _EMPTY_ROW_I, _EMPTY_ROW_I, -2,
                _EMPTY_U8, _EMPTY_I32, _EMPTY_I32, _EMPTY_U8)
            f.sweep_changes.append(c)
        return f

    # pure-Python engine for arbitrary distance functions
    da = desc_a.data
    db = desc_b.data
    for y in range(ar.y0, ar.y1):
        for x in range(ar.x0, ar.x1):
            key = _rng.py_stream_key(seed, int(_rng.PURPOSE_INIT), 0, 0, x, y)
            cx = br.x0 + _rng.py_draw_int(key, 0, br.width)
            cy = br.y0 + _rng.py_draw_int(key, 1, br.height)
            tx[y, x] = cx
            ty[y, x] = cy
            td[y, x] = float(distance_fn(da[y, x], db[cy, cx]))
    f = Nnf(tx, ty, td, geom, (wa, ha), (wb, hb), seed)
    for s in range(params.iterations):
        c = _py_descriptor_sweep(da, db, tx, ty, td, ar, br, s, seed,
                                 params.alpha, w_radius, distance_fn)
        f.sweep_changes.append(c)
    return f


def _py_descriptor_sweep(da, db, tx, ty, td, ar: Rect, br: Rect, sweep: int,
                         seed: int, alpha: float, w_radius: float, dist_fn) -> int:
    """Python mirror of the sweep kernel with a callable distance."""
    reverse = (sweep & 1) == 1
    ys = range(ar.y1 - 1, ar.y0 - 1, -1) if reverse else range(ar.y0, ar.y1)
    xs_order = (range(ar.x1 - 1, ar.x0 - 1, -1) if reverse
                else range(ar.x0, ar.x1))
    deltas = [(-1, 0, 1, 0), (0, -1, 0, 1)] if not reverse else [(1, 0, -1, 0), (0, 1, 0, -1)]
    changed = 0
    for yy in ys:
        for xx in xs_order:
            best_x, best_y, best_d = int(tx[yy, xx]), int(ty[yy, xx]), float(td[yy, xx])
            old = (best_x, best_y)
            for (ox, oy, dpx, dpy) in deltas:
                nx, ny = xx + ox, yy + oy
                if not (ar.x0 <= nx < ar.x1 and ar.y0 <= ny < ar.y1):
                    continue
                cx = int(tx[ny, nx]) + dpx
                cy = int(ty[ny, nx]) + dpy
                cx = min(max(cx, br.x0), br.x1 - 1)
                cy = min(max(cy, br.y0), br.y1 - 1)
                if (cx, cy) == (best_x, best_y):
                    continue
                d = float(dist_fn(da[yy, xx], db[cy, cx]))
                if d < best_d:
                    best_x, best_y, best_d = cx, cy, d
            key = _rng.py_stream_key(seed, int(_rng.PURPOSE_SWEEP), 0, sweep, xx, yy)
            radius = w_radius
            idx = 0
            while radius >= 1.0:
                rx = 2.0 * _rng.py_draw_u01(key, idx) - 1.0
                ry = 2.0 * _rng.py_draw_u01(key, idx + 1) - 1.0
                idx += 2
                cx = int(math.floor(best_x + radius * rx + 0.5))
                cy = int(math.floor(best_y + radius * ry + 0.5))
                cx = min(max(cx, br.x0), br.x1 - 1)
                cy = min(max(cy, br.y0), br.y1 - 1)
                radius *= alpha
                if (cx, cy) == (best_x, best_y):
                    continue
                d = float(dist_fn(da[yy, xx], db[cy, cx]))
                if d < best_d:
                    best_x, best_y, best_d = cx, cy, d
            tx[yy, xx] = best_x
            ty[yy, xx] = best_y
            td[yy, xx] = best_d
            if (best_x, best_y) != old:
                changed += 1
    return changed
