"""Translation-only randomized nearest-neighbor fields.

The field assigns every patch center in image A a target patch center in
image B plus the cached patch distance. Search alternates propagation of
neighboring matches with sampling around the current match at exponentially
shrinking radii; scan order reverses every sweep.

Optional constraint inputs thread through every search path so synthesis can
reuse the same kernels: a target-validity mask (candidates on masked-out
targets are rejected), per-pixel integer labels (a labeled query may only
match an identically labeled target), and pinned entries (never updated).
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
    PURPOSE_INIT,
    PURPOSE_SWEEP,
    draw_int,
    draw_pm1,
    stream_key,
)
from patchfield.core import (
    ImageBuffer,
    InputError,
    PatchGeometry,
    Rect,
    _patch_ssd,
    build_pyramid,
)

_EMPTY_U8 = np.zeros((0, 0), dtype=np.uint8)
_EMPTY_I32 = np.zeros((0, 0), dtype=np.int32)
_EMPTY_POOL = np.zeros(0, dtype=np.int64)
_EMPTY_COORD = np.zeros(0, dtype=np.int32)
_EMPTY_ROW_I = np.zeros(0, dtype=np.int32)


class MissingLabelError(InputError):
    """A label occurs among queries but has no valid target pixels."""

    def __init__(self, label: int):
        super().__init__(f"label {label} has no valid target pixels to match")
        self.label = label


@dataclass
class SearchParams:
    """Knobs for the randomized search.

    Parameters
    ----------
    iterations : int
        Full sweeps over the field.
    alpha : float
        Radius shrink ratio per random-search scale.
    w : float or None
        Initial random-search radius; None means the larger dimension of the
        target image.
    early_stop : bool
        Abandon candidate distance sums once they exceed the current best.
    """

    iterations: int = 5
    alpha: float = 0.5
    w: float | None = None
    early_stop: bool = True

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass
class Nnf:
    """Per-coordinate best target and cached distance.

    Arrays are full image height x width; only entries inside the valid rect
    of A are meaningful. Targets always lie inside the valid rect of B.
    """

    target_x: np.ndarray
    target_y: np.ndarray
    dist: np.ndarray
    geom: PatchGeometry
    a_dims: tuple[int, int]
    b_dims: tuple[int, int] | None
    rng_seed: int = 0
    sweep_changes: list = field(default_factory=list)

    @property
    def a_rect(self) -> Rect:
        return self.geom.valid_rect(*self.a_dims)

    @property
    def b_rect(self) -> Rect:
        if self.b_dims is None:
            raise ValueError("field has no target-image dimensions recorded")
        return self.geom.valid_rect(*self.b_dims)

    def rect_view(self, arr: np.ndarray) -> np.ndarray:
        r = self.a_rect
        return arr[r.y0 : r.y1, r.x0 : r.x1]

    @property
    def valid_dist(self) -> np.ndarray:
        """Distances over the valid rect (the meaningful region)."""
        return self.rect_view(self.dist)

    def offsets(self) -> np.ndarray:
        """(H', W', 2) target minus coordinate, (dx, dy), over the valid rect."""
        r = self.a_rect
        xs = np.arange(r.x0, r.x1, dtype=np.int32)[np.newaxis, :]
        ys = np.arange(r.y0, r.y1, dtype=np.int32)[:, np.newaxis]
        return np.stack(
            [self.rect_view(self.target_x) - xs, self.rect_view(self.target_y) - ys],
            axis=-1,
        )

    def copy(self) -> "Nnf":
        return Nnf(
            self.target_x.copy(),
            self.target_y.copy(),
            self.dist.copy(),
            self.geom,
            self.a_dims,
            self.b_dims,
            self.rng_seed,
            list(self.sweep_changes),
        )


class _Tally:
    """Tracks live auxiliary allocations so benchmarks can report the peak."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def add(self, *arrays: np.ndarray) -> None:
        self.live += sum(int(a.nbytes) for a in arrays)
        self.peak = max(self.peak, self.live)

    def drop(self, *arrays: np.ndarray) -> None:
        self.live -= sum(int(a.nbytes) for a in arrays)


# ---------------------------------------------------------------------------
# Kernels

@njit(cache=True, nogil=True, inline="always")
def _eval_candidate(a, b, xx, yy, cx, cy, p, bx0, by0, bx1, by1,
                    bmask, has_bmask, labels_b, has_labels, la,
                    best_x, best_y, best_d, use_early):
    """Clamp a candidate into the target rect, filter, score, and compare.

    Returns the (possibly updated) incumbent (x, y, d).
    """
    if cx < bx0:
        cx = bx0
    elif cx >= bx1:
        cx = bx1 - 1
    if cy < by0:
        cy = by0
    elif cy >= by1:
        cy = by1 - 1
    if has_bmask and bmask[cy, cx] == 0:
        return best_x, best_y, best_d
    if has_labels and la > 0 and labels_b[cy, cx] != la:
        return best_x, best_y, best_d
    if cx == best_x and cy == best_y:
        return best_x, best_y, best_d
    early = best_d if use_early else np.inf
    d = _patch_ssd(a, xx, yy, b, cx, cy, p, early)
    if d < best_d:
        return cx, cy, d
    return best_x, best_y, best_d


@njit(cache=True, nogil=True)
def _sweep_kernel(a, b, tx, ty, td, p,
                  ax0, ay0, ax1, ay1, bx0, by0, bx1, by1,
                  y_lo, y_hi, sweep, level, seed, alpha, w, use_early,
                  snap_tx, snap_ty, snap_row,
                  bmask, labels_a, labels_b, pinned):
    """One propagation+random-search pass over rows [y_lo, y_hi) of the rect.

    Even sweeps scan in raster order pulling matches from the left/upper
    neighbors; odd sweeps scan reversed pulling from the right/lower ones.
    The one neighbor row outside the strip (`snap_row`; -2 disables) is read
    from the snapshot taken at the last barrier. Returns the number of
    entries that changed.
    """
    has_bmask = bmask.shape[0] > 0
    has_labels = labels_a.shape[0] > 0
    has_pin = pinned.shape[0] > 0
    reverse = (sweep & 1) == 1
    changed = 0
    n_rows = y_hi - y_lo
    for row in range(n_rows):
        yy = (y_hi - 1 - row) if reverse else (y_lo + row)
        n_cols = ax1 - ax0
        for col in range(n_cols):
            xx = (ax1 - 1 - col) if reverse else (ax0 + col)
            if has_pin and pinned[yy, xx] != 0:
                continue
            old_x = tx[yy, xx]
            old_y = ty[yy, xx]
            best_x = old_x
            best_y = old_y
            best_d = td[yy, xx]
            la = labels_a[yy, xx] if has_labels else 0

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
                if ny < y_lo or ny >= y_hi:
                    if ny != snap_row:
                        continue
                    sx = snap_tx[nx]
                    sy = snap_ty[nx]
                else:
                    sx = tx[ny, nx]
                    sy = ty[ny, nx]
                best_x, best_y, best_d = _eval_candidate(
                    a, b, xx, yy, sx + dpx, sy + dpy, p,
                    bx0, by0, bx1, by1, bmask, has_bmask,
                    labels_b, has_labels, la, best_x, best_y, best_d, use_early)

            key = stream_key(seed, PURPOSE_SWEEP, level, sweep, xx, yy)
            radius = w
            idx = 0
            while radius >= 1.0:
                rx = draw_pm1(key, idx)
                idx += 1
                ry = draw_pm1(key, idx)
                idx += 1
                cx = int(math.floor(best_x + radius * rx + 0.5))
                cy = int(math.floor(best_y + radius * ry + 0.5))
                best_x, best_y, best_d = _eval_candidate(
                    a, b, xx, yy, cx, cy, p,
                    bx0, by0, bx1, by1, bmask, has_bmask,
                    labels_b, has_labels, la, best_x, best_y, best_d, use_early)
                radius *= alpha

            tx[yy, xx] = best_x
            ty[yy, xx] = best_y
            td[yy, xx] = best_d
            if best_x != old_x or best_y != old_y:
                changed += 1
    return changed


@njit(cache=True, nogil=True)
def _init_kernel(a, b, tx, ty, td, p,
                 ax0, ay0, ax1, ay1, bx0, by0, bx1, by1,
                 seed, level, labels_a, pool_off, pool_x, pool_y, pinned):
    """Uniform random targets (from the rect, or per-label pools) + distances."""
    bw = bx1 - bx0
    bh = by1 - by0
    has_pools = pool_off.shape[0] > 0
    has_labels = labels_a.shape[0] > 0
    has_pin = pinned.shape[0] > 0
    for yy in range(ay0, ay1):
        for xx in range(ax0, ax1):
            if has_pin and pinned[yy, xx] != 0:
                continue
            key = stream_key(seed, PURPOSE_INIT, level, 0, xx, yy)
            if has_pools:
                lab = labels_a[yy, xx] if has_labels else 0
                lo = pool_off[lab]
                hi = pool_off[lab + 1]
                j = lo + draw_int(key, 0, hi - lo)
                cx = np.int64(pool_x[j])
                cy = np.int64(pool_y[j])
            else:
                cx = bx0 + draw_int(key, 0, bw)
                cy = by0 + draw_int(key, 1, bh)
            tx[yy, xx] = cx
            ty[yy, xx] = cy
            td[yy, xx] = _patch_ssd(a, xx, yy, b, cx, cy, p, np.inf)


@njit(cache=True, nogil=True)
def _merge_scaled_kernel(a, b, tx, ty, td, ctx, cty, p,
                         ax0, ay0, ax1, ay1, bx0, by0, bx1, by1,
                         cax0, cay0, cax1, cay1,
                         scale_x, scale_y, bmask, labels_a, labels_b, pinned):
    """Replace entries with the scaled-up coarse candidate where it wins."""
    has_bmask = bmask.shape[0] > 0
    has_labels = labels_a.shape[0] > 0
    has_pin = pinned.shape[0] > 0
    for yy in range(ay0, ay1):
        for xx in range(ax0, ax1):
            if has_pin and pinned[yy, xx] != 0:
                continue
            cxq = int(math.floor(xx / scale_x + 0.5))
            cyq = int(math.floor(yy / scale_y + 0.5))
            if cxq < cax0:
                cxq = cax0
            elif cxq >= cax1:
                cxq = cax1 - 1
            if cyq < cay0:
                cyq = cay0
            elif cyq >= cay1:
                cyq = cay1 - 1
            cx = int(math.floor(ctx[cyq, cxq] * scale_x + 0.5))
            cy = int(math.floor(cty[cyq, cxq] * scale_y + 0.5))
            la = labels_a[yy, xx] if has_labels else 0
            bx, by_, bd = _eval_candidate(
                a, b, xx, yy, cx, cy, p, bx0, by0, bx1, by1,
                bmask, has_bmask, labels_b, has_labels, la,
                tx[yy, xx], ty[yy, xx], td[yy, xx], True)
            tx[yy, xx] = bx
            ty[yy, xx] = by_
            td[yy, xx] = bd


@njit(cache=True, nogil=True)
def _brute_kernel(a, b, tx, ty, td, p,
                  ax0, ay0, ax1, ay1, bx0, by0, bx1, by1,
                  bmask, labels_a, labels_b):
    """Exhaustive argmin per coordinate; raster order breaks ties."""
    has_bmask = bmask.shape[0] > 0
    has_labels = labels_a.shape[0] > 0
    for yy in range(ay0, ay1):
        for xx in range(ax0, ax1):
            la = labels_a[yy, xx] if has_labels else 0
            best_d = np.inf
            best_x = -1
            best_y = -1
            for cy in range(by0, by1):
                for cx in range(bx0, bx1):
                    if has_bmask and bmask[cy, cx] == 0:
                        continue
                    if has_labels and la > 0 and labels_b[cy, cx] != la:
                        continue
                    d = _patch_ssd(a, xx, yy, b, cx, cy, p, best_d)
                    if d < best_d:
                        best_d = d
                        best_x = cx
                        best_y = cy
            tx[yy, xx] = best_x
            ty[yy, xx] = best_y
            td[yy, xx] = best_d


# ---------------------------------------------------------------------------
# Constraint plumbing shared with the synthesis module

@dataclass
class FieldConstraints:
    """Optional constraint arrays threaded through the search kernels.

    target_mask : (Hb, Wb) uint8, nonzero where targets are allowed.
    labels_a / labels_b : (Ha, Wa) / (Hb, Wb) int32; a query with label > 0
        only matches targets carrying the identical label.
    pin_mask : (Ha, Wa) uint8, nonzero entries are never updated.
    pin_x / pin_y : (Ha, Wa) int32 fixed targets where pinned.
    """

    target_mask: np.ndarray | None = None
    labels_a: np.ndarray | None = None
    labels_b: np.ndarray | None = None
    pin_mask: np.ndarray | None = None
    pin_x: np.ndarray | None = None
    pin_y: np.ndarray | None = None


def _kernel_constraint_arrays(cons: FieldConstraints | None):
    if cons is None:
        return _EMPTY_U8, _EMPTY_I32, _EMPTY_I32, _EMPTY_U8
    bmask = _EMPTY_U8 if cons.target_mask is None else np.ascontiguousarray(cons.target_mask, dtype=np.uint8)
    if cons.labels_a is None:
        la = lb = _EMPTY_I32
    else:
        la = np.ascontiguousarray(cons.labels_a, dtype=np.int32)
        lb = np.ascontiguousarray(cons.labels_b, dtype=np.int32)
    pin = _EMPTY_U8 if cons.pin_mask is None else np.ascontiguousarray(cons.pin_mask, dtype=np.uint8)
    return bmask, la, lb, pin


def _build_target_pools(b_rect: Rect, bmask: np.ndarray, labels_a: np.ndarray,
                        labels_b: np.ndarray):
    """Per-label candidate coordinate pools for constrained initialization.

    Pool 0 holds every mask-valid target; pool i holds the targets of label i.
    Raises MissingLabelError when a query label has no targets.
    """
    ys, xs = np.mgrid[b_rect.y0 : b_rect.y1, b_rect.x0 : b_rect.x1]
    xs = xs.ravel().astype(np.int32)
    ys = ys.ravel().astype(np.int32)
    ok = np.ones(xs.shape[0], dtype=bool)
    if bmask.shape[0] > 0:
        ok = bmask[ys, xs] != 0
    pools = [(xs[ok], ys[ok])]
    n_labels = 0
    if labels_a.shape[0] > 0:
        n_labels = int(labels_a.max(initial=0))
        lab_vals = labels_b[ys, xs] if labels_b.shape[0] > 0 else np.zeros_like(xs)
        for lab in range(1, n_labels + 1):
            sel = ok & (lab_vals == lab)
            pools.append((xs[sel], ys[sel]))
    if pools[0][0].shape[0] == 0:
        raise InputError("no valid target pixels remain after masking")
    if labels_a.shape[0] > 0:
        present = np.unique(labels_a[labels_a > 0])
        for lab in present:
            if pools[int(lab)][0].shape[0] == 0:
                raise MissingLabelError(int(lab))
    off = np.zeros(len(pools) + 1, dtype=np.int64)
    for i, (px, _) in enumerate(pools):
        off[i + 1] = off[i] + px.shape[0]
    pool_x = np.concatenate([px for px, _ in pools]).astype(np.int32)
    pool_y = np.concatenate([py for _, py in pools]).astype(np.int32)
    return off, pool_x, pool_y


def _apply_pins(f: Nnf, a: ImageBuffer, b: ImageBuffer, cons: FieldConstraints | None) -> None:
    if cons is None or cons.pin_mask is None:
        return
    ys, xs = np.nonzero(cons.pin_mask)
    brect = f.b_rect
    for y, x in zip(ys, xs):
        px = int(cons.pin_x[y, x])
        py = int(cons.pin_y[y, x])
        if not brect.contains(px, py):
            raise ValueError(f"pinned target ({px},{py}) outside the target valid rect")
        f.target_x[y, x] = px
        f.target_y[y, x] = py
        f.dist[y, x] = _patch_ssd(a.data, int(x), int(y), b.data, px, py,
                                  f.geom.patch_size, np.inf)


# ---------------------------------------------------------------------------
# Public operations

def _resolve_w(params: SearchParams, b: ImageBuffer) -> float:
    return float(params.w) if params.w is not None else float(max(b.width, b.height))


def _check_pair(a: ImageBuffer, b: ImageBuffer, geom: PatchGeometry) -> None:
    if a.channels != b.channels:
        raise ValueError(f"channel mismatch: {a.channels} vs {b.channels}")
    for img, name in ((a, "first"), (b, "second")):
        if geom.valid_rect_of(img).area <= 0:
            raise InputError(
                f"{name} image {img.width}x{img.height} is smaller than the patch"
            )


def init_random(a: ImageBuffer, b: ImageBuffer, geom: PatchGeometry,
                seed: int = 0, *, level: int = 0,
                constraints: FieldConstraints | None = None,
                tally: _Tally | None = None) -> Nnf:
    """Fresh field with targets drawn uniformly from B's valid rect."""
    _check_pair(a, b, geom)
    tx = np.full((a.height, a.width), -1, dtype=np.int32)
    ty = np.full((a.height, a.width), -1, dtype=np.int32)
    td = np.full((a.height, a.width), np.inf, dtype=np.float64)
    if tally is not None:
        tally.add(tx, ty, td)
    ar = geom.valid_rect_of(a)
    br = geom.valid_rect_of(b)
    bmask, la, lb, pin = _kernel_constraint_arrays(constraints)
    if bmask.shape[0] > 0 or la.shape[0] > 0:
        off, px, py = _build_target_pools(br, bmask, la, lb)
    else:
        off, px, py = _EMPTY_POOL, _EMPTY_COORD, _EMPTY_COORD
    if tally is not None and off.shape[0] > 0:
        tally.add(off, px, py)
    _init_kernel(a.data, b.data, tx, ty, td, geom.patch_size,
                 ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
                 seed, level, la, off, px, py, pin)
    f = Nnf(tx, ty, td, geom, (a.width, a.height), (b.width, b.height), seed)
    _apply_pins(f, a, b, constraints)
    return f


def _strip_bounds(y0: int, y1: int, workers: int) -> list[tuple[int, int]]:
    n = y1 - y0
    workers = max(1, min(workers, n))
    edges = [y0 + (n * i) // workers for i in range(workers + 1)]
    return [(edges[i], edges[i + 1]) for i in range(workers)]


def iterate(f: Nnf, a: ImageBuffer, b: ImageBuffer, params: SearchParams,
            *, sweep: int = 0, level: int = 0, workers: int = 1,
            constraints: FieldConstraints | None = None,
            tally: _Tally | None = None) -> int:
    """One full sweep in place; returns the number of entries that changed.

    With several workers the rect is split into equal horizontal strips, one
    worker each; cross-strip neighbor rows are read from a snapshot taken
    before the sweep starts, and all workers join before the call returns.
    """
    ar = f.a_rect
    br = f.b_rect
    w = _resolve_w(params, b)
    bmask, la, lb, pin = _kernel_constraint_arrays(constraints)
    strips = _strip_bounds(ar.y0, ar.y1, workers)
    if len(strips) == 1:
        return _sweep_kernel(
            a.data, b.data, f.target_x, f.target_y, f.dist, f.geom.patch_size,
            ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
            strips[0][0], strips[0][1], sweep, level, f.rng_seed,
            params.alpha, w, params.early_stop,
            _EMPTY_ROW_I, _EMPTY_ROW_I, -2,
            bmask, la, lb, pin)

    # snapshot the one neighbor row each strip reads across its boundary
    # (the row above for forward sweeps, below for backward) so cross-strip
    # propagation sees only values frozen at the barrier
    reverse = (sweep & 1) == 1
    snaps = []
    for (y_lo, y_hi) in strips:
        row = y_hi if reverse else y_lo - 1
        if ar.y0 <= row < ar.y1:
            snaps.append((f.target_x[row].copy(), f.target_y[row].copy(), row))
        else:
            snaps.append((_EMPTY_ROW_I, _EMPTY_ROW_I, -2))
    if tally is not None:
        for stx, sty, _ in snaps:
            tally.add(stx, sty)

    results = [0] * len(strips)

    def run(i: int) -> None:
        y_lo, y_hi = strips[i]
        stx, sty, row = snaps[i]
        results[i] = _sweep_kernel(
            a.data, b.data, f.target_x, f.target_y, f.dist, f.geom.patch_size,
            ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
            y_lo, y_hi, sweep, level, f.rng_seed,
            params.alpha, w, params.early_stop,
            stx, sty, row, bmask, la, lb, pin)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(strips))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if tally is not None:
        for stx, sty, _ in snaps:
            tally.drop(stx, sty)
    return sum(results)


def init_upsample(coarse: Nnf, fine_a: ImageBuffer, fine_b: ImageBuffer,
                  merge_iterations: int = 1, *, geom: PatchGeometry | None = None,
                  params: SearchParams | None = None, seed: int | None = None,
                  level: int = 0, workers: int = 1,
                  constraints: FieldConstraints | None = None,
                  tally: _Tally | None = None) -> Nnf:
    """Seed a fine-level field from a coarse one.

    The fine field starts random, runs `merge_iterations` sweeps, then each
    entry is replaced by the scaled coarse candidate wherever that candidate
    scores strictly better.
    """
    geom = geom or coarse.geom
    params = params or SearchParams()
    seed = coarse.rng_seed if seed is None else seed
    scale_x = fine_a.width / coarse.a_dims[0]
    scale_y = fine_a.height / coarse.a_dims[1]
    if scale_x < 1.0 or scale_y < 1.0:
        raise ValueError("fine images must be at least as large as the coarse field")
    f = init_random(fine_a, fine_b, geom, seed, level=level,
                    constraints=constraints, tally=tally)
    for s in range(merge_iterations):
        c = iterate(f, fine_a, fine_b, params, sweep=s, level=level,
                    workers=workers, constraints=constraints, tally=tally)
        f.sweep_changes.append(c)
    ar = f.a_rect
    br = f.b_rect
    car = coarse.a_rect
    bmask, la, lb, pin = _kernel_constraint_arrays(constraints)
    _merge_scaled_kernel(
        fine_a.data, fine_b.data, f.target_x, f.target_y, f.dist,
        coarse.target_x, coarse.target_y, geom.patch_size,
        ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
        car.x0, car.y0, car.x1, car.y1,
        scale_x, scale_y, bmask, la, lb, pin)
    _apply_pins(f, fine_a, fine_b, constraints)
    return f


def compute_nnf(a: ImageBuffer, b: ImageBuffer, geom: PatchGeometry | None = None,
                params: SearchParams | None = None, *, multiscale: bool = False,
                seed: int = 0, workers: int = 1,
                constraints: FieldConstraints | None = None,
                mem_report: dict | None = None) -> Nnf:
    """Approximate nearest-neighbor field from A's patches into B.

    Random init (or coarse-to-fine seeding when `multiscale`) followed by
    `params.iterations` alternating-direction sweeps.
    """
    geom = geom or PatchGeometry()
    params = params or SearchParams()
    _check_pair(a, b, geom)
    tally = _Tally()

    if multiscale and constraints is not None:
        raise ValueError("constraints are only supported in single-scale matching")

    if multiscale:
        min_dim = max(32, 2 * geom.patch_size)
        pyr_a = build_pyramid(a, 0.5, min_dim) if min(a.width, a.height) >= min_dim else [a]
        pyr_b = build_pyramid(b, 0.5, min_dim) if min(b.width, b.height) >= min_dim else [b]
        n = min(len(pyr_a), len(pyr_b))
        pyr_a, pyr_b = pyr_a[-n:], pyr_b[-n:]
        for img in pyr_a[:-1] + pyr_b[:-1]:
            tally.add(img.data)
        f = None
        for lvl in range(n):
            la_, lb_ = pyr_a[lvl], pyr_b[lvl]
            if f is None:
                f = init_random(la_, lb_, geom, seed, level=lvl, tally=tally)
                start = 0
            else:
                prev = f
                f = init_upsample(prev, la_, lb_, 1, geom=geom, params=params,
                                  seed=seed, level=lvl, workers=workers, tally=tally)
                tally.drop(prev.target_x, prev.target_y, prev.dist)
                start = 1
            for s in range(start, start + params.iterations):
                c = iterate(f, la_, lb_, params, sweep=s, level=lvl,
                            workers=workers, tally=tally)
                f.sweep_changes.append(c)
        assert f is not None
    else:
        f = init_random(a, b, geom, seed, constraints=constraints, tally=tally)
        for s in range(params.iterations):
            c = iterate(f, a, b, params, sweep=s, workers=workers,
                        constraints=constraints, tally=tally)
            f.sweep_changes.append(c)

    if mem_report is not None:
        mem_report["peak_aux_bytes"] = tally.peak
    return f


def brute_force_nnf(a: ImageBuffer, b: ImageBuffer, geom: PatchGeometry | None = None,
                    *, constraints: FieldConstraints | None = None) -> Nnf:
    """Exact per-coordinate argmin over all of B's valid rect.

    Ties go to the target earliest in raster order. Intended for small inputs;
    cost grows with the product of both pixel counts.
    """
    geom = geom or PatchGeometry()
    _check_pair(a, b, geom)
    tx = np.full((a.height, a.width), -1, dtype=np.int32)
    ty = np.full((a.height, a.width), -1, dtype=np.int32)
    td = np.full((a.height, a.width), np.inf, dtype=np.float64)
    ar = geom.valid_rect_of(a)
    br = geom.valid_rect_of(b)
    bmask, la, lb, _pin = _kernel_constraint_arrays(constraints)
    _brute_kernel(a.data, b.data, tx, ty, td, geom.patch_size,
                  ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
                  bmask, la, lb)
    return Nnf(tx, ty, td, geom, (a.width, a.height), (b.width, b.height))


def propagation_candidates(f: Nnf, z: tuple[int, int], direction: str = "forward"):
    """Candidate targets proposed by z's scan neighbors, clamped to the rect.

    `direction` is "forward" (left/upper neighbors shifted by +1) or
    "backward" (right/lower neighbors shifted by -1). Neighbors outside the
    valid rect contribute nothing.
    """
    x, y = z
    ar = f.a_rect
    br = f.b_rect
    if not ar.contains(x, y):
        raise ValueError(f"coordinate {z} outside the valid rect")
    if direction == "forward":
        deltas = [(1, 0), (0, 1)]
    elif direction == "backward":
        deltas = [(-1, 0), (0, -1)]
    else:
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    out = []
    for dpx, dpy in deltas:
        nx, ny = x - dpx, y - dpy
        if not ar.contains(nx, ny):
            continue
        cx = int(f.target_x[ny, nx]) + dpx
        cy = int(f.target_y[ny, nx]) + dpy
        cx = min(max(cx, br.x0), br.x1 - 1)
        cy = min(max(cy, br.y0), br.y1 - 1)
        out.append((cx, cy))
    return out


def random_search(f: Nnf, a: ImageBuffer, b: ImageBuffer, z: tuple[int, int],
                  params: SearchParams | None = None, *, sweep: int = 0,
                  level: int = 0) -> tuple[int, int, float]:
    """Shrinking-radius random candidates around z's current match, in place.

    Radii run w, w*alpha, w*alpha^2, ... while still at least one pixel.
    Each accepted candidate strictly improves the cached distance. Returns
    the final (x, y, dist) entry.
    """
    params = params or SearchParams()
    x, y = z
    if not f.a_rect.contains(x, y):
        raise ValueError(f"coordinate {z} outside the valid rect")
    br = f.b_rect
    w = _resolve_w(params, b)
    key = _rng.py_stream_key(f.rng_seed, int(PURPOSE_SWEEP), level, sweep, x, y)
    best_x = int(f.target_x[y, x])
    best_y = int(f.target_y[y, x])
    best_d = float(f.dist[y, x])
    radius = w
    idx = 0
    while radius >= 1.0:
        rx = 2.0 * _rng.py_draw_u01(key, idx) - 1.0
        idx += 1
        ry = 2.0 * _rng.py_draw_u01(key, idx) - 1.0
        idx += 1
        cx = int(math.floor(best_x + radius * rx + 0.5))
        cy = int(math.floor(best_y + radius * ry + 0.5))
        cx = min(max(cx, br.x0), br.x1 - 1)
        cy = min(max(cy, br.y0), br.y1 - 1)
        if (cx, cy) != (best_x, best_y):
            d = _patch_ssd(a.data, x, y, b.data, cx, cy, f.geom.patch_size,
                           best_d if params.early_stop else np.inf)
            if d < best_d:
                best_x, best_y, best_d = cx, cy, d
        radius *= params.alpha
    f.target_x[y, x] = best_x
    f.target_y[y, x] = best_y
    f.dist[y, x] = best_d
    return best_x, best_y, best_d


def random_search_scale_count(w: float, alpha: float) -> int:
    """How many radii the shrinking search visits for a given w and alpha."""
    n = 0
    radius = float(w)
    while radius >= 1.0:
        n += 1
        radius *= alpha
    return n


# ---------------------------------------------------------------------------
# Convergence model

def sample_hit_probability(c_region: float, m_total: float, m_samples: float) -> float:
    """Chance one round of uniform sampling lands inside a C-pixel region."""
    if c_region <= 0 or m_total <= 0 or m_samples <= 0:
        raise ValueError("inputs must be positive")
    return 1.0 - (1.0 - c_region / m_total) ** m_samples


def expected_sweeps_to_hit(c_region: float, m_total: float, m_samples: float) -> float:
    """Expected failing rounds before the first hit (finite-size model)."""
    p = sample_hit_probability(c_region, m_total, m_samples)
    return 1.0 / p - 1.0


def expected_convergence_iters(c_region: float, gamma: float) -> float:
    """Large-image limit of the expected rounds before the first hit."""
    if c_region <= 0 or gamma <= 0:
        raise ValueError("inputs must be positive")
    return 1.0 / (1.0 - math.exp(-c_region * gamma)) - 1.0


# ---------------------------------------------------------------------------
# Diagnostics

def coherence_histogram(f: Nnf) -> np.ndarray:
    """Counts of neighbor offset disagreement, binned by rounded distance.

    Bin 0 counts coordinate pairs whose matches share the exact offset; the
    horizontal and vertical neighbor relations both contribute.
    """
    off = f.offsets().astype(np.float64)
    dx = off[:, 1:, :] - off[:, :-1, :]
    dy = off[1:, :, :] - off[:-1, :, :]
    norms = np.concatenate([
        np.sqrt((dx ** 2).sum(axis=-1)).ravel(),
        np.sqrt((dy ** 2).sum(axis=-1)).ravel(),
    ])
    bins = np.rint(norms).astype(np.int64)
    return np.bincount(bins)


@njit(cache=True, nogil=True)
def _improvement_kernel(a, b, tx, ty, td, p,
                        ax0, ay0, ax1, ay1, bx0, by0, bx1, by1,
                        lo, hi, grid_radius, stride, hist):
    count = 0
    idx = 0
    for yy in range(ay0, ay1):
        for xx in range(ax0, ax1):
            d0 = td[yy, xx]
            if d0 < lo or d0 > hi:
                continue
            idx += 1
            if (idx - 1) % stride != 0:
                continue
            count += 1
            cx0 = tx[yy, xx]
            cy0 = ty[yy, xx]
            for cy in range(by0, by1):
                for cx in range(bx0, bx1):
                    d = _patch_ssd(a, xx, yy, b, cx, cy, p, d0)
                    if d < d0:
                        gx = cx - cx0
                        gy = cy - cy0
                        if -grid_radius <= gx <= grid_radius and -grid_radius <= gy <= grid_radius:
                            hist[gy + grid_radius, gx + grid_radius] += 1
    return count


def improvement_histogram(a: ImageBuffer, b: ImageBuffer, f: Nnf,
                          distance_band: tuple[float, float], *,
                          grid_radius: int = 10, max_samples: int = 128) -> np.ndarray:
    """Where strictly better targets sit, relative to the current match.

    Scans every target for a sample of coordinates whose cached distance
    falls inside `distance_band` and accumulates the displacement of each
    improvement into a centered (2r+1)^2 grid.
    """
    lo, hi = distance_band
    if not lo < hi:
        raise ValueError(f"empty distance band {distance_band}")
    ar = f.a_rect
    br = f.b_rect
    in_band = int(((f.valid_dist >= lo) & (f.valid_dist <= hi)).sum())
    stride = max(1, in_band // max_samples)
    hist = np.zeros((2 * grid_radius + 1, 2 * grid_radius + 1), dtype=np.int64)
    _improvement_kernel(a.data, b.data, f.target_x, f.target_y, f.dist,
                        f.geom.patch_size,
                        ar.x0, ar.y0, ar.x1, ar.y1, br.x0, br.y0, br.x1, br.y1,
                        lo, hi, grid_radius, stride, hist)
    return hist


# ---------------------------------------------------------------------------
# Binary field dump

NNF_MAGIC = b"NNF1"


def write_nnf(f: Nnf, path: str) -> None:
    """Binary dump: magic, u32 width, u32 height, u16 patch size, then one
    (i16 dx, i16 dy, f32 dist) record per valid-rect coordinate in raster
    order, all little-endian. Offsets are target minus coordinate."""
    r = f.a_rect
    rec = np.empty(r.area, dtype=np.dtype([("dx", "<i2"), ("dy", "<i2"), ("d", "<f4")]))
    off = f.offsets()
    rec["dx"] = off[:, :, 0].ravel()
    rec["dy"] = off[:, :, 1].ravel()
    rec["d"] = f.valid_dist.ravel()
    with open(path, "wb") as fh:
        fh.write(NNF_MAGIC)
        fh.write(struct.pack("<IIH", f.a_dims[0], f.a_dims[1], f.geom.patch_size))
        fh.write(rec.tobytes())


def read_nnf(path: str, b_dims: tuple[int, int] | None = None) -> Nnf:
    """Read a :func:`write_nnf` dump. Distances come back float32-rounded."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != NNF_MAGIC:
            raise InputError(f"{path}: not a field dump (bad magic {magic!r})")
        w, h, p = struct.unpack("<IIH", fh.read(10))
        geom = PatchGeometry(p)
        r = geom.valid_rect(w, h)
        raw = fh.read(r.area * 8)
    if len(raw) != r.area * 8:
        raise InputError(f"{path}: truncated field dump")
    rec = np.frombuffer(raw, dtype=np.dtype([("dx", "<i2"), ("dy", "<i2"), ("d", "<f4")]))
    tx = np.full((h, w), -1, dtype=np.int32)
    ty = np.full((h, w), -1, dtype=np.int32)
    td = np.full((h, w), np.inf, dtype=np.float64)
    xs = np.arange(r.x0, r.x1, dtype=np.int32)[np.newaxis, :]
    ys = np.arange(r.y0, r.y1, dtype=np.int32)[:, np.newaxis]
    tx[r.y0:r.y1, r.x0:r.x1] = rec["dx"].reshape(r.height, r.width) + xs
    ty[r.y0:r.y1, r.x0:r.x1] = rec["dy"].reshape(r.height, r.width) + ys
    td[r.y0:r.y1, r.x0:r.x1] = rec["d"].reshape(r.height, r.width)
    return Nnf(tx, ty, td, geom, (w, h), b_dims)
