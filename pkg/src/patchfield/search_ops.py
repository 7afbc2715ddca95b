"""Two extra search operators over k-NN fields: enrichment and binning.

Forward enrichment composes a self-matching field with itself: the k
targets of each stored target give k^2 candidates, and the best k overall
survive. Inverse enrichment walks the stored entries backwards — every
coordinate that points at t makes t a candidate of it in return — and,
because the patch metric is symmetric, each reused distance is copied
rather than recomputed. Both operators only ever replace heap entries by
strictly better ones, so no stored distance can increase.

Binning buckets patch coordinates by a coarse principal-component
projection quantized into equal-population cells. A matcher can then
propose a random member of the query's own cell instead of a uniformly
random coordinate, which concentrates candidates on lookalike patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from patchfield.core import ImageBuffer, InputError, PatchGeometry, _patch_ssd
from patchfield.gpm import KnnField, _excluded, _heap_try_insert

__all__ = [
    "BinIndex",
    "bin_candidate",
    "build_bin_index",
    "enrich",
    "forward_enrichment",
    "inverse_enrichment",
]


# ---------------------------------------------------------------------------
# enrichment

@njit(cache=True, nogil=True)
def _forward_kernel(a, src_x, src_y, dst_x, dst_y, dst_d, p, k,
                    x0, y0, x1, y1, excl):
    changed = 0
    for yy in range(y0, y1):
        for xx in range(x0, x1):
            hd = dst_d[yy, xx]
            hx = dst_x[yy, xx]
            hy = dst_y[yy, xx]
            for i in range(k):
                tx = src_x[yy, xx, i]
                ty = src_y[yy, xx, i]
                if tx < x0 or tx >= x1 or ty < y0 or ty >= y1:
                    continue
                for j in range(k):
                    ux = src_x[ty, tx, j]
                    uy = src_y[ty, tx, j]
                    if ux < x0 or ux >= x1 or uy < y0 or uy >= y1:
                        continue
                    if _excluded(xx, yy, ux, uy, excl):
                        continue
                    d = _patch_ssd(a, xx, yy, a, ux, uy, p, hd[0])
                    if _heap_try_insert(hd, hx, hy, k, ux, uy, d):
                        changed += 1
    return changed


@njit(cache=True, nogil=True)
def _inverse_kernel(src_x, src_y, src_d, dst_x, dst_y, dst_d, k,
                    x0, y0, x1, y1, excl):
    changed = 0
    for yy in range(y0, y1):
        for xx in range(x0, x1):
            for i in range(k):
                tx = src_x[yy, xx, i]
                ty = src_y[yy, xx, i]
                if tx < x0 or tx >= x1 or ty < y0 or ty >= y1:
                    continue
                if _excluded(tx, ty, xx, yy, excl):
                    continue
                if _heap_try_insert(dst_d[ty, tx], dst_x[ty, tx],
                                    dst_y[ty, tx], k, xx, yy,
                                    src_d[yy, xx, i]):
                    changed += 1
    return changed


def forward_enrichment(f: KnnField, a: ImageBuffer, *,
                       exclude_radius: int = 0) -> KnnField:
    """Merge the k^2 targets-of-targets into each coordinate's heap.

    Only meaningful when the field matches an image against itself, so the
    stored targets are coordinates the field itself covers; `a` must be
    that image. All hop candidates are read from the input field, their
    distances recomputed against `a`, and the best k overall kept — no
    stored distance ever increases. Returns a new field.
    """
    if not f.self_matching:
        raise ValueError("forward enrichment composes a field with itself; "
                         "the field must match an image against itself")
    if f.a_dims != (a.width, a.height):
        raise ValueError(f"field covers a {f.a_dims} image, got "
                         f"{(a.width, a.height)}")
    out = f.copy()
    r = f.a_rect
    _forward_kernel(a.data, f.target_x, f.target_y, out.target_x,
                    out.target_y, out.dist, f.geom.patch_size, f.k,
                    r.x0, r.y0, r.x1, r.y1, exclude_radius)
    return out


def inverse_enrichment(f: KnnField, *, exclude_radius: int = 0) -> KnnField:
    """Merge the multi-valued reverse mapping into each coordinate's heap.

    Every stored entry z -> t whose target t is itself a coordinate the
    field covers proposes z as a candidate of t, reusing the stored
    distance unchanged (the patch metric is symmetric). Coordinates nobody
    points at simply receive no candidates. Returns a new field.
    """
    out = f.copy()
    r = f.a_rect
    _inverse_kernel(f.target_x, f.target_y, f.dist, out.target_x,
                    out.target_y, out.dist, f.k,
                    r.x0, r.y0, r.x1, r.y1, exclude_radius)
    return out


def enrich(f: KnnField, a: ImageBuffer, *, exclude_radius: int = 0) -> KnnField:
    """Inverse then forward enrichment — the fastest combined schedule."""
    return forward_enrichment(inverse_enrichment(f, exclude_radius=exclude_radius),
                              a, exclude_radius=exclude_radius)


# ---------------------------------------------------------------------------
# binning

@dataclass
class BinIndex:
    """Patch coordinates bucketed by a quantized low-dimensional projection.

    Each indexed coordinate's patch is projected onto `basis` (principal
    component row vectors, sample mean removed) and each projection axis is
    cut at `edges` — equal-population quantile boundaries of the training
    sample — into `parts` intervals, giving ``parts ** dims`` cells. Every
    indexed coordinate lands in exactly one bucket; `redirect` maps each
    empty cell to the nearest populated one (Euclidean distance between
    cell index tuples, smallest cell id on ties) and every populated cell
    to itself.
    """

    basis: np.ndarray         # (dims, p*p*c) float64 row vectors
    mean_dot: np.ndarray      # (dims,) float64, basis @ training-sample mean
    edges: np.ndarray         # (dims, parts-1) float64 partition boundaries
    parts: int
    bucket_start: np.ndarray  # (parts**dims + 1,) int64 prefix offsets
    bucket_x: np.ndarray      # (indexed,) int32, bucket-major, raster inside
    bucket_y: np.ndarray
    redirect: np.ndarray      # (parts**dims,) int64
    geom: PatchGeometry
    dims: tuple[int, int]     # (width, height) of the indexed image

    @property
    def bins(self) -> int:
        return self.parts ** self.basis.shape[0]

    @property
    def indexed(self) -> int:
        return int(self.bucket_x.shape[0])


@njit(cache=True, nogil=True)
def _project_kernel(data, basis, mean_dot, p, x0, y0, x1, y1, out):
    """Centered patch projections for every coordinate of the rect.

    Accumulation runs in row, column, channel order within the patch — the
    same order `_project_one` uses — so a patch and its flattened copy
    project to bit-identical values.
    """
    r = p // 2
    c = data.shape[2]
    nd = basis.shape[0]
    for yy in range(y0, y1):
        for xx in range(x0, x1):
            for j in range(nd):
                acc = 0.0
                idx = 0
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        for ch in range(c):
                            acc += basis[j, idx] * data[yy + dy, xx + dx, ch]
                            idx += 1
                out[yy - y0, xx - x0, j] = acc - mean_dot[j]


@njit(cache=True, nogil=True)
def _project_one(q, basis, mean_dot, out):
    nd = basis.shape[0]
    n = q.shape[0]
    for j in range(nd):
        acc = 0.0
        for idx in range(n):
            acc += basis[j, idx] * q[idx]
        out[j] = acc - mean_dot[j]


@njit(cache=True, nogil=True)
def _redirect_kernel(counts, parts, nd, redirect):
    nbins = counts.shape[0]
    filled = np.empty(nbins, dtype=np.int64)
    nf = 0
    for b in range(nbins):
        if counts[b] > 0:
            filled[nf] = b
            nf += 1
    digits = np.empty(nd, dtype=np.int64)
    for b in range(nbins):
        if counts[b] > 0:
            redirect[b] = b
            continue
        v = b
        for j in range(nd):
            digits[j] = v % parts
            v //= parts
        best = -1
        best_d2 = 1 << 62
        for fi in range(nf):
            o = filled[fi]
            v = o
            d2 = 0
            for j in range(nd):
                t = v % parts - digits[j]
                v //= parts
                d2 += t * t
            if d2 < best_d2:
                best_d2 = d2
                best = o
        redirect[b] = best


def build_bin_index(b: ImageBuffer, geom: PatchGeometry | None = None,
                    sample_stride: int = 7, *, dims: int = 4, parts: int = 9,
                    index_stride: int = 1) -> BinIndex:
    """Bucket `b`'s patch coordinates for lookalike candidate proposals.

    The projection basis is fitted on every `sample_stride`-th valid
    coordinate in raster order (the fit needs at least ``10 * dims``
    samples); partition boundaries are equal-population quantiles of that
    sample per projection axis. Every `index_stride`-th coordinate is then
    bucketed — the default indexes all of them; raise the stride when the
    index's memory matters more than candidate coverage. A constant image
    has nothing to project and collapses into a single bucket.
    """
    geom = geom or PatchGeometry()
    if dims < 1 or parts < 1:
        raise ValueError(f"need dims >= 1 and parts >= 1, got {dims}, {parts}")
    if sample_stride < 1 or index_stride < 1:
        raise ValueError("strides must be >= 1")
    if parts ** dims > (1 << 24):
        raise ValueError(f"{parts}^{dims} cells is beyond any useful grid")
    rect = geom.valid_rect_of(b)
    if rect.area <= 0:
        raise InputError("image smaller than the patch")
    dims = min(dims, geom.patch_size ** 2 * b.channels)
    n_samples = len(range(0, rect.area, sample_stride))
    if n_samples < 10 * dims:
        raise InputError(
            f"{n_samples} patch samples cannot estimate a {dims}-dimensional "
            f"projection (need {10 * dims}); lower sample_stride or dims")

    p = geom.patch_size
    ys, xs = np.divmod(np.arange(0, rect.area, sample_stride), rect.width)
    windows = np.lib.stride_tricks.sliding_window_view(b.data, (p, p), axis=(0, 1))
    x_fit = windows[ys, xs].transpose(0, 2, 3, 1).reshape(n_samples, -1)
    x_fit = x_fit.astype(np.float64)
    mean = x_fit.mean(axis=0)
    centered = x_fit - mean
    cov = centered.T @ centered / n_samples
    evals, evecs = np.linalg.eigh(cov)
    basis = evecs[:, : -dims - 1 : -1].T.copy()
    if float(evals[-1]) <= 1e-18:
        basis = np.zeros_like(basis)  # constant image: one bucket holds all
    for j in range(dims):
        if basis[j, np.argmax(np.abs(basis[j]))] < 0:
            basis[j] = -basis[j]
    mean_dot = basis @ mean

    proj = np.empty((rect.height, rect.width, dims), dtype=np.float64)
    _project_kernel(b.data, basis, mean_dot, p, rect.x0, rect.y0,
                    rect.x1, rect.y1, proj)
    flat = proj.reshape(-1, dims)[::index_stride]
    sample_proj = centered @ basis.T
    qs = np.arange(1, parts) / parts
    edges = np.stack([np.quantile(sample_proj[:, j], qs) for j in range(dims)])

    ids = np.zeros(flat.shape[0], dtype=np.int64)
    scale = 1
    for j in range(dims):
        ids += scale * np.searchsorted(edges[j], flat[:, j], side="right")
        scale *= parts
    nbins = parts ** dims
    counts = np.bincount(ids, minlength=nbins)
    bucket_start = np.zeros(nbins + 1, dtype=np.int64)
    np.cumsum(counts, out=bucket_start[1:])
    order = np.argsort(ids, kind="stable")
    iy, ix = np.divmod(np.arange(0, rect.area, index_stride), rect.width)
    bucket_x = (ix + rect.x0).astype(np.int32)[order]
    bucket_y = (iy + rect.y0).astype(np.int32)[order]
    redirect = np.empty(nbins, dtype=np.int64)
    _redirect_kernel(counts, parts, dims, redirect)
    return BinIndex(basis, mean_dot, edges, parts, bucket_start,
                    bucket_x, bucket_y, redirect, geom,
                    (b.width, b.height))


def _query_bin(index: BinIndex, query: np.ndarray) -> int:
    """The populated cell a flattened query patch falls into."""
    nd = index.basis.shape[0]
    want = index.geom.patch_size ** 2
    q = np.ascontiguousarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.basis.shape[1]:
        raise ValueError(f"query patch has {q.shape[0]} samples, the index "
                         f"was built over {index.basis.shape[1]} "
                         f"({want} pixels per channel)")
    v = np.empty(nd, dtype=np.float64)
    _project_one(q, index.basis, index.mean_dot, v)
    bid = 0
    scale = 1
    for j in range(nd):
        bid += scale * int(np.searchsorted(index.edges[j], v[j], side="right"))
        scale *= index.parts
    return int(index.redirect[bid])


def bin_candidate(index: BinIndex, query_patch: np.ndarray,
                  rng: np.random.Generator | None = None) -> tuple[int, int]:
    """A uniformly random coordinate from the query's bucket.

    `query_patch` is a (p, p, channels) window or its flattened copy; the
    lookup lands in the cell its projection selects, following the redirect
    when that cell is empty. Returns an (x, y) center.
    """
    if index.indexed == 0:
        raise InputError("the bin index holds no coordinates")
    bid = _query_bin(index, np.asarray(query_patch))
    lo = int(index.bucket_start[bid])
    hi = int(index.bucket_start[bid + 1])
    rng = rng or np.random.default_rng(0)
    pick = lo + int(rng.integers(hi - lo))
    return int(index.bucket_x[pick]), int(index.bucket_y[pick])
