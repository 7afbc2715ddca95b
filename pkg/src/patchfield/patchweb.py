"""Correspondence fields over an image collection, persisted on disk.

Every image in a collection carries a field mapping each of its patch
centers to the best patch found anywhere else in the collection.  An
entry is one 64-bit word — 12-bit x, 12-bit y, 16-bit image index, and a
24-bit quantized distance — so a field costs 8 bytes per pixel in memory
and deflate-compresses well on disk.  The collection never has to fit in
memory at once: relaxation repeatedly loads a small working set of
images, improves their fields jointly, and writes them back, merging
with whatever a concurrent worker may have saved in the meantime.

Candidates for each coordinate come from five operators — propagation
from scan-order neighbors, exponentially shrinking random search around
the current target, a projection-bucket lookup in another loaded image,
a hop through the current target's own field, and a uniform sample from
another loaded image — and every accepted improvement is also offered to
the target image's field in mirrored form.

A query image can be matched against a finished collection without
modifying it: the query joins every working set, only the query's field
is written, and independent worker replicas are merged by pointwise
minimum distance.
"""

from __future__ import annotations

import fcntl
import math
import os
import struct
import zlib
from dataclasses import dataclass, field as _field
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit

from patchfield._rng import PURPOSE_WEB, draw_int, draw_pm1, py_mix64, stream_key
from patchfield.core import (
    ImageBuffer,
    InputError,
    PatchGeometry,
    Rect,
    _patch_ssd,
    load_image,
)
from patchfield.search_ops import build_bin_index

__all__ = [
    "MAX_IMAGES",
    "MAX_SIDE",
    "QMAX",
    "WEB_SENTINEL",
    "Web",
    "WebField",
    "WebImageInfo",
    "WorkingSet",
    "WorkingSetPolicy",
    "build_web",
    "coincidence_probability",
    "dequantize_dist",
    "expected_coincidence_sets",
    "load_web",
    "pack_web_entry",
    "quantize_dist",
    "query_web",
    "read_manifest",
    "read_web_field",
    "relax",
    "select_working_set",
    "unpack_web_entry",
    "write_manifest",
    "write_web_field",
]


# ---------------------------------------------------------------------------
# Packed entry format

MAX_SIDE = 4096          # coordinates must fit 12 bits
MAX_IMAGES = 65536       # image index must fit 16 bits
QMAX = (1 << 24) - 1     # distance field saturates here

#: Unassigned entry: every field at its maximum, i.e. the all-ones word.
WEB_SENTINEL = np.uint64(0xFFFFFFFFFFFFFFFF)

WEB_MAGIC = b"WEB1"
MANIFEST_NAME = "manifest"

# Shift amounts and masks as uint64 so kernel arithmetic never leaves the
# unsigned domain (mixing uint64 with signed literals promotes to float64
# under numba's rules).
_U12 = np.uint64(12)
_U24 = np.uint64(24)
_U40 = np.uint64(40)
_M12 = np.uint64(0xFFF)
_M16 = np.uint64(0xFFFF)
_QMAX_I = np.int64(QMAX)
_MASK63 = (1 << 63) - 1


def pack_web_entry(x: int, y: int, image_index: int, dist: int) -> int:
    """Pack a correspondence into one 64-bit word.

    `dist` is the quantized distance; values beyond the 24-bit range
    saturate at the maximum.  Coordinates and image index must fit their
    fields exactly — the format addresses images up to 4096 pixels per
    side in collections of up to 65536 images.
    """
    if not (0 <= x < MAX_SIDE and 0 <= y < MAX_SIDE):
        raise ValueError(f"coordinate ({x}, {y}) outside the {MAX_SIDE}-pixel format range")
    if not 0 <= image_index < MAX_IMAGES:
        raise ValueError(f"image index {image_index} outside the {MAX_IMAGES}-image format range")
    if dist < 0:
        raise ValueError(f"quantized distance must be non-negative, got {dist}")
    q = min(int(dist), QMAX)
    return x | (y << 12) | (image_index << 24) | (q << 40)


def unpack_web_entry(word: int) -> tuple[int, int, int, int]:
    """Inverse of :func:`pack_web_entry`: (x, y, imageIndex, dist)."""
    w = int(word)
    if not 0 <= w < (1 << 64):
        raise ValueError(f"packed entry must be an unsigned 64-bit value, got {word}")
    return (w & 0xFFF, (w >> 12) & 0xFFF, (w >> 24) & 0xFFFF, w >> 40)


def _qscale(dmax: float) -> float:
    return QMAX / dmax


def quantize_dist(d, dmax: float):
    """Map distances in [0, dmax] onto the 24-bit grid, saturating above.

    Monotone: d1 <= d2 implies q(d1) <= q(d2).  Accepts scalars or
    arrays; returns int64.
    """
    if dmax <= 0:
        raise ValueError(f"distance ceiling must be positive, got {dmax}")
    d = np.minimum(np.asarray(d, dtype=np.float64), dmax)
    if np.any(d < 0):
        raise ValueError("distances are non-negative")
    q = np.floor(d * _qscale(dmax) + 0.5).astype(np.int64)
    out = np.minimum(q, QMAX)
    return out if out.ndim else int(out)


def dequantize_dist(q, dmax: float):
    """Midpoint-free inverse of :func:`quantize_dist` (exact at 0 and dmax)."""
    if dmax <= 0:
        raise ValueError(f"distance ceiling must be positive, got {dmax}")
    d = np.asarray(q, dtype=np.float64) * (dmax / QMAX)
    return d if d.ndim else float(d)


@njit(inline="always", cache=True)
def _pack(x, y, img, q):
    return (
        np.uint64(x)
        | (np.uint64(y) << _U12)
        | (np.uint64(img) << _U24)
        | (np.uint64(q) << _U40)
    )


@njit(inline="always", cache=True)
def _x_of(w):
    return np.int64(w & _M12)


@njit(inline="always", cache=True)
def _y_of(w):
    return np.int64((w >> _U12) & _M12)


@njit(inline="always", cache=True)
def _img_of(w):
    return np.int64((w >> _U24) & _M16)


@njit(inline="always", cache=True)
def _q_of(w):
    return np.int64(w >> _U40)


# ---------------------------------------------------------------------------
# Fields

@dataclass
class WebField:
    """One image's packed correspondence field.

    `packed` covers the full image plane; coordinates outside the valid
    rect (and unassigned ones inside it) hold the sentinel word.
    """

    packed: np.ndarray                  # (H, W) uint64
    geom: PatchGeometry
    dims: tuple[int, int]               # (width, height)
    index: int                          # manifest position; -1 if detached

    def __post_init__(self) -> None:
        w, h = self.dims
        if self.packed.shape != (h, w) or self.packed.dtype != np.uint64:
            raise ValueError(
                f"field storage must be uint64 of shape {(h, w)}, got "
                f"{self.packed.dtype} {self.packed.shape}"
            )

    @property
    def rect(self) -> Rect:
        return self.geom.valid_rect(*self.dims)

    def rect_view(self) -> np.ndarray:
        r = self.rect
        return self.packed[r.y0 : r.y1, r.x0 : r.x1]

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Unpacked (tx, ty, timg, q) int64 planes over the valid rect."""
        v = self.rect_view()
        tx = (v & _M12).astype(np.int64)
        ty = ((v >> _U12) & _M12).astype(np.int64)
        ti = ((v >> _U24) & _M16).astype(np.int64)
        q = (v >> _U40).astype(np.int64)
        return tx, ty, ti, q

    def assigned(self) -> np.ndarray:
        return self.rect_view() != WEB_SENTINEL

    def mean_quantized(self) -> float:
        """Mean stored quantized distance; sentinels weigh in at the maximum."""
        return float((self.rect_view() >> _U40).astype(np.float64).mean())

    def distances(self, channels: int) -> np.ndarray:
        """Dequantized distances over the valid rect, inf where unassigned."""
        dmax = float(self.geom.patch_size**2 * channels)
        d = dequantize_dist((self.rect_view() >> _U40).astype(np.int64), dmax)
        return np.where(self.assigned(), d, np.inf)

    def copy(self) -> "WebField":
        return WebField(self.packed.copy(), self.geom, self.dims, self.index)


def sentinel_field(width: int, height: int, geom: PatchGeometry, index: int) -> WebField:
    """A fresh all-unassigned field for a width x height image."""
    return WebField(
        np.full((height, width), WEB_SENTINEL, dtype=np.uint64), geom, (width, height), index
    )


def _merge_packed(old: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Pointwise better-of-two; sentinels lose to anything, ties keep `old`."""
    old_q = old >> _U40
    new_q = new >> _U40
    take = (old == WEB_SENTINEL) | ((new != WEB_SENTINEL) & (new_q < old_q))
    return np.where(take, new, old)


# ---------------------------------------------------------------------------
# Disk format

def _encode_field(f: WebField) -> bytes:
    header = WEB_MAGIC + struct.pack("<IIH", f.dims[0], f.dims[1], f.geom.patch_size)
    body = f.rect_view().astype("<u8").tobytes()
    return header + zlib.compress(body)


def _decode_field(data: bytes, path: str, index: int) -> WebField:
    if data[:4] != WEB_MAGIC:
        raise InputError(f"{path}: not a web field file (bad magic {data[:4]!r})")
    if len(data) < 14:
        raise InputError(f"{path}: truncated web field header")
    w, h, p = struct.unpack("<IIH", data[4:14])
    geom = PatchGeometry(p)
    r = geom.valid_rect(w, h)
    try:
        body = zlib.decompress(data[14:])
    except zlib.error as exc:
        raise InputError(f"{path}: corrupt web field payload ({exc})") from exc
    if len(body) != r.area * 8:
        raise InputError(
            f"{path}: field payload holds {len(body)} bytes, expected {r.area * 8}"
        )
    packed = np.full((h, w), WEB_SENTINEL, dtype=np.uint64)
    packed[r.y0 : r.y1, r.x0 : r.x1] = (
        np.frombuffer(body, dtype="<u8").reshape(r.height, r.width).astype(np.uint64)
    )
    return WebField(packed, geom, (w, h), index)


def write_web_field(f: WebField, path: str, *, merge: bool = True) -> None:
    """Persist a field, holding an exclusive lock on the file throughout.

    With `merge` (the default) an existing file of matching geometry is
    first combined entry-by-entry, keeping whichever side stores the
    smaller distance — a concurrent worker's improvements survive.
    """
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    with os.fdopen(fd, "r+b") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        existing = fh.read()
        out = f
        if merge and existing:
            prior = _decode_field(existing, path, f.index)
            if prior.dims != f.dims or prior.geom.patch_size != f.geom.patch_size:
                raise InputError(
                    f"{path}: on-disk field is {prior.dims} at patch "
                    f"{prior.geom.patch_size}, cannot merge {f.dims} at patch "
                    f"{f.geom.patch_size}"
                )
            out = WebField(_merge_packed(prior.packed, f.packed), f.geom, f.dims, f.index)
        fh.seek(0)
        fh.truncate()
        fh.write(_encode_field(out))
        fh.flush()


def read_web_field(path: str, index: int = -1) -> WebField:
    """Read a field file under a shared lock (safe against a merging writer)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise InputError(f"{path}: cannot read web field ({exc})") from exc
    with fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_SH)
        data = fh.read()
    return _decode_field(data, path, index)


# ---------------------------------------------------------------------------
# Manifest and collection handle

class WebImageInfo(NamedTuple):
    path: str
    width: int
    height: int


def write_manifest(infos: Sequence[WebImageInfo], web_dir: str) -> None:
    lines = [f"{i.path}\t{i.width}\t{i.height}\n" for i in infos]
    with open(os.path.join(web_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_manifest(web_dir: str) -> list[WebImageInfo]:
    path = os.path.join(web_dir, MANIFEST_NAME)
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{web_dir}: not a web directory ({exc})") from exc
    infos: list[WebImageInfo] = []
    with fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise InputError(f"{path}:{ln}: manifest line needs path, width, height")
            try:
                w, h = int(parts[1]), int(parts[2])
            except ValueError as exc:
                raise InputError(f"{path}:{ln}: bad dimensions {parts[1:]!r}") from exc
            infos.append(WebImageInfo(parts[0], w, h))
    if not infos:
        raise InputError(f"{path}: empty manifest")
    return infos


def _resolve_image_path(p: str, web_dir: str) -> str:
    if os.path.isabs(p) or os.path.exists(p):
        return p
    return os.path.join(web_dir, p)


@dataclass
class Web:
    """Handle to an on-disk collection: manifest plus one field per image."""

    dir: str
    images: list[WebImageInfo]
    geom: PatchGeometry

    def __len__(self) -> int:
        return len(self.images)

    def field_path(self, index: int) -> str:
        return os.path.join(self.dir, f"{index}.wnnf.z")

    def read_field(self, index: int) -> WebField:
        info = self.images[index]
        f = read_web_field(self.field_path(index), index)
        if f.dims != (info.width, info.height):
            raise InputError(
                f"{self.field_path(index)}: field is {f.dims}, manifest says "
                f"{(info.width, info.height)}"
            )
        return f

    def load_image(self, index: int) -> ImageBuffer:
        info = self.images[index]
        img = load_image(_resolve_image_path(info.path, self.dir))
        if (img.width, img.height) != (info.width, info.height):
            raise InputError(
                f"{info.path}: image is {img.width}x{img.height}, manifest says "
                f"{info.width}x{info.height}"
            )
        return img


def load_web(web_dir: str) -> Web:
    """Open an existing web directory."""
    infos = read_manifest(web_dir)
    probe = os.path.join(web_dir, "0.wnnf.z")
    try:
        with open(probe, "rb") as fh:
            head = fh.read(14)
    except OSError as exc:
        raise InputError(f"{web_dir}: missing field file 0.wnnf.z ({exc})") from exc
    if head[:4] != WEB_MAGIC or len(head) < 14:
        raise InputError(f"{probe}: not a web field file")
    p = struct.unpack("<H", head[12:14])[0]
    return Web(web_dir, infos, PatchGeometry(p))


# ---------------------------------------------------------------------------
# Working sets

@dataclass(frozen=True)
class WorkingSetPolicy:
    """How the next working set relates to the previous one.

    A `keep_fraction` of slots retain members of the previous set, a
    `fresh_fraction` is sampled uniformly from the rest of the
    collection, and the remainder goes to the images most often targeted
    by the kept fields' current entries.
    """

    keep_fraction: float = 1.0 / 3.0
    fresh_fraction: float = 1.0 / 3.0
    enrich_fraction: float = 1.0 / 3.0

    def __post_init__(self) -> None:
        f = (self.keep_fraction, self.fresh_fraction, self.enrich_fraction)
        if any(x < 0 or x > 1 for x in f):
            raise ValueError(f"policy fractions must lie in [0, 1], got {f}")
        if abs(sum(f) - 1.0) > 1e-9:
            raise ValueError(f"policy fractions must sum to 1, got {sum(f)}")


@dataclass
class WorkingSet:
    """The images currently loaded for relaxation.

    `indices` are manifest positions; a query image, when present, uses
    the first position past the collection and is flagged by
    `query_index`.
    """

    indices: list[int]
    capacity: int
    policy: WorkingSetPolicy
    images: dict[int, ImageBuffer] = _field(default_factory=dict)
    fields: dict[int, WebField] = _field(default_factory=dict)
    query_index: int | None = None


def _target_histogram(previous: WorkingSet, kept: Sequence[int], n: int) -> np.ndarray:
    counts = np.zeros(n, dtype=np.int64)
    for i in kept:
        f = previous.fields.get(i)
        if f is None:
            continue
        v = f.rect_view().ravel()
        v = v[v != WEB_SENTINEL]
        if v.size == 0:
            continue
        timg = ((v >> _U24) & _M16).astype(np.int64)
        timg = timg[timg < n]
        counts += np.bincount(timg, minlength=n)
    return counts


def select_working_set(
    manifest,
    previous: WorkingSet | None,
    policy: WorkingSetPolicy | None = None,
    *,
    capacity: int | None = None,
    rng: np.random.Generator | None = None,
) -> WorkingSet:
    """Choose the next working set's members.

    `manifest` may be a :class:`Web`, a sequence of image infos, or the
    collection size itself.  Slots are filled in three runs — kept
    members of `previous`, a uniform fresh sample, and the modal target
    images of the kept fields (largest count first, smaller index on
    ties) — with any shortfall topped up uniformly.  A capacity at or
    above the collection size selects the whole collection.
    """
    n = manifest if isinstance(manifest, int) else len(manifest)
    if n < 1:
        raise InputError("cannot select a working set from an empty collection")
    if policy is None:
        policy = WorkingSetPolicy()
    if capacity is None:
        capacity = previous.capacity if previous is not None else 8
    if capacity < 2:
        raise ValueError(f"a working set holds at least two images, got capacity {capacity}")
    if rng is None:
        rng = np.random.default_rng(0)
    if capacity >= n:
        return WorkingSet(list(range(n)), capacity, policy)

    keep_n = min(int(round(policy.keep_fraction * capacity)), capacity)
    fresh_n = min(int(round(policy.fresh_fraction * capacity)), capacity - keep_n)

    chosen: list[int] = []
    taken: set[int] = set()

    def grab(items) -> None:
        for i in items:
            i = int(i)
            if i not in taken:
                taken.add(i)
                chosen.append(i)

    kept: list[int] = []
    if previous is not None and keep_n > 0:
        pool_prev = [i for i in previous.indices if i != previous.query_index and i < n]
        if keep_n >= len(pool_prev):
            kept = list(pool_prev)
        else:
            picks = set(rng.choice(len(pool_prev), size=keep_n, replace=False).tolist())
            kept = [pool_prev[j] for j in range(len(pool_prev)) if j in picks]
    grab(kept)

    if fresh_n > 0:
        pool = [i for i in range(n) if i not in taken]
        take = min(fresh_n, len(pool))
        if take:
            picks = rng.choice(len(pool), size=take, replace=False)
            grab(pool[j] for j in sorted(picks.tolist()))

    want = capacity - len(chosen)
    if want > 0 and previous is not None and kept:
        counts = _target_histogram(previous, kept, n)
        order = np.argsort(-counts, kind="stable")
        linked = [int(j) for j in order if counts[j] > 0 and int(j) not in taken]
        grab(linked[:want])

    want = capacity - len(chosen)
    if want > 0:
        pool = [i for i in range(n) if i not in taken]
        if pool:
            picks = rng.choice(len(pool), size=min(want, len(pool)), replace=False)
            grab(pool[j] for j in sorted(picks.tolist()))

    return WorkingSet(chosen, capacity, policy)


# ---------------------------------------------------------------------------
# Relaxation kernel

_CAND_CAP = 32


@njit(inline="always", cache=True)
def _add_cand(cs_, cx_, cy_, nc, s, x, y):
    for t in range(nc):
        if cs_[t] == s and cx_[t] == x and cy_[t] == y:
            return nc
    if nc < cs_.shape[0]:
        cs_[nc] = s
        cx_[nc] = x
        cy_[nc] = y
        return nc + 1
    return nc


@njit(inline="always", cache=True)
def _clamp(v, lo, hi):
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


@njit(cache=True, nogil=True)
def _relax_kernel(
    imgs,        # (L, Hm, Wm, C) float32, zero-padded to the largest image
    packed,      # (L, Hm, Wm) uint64, sentinel outside each valid rect
    rects,       # (L, 4) int64 valid rects: x0, y0, x1, y1
    dims,        # (L, 2) int64 true (width, height)
    midx,        # (L,) int64 manifest index per slot
    active,      # (L,) uint8: visited and writable
    slot_of,     # (n_indices,) int64: manifest index -> slot or -1
    p,
    dmax,
    qscale,
    sweep,
    seed,
    alpha,
    uniform_only,
    basis,       # (L, K, D) float64 projection rows per slot
    mean_dot,    # (L, K) float64
    edges,       # (L, K, parts-1) float64
    parts,
    bstart,      # (L, nbins+1) int64 bucket offsets
    bxs,         # (L, max_indexed) int32 bucket-major coordinates
    bys,
    redirect,    # (L, nbins) int64
    cand_s,      # (_CAND_CAP,) int64 scratch
    cand_x,
    cand_y,
):
    L = imgs.shape[0]
    C = imgs.shape[3]
    K = basis.shape[1]
    pr = p // 2
    reverse = (sweep % 2) == 1
    improved = 0
    for si in range(L):
        if active[si] == 0:
            continue
        x0 = rects[si, 0]
        y0 = rects[si, 1]
        x1 = rects[si, 2]
        y1 = rects[si, 3]
        own = midx[si]
        a_img = imgs[si]
        for ty in range(y1 - y0):
            yy = y1 - 1 - ty if reverse else y0 + ty
            for tx in range(x1 - x0):
                xx = x1 - 1 - tx if reverse else x0 + tx
                key = stream_key(seed, PURPOSE_WEB, own, sweep, xx, yy)
                di = 0
                word = packed[si, yy, xx]
                has_cur = word != WEB_SENTINEL
                q_cur = _q_of(word)
                nc = 0
                ctslot = np.int64(-1)
                ctx = np.int64(0)
                cty = np.int64(0)
                if has_cur:
                    ctx = _x_of(word)
                    cty = _y_of(word)
                    ctslot = slot_of[_img_of(word)]
                    if ctslot >= 0 and not (
                        rects[ctslot, 0] <= ctx < rects[ctslot, 2]
                        and rects[ctslot, 1] <= cty < rects[ctslot, 3]
                    ):
                        # a target outside its image's valid rect can only
                        # come from a corrupt file; treat it as unloaded
                        ctslot = -1
                    if ctslot >= 0:
                        nc = _add_cand(cand_s, cand_x, cand_y, nc, ctslot, ctx, cty)
                start = nc

                if uniform_only == 0:
                    # Propagation: shift scan-order neighbors' targets by one.
                    step = -1 if reverse else 1
                    nxx = xx - step
                    if x0 <= nxx < x1:
                        w2 = packed[si, yy, nxx]
                        if w2 != WEB_SENTINEL:
                            es = slot_of[_img_of(w2)]
                            if es >= 0 and es != si:
                                ex = _clamp(_x_of(w2) + step, rects[es, 0], rects[es, 2] - 1)
                                ey = _clamp(_y_of(w2), rects[es, 1], rects[es, 3] - 1)
                                nc = _add_cand(cand_s, cand_x, cand_y, nc, es, ex, ey)
                    nyy = yy - step
                    if y0 <= nyy < y1:
                        w2 = packed[si, nyy, xx]
                        if w2 != WEB_SENTINEL:
                            es = slot_of[_img_of(w2)]
                            if es >= 0 and es != si:
                                ex = _clamp(_x_of(w2), rects[es, 0], rects[es, 2] - 1)
                                ey = _clamp(_y_of(w2) + step, rects[es, 1], rects[es, 3] - 1)
                                nc = _add_cand(cand_s, cand_x, cand_y, nc, es, ex, ey)

                    # Random search around the current target, radius halving.
                    if ctslot >= 0 and ctslot != si:
                        radius = np.float64(max(dims[ctslot, 0], dims[ctslot, 1]))
                        while radius >= 1.0:
                            rx = draw_pm1(key, di)
                            ry = draw_pm1(key, di + 1)
                            di += 2
                            cx = np.int64(math.floor(ctx + radius * rx + 0.5))
                            cy = np.int64(math.floor(cty + radius * ry + 0.5))
                            cx = _clamp(cx, rects[ctslot, 0], rects[ctslot, 2] - 1)
                            cy = _clamp(cy, rects[ctslot, 1], rects[ctslot, 3] - 1)
                            nc = _add_cand(cand_s, cand_x, cand_y, nc, ctslot, cx, cy)
                            radius *= alpha

                    # Binning: project this patch into another slot's buckets.
                    if L >= 2:
                        rpick = draw_int(key, di, L - 1)
                        di += 1
                        bs = rpick + 1 if rpick >= si else rpick
                        bid = np.int64(0)
                        scale = np.int64(1)
                        for j in range(K):
                            acc = 0.0
                            idx = 0
                            for dy in range(-pr, pr + 1):
                                for dx in range(-pr, pr + 1):
                                    for ch in range(C):
                                        acc += basis[bs, j, idx] * a_img[yy + dy, xx + dx, ch]
                                        idx += 1
                            v = acc - mean_dot[bs, j]
                            lo = 0
                            hi = parts - 1
                            while lo < hi:
                                mid = (lo + hi) >> 1
                                if edges[bs, j, mid] <= v:
                                    lo = mid + 1
                                else:
                                    hi = mid
                            bid += lo * scale
                            scale *= parts
                        b2 = redirect[bs, bid]
                        blo = bstart[bs, b2]
                        cnt = bstart[bs, b2 + 1] - blo
                        if cnt > 0:
                            pick = blo + draw_int(key, di, cnt)
                            di += 1
                            nc = _add_cand(
                                cand_s, cand_x, cand_y, nc, bs,
                                np.int64(bxs[bs, pick]), np.int64(bys[bs, pick]),
                            )

                    # Enrichment: hop through the current target's own entry.
                    if ctslot >= 0:
                        w2 = packed[ctslot, cty, ctx]
                        if w2 != WEB_SENTINEL:
                            ei = _img_of(w2)
                            es = slot_of[ei]
                            if es >= 0 and ei != own:
                                nc = _add_cand(
                                    cand_s, cand_x, cand_y, nc, es, _x_of(w2), _y_of(w2)
                                )

                # Uniform sample from another loaded image.
                if L >= 2:
                    rpick = draw_int(key, di, L - 1)
                    di += 1
                    us = rpick + 1 if rpick >= si else rpick
                    ux = rects[us, 0] + draw_int(key, di, rects[us, 2] - rects[us, 0])
                    uy = rects[us, 1] + draw_int(key, di + 1, rects[us, 3] - rects[us, 1])
                    di += 2
                    nc = _add_cand(cand_s, cand_x, cand_y, nc, us, ux, uy)

                for t in range(start, nc):
                    cs = cand_s[t]
                    if cs == si:
                        continue
                    cx = cand_x[t]
                    cy = cand_y[t]
                    if has_cur:
                        early = (np.float64(q_cur) - 0.5) / qscale
                    else:
                        early = np.inf
                    d = _patch_ssd(a_img, xx, yy, imgs[cs], cx, cy, p, early)
                    if d > dmax:
                        d = dmax
                    q = np.int64(math.floor(d * qscale + 0.5))
                    if q > _QMAX_I:
                        q = _QMAX_I
                    if (not has_cur) or q < q_cur:
                        packed[si, yy, xx] = _pack(cx, cy, midx[cs], q)
                        has_cur = True
                        q_cur = q
                        improved += 1
                        if active[cs] == 1:
                            wt = packed[cs, cy, cx]
                            if wt == WEB_SENTINEL or q < _q_of(wt):
                                packed[cs, cy, cx] = _pack(xx, yy, own, q)
    return improved


# ---------------------------------------------------------------------------
# Relaxation driver

def _bin_stack(
    slots: list[ImageBuffer], geom: PatchGeometry, *, parts: int = 9, want_dims: int = 4
):
    """Per-slot bucket indexes stacked into rectangular arrays.

    All slots share one projection dimensionality (the largest every
    loaded image can support, capped at `want_dims`); an image too small
    to train any projection gets empty buckets, which the kernel skips.
    """
    L = len(slots)
    p = geom.patch_size
    c = slots[0].channels
    d_len = p * p * c
    areas = [geom.valid_rect_of(img).area for img in slots]
    k = min(want_dims, d_len, min(a // 10 for a in areas))
    usable = k >= 1
    if not usable:
        k = 1
    nbins = parts**k
    basis = np.zeros((L, k, d_len), dtype=np.float64)
    mean_dot = np.zeros((L, k), dtype=np.float64)
    edges = np.zeros((L, k, parts - 1), dtype=np.float64)
    bstart = np.zeros((L, nbins + 1), dtype=np.int64)
    redirect = np.zeros((L, nbins), dtype=np.int64)
    bucket_cols: list[tuple[np.ndarray, np.ndarray]] = []
    max_indexed = 1
    for i, img in enumerate(slots):
        if not usable:
            bucket_cols.append((np.zeros(0, np.int32), np.zeros(0, np.int32)))
            continue
        stride = 7 if (areas[i] + 6) // 7 >= 10 * k else 1
        bi = build_bin_index(img, geom, stride, dims=k, parts=parts)
        basis[i] = bi.basis
        mean_dot[i] = bi.mean_dot
        edges[i] = bi.edges
        bstart[i] = bi.bucket_start
        redirect[i] = bi.redirect
        bucket_cols.append((bi.bucket_x, bi.bucket_y))
        max_indexed = max(max_indexed, bi.indexed)
    bxs = np.zeros((L, max_indexed), dtype=np.int32)
    bys = np.zeros((L, max_indexed), dtype=np.int32)
    for i, (bx, by) in enumerate(bucket_cols):
        bxs[i, : bx.shape[0]] = bx
        bys[i, : by.shape[0]] = by
    return basis, mean_dot, edges, bstart, bxs, bys, redirect


def relax(
    ws: WorkingSet,
    sweeps: int = 2,
    *,
    seed: int = 0,
    first_sweep: int = 0,
    alpha: float = 0.5,
    only: int | None = None,
    uniform_only: bool = False,
) -> int:
    """Improve the loaded fields in place; returns accepted updates.

    Even-numbered sweeps run in scan order, odd ones reversed.  Each
    coordinate gathers a deduplicated candidate set (propagation, random
    search, binning, enrichment hop, uniform — or uniform alone when
    `uniform_only`), accepts strictly smaller distances, and mirrors
    every accepted correspondence into the target's field when that
    field is writable.  With `only`, a single image is visited and all
    other loaded fields stay read-only — the query mode contract.
    """
    indices = list(ws.indices)
    if len(indices) < 2:
        raise ValueError("relaxation needs a working set of at least two images")
    if len(set(indices)) != len(indices):
        raise ValueError(f"working set repeats an image: {indices}")
    for i in indices:
        if i not in ws.images or i not in ws.fields:
            raise ValueError(f"working-set image {i} is not loaded")
    if only is not None and only not in indices:
        raise ValueError(f"image {only} is not in the working set")
    if sweeps < 1:
        raise ValueError(f"sweep count must be positive, got {sweeps}")

    slots = [ws.images[i] for i in indices]
    fields = [ws.fields[i] for i in indices]
    geom = fields[0].geom
    c = slots[0].channels
    for img, f, i in zip(slots, fields, indices):
        if f.geom.patch_size != geom.patch_size:
            raise ValueError("working-set fields disagree on patch size")
        if img.channels != c:
            raise InputError(
                f"collection images must share a channel count; image {i} has "
                f"{img.channels}, expected {c}"
            )
        if (img.width, img.height) != f.dims:
            raise ValueError(f"image {i} is {img.width}x{img.height}, its field says {f.dims}")
        if geom.valid_rect_of(img).area <= 0:
            raise InputError(f"image {i} is smaller than the patch")

    L = len(slots)
    hm = max(img.height for img in slots)
    wm = max(img.width for img in slots)
    imgs = np.zeros((L, hm, wm, c), dtype=np.float32)
    packed = np.full((L, hm, wm), WEB_SENTINEL, dtype=np.uint64)
    rects = np.zeros((L, 4), dtype=np.int64)
    dims = np.zeros((L, 2), dtype=np.int64)
    for s, (img, f) in enumerate(zip(slots, fields)):
        imgs[s, : img.height, : img.width] = img.data
        packed[s, : img.height, : img.width] = f.packed
        r = geom.valid_rect_of(img)
        rects[s] = (r.x0, r.y0, r.x1, r.y1)
        dims[s] = (img.width, img.height)
    midx = np.asarray(indices, dtype=np.int64)
    active = np.ones(L, dtype=np.uint8)
    if only is not None:
        active[:] = 0
        active[indices.index(only)] = 1
    # Sized to the format ceiling: stored entries may target any manifest
    # index, loaded or not, so the lookup must cover the full range.
    slot_of = np.full(MAX_IMAGES + 1, -1, dtype=np.int64)
    for s, i in enumerate(indices):
        slot_of[i] = s

    if uniform_only:
        k = 1
        parts = 9
        basis = np.zeros((L, k, geom.patch_size**2 * c), dtype=np.float64)
        mean_dot = np.zeros((L, k), dtype=np.float64)
        edges = np.zeros((L, k, parts - 1), dtype=np.float64)
        bstart = np.zeros((L, parts**k + 1), dtype=np.int64)
        bxs = np.zeros((L, 1), dtype=np.int32)
        bys = np.zeros((L, 1), dtype=np.int32)
        redirect = np.zeros((L, parts**k), dtype=np.int64)
    else:
        parts = 9
        basis, mean_dot, edges, bstart, bxs, bys, redirect = _bin_stack(
            slots, geom, parts=parts
        )

    dmax = float(geom.patch_size**2 * c)
    qscale = _qscale(dmax)
    cand_s = np.zeros(_CAND_CAP, dtype=np.int64)
    cand_x = np.zeros(_CAND_CAP, dtype=np.int64)
    cand_y = np.zeros(_CAND_CAP, dtype=np.int64)
    improved = 0
    for s in range(sweeps):
        improved += _relax_kernel(
            imgs, packed, rects, dims, midx, active, slot_of,
            geom.patch_size, dmax, qscale, first_sweep + s, seed, alpha,
            1 if uniform_only else 0,
            basis, mean_dot, edges, parts, bstart, bxs, bys, redirect,
            cand_s, cand_x, cand_y,
        )
    for s, f in enumerate(fields):
        h, w = f.packed.shape
        f.packed[:, :] = packed[s, :h, :w]
    return int(improved)


# ---------------------------------------------------------------------------
# Building a web

def _validate_collection_image(path: str, img: ImageBuffer, geom: PatchGeometry) -> None:
    if img.width > MAX_SIDE or img.height > MAX_SIDE:
        raise InputError(
            f"{path}: {img.width}x{img.height} exceeds the {MAX_SIDE}-pixel format ceiling"
        )
    if geom.valid_rect_of(img).area <= 0:
        raise InputError(f"{path}: image is smaller than a {geom.patch_size}-pixel patch")


def _populate(ws: WorkingSet, web: Web, channels: int | None) -> int:
    """Load any missing images/fields from disk; returns the channel count."""
    for i in ws.indices:
        if ws.query_index is not None and i == ws.query_index:
            continue
        if i not in ws.images:
            ws.images[i] = web.load_image(i)
        if i not in ws.fields:
            ws.fields[i] = web.read_field(i)
        if channels is None:
            channels = ws.images[i].channels
        elif ws.images[i].channels != channels:
            raise InputError(
                f"{web.images[i].path}: has {ws.images[i].channels} channels, the "
                f"collection uses {channels}"
            )
    return channels if channels is not None else 0


def build_web(
    paths: Sequence[str],
    web_dir: str,
    *,
    capacity: int = 8,
    rounds: int | None = None,
    sweeps_per_round: int = 2,
    geom: PatchGeometry | None = None,
    policy: WorkingSetPolicy | None = None,
    seed: int = 0,
    alpha: float = 0.5,
    uniform_only: bool = False,
) -> Web:
    """Create and relax a collection web on disk.

    Fields start unassigned; each round selects a working set, loads it,
    runs `sweeps_per_round` relaxation sweeps, and persists every loaded
    field with merge-by-min.  The default round count gives each image
    roughly two working-set visits in expectation.
    """
    if geom is None:
        geom = PatchGeometry()
    n = len(paths)
    if n < 2:
        raise InputError(f"a collection needs at least two images, got {n}")
    if n > MAX_IMAGES:
        raise InputError(f"collection of {n} images exceeds the {MAX_IMAGES}-image format")
    if capacity < 2:
        raise ValueError(f"working-set capacity must be at least 2, got {capacity}")
    if sweeps_per_round < 1:
        raise ValueError(f"sweeps per round must be positive, got {sweeps_per_round}")
    if policy is None:
        policy = WorkingSetPolicy()

    os.makedirs(web_dir, exist_ok=True)
    infos: list[WebImageInfo] = []
    channels: int | None = None
    for path in paths:
        img = load_image(path)
        _validate_collection_image(path, img, geom)
        if channels is None:
            channels = img.channels
        elif img.channels != channels:
            raise InputError(
                f"{path}: has {img.channels} channels, the collection uses {channels}"
            )
        infos.append(WebImageInfo(os.path.abspath(path), img.width, img.height))
    write_manifest(infos, web_dir)
    for i, info in enumerate(infos):
        write_web_field(
            sentinel_field(info.width, info.height, geom, i),
            os.path.join(web_dir, f"{i}.wnnf.z"),
            merge=False,
        )
    web = Web(web_dir, infos, geom)

    cap = min(capacity, n)
    if rounds is None:
        rounds = max(1, math.ceil(2 * n / cap))
    previous: WorkingSet | None = None
    for rnd in range(rounds):
        rng = np.random.default_rng([seed & _MASK63, rnd])
        ws = select_working_set(n, previous, policy, capacity=capacity, rng=rng)
        if previous is not None:
            for i in ws.indices:
                if i in previous.images:
                    ws.images[i] = previous.images[i]
                    ws.fields[i] = previous.fields[i]
        _populate(ws, web, channels)
        relax(
            ws,
            sweeps_per_round,
            seed=seed,
            first_sweep=rnd * sweeps_per_round,
            alpha=alpha,
            uniform_only=uniform_only,
        )
        for i in ws.indices:
            write_web_field(ws.fields[i], web.field_path(i), merge=True)
        previous = ws
    return web


# ---------------------------------------------------------------------------
# Querying a web

def query_web(
    web_dir: str,
    query: ImageBuffer | str,
    *,
    capacity: int = 8,
    rounds: int | None = None,
    sweeps_per_round: int = 2,
    seed: int = 0,
    workers: int = 1,
    alpha: float = 0.5,
    uniform_only: bool = False,
) -> WebField:
    """Match a query image against a finished web without modifying it.

    The query joins every working set and is the only image visited;
    collection fields are loaded read-only and their files stay
    byte-identical.  With `workers` > 1, independent replicas run with
    decorrelated seeds and their fields merge by pointwise minimum.
    """
    web = load_web(web_dir)
    if isinstance(query, str):
        query = load_image(query)
    _validate_collection_image("query image", query, web.geom)
    if capacity < 2:
        raise ValueError(f"working-set capacity must be at least 2, got {capacity}")
    if workers < 1:
        raise ValueError(f"worker count must be positive, got {workers}")
    n = len(web)
    qidx = n
    mcap = min(capacity - 1, n)
    if rounds is None:
        rounds = max(1, math.ceil(2 * n / mcap))

    image_cache: dict[int, ImageBuffer] = {}
    field_cache: dict[int, WebField] = {}
    uniform = WorkingSetPolicy(0.0, 1.0, 0.0)
    merged: WebField | None = None
    for w in range(workers):
        wseed = seed if workers == 1 else py_mix64((seed & _MASK63) ^ (0x5EED + w)) & _MASK63
        qfield = sentinel_field(query.width, query.height, web.geom, qidx)
        channels = query.channels
        for rnd in range(rounds):
            rng = np.random.default_rng([wseed & _MASK63, rnd])
            members = select_working_set(n, None, uniform, capacity=max(2, mcap), rng=rng)
            picked = members.indices[:mcap]
            ws = WorkingSet(
                [qidx] + picked, mcap + 1, uniform, query_index=qidx
            )
            ws.images[qidx] = query
            ws.fields[qidx] = qfield
            for i in picked:
                if i not in image_cache:
                    image_cache[i] = web.load_image(i)
                    field_cache[i] = web.read_field(i)
                ws.images[i] = image_cache[i]
                ws.fields[i] = field_cache[i]
            _populate(ws, web, channels)
            relax(
                ws,
                sweeps_per_round,
                seed=wseed,
                first_sweep=rnd * sweeps_per_round,
                alpha=alpha,
                only=qidx,
                uniform_only=uniform_only,
            )
        if merged is None:
            merged = qfield
        else:
            merged = WebField(
                _merge_packed(merged.packed, qfield.packed),
                web.geom,
                merged.dims,
                qidx,
            )
    assert merged is not None
    return merged


# ---------------------------------------------------------------------------
# Working-set co-occurrence model

def coincidence_probability(n: int, m: int) -> float:
    """Chance two marked images land in one uniformly drawn m-subset of n."""
    if m < 2:
        raise ValueError(f"the model needs working sets of at least two images, got {m}")
    if m > n:
        raise ValueError(f"working set of {m} cannot exceed the collection of {n}")
    return (m * (m - 1)) / (n * (n - 1))


def expected_coincidence_sets(n: int, m: int) -> float:
    """Expected number of failed draws before two marked images co-occur."""
    p = coincidence_probability(n, m)
    return 1.0 / p - 1.0
