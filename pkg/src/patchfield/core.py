"""Image containers, color conversion, patch geometry and patch distances.

Everything downstream (field search, synthesis, the vision tools) consumes
images through :class:`ImageBuffer` and measures patch similarity through
:func:`patch_distance`, so the conventions live here: row-major float32
samples, coordinates are (x, y) with x along the width axis, and a patch is
identified by its center coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit
from PIL import Image, UnidentifiedImageError


class InputError(ValueError):
    """A problem with user-supplied input (file, format, geometry)."""


class ColorSpace:
    """Color space tags for :class:`ImageBuffer`."""

    SRGB = "srgb"          # sRGB-encoded values decoded to float in [0, 1]
    LINEAR_RGB = "linear"  # linear-light RGB in [0, 1]
    LAB = "lab"            # CIELab, D65 white, L in [0, 100]


@dataclass
class ImageBuffer:
    """An image as (height, width, channels) float32 samples.

    Parameters
    ----------
    data : ndarray
        Row-major samples, shape (H, W, C) with 1 <= C <= 4. Converted to
        C-contiguous float32 on construction.
    space : str
        One of the :class:`ColorSpace` tags.
    """

    data: np.ndarray
    space: str = ColorSpace.SRGB

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise ValueError(f"image data must be 2-D or 3-D, got shape {arr.shape}")
        if not 1 <= arr.shape[2] <= 4:
            raise ValueError(f"channel count must be 1..4, got {arr.shape[2]}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class Rect(NamedTuple):
    """Half-open integer rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return max(0, self.x1 - self.x0)

    @property
    def height(self) -> int:
        return max(0, self.y1 - self.y0)

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


@dataclass(frozen=True)
class PatchGeometry:
    """Square patch shape; a patch is the p x p window around its center."""

    patch_size: int = 7

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch size must be odd and positive, got {self.patch_size}")

    @property
    def radius(self) -> int:
        return self.patch_size // 2

    def valid_rect(self, width: int, height: int) -> Rect:
        """Centers where a full patch fits inside a width x height image."""
        r = self.radius
        return Rect(r, r, width - r, height - r)

    def valid_rect_of(self, img: ImageBuffer) -> Rect:
        return self.valid_rect(img.width, img.height)


# ---------------------------------------------------------------------------
# IO

def load_image(path: str) -> ImageBuffer:
    """Decode a PNG or JPEG file to a float ImageBuffer tagged sRGB.

    Gray images decode to one channel, gray+alpha to two, RGB to three,
    RGBA to four. Palette and other exotic modes are converted to RGB(A).
    """
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise InputError(f"unsupported image format {im.format!r} in {path}")
            if im.mode not in ("L", "LA", "RGB", "RGBA"):
                has_alpha = "A" in im.mode or "transparency" in im.info
                im = im.convert("RGBA" if has_alpha else "RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise InputError(f"cannot decode {path}: {exc}") from exc
    return ImageBuffer(arr, ColorSpace.SRGB)


def save_image(img: ImageBuffer, path: str) -> None:
    """Encode as 8-bit PNG; non-sRGB buffers are converted first."""
    if img.space == ColorSpace.LAB:
        img = lab_to_srgb(img)
    elif img.space == ColorSpace.LINEAR_RGB:
        img = linear_to_srgb(img)
    arr = np.clip(img.data, 0.0, 1.0)
    arr8 = (arr * 255.0 + 0.5).astype(np.uint8)
    mode = {1: "L", 2: "LA", 3: "RGB", 4: "RGBA"}[img.channels]
    if img.channels == 1:
        arr8 = arr8[:, :, 0]
    Image.fromarray(arr8, mode=mode).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Color conversion (sRGB <-> linear <-> CIELab, D65)

_XYZ_FROM_LINEAR = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ],
    dtype=np.float64,
)
_LINEAR_FROM_XYZ = np.linalg.inv(_XYZ_FROM_LINEAR)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883], dtype=np.float64)
_LAB_EPS = (6.0 / 29.0) ** 3
_LAB_KAPPA = (29.0 / 6.0) ** 2 / 3.0  # slope of the linear segment


def _srgb_decode(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def _srgb_encode(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    v = np.clip(v, 0.0, None)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1.0 / 2.4) - 0.055)


def srgb_to_linear(img: ImageBuffer) -> ImageBuffer:
    if img.space == ColorSpace.LINEAR_RGB:
        return img
    if img.space != ColorSpace.SRGB:
        raise ValueError(f"expected an RGB space, got {img.space}")
    return ImageBuffer(_srgb_decode(img.data).astype(np.float32), ColorSpace.LINEAR_RGB)


def linear_to_srgb(img: ImageBuffer) -> ImageBuffer:
    if img.space == ColorSpace.SRGB:
        return img
    if img.space != ColorSpace.LINEAR_RGB:
        raise ValueError(f"expected linear RGB, got {img.space}")
    return ImageBuffer(_srgb_encode(img.data).astype(np.float32), ColorSpace.SRGB)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_EPS, np.cbrt(t), _LAB_KAPPA * t + 4.0 / 29.0)


def _lab_f_inv(ft: np.ndarray) -> np.ndarray:
    return np.where(ft > 6.0 / 29.0, ft ** 3, (ft - 4.0 / 29.0) / _LAB_KAPPA)


def to_lab(img: ImageBuffer) -> ImageBuffer:
    """Convert a 3-channel RGB buffer to CIELab (D65, L in [0, 100])."""
    if img.channels != 3:
        raise ValueError(f"Lab conversion needs 3 channels, got {img.channels}")
    if img.space == ColorSpace.LAB:
        return img
    if img.space == ColorSpace.SRGB:
        lin = _srgb_decode(img.data)
    elif img.space == ColorSpace.LINEAR_RGB:
        lin = np.asarray(img.data, dtype=np.float64)
    else:
        raise ValueError(f"expected an RGB space, got {img.space}")
    xyz = lin @ _XYZ_FROM_LINEAR.T
    f = _lab_f(xyz / _WHITE_D65)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return ImageBuffer(lab.astype(np.float32), ColorSpace.LAB)


def lab_to_srgb(img: ImageBuffer) -> ImageBuffer:
    """Invert :func:`to_lab`; out-of-gamut values are clipped on encode."""
    if img.space != ColorSpace.LAB:
        raise ValueError(f"expected Lab, got {img.space}")
    lab = np.asarray(img.data, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE_D65
    lin = np.clip(xyz @ _LINEAR_FROM_XYZ.T, 0.0, 1.0)
    return ImageBuffer(_srgb_encode(lin).astype(np.float32), ColorSpace.SRGB)


# ---------------------------------------------------------------------------
# Patch distance

@njit(cache=True, nogil=True)
def _patch_ssd(a_data, ax, ay, b_data, bx, by, p, early):
    """Sum of squared sample differences over the p x p windows.

    Accumulates in float64 and bails out at the end of a patch row once the
    partial sum reaches `early`; the returned value is then only guaranteed
    to be >= early.
    """
    r = p // 2
    c = a_data.shape[2]
    acc = 0.0
    for dy in range(-r, r + 1):
        ayy = ay + dy
        byy = by + dy
        for dx in range(-r, r + 1):
            axx = ax + dx
            bxx = bx + dx
            for ch in range(c):
                d = np.float64(a_data[ayy, axx, ch]) - np.float64(b_data[byy, bxx, ch])
                acc += d * d
        if acc >= early:
            return acc
    return acc


def patch_distance(
    a: ImageBuffer,
    a_coord: tuple[int, int],
    b: ImageBuffer,
    b_coord: tuple[int, int],
    geom: PatchGeometry,
    early_stop: float | None = None,
) -> float:
    """Patch SSD between the patch at `a_coord` in `a` and `b_coord` in `b`.

    Parameters
    ----------
    a_coord, b_coord : (x, y)
        Patch centers; each must lie in its image's valid rect.
    early_stop : float, optional
        If given, the scan may stop once the partial sum reaches this value
        and return any number >= it. Callers only compare against it.
    """
    if a.channels != b.channels:
        raise ValueError(f"channel mismatch: {a.channels} vs {b.channels}")
    ax, ay = a_coord
    bx, by = b_coord
    if not geom.valid_rect_of(a).contains(ax, ay):
        raise ValueError(f"coordinate {a_coord} outside valid rect of first image")
    if not geom.valid_rect_of(b).contains(bx, by):
        raise ValueError(f"coordinate {b_coord} outside valid rect of second image")
    early = np.inf if early_stop is None else float(early_stop)
    return float(_patch_ssd(a.data, ax, ay, b.data, bx, by, geom.patch_size, early))


def rms_gray_levels(ssd: np.ndarray | float, geom: PatchGeometry, channels: int):
    """Per-patch RMS of an SSD value, expressed in 8-bit gray levels."""
    n = geom.patch_size * geom.patch_size * channels
    return np.sqrt(np.asarray(ssd, dtype=np.float64) / n) * 255.0


# ---------------------------------------------------------------------------
# Pyramids

def _area_resample_axis(arr: np.ndarray, n_out: int) -> np.ndarray:
    """Exact area-average resampling along axis 0 (float64 accumulation)."""
    n_in = arr.shape[0]
    if n_out == n_in:
        return arr.astype(np.float64, copy=False)
    scale = n_in / n_out
    out = np.empty((n_out,) + arr.shape[1:], dtype=np.float64)
    src = arr.astype(np.float64, copy=False)
    for i in range(n_out):
        lo = i * scale
        hi = (i + 1) * scale
        j0 = int(np.floor(lo))
        j1 = min(int(np.ceil(hi)), n_in)
        w = np.minimum(np.arange(j0, j1) + 1.0, hi) - np.maximum(np.arange(j0, j1), lo)
        out[i] = np.tensordot(w, src[j0:j1], axes=(0, 0)) / scale
    return out


def area_downsample(img: ImageBuffer, width: int, height: int) -> ImageBuffer:
    """Downsample by exact box/area averaging to the given dimensions."""
    if width > img.width or height > img.height:
        raise ValueError("area_downsample cannot upsample")
    tmp = _area_resample_axis(img.data, height)
    tmp = _area_resample_axis(np.swapaxes(tmp, 0, 1), width)
    return ImageBuffer(np.swapaxes(tmp, 0, 1).astype(np.float32), img.space)


def build_pyramid(img: ImageBuffer, factor: float = 0.5, min_dim: int = 32) -> list[ImageBuffer]:
    """Image pyramid from coarsest to full resolution.

    Successive levels shrink by `factor` (area filtering) until the next
    level would drop below `min_dim` pixels on its smaller side.
    """
    if not 0.0 < factor < 1.0:
        raise ValueError(f"factor must be in (0, 1), got {factor}")
    if min(img.width, img.height) < min_dim:
        raise InputError(
            f"image {img.width}x{img.height} is smaller than the pyramid floor {min_dim}"
        )
    dims = [(img.width, img.height)]
    while True:
        w = max(1, round(dims[-1][0] * factor))
        h = max(1, round(dims[-1][1] * factor))
        if min(w, h) < min_dim:
            break
        dims.append((w, h))
    levels = [img]
    for w, h in dims[1:]:
        levels.append(area_downsample(levels[-1], w, h))
    return levels[::-1]
