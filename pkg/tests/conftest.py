import numpy as np
import pytest

from patchfield.core import ImageBuffer


def make_texture(h, w, c=3, seed=0, blur=3):
    """Smooth random texture in [0, 1]; blur=0 gives raw noise."""
    r = np.random.default_rng(seed)
    img = r.random((h, w, c)).astype(np.float64)
    for _ in range(blur):
        img = (np.roll(img, 1, 0) + np.roll(img, -1, 0)
               + np.roll(img, 1, 1) + np.roll(img, -1, 1) + img) / 5.0
    img -= img.min()
    img /= max(img.max(), 1e-9)
    return ImageBuffer(img.astype(np.float32))


def shifted_pair(h=64, w=64, shift=(8, 5), margin=16, c=3, seed=3):
    """(a, b, shift): a is b's crop at `shift`, so the true field is constant."""
    dx, dy = shift
    b = make_texture(h + 2 * margin, w + 2 * margin, c, seed)
    a = ImageBuffer(b.data[dy : dy + h, dx : dx + w].copy())
    return a, b, shift


def warped_pair(h, w, c=3, seed=0, noise=0.01):
    """(a, b): b plus a smooth geometric warp and iid noise, clipped to [0, 1]."""
    r = np.random.default_rng(seed)
    b = make_texture(h, w, c, seed, blur=4)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fx = xx + 3.0 * np.sin(2 * np.pi * yy / h * 2)
    fy = yy + 3.0 * np.cos(2 * np.pi * xx / w * 3)
    fx = np.clip(fx, 0, w - 1)
    fy = np.clip(fy, 0, h - 1)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (fx - x0)[..., None]
    ay = (fy - y0)[..., None]
    d = b.data.astype(np.float64)
    warped = ((1 - ax) * (1 - ay) * d[y0, x0] + ax * (1 - ay) * d[y0, x1]
              + (1 - ax) * ay * d[y1, x0] + ax * ay * d[y1, x1])
    warped = warped + r.normal(0.0, noise, warped.shape)
    a = ImageBuffer(np.clip(warped, 0.0, 1.0).astype(np.float32))
    return a, b


@pytest.fixture
def texture96():
    return make_texture(96, 96, seed=11)


@pytest.fixture
def pair_shifted():
    return shifted_pair()


@pytest.fixture
def pair_warped_small():
    return warped_pair(72, 72, seed=5)
