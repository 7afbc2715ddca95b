"""Shared invariant checks used across test modules."""

import numpy as np

from patchfield.core import patch_distance


def check_field(f, a, b, sample=200, rel_tol=1e-9, rng_seed=0):
    """Assert structural field invariants.

    Every valid-rect entry targets B's valid rect, and a random sample of
    cached distances matches an independent recomputation to relative
    tolerance.
    """
    ar = f.a_rect
    br = f.b_rect
    tx = f.rect_view(f.target_x)
    ty = f.rect_view(f.target_y)
    assert (tx >= br.x0).all() and (tx < br.x1).all()
    assert (ty >= br.y0).all() and (ty < br.y1).all()
    assert np.isfinite(f.valid_dist).all()

    r = np.random.default_rng(rng_seed)
    n = min(sample, ar.area)
    idx = r.choice(ar.area, size=n, replace=False)
    ys = ar.y0 + idx // ar.width
    xs = ar.x0 + idx % ar.width
    for x, y in zip(xs, ys):
        q = (int(f.target_x[y, x]), int(f.target_y[y, x]))
        d = patch_distance(a, (int(x), int(y)), b, q, f.geom)
        cached = float(f.dist[y, x])
        assert abs(cached - d) <= rel_tol * max(1.0, abs(d)), (
            f"cached {cached} vs recomputed {d} at ({x},{y})->{q}"
        )
