"""Numba first-hit ray casting against labelled triangle soups."""

import numpy as np
from numba import config, njit, prange

# the bundled TBB is often too old and numba warns when probing it
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_EPS = 1e-12


@njit(cache=True, inline="always")
def _splitmix(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15))
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@njit(cache=True, inline="always")
def ray_normal(seed, channel, step):
    """Standard normal draw keyed by (seed, channel, step), via Box-Muller."""
    h = _splitmix(np.uint64(seed) * np.uint64(0x100000001B3) ^ np.uint64(channel))
    h = _splitmix(h ^ (np.uint64(step) << np.uint64(20)))
    g = _splitmix(h)
    u1 = ((h >> np.uint64(11)) + np.uint64(1)) * (1.0 / 9007199254740993.0)
    u2 = (g >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@njit(cache=True, inline="always")
def _slab(o, inv, lo, hi):
    t0, t1 = 0.0, np.inf
    for a in range(3):
        ta = (lo[a] - o[a]) * inv[a]
        tb = (hi[a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return np.inf
    return t0


@njit(cache=True, inline="always")
def _moller_trumbore(o, d, v0, e1, e2):
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < _EPS:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = o[0] - v0[0], o[1] - v0[1], o[2] - v0[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1[2] - sz * e1[1]
    qy = sz * e1[0] - sx * e1[2]
    qz = sx * e1[1] - sy * e1[0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    return t if t > _EPS else np.inf


@njit(cache=True, parallel=True)
def cast_rays(origin, dirs, v0, e1, e2, tri_label, part_start, part_lo, part_hi,
              max_range, min_range, sigma, seed, channels):
    """First-hit range and label per ray; range is ``inf`` on a miss.

    Triangles are grouped into parts with bounding boxes so most rays test
    only a handful of triangles.  Ray ``r`` is channel ``r % channels`` of
    azimuth step ``r // channels``; noise is keyed by that pair.
    """
    n = len(dirs)
    rng_out = np.full(n, np.inf)
    lab_out = np.full(n, -1, np.int64)
    for r in prange(n):
        d = dirs[r]
        inv = np.empty(3)
        for a in range(3):
            inv[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
        best = np.inf
        lab = -1
        for p in range(len(part_start) - 1):
            if _slab(origin, inv, part_lo[p], part_hi[p]) >= best:
                continue
            for t in range(part_start[p], part_start[p + 1]):
                h = _moller_trumbore(origin, d, v0[t], e1[t], e2[t])
                if h < best:
                    best = h
                    lab = tri_label[t]
        if best < np.inf and min_range <= best <= max_range:
            noisy = best + sigma * ray_normal(seed, r % channels, r // channels) if sigma > 0 else best
            rng_out[r] = noisy
            lab_out[r] = lab
    return rng_out, lab_out
