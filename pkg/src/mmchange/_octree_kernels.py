"""Numba kernels behind :mod:`mmchange.octree`.

Leaves are grouped into dense 8x8x8 bricks (the children of the nodes three
levels above the leaves); bricks are found through an open-addressing hash
table keyed by packed brick coordinates.  Inside a brick, cells are stored in
Morton order so a ray step along any axis usually stays in the same cache
line.  Each cell holds ``(log-odds, stamp)``: stamp ``-1`` means never
observed, otherwise the id of the last scan that updated it, so a scan
updates a leaf at most once.
"""

import numpy as np
from numba import njit

EMPTY = np.int64(-1)
KEY_BITS = 21
KEY_MASK = (1 << KEY_BITS) - 1
BRICK_SHIFT = 3
BRICK_SIZE = 1 << (3 * BRICK_SHIFT)

# 3-bit -> 9-bit Morton spread
_SPREAD = np.array([0, 1, 8, 9, 64, 65, 72, 73], np.int64)


@njit(cache=True, inline="always")
def pack(i, j, k):
    return (np.int64(i) << 42) | (np.int64(j) << 21) | np.int64(k)


@njit(cache=True, inline="always")
def _hash(key, mask):
    h = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    return np.int64((h >> np.uint64(24)) & np.uint64(mask))


@njit(cache=True, inline="always")
def local_index(i, j, k):
    return (_SPREAD[i & 7] << 2) | (_SPREAD[j & 7] << 1) | _SPREAD[k & 7]


def local_index_np(ijk):
    return (_SPREAD[ijk[:, 0] & 7] << 2) | (_SPREAD[ijk[:, 1] & 7] << 1) | _SPREAD[ijk[:, 2] & 7]


def local_offsets():
    """``(512, 3)`` in-brick offsets indexed by local cell index."""
    g = np.stack(np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij"), -1).reshape(-1, 3)
    out = np.empty_like(g)
    out[local_index_np(g)] = g
    return out


@njit(cache=True)
def find_brick(table_keys, table_vals, bkey):
    mask = len(table_keys) - 1
    s = _hash(bkey, mask)
    while True:
        k = table_keys[s]
        if k == bkey:
            return table_vals[s]
        if k == EMPTY:
            return -1
        s = (s + 1) & mask


@njit(cache=True, inline="always")
def _brick(table_keys, table_vals, brick_keys, counts, bkey):
    """Brick index for ``bkey``, allocating it if absent (caller ensures room)."""
    mask = len(table_keys) - 1
    s = _hash(bkey, mask)
    while True:
        k = table_keys[s]
        if k == bkey:
            return table_vals[s]
        if k == EMPTY:
            nb = counts[0]
            table_keys[s] = bkey
            table_vals[s] = nb
            brick_keys[nb] = bkey
            counts[0] = nb + 1
            return nb
        s = (s + 1) & mask


@njit(cache=True)
def rebuild_table(brick_keys, n_bricks, capacity):
    table_keys = np.full(capacity, EMPTY, np.int64)
    table_vals = np.full(capacity, -1, np.int64)
    mask = capacity - 1
    for b in range(n_bricks):
        s = _hash(brick_keys[b], mask)
        while table_keys[s] != EMPTY:
            s = (s + 1) & mask
        table_keys[s] = brick_keys[b]
        table_vals[s] = b
    return table_keys, table_vals


@njit(cache=True)
def lookup_many(table_keys, table_vals, cells, ijk):
    n = len(ijk)
    out = np.zeros(n)
    found = np.zeros(n, np.bool_)
    for q in range(n):
        i, j, k = ijk[q, 0], ijk[q, 1], ijk[q, 2]
        b = find_brick(table_keys, table_vals, pack(i >> 3, j >> 3, k >> 3))
        if b >= 0:
            loc = local_index(i, j, k)
            if cells[b, loc, 1] >= 0.0:
                out[q] = cells[b, loc, 0]
                found[q] = True
    return out, found


@njit(cache=True, inline="always")
def _axis_setup(s, e, ks, ke, res, half):
    d = e - s
    diff = ke - ks
    if diff > 0:
        t_max = (((ks + 1 - half) * res) - s) / d if d > 0 else 0.0
        t_delta = res / d if d > 0 else 0.0
        return 1, diff, t_max, t_delta
    if diff < 0:
        t_max = (((ks - half) * res) - s) / d if d < 0 else 0.0
        t_delta = -res / d if d < 0 else 0.0
        return -1, -diff, t_max, t_delta
    return 0, 0, np.inf, 0.0


@njit(cache=True)
def trace_many(starts, ends, ks, ke, res, half, offsets):
    """Amanatidis-Woo traversal of many rays.

    For ray ``r`` writes the ``(i, j, k)`` of every voxel visited before its
    end voxel into ``out[offsets[r]:offsets[r + 1]]``.  Per-axis step budgets
    make the walk end exactly in the end voxel regardless of rounding.
    """
    out = np.empty((offsets[-1], 3), np.int64)
    for r in range(len(starts)):
        sx, nx, tx, dx = _axis_setup(starts[r, 0], ends[r, 0], ks[r, 0], ke[r, 0], res, half)
        sy, ny, ty, dy = _axis_setup(starts[r, 1], ends[r, 1], ks[r, 1], ke[r, 1], res, half)
        sz, nz, tz, dz = _axis_setup(starts[r, 2], ends[r, 2], ks[r, 2], ke[r, 2], res, half)
        i, j, k = ks[r, 0], ks[r, 1], ks[r, 2]
        o = offsets[r]
        for it in range(nx + ny + nz):
            out[o + it, 0] = i
            out[o + it, 1] = j
            out[o + it, 2] = k
            if tx <= ty and tx <= tz:
                i += sx
                nx -= 1
                tx = tx + dx if nx > 0 else np.inf
            elif ty <= tz:
                j += sy
                ny -= 1
                ty = ty + dy if ny > 0 else np.inf
            else:
                k += sz
                nz -= 1
                tz = tz + dz if nz > 0 else np.inf
    return out


@njit(cache=True)
def insert_hits(table_keys, table_vals, brick_keys, cells, counts,
                ijk, scan_id, l_hit, lmin, lmax, start):
    """Hit updates for endpoint voxels; returns where it stopped for growth."""
    cap = len(brick_keys)
    tcap = len(table_keys)
    sid = float(scan_id)
    new_leaves = 0
    stop = len(ijk)
    for n in range(start, len(ijk)):
        if counts[0] + 1 > cap or 2 * (counts[0] + 1) > tcap:
            stop = n
            break
        i, j, k = ijk[n, 0], ijk[n, 1], ijk[n, 2]
        b = _brick(table_keys, table_vals, brick_keys, counts, pack(i >> 3, j >> 3, k >> 3))
        loc = local_index(i, j, k)
        st = cells[b, loc, 1]
        if st != sid:
            if st < 0.0:
                new_leaves += 1
                v = l_hit
            else:
                v = cells[b, loc, 0] + l_hit
            cells[b, loc, 1] = sid
            cells[b, loc, 0] = min(max(v, lmin), lmax)
    counts[1] += new_leaves
    return stop


@njit(cache=True)
def insert_misses(table_keys, table_vals, brick_keys, cells, counts,
                  starts, ends, ks, ke, res, half, scan_id, l_miss, lmin, lmax, start):
    """Miss updates along each ray (end voxel excluded).

    Stops before a ray that could overflow brick storage so no ray is ever
    half applied; the caller grows storage and resumes.
    """
    cap = len(brick_keys)
    tcap = len(table_keys)
    sid = float(scan_id)
    new_leaves = 0
    stop = len(starts)
    for r in range(start, len(starts)):
        sx, nx, tx, dx = _axis_setup(starts[r, 0], ends[r, 0], ks[r, 0], ke[r, 0], res, half)
        sy, ny, ty, dy = _axis_setup(starts[r, 1], ends[r, 1], ks[r, 1], ke[r, 1], res, half)
        sz, nz, tz, dz = _axis_setup(starts[r, 2], ends[r, 2], ks[r, 2], ke[r, 2], res, half)
        n = nx + ny + nz
        # distinct bricks on a walk are bounded by brick-boundary crossings
        worst = counts[0] + min(n, (nx >> 3) + (ny >> 3) + (nz >> 3) + 4)
        if worst > cap or 2 * worst > tcap:
            stop = r
            break
        i, j, k = ks[r, 0], ks[r, 1], ks[r, 2]
        bkey = EMPTY
        b = -1
        for it in range(n):
            key = pack(i >> 3, j >> 3, k >> 3)
            if key != bkey:
                b = _brick(table_keys, table_vals, brick_keys, counts, key)
                bkey = key
            loc = local_index(i, j, k)
            st = cells[b, loc, 1]
            if st != sid:
                if st < 0.0:
                    new_leaves += 1
                    v = l_miss
                else:
                    v = cells[b, loc, 0] + l_miss
                cells[b, loc, 1] = sid
                cells[b, loc, 0] = min(max(v, lmin), lmax)
            if tx <= ty and tx <= tz:
                i += sx
                nx -= 1
                tx = tx + dx if nx > 0 else np.inf
            elif ty <= tz:
                j += sy
                ny -= 1
                ty = ty + dy if ny > 0 else np.inf
            else:
                k += sz
                nz -= 1
                tz = tz + dz if nz > 0 else np.inf
    counts[1] += new_leaves
    return stop
