"""Pure-numpy implementations of the hot kernels.

Semantics must match the compiled extension in ``_core.pyx``; the import
logic in ``__init__`` picks whichever is available.
"""

import numpy as np

_EPS = 1e-9
_PACK_OFFSET = 1 << 20
_BRUTE_RING = 8


def _slab(origins, dirs, bmin, bmax):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (bmin - origins) * inv
    t2 = (bmax - origins) * inv
    par = dirs == 0.0
    if np.any(par):
        inside = (origins >= bmin) & (origins <= bmax)
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    near = np.minimum(t1, t2).max(axis=-1)
    far = np.maximum(t1, t2).min(axis=-1)
    return near, far


def raycast(origins, dirs, room_min, room_max, boxes):
    """First-hit ray parameter against the room shell and solid boxes.

    Returns 0 where a ray hits nothing. The room is a hollow shell (first
    intersection wins whether the ray starts inside or outside); interior
    boxes are solid.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = len(origins)
    best = np.full(n, np.inf)

    for bmin, bmax in [(room_min, room_max)] + list(boxes):
        near, far = _slab(origins, dirs, np.asarray(bmin), np.asarray(bmax))
        ok = (near <= far) & (far > _EPS)
        t_hit = np.where(near > _EPS, near, far)
        best = np.where(ok, np.minimum(best, t_hit), best)

    return np.where(np.isfinite(best), best, 0.0)


def _pack(cells):
    return (
        ((cells[..., 0] + _PACK_OFFSET) << 42)
        | ((cells[..., 1] + _PACK_OFFSET) << 21)
        | (cells[..., 2] + _PACK_OFFSET)
    )


def _shell_offsets(r):
    rng = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    cheb = np.abs(grid).max(axis=1)
    return grid[cheb == r]


def nn_query(query, ref, cell_size):
    """Directed nearest neighbors query -> ref via grid hashing.

    Returns (distances, ref_indices). Guarantee: after scanning all cells
    within chebyshev ring r of a query, any unscanned point is at least
    r*cell_size away, so a current best below that bound is the true
    nearest neighbor.
    """
    query = np.asarray(query, dtype=float).reshape(-1, 3)
    ref = np.asarray(ref, dtype=float).reshape(-1, 3)
    nq = len(query)
    if nq == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    if len(ref) == 0:
        return np.full(nq, np.inf), np.full(nq, -1, dtype=np.int64)

    ref_cells = np.floor(ref / cell_size).astype(np.int64)
    keys = _pack(ref_cells)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    ref_sorted = ref[order]

    q_cells = np.floor(query / cell_size).astype(np.int64)
    best = np.full(nq, np.inf)
    best_idx = np.full(nq, -1, dtype=np.int64)
    active = np.arange(nq)
    r = 0
    while len(active) and r <= _BRUTE_RING:
        offsets = _shell_offsets(r)
        cand_cells = q_cells[active, None, :] + offsets[None, :, :]
        cand_keys = _pack(cand_cells)
        lo = np.searchsorted(sorted_keys, cand_keys.ravel(), side="left")
        hi = np.searchsorted(sorted_keys, cand_keys.ravel(), side="right")
        counts = hi - lo
        total = int(counts.sum())
        if total:
            owner_flat = np.repeat(np.arange(len(active) * len(offsets)), counts)
            owners = active[owner_flat // len(offsets)]
            starts = np.repeat(lo, counts)
            within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            idx = starts + within
            d = ref_sorted[idx] - query[owners]
            dists = np.sqrt(np.sum(d * d, axis=1))
            # best candidate per owner: stable lexsort then first occurrence
            ordr = np.lexsort((dists, owners))
            own_s = owners[ordr]
            first = np.ones(len(ordr), dtype=bool)
            first[1:] = own_s[1:] != own_s[:-1]
            cand_owner = own_s[first]
            cand_dist = dists[ordr][first]
            cand_idx = idx[ordr][first]
            improved = cand_dist < best[cand_owner]
            upd = cand_owner[improved]
            best[upd] = cand_dist[improved]
            best_idx[upd] = cand_idx[improved]
        done = best[active] <= r * cell_size
        active = active[~done]
        r += 1

    result_idx = np.where(best_idx >= 0, order[np.maximum(best_idx, 0)], -1)
    if len(active):
        # stray queries far from the cloud: direct scan
        for i in active:
            d = ref - query[i]
            dd = np.sqrt(np.sum(d * d, axis=1))
            j = int(np.argmin(dd))
            best[i] = float(dd[j])
            result_idx[i] = j
    return best, result_idx


def nn_dists(query, ref, cell_size):
    """Directed nearest-neighbor distances query -> ref (see nn_query)."""
    return nn_query(query, ref, cell_size)[0]
