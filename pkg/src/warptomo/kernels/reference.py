"""Pure-numpy twin of the compiled encoding kernels.

Same arithmetic as ``_gridenc``: identical lattice geometry, hash
primes and blending, so the two backends agree to rounding. Used when
the extension is unavailable or disabled via WARPTOMO_NO_EXT=1.
"""

from __future__ import annotations

import numpy as np

PRIME_1 = np.uint64(2654435761)
PRIME_2 = np.uint64(805459861)
PRIME_3 = np.uint64(3674653429)

# Corner c of a cell: bit 2 -> +x, bit 1 -> +y, bit 0 -> +z.
_CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


def _level_stencil(points, resolution, hashed, table_size):
    """Vertex indices (n, 8) and trilinear weights (n, 8) for one level."""
    u = np.clip((points + 1.0) * 0.5, 0.0, 1.0)
    s = u * resolution
    cell = np.minimum(np.floor(s), resolution - 1).astype(np.int64)
    f = s - cell

    verts = cell[:, None, :] + _CORNERS[None, :, :]  # (n, 8, 3)
    if hashed:
        v = verts.astype(np.uint64)
        idx = (v[..., 0] * PRIME_1) ^ (v[..., 1] * PRIME_2) ^ (v[..., 2] * PRIME_3)
        idx = (idx & np.uint64(table_size - 1)).astype(np.int64)
    else:
        side = resolution + 1
        idx = (verts[..., 0] * side + verts[..., 1]) * side + verts[..., 2]

    frac = np.where(_CORNERS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
    weights = frac[..., 0] * frac[..., 1] * frac[..., 2]
    return idx, weights, f


def encode_forward(points, table, offsets, resolutions, hashed, table_size, out,
                   n_threads=1):
    del n_threads  # vectorized path; parallelism is numpy-internal
    n_levels = len(resolutions)
    n_feat = table.shape[1]
    for lev in range(n_levels):
        idx, w, _ = _level_stencil(points, resolutions[lev], hashed[lev], table_size)
        rows = table[offsets[lev] + idx]  # (n, 8, F)
        out[:, lev * n_feat : (lev + 1) * n_feat] = np.einsum("nk,nkf->nf", w, rows)
    return out


def encode_backward(points, d_feats, table, offsets, resolutions, hashed, table_size,
                    d_table, d_points, n_threads=1):
    del n_threads
    n_levels = len(resolutions)
    n_feat = table.shape[1]
    inside = (points >= -1.0) & (points <= 1.0)
    for lev in range(n_levels):
        res = resolutions[lev]
        idx, w, f = _level_stencil(points, res, hashed[lev], table_size)
        dfl = d_feats[:, lev * n_feat : (lev + 1) * n_feat]  # (n, F)

        upstream = w[:, :, None] * dfl[:, None, :]  # (n, 8, F)
        flat_idx = (offsets[lev] + idx).ravel()
        rows_total = d_table.shape[0]
        for c in range(n_feat):
            d_table[:, c] += np.bincount(
                flat_idx, weights=upstream[..., c].ravel(), minlength=rows_total
            ).astype(d_table.dtype, copy=False)

        if d_points is not None:
            rows = table[offsets[lev] + idx]  # (n, 8, F)
            g = np.einsum("nkf,nf->nk", rows, dfl)  # dL/d(weight_k)
            frac = np.where(_CORNERS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
            sign = np.where(_CORNERS[None, :, :] == 1, 1.0, -1.0)
            for axis in range(3):
                others = [a for a in range(3) if a != axis]
                dw = sign[..., axis] * frac[..., others[0]] * frac[..., others[1]]
                d_axis = np.sum(g * dw, axis=1) * (res * 0.5)
                d_points[:, axis] += np.where(inside[:, axis], d_axis, 0.0)
    return d_table, d_points
