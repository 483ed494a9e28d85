# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels for the multi-resolution hash encoding.

Point-major loops: for every query point, gather/blend the 8 enclosing
vertex rows of every level (forward), or scatter the blended upstream
gradients back into the table and chain trilinear weight derivatives to
the input coordinates (backward). Points may be processed by several
OpenMP workers; scatter goes into per-worker table buffers that are
merged in fixed order afterwards, so results are deterministic for a
fixed worker count.
"""

import numpy as np

cimport numpy as cnp
cimport openmp
from cython.parallel cimport parallel, prange, threadid
from libc.math cimport floor

ctypedef fused real:
    float
    double

cdef unsigned long long PRIME_1 = 2654435761ULL
cdef unsigned long long PRIME_2 = 805459861ULL
cdef unsigned long long PRIME_3 = 3674653429ULL


cdef inline long long _vertex_index(long long vx, long long vy, long long vz,
                                    long long side, int hashed,
                                    unsigned long long mask) nogil:
    cdef unsigned long long h
    if hashed:
        h = (<unsigned long long> vx) * PRIME_1
        h ^= (<unsigned long long> vy) * PRIME_2
        h ^= (<unsigned long long> vz) * PRIME_3
        return <long long> (h & mask)
    return (vx * side + vy) * side + vz


def encode_forward(real[:, ::1] points, real[:, ::1] table,
                   cnp.int64_t[::1] offsets, cnp.int64_t[::1] resolutions,
                   cnp.uint8_t[::1] hashed, long long table_size,
                   real[:, ::1] out, int n_threads=1):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t n_levels = resolutions.shape[0]
    cdef Py_ssize_t n_feat = table.shape[1]
    cdef unsigned long long mask = <unsigned long long> (table_size - 1)
    cdef int workers = n_threads if n_threads > 0 else openmp.omp_get_max_threads()

    cdef Py_ssize_t i, lev, c, corner, base
    cdef long long res, side, cx, cy, cz, vx, vy, vz, row
    cdef double u0, u1, u2, s0, s1, s2, f0, f1, f2, wc
    cdef double wx0, wx1, wy0, wy1, wz0, wz1
    cdef int is_hashed

    with nogil:
        for i in prange(n, schedule="static", num_threads=workers):
            u0 = (points[i, 0] + 1.0) * 0.5
            u1 = (points[i, 1] + 1.0) * 0.5
            u2 = (points[i, 2] + 1.0) * 0.5
            if u0 < 0.0: u0 = 0.0
            if u0 > 1.0: u0 = 1.0
            if u1 < 0.0: u1 = 0.0
            if u1 > 1.0: u1 = 1.0
            if u2 < 0.0: u2 = 0.0
            if u2 > 1.0: u2 = 1.0
            for lev in range(n_levels):
                res = resolutions[lev]
                side = res + 1
                is_hashed = hashed[lev]
                base = lev * n_feat
                s0 = u0 * res
                s1 = u1 * res
                s2 = u2 * res
                cx = <long long> floor(s0)
                cy = <long long> floor(s1)
                cz = <long long> floor(s2)
                if cx > res - 1: cx = res - 1
                if cy > res - 1: cy = res - 1
                if cz > res - 1: cz = res - 1
                f0 = s0 - cx
                f1 = s1 - cy
                f2 = s2 - cz
                wx1 = f0
                wx0 = 1.0 - f0
                wy1 = f1
                wy0 = 1.0 - f1
                wz1 = f2
                wz0 = 1.0 - f2
                for corner in range(8):
                    if corner & 4:
                        vx = cx + 1
                        wc = wx1
                    else:
                        vx = cx
                        wc = wx0
                    if corner & 2:
                        vy = cy + 1
                        wc = wc * wy1
                    else:
                        vy = cy
                        wc = wc * wy0
                    if corner & 1:
                        vz = cz + 1
                        wc = wc * wz1
                    else:
                        vz = cz
                        wc = wc * wz0
                    row = offsets[lev] + _vertex_index(vx, vy, vz, side, is_hashed, mask)
                    for c in range(n_feat):
                        out[i, base + c] += <real> (wc * table[row, c])
    return np.asarray(out)


def encode_backward(real[:, ::1] points, real[:, ::1] d_feats, real[:, ::1] table,
                    cnp.int64_t[::1] offsets, cnp.int64_t[::1] resolutions,
                    cnp.uint8_t[::1] hashed, long long table_size,
                    real[:, ::1] d_table, d_points_obj, int n_threads=1):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t n_levels = resolutions.shape[0]
    cdef Py_ssize_t n_feat = table.shape[1]
    cdef Py_ssize_t n_rows = d_table.shape[0]
    cdef unsigned long long mask = <unsigned long long> (table_size - 1)
    cdef int workers = n_threads if n_threads > 0 else openmp.omp_get_max_threads()
    cdef bint want_input = d_points_obj is not None
    cdef real[:, ::1] d_points = d_points_obj if want_input else points

    buffers_obj = np.zeros((workers, n_rows, n_feat),
                           dtype=np.asarray(table).dtype)
    cdef real[:, :, ::1] buffers = buffers_obj

    cdef Py_ssize_t i, lev, c, corner, base
    cdef long long res, side, cx, cy, cz, vx, vy, vz, row
    cdef double u0, u1, u2, s0, s1, s2, f0, f1, f2
    cdef double w, g, wx, wy, wz, sx, sy, sz, scale
    cdef double d0, d1, d2
    cdef int is_hashed, in0, in1, in2, tid

    with nogil, parallel(num_threads=workers):
        tid = threadid()
        for i in prange(n, schedule="static"):
            u0 = (points[i, 0] + 1.0) * 0.5
            u1 = (points[i, 1] + 1.0) * 0.5
            u2 = (points[i, 2] + 1.0) * 0.5
            in0 = points[i, 0] >= -1.0 and points[i, 0] <= 1.0
            in1 = points[i, 1] >= -1.0 and points[i, 1] <= 1.0
            in2 = points[i, 2] >= -1.0 and points[i, 2] <= 1.0
            if u0 < 0.0: u0 = 0.0
            if u0 > 1.0: u0 = 1.0
            if u1 < 0.0: u1 = 0.0
            if u1 > 1.0: u1 = 1.0
            if u2 < 0.0: u2 = 0.0
            if u2 > 1.0: u2 = 1.0
            for lev in range(n_levels):
                res = resolutions[lev]
                side = res + 1
                is_hashed = hashed[lev]
                base = lev * n_feat
                s0 = u0 * res
                s1 = u1 * res
                s2 = u2 * res
                cx = <long long> floor(s0)
                cy = <long long> floor(s1)
                cz = <long long> floor(s2)
                if cx > res - 1: cx = res - 1
                if cy > res - 1: cy = res - 1
                if cz > res - 1: cz = res - 1
                f0 = s0 - cx
                f1 = s1 - cy
                f2 = s2 - cz
                d0 = 0.0
                d1 = 0.0
                d2 = 0.0
                for corner in range(8):
                    vx = cx + ((corner >> 2) & 1)
                    vy = cy + ((corner >> 1) & 1)
                    vz = cz + (corner & 1)
                    wx = f0 if (corner >> 2) & 1 else 1.0 - f0
                    wy = f1 if (corner >> 1) & 1 else 1.0 - f1
                    wz = f2 if corner & 1 else 1.0 - f2
                    sx = 1.0 if (corner >> 2) & 1 else -1.0
                    sy = 1.0 if (corner >> 1) & 1 else -1.0
                    sz = 1.0 if corner & 1 else -1.0
                    w = wx * wy * wz
                    row = offsets[lev] + _vertex_index(vx, vy, vz, side, is_hashed, mask)
                    g = 0.0
                    for c in range(n_feat):
                        g = g + table[row, c] * d_feats[i, base + c]
                        buffers[tid, row, c] += <real> (w * d_feats[i, base + c])
                    if want_input:
                        d0 = d0 + g * sx * wy * wz
                        d1 = d1 + g * wx * sy * wz
                        d2 = d2 + g * wx * wy * sz
                if want_input:
                    scale = res * 0.5
                    if in0:
                        d_points[i, 0] += <real> (d0 * scale)
                    if in1:
                        d_points[i, 1] += <real> (d1 * scale)
                    if in2:
                        d_points[i, 2] += <real> (d2 * scale)

    # Fixed-order merge of the per-worker scatter buffers.
    merged = buffers_obj.sum(axis=0, dtype=buffers_obj.dtype)
    np.add(np.asarray(d_table), merged, out=np.asarray(d_table))
    return np.asarray(d_table)
