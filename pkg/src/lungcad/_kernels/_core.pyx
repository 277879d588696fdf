# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: trilinear gather, 6-neighborhood morphology,
6-connected labeling. Must stay semantically identical to fallback.py."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def trilinear_sample(vol, coords):
    cdef double[:, :, ::1] v = np.ascontiguousarray(vol, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t nx = v.shape[0], ny = v.shape[1], nz = v.shape[2]
    cdef Py_ssize_t i, x0, y0, z0, x1, y1, z1
    cdef double cx, cy, cz, fx, fy, fz

    for i in range(n):
        cx = c[i, 0]
        cy = c[i, 1]
        cz = c[i, 2]
        if cx < 0: cx = 0
        if cx > nx - 1: cx = nx - 1
        if cy < 0: cy = 0
        if cy > ny - 1: cy = ny - 1
        if cz < 0: cz = 0
        if cz > nz - 1: cz = nz - 1
        x0 = <Py_ssize_t>cx
        y0 = <Py_ssize_t>cy
        z0 = <Py_ssize_t>cz
        if x0 > nx - 1: x0 = nx - 1
        if y0 > ny - 1: y0 = ny - 1
        if z0 > nz - 1: z0 = nz - 1
        x1 = x0 + 1 if x0 + 1 < nx else nx - 1
        y1 = y0 + 1 if y0 + 1 < ny else ny - 1
        z1 = z0 + 1 if z0 + 1 < nz else nz - 1
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        out[i] = (
            (1 - fx) * (1 - fy) * (1 - fz) * v[x0, y0, z0]
            + (1 - fx) * (1 - fy) * fz * v[x0, y0, z1]
            + (1 - fx) * fy * (1 - fz) * v[x0, y1, z0]
            + (1 - fx) * fy * fz * v[x0, y1, z1]
            + fx * (1 - fy) * (1 - fz) * v[x1, y0, z0]
            + fx * (1 - fy) * fz * v[x1, y0, z1]
            + fx * fy * (1 - fz) * v[x1, y1, z0]
            + fx * fy * fz * v[x1, y1, z1]
        )
    return out_arr


def erode6(mask):
    cdef cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t nx = m.shape[0], ny = m.shape[1], nz = m.shape[2]
    out_arr = np.zeros((nx, ny, nz), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t x, y, z
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not m[x, y, z]:
                    continue
                if x == 0 or x == nx - 1 or y == 0 or y == ny - 1 \
                        or z == 0 or z == nz - 1:
                    continue
                if m[x - 1, y, z] and m[x + 1, y, z] and m[x, y - 1, z] \
                        and m[x, y + 1, z] and m[x, y, z - 1] and m[x, y, z + 1]:
                    out[x, y, z] = 1
    return out_arr


def dilate6(mask):
    cdef cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t nx = m.shape[0], ny = m.shape[1], nz = m.shape[2]
    out_arr = np.zeros((nx, ny, nz), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t x, y, z
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if m[x, y, z]:
                    out[x, y, z] = 1
                    continue
                if (x > 0 and m[x - 1, y, z]) or (x < nx - 1 and m[x + 1, y, z]) \
                        or (y > 0 and m[x, y - 1, z]) or (y < ny - 1 and m[x, y + 1, z]) \
                        or (z > 0 and m[x, y, z - 1]) or (z < nz - 1 and m[x, y, z + 1]):
                    out[x, y, z] = 1
    return out_arr


def label6(mask):
    """BFS labeling; labels 1..count in first-visited raster order."""
    cdef cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t nx = m.shape[0], ny = m.shape[1], nz = m.shape[2]
    labels_arr = np.zeros((nx, ny, nz), dtype=np.int32)
    cdef cnp.int32_t[:, :, ::1] labels = labels_arr
    cdef Py_ssize_t total = nx * ny * nz
    stack_arr = np.empty(total, dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_arr
    cdef Py_ssize_t x, y, z, cx, cy, cz, top, flat
    cdef int count = 0

    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not m[x, y, z] or labels[x, y, z]:
                    continue
                count += 1
                labels[x, y, z] = count
                top = 0
                stack[top] = (x * ny + y) * nz + z
                top += 1
                while top > 0:
                    top -= 1
                    flat = stack[top]
                    cz = flat % nz
                    cy = (flat // nz) % ny
                    cx = flat // (ny * nz)
                    if cx > 0 and m[cx - 1, cy, cz] and not labels[cx - 1, cy, cz]:
                        labels[cx - 1, cy, cz] = count
                        stack[top] = flat - ny * nz; top += 1
                    if cx < nx - 1 and m[cx + 1, cy, cz] and not labels[cx + 1, cy, cz]:
                        labels[cx + 1, cy, cz] = count
                        stack[top] = flat + ny * nz; top += 1
                    if cy > 0 and m[cx, cy - 1, cz] and not labels[cx, cy - 1, cz]:
                        labels[cx, cy - 1, cz] = count
                        stack[top] = flat - nz; top += 1
                    if cy < ny - 1 and m[cx, cy + 1, cz] and not labels[cx, cy + 1, cz]:
                        labels[cx, cy + 1, cz] = count
                        stack[top] = flat + nz; top += 1
                    if cz > 0 and m[cx, cy, cz - 1] and not labels[cx, cy, cz - 1]:
                        labels[cx, cy, cz - 1] = count
                        stack[top] = flat - 1; top += 1
                    if cz < nz - 1 and m[cx, cy, cz + 1] and not labels[cx, cy, cz + 1]:
                        labels[cx, cy, cz + 1] = count
                        stack[top] = flat + 1; top += 1
    return labels_arr, count
