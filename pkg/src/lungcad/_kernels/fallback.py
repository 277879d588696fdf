"""Pure-NumPy implementations of the hot kernels.

Used when the compiled extension is unavailable (or disabled via the
LUNGCAD_NO_EXT environment variable). Semantics are identical to the
Cython versions in ``_core.pyx``; the test suite runs both when possible.
"""

import numpy as np

_NEIGHBOR_OFFSETS = [
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
]


def trilinear_sample(vol, coords):
    """Sample ``vol`` at continuous voxel coordinates with edge clamping.

    coords is an (N, 3) float array of (x, y, z) voxel positions; values
    outside the grid are clamped to the border voxel.
    """
    vol = np.asarray(vol, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    nx, ny, nz = vol.shape
    cx = np.clip(coords[:, 0], 0.0, nx - 1.0)
    cy = np.clip(coords[:, 1], 0.0, ny - 1.0)
    cz = np.clip(coords[:, 2], 0.0, nz - 1.0)

    x0 = np.minimum(np.floor(cx).astype(np.intp), nx - 1)
    y0 = np.minimum(np.floor(cy).astype(np.intp), ny - 1)
    z0 = np.minimum(np.floor(cz).astype(np.intp), nz - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    fx = cx - x0
    fy = cy - y0
    fz = cz - z0

    out = np.zeros(len(coords), dtype=np.float64)
    for ix, wx in ((x0, 1.0 - fx), (x1, fx)):
        for iy, wy in ((y0, 1.0 - fy), (y1, fy)):
            for iz, wz in ((z0, 1.0 - fz), (z1, fz)):
                out += wx * wy * wz * vol[ix, iy, iz]
    return out


def _shift(mask, dx, dy, dz, fill):
    out = np.full_like(mask, fill)
    nx, ny, nz = mask.shape
    sx = slice(max(dx, 0), nx + min(dx, 0))
    sy = slice(max(dy, 0), ny + min(dy, 0))
    sz = slice(max(dz, 0), nz + min(dz, 0))
    tx = slice(max(-dx, 0), nx + min(-dx, 0))
    ty = slice(max(-dy, 0), ny + min(-dy, 0))
    tz = slice(max(-dz, 0), nz + min(-dz, 0))
    out[sx, sy, sz] = mask[tx, ty, tz]
    return out


def erode6(mask):
    """Binary erosion with the center + 6-face structuring element.

    Voxels outside the volume count as background.
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    out = mask.copy()
    for dx, dy, dz in _NEIGHBOR_OFFSETS:
        out &= _shift(mask, dx, dy, dz, np.uint8(0))
    return out


def dilate6(mask):
    """Binary dilation with the center + 6-face structuring element."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    out = mask.copy()
    for dx, dy, dz in _NEIGHBOR_OFFSETS:
        out |= _shift(mask, dx, dy, dz, np.uint8(0))
    return out


def label6(mask):
    """6-connected component labeling.

    Returns (labels, count) where labels is int32 with values 1..count
    assigned by first-visited C-raster order (z fastest).
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    shape = mask.shape
    flat = mask.ravel()
    labels = np.zeros(flat.shape, dtype=np.int32)
    strides = (shape[1] * shape[2], shape[2], 1)

    idx_all = np.flatnonzero(flat)
    count = 0
    for seed in idx_all:
        if labels[seed]:
            continue
        count += 1
        labels[seed] = count
        frontier = np.array([seed], dtype=np.intp)
        while frontier.size:
            x = frontier // strides[0]
            rem = frontier % strides[0]
            y = rem // shape[2]
            z = rem % shape[2]
            nxt = []
            for dx, dy, dz in _NEIGHBOR_OFFSETS:
                ok = (
                    (x + dx >= 0)
                    & (x + dx < shape[0])
                    & (y + dy >= 0)
                    & (y + dy < shape[1])
                    & (z + dz >= 0)
                    & (z + dz < shape[2])
                )
                nb = (
                    (x[ok] + dx) * strides[0]
                    + (y[ok] + dy) * strides[1]
                    + (z[ok] + dz)
                )
                nb = nb[(flat[nb] != 0) & (labels[nb] == 0)]
                if nb.size:
                    labels[nb] = count
                    nxt.append(nb)
            frontier = np.unique(np.concatenate(nxt)) if nxt else np.empty(0, np.intp)
    return labels.reshape(shape), count
