"""Voxel-grid types, MetaImage and annotation-CSV I/O, world/voxel geometry,
preprocessing (HU clip, isotropic resampling, normalization) and spherical
annotation rasterization.

Conventions:
  - Volume data is a float64 array indexed ``data[x, y, z]`` (C order, so the
    z index is fastest in memory; the MetaImage raw layout is x-fastest and
    is transposed on read/write).
  - A voxel (i, j, k) is centered at ``origin + (i, j, k) * spacing`` (mm).
  - Raw scanner values are clamped to the 12-bit CT range [-1024, 3071] at
    ingestion to guard against sentinel padding.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .errors import (
    DegenerateInputError,
    FormatError,
    OutOfBoundsError,
    ParseError,
    UnsupportedFormatError,
    ValidationError,
)

RAW_HU_MIN = -1024.0
RAW_HU_MAX = 3071.0
CLIP_HU_MIN = -1000.0
CLIP_HU_MAX = 400.0

_ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}


@dataclass(frozen=True)
class CtVolume:
    """3D scalar grid with spacing (mm/voxel) and world origin (mm)."""

    data: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got ndim={data.ndim}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    def voxel_volume_mm3(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True)
class NoduleAnnotation:
    """World-space nodule annotation with optional radiologist scores."""

    patient_id: str
    center_world: tuple
    diameter: float
    radiologist_scores: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "center_world", tuple(float(c) for c in self.center_world))
        object.__setattr__(self, "diameter", float(self.diameter))
        object.__setattr__(
            self, "radiologist_scores", tuple(int(s) for s in self.radiologist_scores)
        )
        if self.diameter <= 0:
            raise ValidationError(f"diameter must be > 0, got {self.diameter}")
        for s in self.radiologist_scores:
            if s not in (1, 2, 3, 4, 5):
                raise ValidationError(f"radiologist score {s} outside 1..5")


@dataclass(frozen=True)
class VoxelMask:
    """Binary grid sharing the geometry of its source volume."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if not np.isin(data, (0, 1)).all():
            raise ValidationError("mask values must be 0/1")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ProbMap:
    """Grid of per-voxel probabilities in [0, 1]."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValidationError("probability map values must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# MetaImage I/O

def _parse_mhd_header(path):
    header = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}: malformed header line {line!r}")
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header


def load_metaimage(path, clamp_raw=True):
    """Read an uncompressed MetaImage (.mhd + raw) volume.

    Supports MET_SHORT and MET_FLOAT, little-endian. Raw HU values are
    clamped to [-1024, 3071] unless clamp_raw=False (used for probability
    maps and round-trip tests).
    """
    header = _parse_mhd_header(path)
    if header.get("CompressedData", "False").lower() == "true":
        raise UnsupportedFormatError(f"{path}: compressed MetaImage not supported")
    ndims = int(header.get("NDims", "0"))
    if ndims != 3:
        raise FormatError(f"{path}: expected NDims=3, got {ndims}")
    etype = header.get("ElementType", "")
    if etype not in _ELEMENT_TYPES:
        raise UnsupportedFormatError(f"{path}: unsupported ElementType {etype!r}")
    if header.get("ElementByteOrderMSB", "False").lower() == "true" or \
            header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise UnsupportedFormatError(f"{path}: big-endian data not supported")

    dims = tuple(int(v) for v in header["DimSize"].split())
    spacing = tuple(float(v) for v in header.get("ElementSpacing", "1 1 1").split())
    origin = tuple(float(v) for v in header.get("Offset", "0 0 0").split())
    datafile = header.get("ElementDataFile", "")
    if not datafile or datafile == "LIST":
        raise FormatError(f"{path}: missing ElementDataFile")
    raw_path = os.path.join(os.path.dirname(path), datafile)
    if not os.path.exists(raw_path):
        raise FormatError(f"{path}: data file {raw_path} not found")

    dtype = _ELEMENT_TYPES[etype]
    raw = np.fromfile(raw_path, dtype=dtype)
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise FormatError(
            f"{raw_path}: expected {expected} elements, found {raw.size}"
        )
    # MetaImage raw layout is x-fastest; transpose to data[x, y, z].
    data = raw.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    data = np.ascontiguousarray(data, dtype=np.float64)
    if clamp_raw:
        np.clip(data, RAW_HU_MIN, RAW_HU_MAX, out=data)
    return CtVolume(data=data, spacing=spacing, origin=origin)


def save_metaimage(vol, path, element_type="MET_FLOAT"):
    """Write an uncompressed MetaImage pair; raw path derives from ``path``."""
    if element_type not in _ELEMENT_TYPES:
        raise UnsupportedFormatError(f"unsupported ElementType {element_type!r}")
    if not path.endswith(".mhd"):
        raise ValidationError(f"expected .mhd output path, got {path!r}")
    raw_name = os.path.basename(path)[:-4] + ".raw"
    nx, ny, nz = vol.shape
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"DimSize = {nx} {ny} {nz}",
        "ElementSpacing = " + " ".join(_fmt(s) for s in vol.spacing),
        "Offset = " + " ".join(_fmt(o) for o in vol.origin),
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw_name}",
    ]
    dtype = _ELEMENT_TYPES[element_type]
    raw = np.ascontiguousarray(vol.data.transpose(2, 1, 0), dtype=dtype)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    raw.tofile(os.path.join(os.path.dirname(path), raw_name))


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# Annotation CSV

CSV_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]


def load_annotations_csv(path):
    """Read LUNA16-style annotations with optional score1..score4 columns."""
    annotations = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [h.strip() for h in header[:5]] != CSV_HEADER:
            raise ParseError(f"{path}: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 5:
                raise ParseError(f"{path}:{lineno}: expected ≥5 columns, got {len(row)}")
            try:
                center = (float(row[1]), float(row[2]), float(row[3]))
                diameter = float(row[4])
                scores = [int(c) for c in (c.strip() for c in row[5:9]) if c]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if diameter <= 0:
                raise ValidationError(f"{path}:{lineno}: diameter must be > 0")
            annotations.append(
                NoduleAnnotation(
                    patient_id=row[0].strip(),
                    center_world=center,
                    diameter=diameter,
                    radiologist_scores=scores,
                )
            )
    return annotations


def save_annotations_csv(annotations, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER + ["score1", "score2", "score3", "score4"])
        for a in annotations:
            scores = list(a.radiologist_scores) + [""] * (4 - len(a.radiologist_scores))
            writer.writerow(
                [a.patient_id]
                + [_fmt(c) for c in a.center_world]
                + [_fmt(a.diameter)]
                + scores[:4]
            )


# ---------------------------------------------------------------------------
# Geometry

def world_to_voxel(point, origin, spacing):
    """Continuous voxel coordinates of a world-space point (mm)."""
    p = np.asarray(point, dtype=np.float64)
    return (p - np.asarray(origin)) / np.asarray(spacing)


def voxel_to_world(index, origin, spacing):
    """World-space position (mm) of continuous voxel coordinates."""
    i = np.asarray(index, dtype=np.float64)
    return i * np.asarray(spacing) + np.asarray(origin)


# ---------------------------------------------------------------------------
# Preprocessing

def clip_hu(vol):
    """Clamp to the [-1000, 400] HU window used before normalization."""
    if vol.normalized:
        raise ValidationError("clip_hu expects an unnormalized volume")
    return replace(vol, data=np.clip(vol.data, CLIP_HU_MIN, CLIP_HU_MAX))


def resample(vol, target_spacing):
    """Trilinear resample onto a grid with the given spacing (origin kept).

    New shape is round(old_shape * old_spacing / target_spacing), at least 1
    per axis; samples outside the source grid are edge-clamped.
    """
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValidationError(f"target spacing must be positive, got {target}")
    old_shape = np.array(vol.shape, dtype=np.float64)
    old_spacing = np.array(vol.spacing)
    new_shape = np.maximum(
        np.round(old_shape * old_spacing / np.array(target)).astype(int), 1
    )
    if tuple(target) == tuple(vol.spacing) and tuple(new_shape) == vol.shape:
        return replace(vol, data=vol.data.copy())

    axes = [np.arange(n, dtype=np.float64) * target[i] / old_spacing[i]
            for i, n in enumerate(new_shape)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    values = _kernels.trilinear_sample(vol.data, coords)
    return replace(
        vol,
        data=values.reshape(tuple(new_shape)),
        spacing=target,
    )


def normalize(vol):
    """Shift/scale to mean 0 and population variance 1."""
    std = float(vol.data.std())
    if std == 0.0:
        raise DegenerateInputError("cannot normalize a constant volume")
    data = (vol.data - vol.data.mean()) / std
    return replace(vol, data=data, normalized=True)


def preprocess(vol, target_spacing=(1.0, 1.0, 1.0)):
    """Standard chain: HU clip -> isotropic resample -> normalize."""
    return normalize(resample(clip_hu(vol), target_spacing))


# ---------------------------------------------------------------------------
# Rasterization

def sphere_mask(shape, spacing, origin, center_world, diameter):
    """Binary mask of voxels whose world centers lie strictly within the
    sphere. The center may lie outside the grid (empty mask is fine)."""
    shape = tuple(int(n) for n in shape)
    radius = diameter / 2.0
    center = np.asarray(center_world, dtype=np.float64)
    mask = np.zeros(shape, dtype=np.uint8)

    lo = np.floor(world_to_voxel(center - radius, origin, spacing)).astype(int)
    hi = np.ceil(world_to_voxel(center + radius, origin, spacing)).astype(int) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, shape)
    if (lo >= hi).any():
        return mask

    axes = [np.arange(lo[i], hi[i]) * spacing[i] + origin[i] - center[i]
            for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    inside = gx * gx + gy * gy + gz * gz < radius * radius
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside.astype(np.uint8)
    return mask


def rasterize_annotation(ann, grid):
    """Rasterize a spherical annotation onto the geometry of ``grid``."""
    idx = world_to_voxel(ann.center_world, grid.origin, grid.spacing)
    if (idx < -0.5).any() or (idx > np.array(grid.shape) - 0.5).any():
        raise OutOfBoundsError(
            f"annotation center {ann.center_world} outside grid bounds"
        )
    data = sphere_mask(grid.shape, grid.spacing, grid.origin,
                       ann.center_world, ann.diameter)
    return VoxelMask(data=data, spacing=grid.spacing, origin=grid.origin)
