"""Candidate extraction from probability maps and candidate/annotation
matching: threshold -> nearest-neighbors binary opening -> 6-connected
labeling -> score-weighted centroids, plus hit testing and segmentation
overlap metrics.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ParseError, ValidationError
from .volume import VoxelMask, voxel_to_world

RESOLUTION_TAGS = ("1mm", "2mm")

CANDIDATE_CSV_HEADER = [
    "patient_id", "x_mm", "y_mm", "z_mm", "voxels",
    "diameter_mm", "mean_score", "max_score", "resolution",
]


@dataclass(frozen=True)
class Candidate:
    patient_id: str
    center_voxel: tuple          # continuous (x, y, z) voxel coordinates
    center_world: tuple          # mm
    voxel_count: int
    volume_mm3: float
    equivalent_diameter_mm: float
    mean_score: float
    max_score: float
    resolution_tag: str = "1mm"

    def __post_init__(self):
        if self.voxel_count < 1:
            raise ValidationError("candidate must contain at least one voxel")
        if not (0.0 <= self.mean_score <= self.max_score <= 1.0):
            raise ValidationError("candidate score statistics out of order")
        if self.resolution_tag not in RESOLUTION_TAGS:
            raise ValidationError(f"unknown resolution tag {self.resolution_tag!r}")


def equivalent_diameter(volume_mm3):
    return (6.0 * volume_mm3 / math.pi) ** (1.0 / 3.0)


def threshold(pm, t):
    """Strict threshold: mask = (pm > t)."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"threshold {t} outside [0, 1]")
    return VoxelMask((pm.data > t).astype(np.uint8), pm.spacing, pm.origin)


def binary_opening(mask):
    """Erosion then dilation with the center + 6-face structuring element;
    voxels outside the volume count as background."""
    opened = _kernels.dilate6(_kernels.erode6(mask.data))
    return VoxelMask(opened, mask.spacing, mask.origin)


def connected_components(mask):
    """6-connected labeling; labels 1..K in first-visited raster order."""
    data = mask.data if isinstance(mask, VoxelMask) else np.asarray(mask)
    return _kernels.label6(data)


def extract_candidates(pm, t, patient_id="", resolution_tag="1mm",
                       apply_opening=True):
    """threshold -> opening -> components -> per-component statistics."""
    mask = threshold(pm, t)
    if apply_opening:
        mask = binary_opening(mask)
    labels, count = connected_components(mask)
    voxel_volume = float(np.prod(pm.spacing))

    out = []
    flat_labels = labels.ravel()
    order = np.argsort(flat_labels, kind="stable")
    boundaries = np.searchsorted(flat_labels[order], np.arange(1, count + 2))
    shape = pm.shape
    scores_flat = pm.data.ravel()
    for k in range(count):
        flat_idx = order[boundaries[k]:boundaries[k + 1]]
        pos = np.column_stack(np.unravel_index(flat_idx, shape)).astype(np.float64)
        s = scores_flat[flat_idx]
        total = s.sum()
        center_voxel = (s[:, None] * pos).sum(axis=0) / total
        n = len(flat_idx)
        vol = n * voxel_volume
        out.append(
            Candidate(
                patient_id=patient_id,
                center_voxel=tuple(center_voxel),
                center_world=tuple(
                    voxel_to_world(center_voxel, pm.origin, pm.spacing)
                ),
                voxel_count=n,
                volume_mm3=vol,
                equivalent_diameter_mm=equivalent_diameter(vol),
                # min() guards the mean <= max invariant against summation ulps
                mean_score=float(min(s.mean(), s.max())),
                max_score=float(s.max()),
                resolution_tag=resolution_tag,
            )
        )
    return out


def hit_test(candidate, annotation):
    """True iff the candidate center lies strictly within the annotation
    radius (the LUNA16 convention)."""
    d2 = sum(
        (c - a) ** 2
        for c, a in zip(candidate.center_world, annotation.center_world)
    )
    return d2 < (annotation.diameter / 2.0) ** 2


def segmentation_metrics(pred, gt):
    """Dice / precision / recall between binary masks.

    Empty-denominator conventions: precision with |P| = 0 is 1 if |G| = 0
    else 0; recall symmetric; dice of two empty masks is 1.
    """
    p = pred.data if isinstance(pred, VoxelMask) else np.asarray(pred)
    g = gt.data if isinstance(gt, VoxelMask) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {g.shape}")
    np_, ng = int(p.sum()), int(g.sum())
    inter = int((p.astype(bool) & g.astype(bool)).sum())
    if np_ == 0 and ng == 0:
        return {"dice": 1.0, "precision": 1.0, "recall": 1.0}
    precision = inter / np_ if np_ else (1.0 if ng == 0 else 0.0)
    recall = inter / ng if ng else (1.0 if np_ == 0 else 0.0)
    dice = 2.0 * inter / (np_ + ng)
    return {"dice": dice, "precision": precision, "recall": recall}


# ---------------------------------------------------------------------------
# CSV serialization (CLI contract)

def save_candidates_csv(cands, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CANDIDATE_CSV_HEADER)
        for c in cands:
            writer.writerow(
                [c.patient_id]
                + [repr(float(x)) for x in c.center_world]
                + [c.voxel_count, repr(float(c.equivalent_diameter_mm)),
                   repr(float(c.mean_score)), repr(float(c.max_score)),
                   c.resolution_tag]
            )


def load_candidates_csv(path):
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if header != CANDIDATE_CSV_HEADER:
            raise ParseError(f"{path}: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CANDIDATE_CSV_HEADER):
                raise ParseError(f"{path}:{lineno}: wrong column count")
            try:
                center = (float(row[1]), float(row[2]), float(row[3]))
                n = int(row[4])
                diam = float(row[5])
                vol = math.pi * diam**3 / 6.0
                out.append(
                    Candidate(
                        patient_id=row[0],
                        center_voxel=center,
                        center_world=center,
                        voxel_count=n,
                        volume_mm3=vol,
                        equivalent_diameter_mm=diam,
                        mean_score=float(row[6]),
                        max_score=float(row[7]),
                        resolution_tag=row[8],
                    )
                )
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return out
