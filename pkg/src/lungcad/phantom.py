"""Seeded synthetic chest-CT phantoms with ground truth.

A phantom is Gaussian background noise around air-like HU with soft-edged
high-contrast spheres as nodules and random-orientation cylinders as vessel
distractors (the false-positive source). Annotations carry the true center,
diameter, and synthetic radiologist malignancy scores that increase with
diameter; the ground-truth patient label is "malignant" iff any nodule
diameter reaches the configured rule diameter.

generate_dataset writes MetaImage volumes, annotation CSVs, and a JSON
manifest; build_mil_bags turns a phantom into a dual-resolution top-k bag
of handcrafted candidate features for classifier training.
"""

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .candidates import Candidate, equivalent_diameter
from .errors import GenerationError, ValidationError
from .mil import Bag, handcrafted_features, rank_candidates, select_topk_dual
from .volume import (
    CtVolume,
    NoduleAnnotation,
    resample,
    save_annotations_csv,
    save_metaimage,
    voxel_to_world,
    world_to_voxel,
)

PLACEMENT_RETRIES = 200


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple = (128, 128, 128)
    spacing: tuple = (1.0, 1.0, 1.0)
    background_hu: float = -850.0
    background_sigma: float = 40.0
    nodule_count_range: tuple = (0, 4)
    diameter_range: tuple = (3.0, 30.0)
    nodule_hu: float = -50.0
    nodule_hu_sigma: float = 50.0
    edge_sigma_mm: float = 0.75
    vessel_count_range: tuple = (0, 4)
    vessel_radius_range: tuple = (1.0, 2.5)
    border_margin_mm: float = 5.0
    malignant_diameter_mm: float = 12.0
    # diameter ~ lo + (hi - lo) * Beta(a, b): right-skewed, mostly small nodules
    diameter_beta: tuple = (1.2, 4.8)

    def __post_init__(self):
        lo, hi = self.diameter_range
        if not 3.0 <= lo < hi <= 30.0:
            raise ValidationError(f"diameter range {self.diameter_range} outside [3, 30]")
        if not lo <= self.malignant_diameter_mm <= hi:
            raise ValidationError("malignancy rule diameter outside the diameter range")
        if self.nodule_count_range[0] > self.nodule_count_range[1]:
            raise ValidationError("bad nodule count range")


def _sample_diameter(cfg, rng):
    lo, hi = cfg.diameter_range
    a, b = cfg.diameter_beta
    return float(lo + (hi - lo) * rng.beta(a, b))


def _synthetic_scores(diameter, cfg, rng):
    lo, hi = cfg.diameter_range
    base = round(1.0 + 4.0 * (diameter - lo) / (hi - lo))
    n_raters = int(rng.integers(3, 5))
    return tuple(
        int(np.clip(base + round(rng.normal(0.0, 0.6)), 1, 5))
        for _ in range(n_raters)
    )


def _place_centers(cfg, diameters, rng):
    """Uniform centers (mm) kept >= border_margin + radius from volume faces
    and pairwise farther apart than the two diameters summed."""
    extent = np.asarray(cfg.shape) * np.asarray(cfg.spacing)
    centers = []
    for i, d in enumerate(diameters):
        margin = cfg.border_margin_mm + d / 2.0
        lo = np.full(3, margin)
        hi = extent - margin
        if (hi <= lo).any():
            raise GenerationError(f"nodule of {d:.1f} mm cannot fit in the volume")
        for _ in range(PLACEMENT_RETRIES):
            c = rng.uniform(lo, hi)
            if all(
                np.linalg.norm(c - other) >= d + diameters[j]
                for j, other in enumerate(centers)
            ):
                centers.append(c)
                break
        else:
            raise GenerationError(
                f"could not place nodule {i} without overlap after "
                f"{PLACEMENT_RETRIES} retries"
            )
    return centers


def _world_grid(cfg):
    axes = [
        np.arange(n) * s for n, s in zip(cfg.shape, cfg.spacing)
    ]
    return np.meshgrid(*axes, indexing="ij")


def _render_sphere(data, grid, center, diameter, hu, cfg):
    r = diameter / 2.0
    d = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, center)))
    # Gaussian-profile edge: solid core, smooth falloff past the radius
    w = np.exp(-np.maximum(d - (r - cfg.edge_sigma_mm), 0.0) ** 2
               / (2.0 * cfg.edge_sigma_mm**2))
    np.copyto(data, (1.0 - w) * data + w * hu)


def _render_cylinder(data, grid, point, direction, radius, hu, cfg):
    rel = [g - p for g, p in zip(grid, point)]
    proj = sum(r * u for r, u in zip(rel, direction))
    d2 = sum(r * r for r in rel) - proj**2
    d = np.sqrt(np.maximum(d2, 0.0))
    w = np.exp(-np.maximum(d - (radius - cfg.edge_sigma_mm), 0.0) ** 2
               / (2.0 * cfg.edge_sigma_mm**2))
    np.copyto(data, (1.0 - w) * data + w * hu)


def generate_phantom(cfg, rng, patient_id="phantom"):
    """Returns (CtVolume, annotations, label) with label in
    {"malignant", "benign"}. Deterministic given the generator state."""
    data = rng.normal(cfg.background_hu, cfg.background_sigma, size=cfg.shape)
    n_nodules = int(rng.integers(cfg.nodule_count_range[0],
                                 cfg.nodule_count_range[1] + 1))
    # place large nodules first: they have the fewest admissible positions
    diameters = sorted(
        (_sample_diameter(cfg, rng) for _ in range(n_nodules)), reverse=True
    )
    centers = _place_centers(cfg, diameters, rng)
    grid = _world_grid(cfg)

    n_vessels = int(rng.integers(cfg.vessel_count_range[0],
                                 cfg.vessel_count_range[1] + 1))
    extent = np.asarray(cfg.shape) * np.asarray(cfg.spacing)
    for _ in range(n_vessels):
        point = rng.uniform(0.0, extent)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radius = float(rng.uniform(*cfg.vessel_radius_range))
        hu = float(rng.normal(cfg.nodule_hu, cfg.nodule_hu_sigma))
        _render_cylinder(data, grid, point, direction, radius, hu, cfg)

    annotations = []
    for center, diameter in zip(centers, diameters):
        hu = float(rng.normal(cfg.nodule_hu, cfg.nodule_hu_sigma))
        _render_sphere(data, grid, center, diameter, hu, cfg)
        annotations.append(
            NoduleAnnotation(
                patient_id=patient_id,
                center_world=tuple(center),
                diameter=diameter,
                radiologist_scores=_synthetic_scores(diameter, cfg, rng),
            )
        )
    label = (
        "malignant"
        if any(a.diameter >= cfg.malignant_diameter_mm for a in annotations)
        else "benign"
    )
    volume = CtVolume(data=data, spacing=tuple(cfg.spacing),
                      origin=(0.0, 0.0, 0.0))
    return volume, annotations, label


def generate_dataset(n_patients, cfg, seed, out_dir):
    """Writes n phantoms (MetaImage + annotation CSV) plus manifest.json;
    per-patient generators are spawned from the root seed so the dataset is
    reproducible and order-independent."""
    if n_patients < 1:
        raise ValidationError("need at least one patient")
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence(seed)
    records = []
    n_malignant = 0
    for i, child in enumerate(root.spawn(n_patients)):
        pid = f"phantom{i:04d}"
        rng = np.random.default_rng(child)
        volume, annotations, label = generate_phantom(cfg, rng, patient_id=pid)
        vol_path = os.path.join(out_dir, f"{pid}.mhd")
        ann_path = os.path.join(out_dir, f"{pid}_annotations.csv")
        save_metaimage(volume, vol_path)
        save_annotations_csv(annotations, ann_path)
        n_malignant += label == "malignant"
        records.append({
            "id": pid, "volume": f"{pid}.mhd",
            "annotations": f"{pid}_annotations.csv", "label": label,
        })
    manifest = {
        "n_patients": n_patients,
        "seed": seed,
        "malignant_prevalence": n_malignant / n_patients,
        "patients": records,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, manifest_path)
    return manifest


# ---------------------------------------------------------------------------
# Candidate/bag construction for classifier training
#
# True nodules become candidates (scored by their blob contrast against the
# background) alongside Poisson-distributed distractor candidates; features
# are handcrafted per candidate at the native and a 2 mm resolution, ranked
# by a diameter-based malignancy proxy, and the top-k of each resolution
# form the patient's bag.

def _contrast_score(volume, center_world, diameter):
    """Squashed inner-vs-background contrast, in [0, 1]."""
    center = world_to_voxel(center_world, volume.origin, volume.spacing)
    r = np.maximum((diameter / 2.0) / np.asarray(volume.spacing), 1.0)
    lo = np.maximum(np.floor(center - r).astype(int), 0)
    hi = np.minimum(np.ceil(center + r).astype(int) + 1, volume.shape)
    inner = volume.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    contrast = float(inner.mean()) - float(np.median(volume.data))
    return float(1.0 / (1.0 + math.exp(-contrast / 200.0)))


def _candidate_at(volume, center_world, diameter, score, patient_id=""):
    vol = math.pi * diameter**3 / 6.0
    voxels = max(1, int(round(vol / float(np.prod(volume.spacing)))))
    return Candidate(
        patient_id=patient_id,
        center_voxel=tuple(world_to_voxel(center_world, volume.origin,
                                          volume.spacing)),
        center_world=tuple(float(c) for c in center_world),
        voxel_count=voxels,
        volume_mm3=vol,
        equivalent_diameter_mm=equivalent_diameter(vol),
        mean_score=score,
        max_score=score,
        resolution_tag="1mm",
    )


def phantom_candidates(volume, annotations, cfg, rng, fp_rate=3.0,
                       patient_id=""):
    """True-nodule candidates plus Poisson(fp_rate) small distractors at
    random interior positions."""
    cands = []
    for a in annotations:
        score = _contrast_score(volume, a.center_world, a.diameter)
        cands.append(_candidate_at(volume, a.center_world, a.diameter, score,
                                   a.patient_id))
    extent = np.asarray(volume.shape) * np.asarray(volume.spacing)
    for _ in range(rng.poisson(fp_rate)):
        center = rng.uniform(cfg.border_margin_mm, extent - cfg.border_margin_mm)
        diameter = float(rng.uniform(2.0, 5.0))
        score = _contrast_score(volume, center, diameter)
        cands.append(_candidate_at(volume, center, diameter, score, patient_id))
    if not cands:
        # patients with no nodules and no sampled distractors still need a
        # non-empty candidate list for bag construction
        center = extent / 2.0
        cands.append(_candidate_at(volume, center, 3.0,
                                   _contrast_score(volume, center, 3.0),
                                   patient_id))
    return cands


def build_mil_bags(volume, annotations, cfg, rng, k_each=2, patient_id=""):
    """Dual-resolution top-k bag of handcrafted features for one phantom.

    Returns (Bag, label01). Ranking uses a diameter-and-contrast malignancy
    proxy (larger, brighter candidates first).
    """
    cands = phantom_candidates(volume, annotations, cfg, rng,
                               patient_id=patient_id)
    if not cands:
        raise GenerationError("phantom produced no candidates")
    proxy = lambda c: c.equivalent_diameter_mm * c.max_score
    ranked_1mm = rank_candidates(cands, proxy)
    coarse = resample(volume, (2.0, 2.0, 2.0))
    coarse_cands = [replace(c, resolution_tag="2mm") for c in cands]
    ranked_2mm = rank_candidates(coarse_cands, proxy)
    picked = select_topk_dual(ranked_1mm, ranked_2mm, k_each=k_each)
    feats = []
    for c in picked:
        src = volume if c.resolution_tag == "1mm" else coarse
        c_local = replace(
            c, center_voxel=tuple(world_to_voxel(c.center_world, src.origin,
                                                 src.spacing))
        )
        feats.append(handcrafted_features(c_local, src))
    label = float(
        any(a.diameter >= cfg.malignant_diameter_mm for a in annotations)
    )
    bag = Bag(features=np.asarray(feats), candidates=tuple(picked),
              patient_id=patient_id, label=label)
    return bag, label


def generate_mil_dataset(n_patients, cfg, seed):
    """In-memory bag dataset for classifier experiments: one (Bag, label)
    per phantom, deterministic from the root seed."""
    root = np.random.SeedSequence(seed)
    bags, labels = [], []
    for i, child in enumerate(root.spawn(n_patients)):
        rng = np.random.default_rng(child)
        volume, annotations, _ = generate_phantom(
            cfg, rng, patient_id=f"phantom{i:04d}"
        )
        bag, label = build_mil_bags(volume, annotations, cfg, rng)
        bags.append(bag)
        labels.append(label)
    return bags, labels
