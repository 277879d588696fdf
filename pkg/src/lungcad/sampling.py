"""Training-block sampling policy and the weighted segmentation loss.

Blocks are sampled near known nodules with probability 1 - 0.7^N (N =
number of nodules for the patient) and uniformly from the scan otherwise.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume import sphere_mask, world_to_voxel

DEFAULT_BLOCK_SHAPE = (64, 64, 64)
NEAR_NODULE_JITTER = 16  # voxels per axis around the chosen annotation center

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainingBlock:
    image: np.ndarray
    label: np.ndarray
    patient_id: str
    sampled_near_nodule: bool
    offset: tuple  # voxel offset of the block within its source scan

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ValidationError("image and label shapes differ")


def near_nodule_probability(n_nodules):
    return 1.0 - 0.7**n_nodules


def sample_policy_decision(rng, n_nodules):
    """One Bernoulli(1 - 0.7^N) draw of the near-nodule-vs-random decision."""
    return bool(rng.random() < near_nodule_probability(n_nodules))


def sample_training_block(scan, annotations, rng, block_shape=DEFAULT_BLOCK_SHAPE,
                          patient_id=""):
    """Draw one labeled training block from a preprocessed scan."""
    block_shape = tuple(int(b) for b in block_shape)
    shape = scan.shape
    if any(s < b for s, b in zip(shape, block_shape)):
        raise ValidationError(
            f"scan shape {shape} smaller than block {block_shape}"
        )
    max_origin = [s - b for s, b in zip(shape, block_shape)]

    near = bool(annotations) and sample_policy_decision(rng, len(annotations))
    if near:
        ann = annotations[rng.integers(len(annotations))]
        center = np.round(
            world_to_voxel(ann.center_world, scan.origin, scan.spacing)
        ).astype(int)
        jitter = rng.integers(-NEAR_NODULE_JITTER, NEAR_NODULE_JITTER + 1, size=3)
        origin_vox = center + jitter - np.array(block_shape) // 2
        origin_vox = np.clip(origin_vox, 0, max_origin)
    else:
        origin_vox = np.array([rng.integers(m + 1) for m in max_origin])

    sl = tuple(slice(o, o + b) for o, b in zip(origin_vox, block_shape))
    image = scan.data[sl].copy()

    block_origin_world = np.array(scan.origin) + origin_vox * np.array(scan.spacing)
    label = np.zeros(block_shape, dtype=np.uint8)
    for ann in annotations:
        label |= sphere_mask(block_shape, scan.spacing, block_origin_world,
                             ann.center_world, ann.diameter)
    return TrainingBlock(
        image=image,
        label=label,
        patient_id=patient_id,
        sampled_near_nodule=near,
        offset=tuple(int(o) for o in origin_vox),
    )


def epoch_iterator(scans_with_annotations, rng, block_shape=DEFAULT_BLOCK_SHAPE):
    """One block per patient per epoch, in a seeded shuffled order.

    ``scans_with_annotations`` is a list of (patient_id, scan, annotations).
    """
    order = rng.permutation(len(scans_with_annotations))
    for i in order:
        patient_id, scan, annotations = scans_with_annotations[i]
        yield sample_training_block(scan, annotations, rng, block_shape, patient_id)


def weighted_cross_entropy(pred, label, nodule_weight=2.0):
    """Mean binary cross-entropy with nodule voxels weighted ``nodule_weight``.

    Returns (loss, gradient w.r.t. pred). Predictions are clamped to
    [1e-7, 1 - 1e-7] before the log; the gradient is of the clamped loss
    (zero where the clamp is active).
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {label.shape}")
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    w = np.where(label == 1, nodule_weight, 1.0)
    v = pred.size
    loss = -np.sum(w * (label * np.log(p) + (1.0 - label) * np.log1p(-p))) / v
    grad = -(w * (label / p - (1.0 - label) / (1.0 - p))) / v
    grad[(pred < PROB_CLAMP) | (pred > 1.0 - PROB_CLAMP)] = 0.0
    return loss, grad
