"""Seeded stochastic 3D augmentation for training blocks.

All sampling takes an explicit numpy Generator; equal seeds give equal
outputs. The composite ``augment`` splits independent child generators off
the one it is given, so individual transforms stay reproducible when the
set of enabled transforms changes.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError


@dataclass(frozen=True)
class AugmentConfig:
    scale_sigma: float = 0.06          # multiplicative factor 1+s, s ~ N(0, sigma)
    translate_sigma: float = 1.0       # mm
    gamma_range: tuple = (0.7, 1.3)
    blur_sigma_max: float = 1.5        # mm
    noise_sigma: float = 0.03          # sigma of the sigma draw
    cade_scale_boost: float = 3.0      # upscale-only extra sigma multiplier
    enable_rotation: bool = True
    enable_reflection: bool = True
    enable_scale: bool = True
    enable_translation: bool = True
    enable_gamma: bool = True
    enable_blur: bool = True
    enable_noise: bool = True

    def __post_init__(self):
        lo, hi = self.gamma_range
        if lo > hi:
            raise ValidationError(f"gamma_range lo > hi: {self.gamma_range}")
        for name in ("scale_sigma", "translate_sigma", "blur_sigma_max", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass(frozen=True)
class AffineTransform:
    linear: np.ndarray          # 3x3, rotation . reflection . scale
    translation: np.ndarray     # mm

    def __post_init__(self):
        linear = np.asarray(self.linear, dtype=np.float64)
        if abs(np.linalg.det(linear)) <= 1e-9:
            raise ValidationError("affine linear part is singular")
        object.__setattr__(self, "linear", linear)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64)
        )

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


def random_rotation(rng):
    """Uniform SO(3) rotation via a uniform unit quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def sample_affine(rng, cfg, mode="cadx"):
    """Draw one random affine: uniform rotation, per-axis reflection (p=1/2),
    per-axis scale 1+s with s ~ N(0, scale_sigma), translation ~ N(0, t_sigma) mm.

    In "cade" mode an extra isotropic upscale-only factor
    max(1, 1 + s'), s' ~ N(0, cade_scale_boost * scale_sigma) is applied.
    """
    if mode not in ("cadx", "cade"):
        raise ValidationError(f"unknown affine mode {mode!r}")
    rot = random_rotation(rng) if cfg.enable_rotation else np.eye(3)
    if cfg.enable_reflection:
        refl = np.where(rng.random(3) < 0.5, -1.0, 1.0)
    else:
        refl = np.ones(3)
    if cfg.enable_scale and cfg.scale_sigma > 0:
        scale = 1.0 + rng.normal(0.0, cfg.scale_sigma, size=3)
    else:
        scale = np.ones(3)
    if mode == "cade" and cfg.enable_scale and cfg.scale_sigma > 0:
        boost = max(1.0, 1.0 + rng.normal(0.0, cfg.cade_scale_boost * cfg.scale_sigma))
        scale = scale * boost
    if cfg.enable_translation and cfg.translate_sigma > 0:
        translation = rng.normal(0.0, cfg.translate_sigma, size=3)
    else:
        translation = np.zeros(3)
    return AffineTransform(rot @ np.diag(refl * scale), translation)


def apply_affine(block, transform, out_shape=None):
    """Resample ``block`` under the affine about the block center.

    Output voxel v is the trilinear sample of the input at t^-1(v); samples
    falling outside the input take the block minimum ("air") value.
    """
    from . import _kernels

    block = np.asarray(block, dtype=np.float64)
    if block.size == 0:
        raise ValidationError("empty block")
    if out_shape is None:
        out_shape = block.shape
    out_shape = tuple(int(n) for n in out_shape)

    inv = np.linalg.inv(transform.linear)
    in_center = (np.array(block.shape) - 1) / 2.0
    out_center = (np.array(out_shape) - 1) / 2.0

    axes = [np.arange(n, dtype=np.float64) for n in out_shape]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    coords = (coords - out_center - transform.translation) @ inv.T + in_center

    values = _kernels.trilinear_sample(block, coords)
    eps = 1e-9
    limits = np.array(block.shape, dtype=np.float64) - 1
    outside = ((coords < -eps) | (coords > limits + eps)).any(axis=1)
    values[outside] = block.min()
    return values.reshape(out_shape)


def gamma_transform(block, gamma):
    """Gamma on min-max-normalized intensities; endpoints are preserved."""
    if gamma <= 0:
        raise ValidationError(f"gamma must be > 0, got {gamma}")
    block = np.asarray(block, dtype=np.float64)
    lo, hi = block.min(), block.max()
    if hi == lo:
        return block.copy()
    unit = (block - lo) / (hi - lo)
    return lo + (hi - lo) * unit**gamma


def _gaussian_kernel(sigma):
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(block, sigma):
    """Separable Gaussian, kernel truncated at 3 sigma and renormalized,
    edge-clamped borders. sigma is in voxels (blocks are at 1 mm)."""
    block = np.asarray(block, dtype=np.float64)
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    if sigma == 0:
        return block.copy()
    kernel = _gaussian_kernel(sigma)
    out = block
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return out


def blur_or_unsharp(block, sigma, mode="blur"):
    if mode not in ("blur", "unsharp"):
        raise ValidationError(f"unknown blur mode {mode!r}")
    blurred = gaussian_blur(block, sigma)
    if mode == "blur":
        return blurred
    return 2.0 * np.asarray(block, dtype=np.float64) - blurred


def add_noise(block, sigma, rng):
    """Add i.i.d. N(0, sigma) per voxel; sigma <= 0 is the identity."""
    block = np.asarray(block, dtype=np.float64)
    if sigma <= 0:
        return block.copy()
    return block + rng.normal(0.0, sigma, size=block.shape)


def augment(block, rng, cfg=None, mode="cadx", out_shape=None):
    """Full chain: affine -> gamma -> blur/unsharp (fair coin) -> noise.

    Each stage draws from its own child generator split off ``rng``.
    """
    if cfg is None:
        cfg = AugmentConfig()
    r_affine, r_gamma, r_blur, r_noise = rng.spawn(4)
    block = np.asarray(block, dtype=np.float64)

    affine_on = (
        cfg.enable_rotation
        or cfg.enable_reflection
        or (cfg.enable_scale and cfg.scale_sigma > 0)
        or (cfg.enable_translation and cfg.translate_sigma > 0)
    )
    if affine_on or (out_shape is not None and tuple(out_shape) != block.shape):
        t = sample_affine(r_affine, cfg, mode)
        block = apply_affine(block, t, out_shape)
    if cfg.enable_gamma:
        lo, hi = cfg.gamma_range
        block = gamma_transform(block, r_gamma.uniform(lo, hi))
    if cfg.enable_blur and cfg.blur_sigma_max > 0:
        blur_mode = "blur" if r_blur.random() < 0.5 else "unsharp"
        block = blur_or_unsharp(block, r_blur.uniform(0.0, cfg.blur_sigma_max), blur_mode)
    if cfg.enable_noise and cfg.noise_sigma > 0:
        sigma = abs(r_noise.normal(0.0, cfg.noise_sigma))
        block = add_noise(block, sigma, r_noise)
    return block
