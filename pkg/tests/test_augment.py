import numpy as np
import pytest

from lungcad import augment
from lungcad.augment import AffineTransform, AugmentConfig
from lungcad.errors import ValidationError

DISABLED = AugmentConfig(
    enable_rotation=False,
    enable_reflection=False,
    enable_scale=False,
    enable_translation=False,
    enable_gamma=False,
    enable_blur=False,
    enable_noise=False,
)


def rand_block(seed, shape=(12, 12, 12)):
    return np.random.default_rng(seed).normal(size=shape)


class TestSampleAffine:
    def test_degenerate_config_is_identity(self):
        rng = np.random.default_rng(0)
        t = augment.sample_affine(rng, DISABLED)
        assert np.allclose(t.linear, np.eye(3))
        assert np.allclose(t.translation, 0.0)

    def test_reflection_rate(self):
        cfg = AugmentConfig(enable_rotation=False, enable_scale=False,
                            enable_translation=False)
        rng = np.random.default_rng(42)
        n = 100_000
        flips = np.zeros(3)
        for _ in range(n):
            t = augment.sample_affine(rng, cfg)
            flips += np.diag(t.linear) < 0
        rates = flips / n
        assert np.all((rates > 0.49) & (rates < 0.51))

    def test_scale_sigma_monte_carlo(self):
        cfg = AugmentConfig(enable_rotation=False, enable_reflection=False,
                            enable_translation=False)
        rng = np.random.default_rng(7)
        scales = np.array(
            [np.diag(augment.sample_affine(rng, cfg).linear) for _ in range(100_000)]
        )
        sd = scales.std()
        assert abs(sd - 0.06) < 0.05 * 0.06

    def test_cade_mode_upscale_only_boost(self):
        cfg = AugmentConfig(enable_rotation=False, enable_reflection=False,
                            enable_translation=False)
        rng = np.random.default_rng(3)
        # cade mode adds an isotropic factor floored at 1; mean scale grows
        cadx = np.array(
            [np.diag(augment.sample_affine(rng, cfg, "cadx").linear).mean()
             for _ in range(20_000)]
        )
        rng = np.random.default_rng(3)
        cade = np.array(
            [np.diag(augment.sample_affine(rng, cfg, "cade").linear).mean()
             for _ in range(20_000)]
        )
        assert cade.mean() > cadx.mean() + 0.02

    def test_rotation_is_orthonormal(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            r = augment.random_rotation(rng)
            assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(r) - 1.0) < 1e-12


class TestApplyAffine:
    def test_identity(self):
        block = rand_block(0)
        out = augment.apply_affine(block, AffineTransform.identity())
        assert np.allclose(out, block, atol=1e-12)

    def test_reflection_involution(self):
        block = rand_block(1)
        t = AffineTransform(np.diag([-1.0, 1.0, 1.0]), np.zeros(3))
        twice = augment.apply_affine(augment.apply_affine(block, t), t)
        assert np.allclose(twice, block, atol=1e-12)

    def test_90_degree_rotation_is_permutation(self):
        block = rand_block(2, (8, 8, 8))
        # rotation by 90 deg about z: (x, y, z) -> (-y, x, z)
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        out = augment.apply_affine(block, AffineTransform(rot, np.zeros(3)))
        # index-permutation oracle: out[v] = in[R^-1 (v - c) + c]
        expected = np.empty_like(block)
        c = (np.array(block.shape) - 1) / 2.0
        for x in range(8):
            for y in range(8):
                for z in range(8):
                    sx, sy, sz = (np.linalg.inv(rot) @ (np.array([x, y, z]) - c) + c)
                    expected[x, y, z] = block[round(sx), round(sy), round(sz)]
        assert np.allclose(out, expected, atol=1e-12)

    def test_out_of_range_filled_with_minimum(self):
        block = rand_block(3)
        t = AffineTransform(np.eye(3), np.array([30.0, 0.0, 0.0]))
        out = augment.apply_affine(block, t)
        assert np.all(out == block.min())

    def test_singular_transform_rejected(self):
        with pytest.raises(ValidationError):
            AffineTransform(np.zeros((3, 3)), np.zeros(3))


class TestGamma:
    def test_identity_at_one(self):
        block = rand_block(4)
        assert np.allclose(augment.gamma_transform(block, 1.0), block, atol=1e-12)

    def test_hand_computation_unit_range(self):
        block = np.array([0.0, 0.25, 1.0]).reshape(3, 1, 1)
        out = augment.gamma_transform(block, 2.0)
        assert np.allclose(out.ravel(), [0.0, 0.0625, 1.0], atol=1e-12)

    def test_endpoints_preserved(self):
        rng = np.random.default_rng(5)
        block = rng.normal(size=(6, 6, 6))
        for gamma in (0.3, 0.7, 1.3, 4.0):
            out = augment.gamma_transform(block, gamma)
            assert np.isclose(out.min(), block.min(), atol=1e-12)
            assert np.isclose(out.max(), block.max(), atol=1e-12)

    def test_monotone(self):
        rng = np.random.default_rng(6)
        block = rng.normal(size=(5, 5, 5))
        out = augment.gamma_transform(block, 2.3)
        order = np.argsort(block.ravel())
        assert np.all(np.diff(out.ravel()[order]) >= 0)

    def test_constant_block_unchanged(self):
        block = np.full((4, 4, 4), 3.0)
        assert np.array_equal(augment.gamma_transform(block, 2.0), block)

    def test_invalid_gamma(self):
        with pytest.raises(ValidationError):
            augment.gamma_transform(rand_block(0), 0.0)


class TestBlur:
    def test_sigma_zero_identity_both_modes(self):
        block = rand_block(7)
        assert np.array_equal(augment.blur_or_unsharp(block, 0.0, "blur"), block)
        assert np.allclose(augment.blur_or_unsharp(block, 0.0, "unsharp"), block)

    def test_constant_preserved(self):
        block = np.full((8, 8, 8), 2.5)
        out = augment.blur_or_unsharp(block, 1.2, "blur")
        assert np.allclose(out, 2.5, atol=1e-12)

    def test_impulse_matches_analytic_kernel(self):
        n = 15
        block = np.zeros((n, n, n))
        block[7, 7, 7] = 1.0
        out = augment.blur_or_unsharp(block, 1.0, "blur")
        # analytic separable kernel, truncated at 3 sigma, renormalized
        x = np.arange(-3, 4, dtype=float)
        g = np.exp(-0.5 * x**2)
        g /= g.sum()
        for (i, j, k) in [(7, 7, 7), (8, 7, 7), (9, 6, 7), (10, 7, 5)]:
            expected = g[i - 7 + 3] * g[j - 7 + 3] * g[k - 7 + 3]
            assert abs(out[i, j, k] - expected) < 1e-6

    def test_unsharp_sharpens_impulse(self):
        block = np.zeros((9, 9, 9))
        block[4, 4, 4] = 1.0
        out = augment.blur_or_unsharp(block, 1.0, "unsharp")
        assert out[4, 4, 4] > 1.0


class TestNoise:
    def test_sigma_zero_identity(self):
        block = rand_block(8)
        rng = np.random.default_rng(0)
        assert np.array_equal(augment.add_noise(block, 0.0, rng), block)

    def test_noise_std_monte_carlo(self):
        block = np.zeros((64, 64, 64))
        rng = np.random.default_rng(9)
        out = augment.add_noise(block, 0.03, rng)
        assert abs(out.std() - 0.03) < 0.05 * 0.03

    def test_deterministic(self):
        block = rand_block(10)
        a = augment.add_noise(block, 0.1, np.random.default_rng(5))
        b = augment.add_noise(block, 0.1, np.random.default_rng(5))
        assert np.array_equal(a, b)


class TestAugmentComposite:
    def test_all_disabled_is_identity(self):
        block = rand_block(11)
        out = augment.augment(block, np.random.default_rng(0), DISABLED)
        assert np.array_equal(out, block)

    def test_fixed_seed_deterministic(self):
        block = rand_block(12)
        a = augment.augment(block, np.random.default_rng(99))
        b = augment.augment(block, np.random.default_rng(99))
        assert np.array_equal(a, b)

    def test_output_shape_over_random_configs(self):
        rng = np.random.default_rng(13)
        block = rand_block(13, (10, 11, 12))
        for _ in range(10):
            cfg = AugmentConfig(
                enable_rotation=bool(rng.random() < 0.5),
                enable_blur=bool(rng.random() < 0.5),
                enable_noise=bool(rng.random() < 0.5),
            )
            out = augment.augment(block, rng, cfg, out_shape=(8, 8, 8))
            assert out.shape == (8, 8, 8)
