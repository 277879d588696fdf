import numpy as np
import pytest

from lungcad import sampling
from lungcad.errors import ValidationError
from lungcad.volume import CtVolume, NoduleAnnotation


def make_scan(n=80, seed=0):
    rng = np.random.default_rng(seed)
    return CtVolume(rng.normal(size=(n, n, n)), (1.0, 1.0, 1.0), normalized=True)


class TestPolicy:
    def test_zero_nodules_always_random(self):
        assert sampling.near_nodule_probability(0) == 0.0
        rng = np.random.default_rng(0)
        assert not any(sampling.sample_policy_decision(rng, 0) for _ in range(1000))

    def test_single_nodule_probability(self):
        assert sampling.near_nodule_probability(1) == pytest.approx(0.3)

    @pytest.mark.parametrize("n,expected", [(1, 0.3), (2, 0.51)])
    def test_monte_carlo_rate(self, n, expected):
        rng = np.random.default_rng(17)
        draws = 100_000
        hits = sum(sampling.sample_policy_decision(rng, n) for _ in range(draws))
        assert abs(hits / draws - expected) < 0.01


class TestSampleTrainingBlock:
    def anns(self):
        return [NoduleAnnotation("p", (40.0, 40.0, 40.0), 9.0)]

    def test_block_inside_scan(self):
        scan = make_scan()
        rng = np.random.default_rng(1)
        for _ in range(50):
            block = sampling.sample_training_block(scan, self.anns(), rng)
            assert block.image.shape == (64, 64, 64)
            assert all(
                0 <= o and o + 64 <= 80 for o in block.offset
            )

    def test_near_block_contains_nodule_label(self):
        scan = make_scan()
        rng = np.random.default_rng(2)
        seen_near = False
        for _ in range(40):
            block = sampling.sample_training_block(scan, self.anns(), rng)
            if block.sampled_near_nodule:
                seen_near = True
                assert block.label.sum() > 0
        assert seen_near

    def test_label_matches_rasterization(self):
        scan = make_scan()
        rng = np.random.default_rng(3)
        block = sampling.sample_training_block(scan, self.anns(), rng)
        # oracle: brute-force distance test over the block's world coordinates
        count = 0
        for x in range(64):
            for y in range(64):
                for z in range(64):
                    w = np.array(block.offset) + [x, y, z]
                    if np.sum((w - 40.0) ** 2) < 4.5**2:
                        count += 1
        assert block.label.sum() == count

    def test_no_annotations_label_empty(self):
        scan = make_scan()
        block = sampling.sample_training_block(scan, [], np.random.default_rng(4))
        assert block.label.sum() == 0
        assert not block.sampled_near_nodule

    def test_scan_too_small(self):
        scan = CtVolume(np.zeros((32, 80, 80)), (1, 1, 1))
        with pytest.raises(ValidationError):
            sampling.sample_training_block(scan, [], np.random.default_rng(0))

    def test_epoch_iterator_one_block_per_patient(self):
        scan = make_scan()
        items = [("a", scan, []), ("b", scan, self.anns()), ("c", scan, [])]
        blocks = list(sampling.epoch_iterator(items, np.random.default_rng(5)))
        assert sorted(b.patient_id for b in blocks) == ["a", "b", "c"]


class TestWeightedCrossEntropy:
    def test_perfect_prediction(self):
        label = (np.random.default_rng(0).random((4, 4, 4)) < 0.3).astype(float)
        loss, _ = sampling.weighted_cross_entropy(label, label)
        assert loss < 1e-5

    def test_single_voxel_hand_value(self):
        loss, _ = sampling.weighted_cross_entropy(
            np.array([[[0.5]]]), np.array([[[1.0]]])
        )
        assert loss == pytest.approx(2.0 * np.log(2.0), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        pred = rng.uniform(0.05, 0.95, size=(4, 4, 4))
        label = (rng.random((4, 4, 4)) < 0.5).astype(float)
        _, grad = sampling.weighted_cross_entropy(pred, label)
        h = 1e-6
        for _ in range(20):
            idx = tuple(rng.integers(4, size=3))
            up = pred.copy(); up[idx] += h
            dn = pred.copy(); dn[idx] -= h
            lu, _ = sampling.weighted_cross_entropy(up, label)
            ld, _ = sampling.weighted_cross_entropy(dn, label)
            fd = (lu - ld) / (2 * h)
            assert abs(fd - grad[idx]) <= 1e-6 * max(1.0, abs(fd))

    def test_weight_one_is_plain_bce(self):
        rng = np.random.default_rng(7)
        pred = rng.uniform(0.01, 0.99, size=(5, 5, 5))
        label = (rng.random((5, 5, 5)) < 0.4).astype(float)
        loss, _ = sampling.weighted_cross_entropy(pred, label, nodule_weight=1.0)
        plain = -np.mean(label * np.log(pred) + (1 - label) * np.log(1 - pred))
        assert loss == pytest.approx(plain, rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pred = rng.random((3, 3, 3))
            label = (rng.random((3, 3, 3)) < 0.5).astype(float)
            loss, _ = sampling.weighted_cross_entropy(pred, label)
            assert loss >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            sampling.weighted_cross_entropy(np.zeros((2, 2, 2)), np.zeros((3, 3, 3)))
