import numpy as np
import pytest

from lungcad import nnet
from lungcad.errors import FormatError, ValidationError


def naive_conv3d(x, kernel):
    """Independent 6-loop cross-correlation oracle (zero-padded same)."""
    c_out, c_in, kx, ky, kz = kernel.shape
    _, nx, ny, nz = x.shape
    out = np.zeros((c_out, nx, ny, nz))
    for o in range(c_out):
        for px in range(nx):
            for py in range(ny):
                for pz in range(nz):
                    acc = 0.0
                    for c in range(c_in):
                        for ix in range(kx):
                            for iy in range(ky):
                                for iz in range(kz):
                                    sx = px + ix - kx // 2
                                    sy = py + iy - ky // 2
                                    sz = pz + iz - kz // 2
                                    if 0 <= sx < nx and 0 <= sy < ny and 0 <= sz < nz:
                                        acc += x[c, sx, sy, sz] * kernel[o, c, ix, iy, iz]
                    out[o, px, py, pz] = acc
    return out


class TestConv3d:
    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 6, 6, 6))
        kernel = np.zeros((1, 1, 3, 3, 3))
        kernel[0, 0, 1, 1, 1] = 1.0
        assert np.allclose(nnet.conv3d(x, kernel), x, atol=1e-12)

    def test_ones_kernel_interior_sum(self):
        x = np.ones((1, 5, 5, 5))
        kernel = np.ones((1, 1, 3, 3, 3))
        out = nnet.conv3d(x, kernel)
        assert out[0, 2, 2, 2] == pytest.approx(27.0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 6, 6, 6))
        kernel = rng.normal(size=(3, 2, 3, 3, 3))
        assert np.abs(nnet.conv3d(x, kernel) - naive_conv3d(x, kernel)).max() < 1e-10

    def test_channel_mismatch(self):
        with pytest.raises(ValidationError):
            nnet.conv3d(np.zeros((2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))


class TestLayers:
    def test_prelu_negative(self):
        assert nnet.prelu(np.array(-2.0), np.array(0.25)) == -0.5

    def test_prelu_per_channel(self):
        x = np.array([[-1.0], [-1.0]]).reshape(2, 1, 1, 1)
        out = nnet.prelu(x, np.array([0.1, 0.5]))
        assert out[0, 0, 0, 0] == pytest.approx(-0.1)
        assert out[1, 0, 0, 0] == pytest.approx(-0.5)

    def test_maxpool_constant(self):
        x = np.full((3, 4, 4, 4), 2.0)
        out = nnet.maxpool3d(x)
        assert out.shape == (3, 2, 2, 2)
        assert np.all(out == 2.0)

    def test_maxpool_odd_rejected(self):
        with pytest.raises(ValidationError):
            nnet.maxpool3d(np.zeros((1, 3, 4, 4)))

    def test_batchnorm_centering(self):
        x = np.full((2, 2, 2, 2), 3.0)
        out = nnet.batchnorm_infer(
            x, np.array([3.0, 3.0]), np.array([1.0, 1.0]),
            np.array([1.0, 1.0]), np.array([0.0, 0.0])
        )
        assert np.abs(out).max() < 1e-6

    def test_dense_backward_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        b = rng.normal(size=3)
        grad_y = rng.normal(size=3)
        grad_x, grad_w, grad_b = nnet.dense_backward(grad_y, x, w)
        h = 1e-6

        def loss(wv, bv, xv):
            return float(grad_y @ (wv @ xv + bv))

        for i in range(5):
            xp = x.copy(); xp[i] += h
            xm = x.copy(); xm[i] -= h
            fd = (loss(w, b, xp) - loss(w, b, xm)) / (2 * h)
            assert abs(fd - grad_x[i]) < 1e-6
        for i in range(3):
            for j in range(5):
                wp = w.copy(); wp[i, j] += h
                wm = w.copy(); wm[i, j] -= h
                fd = (loss(wp, b, x) - loss(wm, b, x)) / (2 * h)
                assert abs(fd - grad_w[i, j]) < 1e-6
        assert np.allclose(grad_b, grad_y)


class TestDropout:
    def test_rate_zero_all_ones(self):
        mask = nnet.dropout_mask(np.random.default_rng(0), 0.0, 100)
        assert np.all(mask == 1.0)

    def test_inverted_scaling_expectation(self):
        rng = np.random.default_rng(3)
        mask = nnet.dropout_mask(rng, 0.5, 100_000)
        assert abs(mask.mean() - 1.0) < 0.01

    def test_invalid_rate(self):
        with pytest.raises(ValidationError):
            nnet.dropout_mask(np.random.default_rng(0), 1.0, 10)


class TestBaseNet:
    def small_params(self, seed=0):
        return nnet.random_base_net_params(
            np.random.default_rng(seed), channels=(4, 8, 16), feature_dim=32
        )

    def test_shape_trace_full_architecture(self):
        params = nnet.random_base_net_params(np.random.default_rng(4))
        block = np.random.default_rng(5).normal(size=(32, 32, 32))
        logit, feature, trace = nnet.base_net_forward(
            block, params, return_trace=True
        )
        assert trace == [
            (32, 16, 16, 16), (64, 8, 8, 8), (128, 4, 4, 4), (1024,), (1,)
        ]
        assert np.isfinite(logit)
        assert feature.shape == (1024,)

    def test_zero_weights_logit_is_final_bias(self):
        rng = np.random.default_rng(6)
        params = self.small_params()
        zero_blocks = tuple(
            nnet.ConvBlockParams(
                kernel=np.zeros_like(b.kernel),
                prelu_slope=b.prelu_slope,
                bn_mean=np.zeros_like(b.bn_mean),
                bn_var=np.ones_like(b.bn_var),
                bn_gain=np.ones_like(b.bn_gain),
                bn_bias=np.zeros_like(b.bn_bias),
            )
            for b in params.blocks
        )
        params = nnet.BaseNetParams(
            blocks=zero_blocks,
            dense1_w=np.zeros_like(params.dense1_w),
            dense1_b=np.zeros_like(params.dense1_b),
            dense1_slope=params.dense1_slope,
            dropout_rate=0.5,
            dense2_w=np.zeros_like(params.dense2_w),
            dense2_b=np.array([0.75]),
        )
        logit, _ = nnet.base_net_forward(rng.normal(size=(32, 32, 32)), params)
        assert logit == pytest.approx(0.75)

    def test_deterministic_mode_repeatable(self):
        params = self.small_params(7)
        block = np.random.default_rng(8).normal(size=(32, 32, 32))
        a, fa = nnet.base_net_forward(block, params)
        b, fb = nnet.base_net_forward(block, params)
        assert a == b
        assert np.array_equal(fa, fb)

    def test_mc_dropout_varies(self):
        params = self.small_params(9)
        block = np.random.default_rng(10).normal(size=(32, 32, 32))
        rng = np.random.default_rng(11)
        logits = {nnet.base_net_forward(block, params, "mc_dropout", rng)[0]
                  for _ in range(5)}
        assert len(logits) > 1

    def test_wrong_input_shape(self):
        with pytest.raises(ValidationError):
            nnet.base_net_forward(np.zeros((2, 32, 32, 32)), self.small_params())


class TestParamBlob:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        params = {
            "w1": rng.normal(size=(4, 7)),
            "b1": rng.normal(size=4),
            "scalar": np.array(3.25),
        }
        path = str(tmp_path / "params.bin")
        nnet.save_params(params, path)
        back = nnet.load_params(path)
        assert set(back) == set(params)
        for k in params:
            assert np.array_equal(back[k], np.asarray(params[k], dtype=np.float64))

    def test_truncated_blob(self, tmp_path):
        path = tmp_path / "bad.bin"
        nnet.save_params({"w": np.ones((3, 3))}, str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FormatError):
            nnet.load_params(str(path))

    def test_garbage_manifest(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x05\x00\x00\x00notjs")
        with pytest.raises(FormatError):
            nnet.load_params(str(path))
