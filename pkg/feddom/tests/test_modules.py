from pathlib import Path

import numpy as np
import pytest

from feddom import tensor as T
from feddom.channel import ChannelConfig, power_normalize, transmit
from feddom.data import gen_synthetic_domain
from feddom.jscc_model import JsccConfig, JsccModel, decode, encode
from feddom.modules import (Dense, ModelParams, finite_diff_check, forward, load_checkpoint, load_checkpoint_into,
                            save_checkpoint, sgd_step)
from feddom.tensor import ComputationTape, Tensor
from feddom.utils import ConfigurationError, UsageError


class TinyMlp(Dense):
    """Dense -> tanh -> Dense, enough structure for a smooth gradient check."""

    def __init__(self, rng):
        super().__init__(4, 6, rng, name="hidden")
        self.out = self.add_module("out", Dense(6, 2, rng, name="out"))

    def forward(self, x):
        return self.out(T.tanh(super().forward(x)))


class TestGradientCheck:
    def test_mse_scalar_gradient(self):
        a = Tensor([2.0], requires_grad=True)
        with ComputationTape() as tape:
            loss = T.mse(a, Tensor([0.0]))
        tape.backward(loss)
        assert a.grad[0] == pytest.approx(4.0)

    def test_tanh_mlp(self, float64):
        rng = np.random.default_rng(0)
        mlp = TinyMlp(rng)
        x = Tensor(rng.normal(size=(5, 4)))
        y = Tensor(rng.normal(size=(5, 2)))
        report = finite_diff_check(lambda: T.mse(mlp(x), y), mlp.params(), epsilon=1e-4)
        assert report.checked == mlp.params().total_count
        assert report.max_relative_error <= 1e-4

    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_jscc_model(self, float64, seed):
        cfg = JsccConfig(image_shape=(3, 16, 16), channel_widths=[4, 8])
        model = JsccModel(cfg, np.random.default_rng(seed))
        images = Tensor(gen_synthetic_domain("photo", 2, (16, 16), seed=seed))
        channel = ChannelConfig()

        def loss_fn():
            latent = power_normalize(encode(model.encoder, images, 5.0))
            received = transmit(latent, channel, 5.0, np.random.default_rng(seed))
            return T.mse(decode(model.decoder, received, 5.0), images)

        params = model.params()
        before = params.flatten().copy()
        report = finite_diff_check(loss_fn, params, epsilon=1e-5, samples=200, kink_tolerance=2e-4, kink_atol=0.0)
        assert report.max_relative_error <= 1e-4
        assert report.checked >= 100
        np.testing.assert_array_equal(params.flatten(), before)

    def test_relu_at_zero_is_excluded(self, float64):
        x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
        weights = Tensor([2.0, 3.0, 4.0])
        report = finite_diff_check(lambda: T.sum(T.mul(T.relu(x), weights)), ModelParams([("x", x)]))
        assert report.excluded == [0]
        assert report.checked == 2
        assert report.max_relative_error <= 1e-6

    def test_smooth_zero_gradient_is_checked(self, float64):
        x = Tensor([0.0, 0.5], requires_grad=True)
        report = finite_diff_check(lambda: T.l2_norm_sq(x), ModelParams([("x", x)]))
        assert report.excluded == []
        assert report.checked == 2
        assert report.max_relative_error <= 1e-6

    def test_epsilon_out_of_range(self):
        mlp = TinyMlp(np.random.default_rng(0))
        with pytest.raises(UsageError):
            finite_diff_check(lambda: T.l2_norm_sq(mlp.weight), mlp.params(), epsilon=0.1)


class TestModelParams:
    def _params(self, *values):
        return ModelParams([("w", Tensor(np.array(values[:2], dtype=np.float32))),
                            ("b", Tensor(np.array(values[2:], dtype=np.float32)))])

    def test_flatten_unflatten(self):
        p = self._params(1.0, 2.0, 3.0)
        assert p.total_count == 3
        q = p.unflatten(np.array([4.0, 5.0, 6.0], dtype=np.float32))
        np.testing.assert_array_equal(q["w"].data, [4.0, 5.0])
        np.testing.assert_array_equal(p.flatten(), [1.0, 2.0, 3.0])

    def test_linear_combination(self):
        p, q = self._params(0.0, 0.0, 0.0), self._params(4.0, 4.0, 4.0)
        out = ModelParams.linear_combination([(p, 0.25), (q, 0.75)])
        np.testing.assert_allclose(out.flatten(), [3.0, 3.0, 3.0])

    def test_linear_combination_rejects_other_layout(self):
        p = self._params(1.0, 2.0, 3.0)
        other = ModelParams([("w", Tensor(np.zeros(3)))])
        with pytest.raises(ConfigurationError):
            ModelParams.linear_combination([(p, 0.5), (other, 0.5)])

    def test_distance(self):
        assert self._params(0.0, 0.0, 0.0).distance(self._params(3.0, 4.0, 0.0)) == pytest.approx(5.0)

    def test_duplicate_names(self):
        with pytest.raises(ConfigurationError):
            ModelParams([("w", Tensor([1.0])), ("w", Tensor([2.0]))])


class TestSgd:
    def test_step_and_zeroed_gradients(self):
        w = Tensor([1.0, -1.0], requires_grad=True)
        params = ModelParams([("w", w)])
        with ComputationTape() as tape:
            loss = T.l2_norm_sq(w)
        tape.backward(loss)
        sgd_step(params, 0.25)
        np.testing.assert_allclose(w.data, [0.5, -0.5])
        np.testing.assert_array_equal(w.grad, [0.0, 0.0])

    def test_rejects_non_positive_lr(self):
        w = Tensor([1.0], requires_grad=True)
        w.zero_grad()
        with pytest.raises(UsageError):
            sgd_step(ModelParams([("w", w)]), 0.0)

    def test_rejects_missing_gradients(self):
        with pytest.raises(UsageError):
            sgd_step(ModelParams([("w", Tensor([1.0], requires_grad=True))]), 0.1)


class TestForward:
    def test_input_shape_mismatch(self):
        layer = Dense(3, 2, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            forward(layer, Tensor(np.zeros((4, 5))))

    def test_params_are_live(self):
        layer = Dense(3, 2, np.random.default_rng(0))
        layer.params().load_flat(np.zeros(8, dtype=np.float32))
        np.testing.assert_array_equal(layer.weight.data, np.zeros((2, 3)))


class TestCheckpoint:
    def test_float32_round_trip_is_bit_exact(self, tmp_path: Path, small_model_cfg):
        model = JsccModel(small_model_cfg, np.random.default_rng(5))
        path = tmp_path / "model.fdm"
        save_checkpoint(path, model.params())
        assert path.read_bytes()[:4] == b"FDM1"
        loaded = load_checkpoint(path)
        assert loaded.layout == model.params().layout
        assert loaded.flatten().tobytes() == model.params().flatten().tobytes()

    def test_float64_round_trip_keeps_dtype(self, tmp_path: Path, float64):
        params = ModelParams([("a", Tensor(np.array([np.pi, 1e-300]))), ("b", Tensor(np.ones((2, 2))))])
        path = tmp_path / "wide.fdm"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded["a"].data.dtype == np.float64
        assert loaded.flatten().tobytes() == params.flatten().tobytes()

    def test_load_into_live_model(self, tmp_path: Path, small_model_cfg):
        source = JsccModel(small_model_cfg, np.random.default_rng(1))
        target = JsccModel(small_model_cfg, np.random.default_rng(2))
        path = tmp_path / "m.fdm"
        save_checkpoint(path, source.params())
        load_checkpoint_into(path, target.params())
        np.testing.assert_array_equal(target.params().flatten(), source.params().flatten())

    def test_layout_mismatch(self, tmp_path: Path, small_model_cfg):
        path = tmp_path / "m.fdm"
        save_checkpoint(path, JsccModel(small_model_cfg, np.random.default_rng(1)).params())
        other = JsccModel(JsccConfig(image_shape=(3, 16, 16), channel_widths=[4, 4]), np.random.default_rng(1))
        with pytest.raises(ConfigurationError):
            load_checkpoint_into(path, other.params())

    def test_bad_magic(self, tmp_path: Path):
        path = tmp_path / "bad.fdm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path: Path, small_model_cfg):
        path = tmp_path / "m.fdm"
        save_checkpoint(path, JsccModel(small_model_cfg, np.random.default_rng(1)).params())
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)
