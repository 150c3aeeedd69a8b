import numpy as np
import pytest

from feddom.jscc_model import (JsccConfig, JsccModel, attention_complexity, decode, encode, extract_feature,
                               mean_feature, parameter_count)
from feddom.tensor import Tensor
from feddom.utils import ConfigurationError


class TestJsccConfig:
    def test_default_shape_contract(self):
        cfg = JsccConfig()
        assert cfg.n == 3072
        assert cfg.k == 256
        assert cfg.latent_dim == 512
        assert cfg.bandwidth_ratio == pytest.approx(1 / 12)

    @pytest.mark.parametrize("kwargs", [
        {"image_shape": (1, 32, 32)},
        {"image_shape": (3, 30, 32)},
        {"compression_ratio": "0"},
        {"compression_ratio": "3/2"},
        {"compression_ratio": "abc"},
        {"channel_widths": [8]},
        {"image_shape": (3, 4, 4), "compression_ratio": "1/100"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            JsccConfig(**kwargs)

    def test_to_dict_is_json_friendly(self):
        d = JsccConfig().to_dict()
        assert d["image_shape"] == [3, 32, 32]
        assert d["compression_ratio"] == "1/12"


class TestCodec:
    def test_single_image_shapes(self, small_model_cfg):
        model = JsccModel(small_model_cfg, np.random.default_rng(0))
        image = Tensor(np.full(small_model_cfg.image_shape, 0.5))
        latent = encode(model.encoder, image, 5.0)
        assert latent.shape == (small_model_cfg.latent_dim,)
        out = decode(model.decoder, latent, 5.0)
        assert out.shape == small_model_cfg.image_shape
        assert np.all((out.data > 0) & (out.data < 1))

    def test_batch_shapes(self, small_model_cfg):
        model = JsccModel(small_model_cfg, np.random.default_rng(0))
        images = Tensor(np.zeros((3, *small_model_cfg.image_shape)))
        assert encode(model.encoder, images, 1.0).shape == (3, small_model_cfg.latent_dim)
        assert extract_feature(model.encoder, images).shape == (3, small_model_cfg.feature_dim)

    def test_wrong_image_shape(self, small_model_cfg):
        model = JsccModel(small_model_cfg, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            encode(model.encoder, Tensor(np.zeros((3, 8, 8))), 1.0)

    def test_wrong_latent_length(self, small_model_cfg):
        model = JsccModel(small_model_cfg, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            decode(model.decoder, Tensor(np.zeros(small_model_cfg.latent_dim - 2)), 1.0)

    def test_snr_conditioning_changes_latent(self, small_model_cfg):
        model = JsccModel(small_model_cfg, np.random.default_rng(0))
        image = Tensor(np.full(small_model_cfg.image_shape, 0.3))
        low = encode(model.encoder, image, 1.0).data
        high = encode(model.encoder, image, 13.0).data
        assert not np.allclose(low, high)

    def test_same_seed_same_weights(self, small_model_cfg):
        a = JsccModel(small_model_cfg, np.random.default_rng(9)).params().flatten()
        b = JsccModel(small_model_cfg, np.random.default_rng(9)).params().flatten()
        np.testing.assert_array_equal(a, b)

    def test_parameter_order_is_encoder_then_decoder(self, small_model_cfg):
        names = JsccModel(small_model_cfg, np.random.default_rng(0)).params().names
        assert names[0].startswith("encoder.")
        assert names[-1].startswith("decoder.")
        assert parameter_count(JsccModel(small_model_cfg, np.random.default_rng(0))) > 0


class TestFeatures:
    def test_mean_feature_is_mean_of_rows(self, small_model_cfg):
        model = JsccModel(small_model_cfg, np.random.default_rng(0))
        images = np.random.default_rng(1).uniform(size=(5, *small_model_cfg.image_shape))
        rows = extract_feature(model.encoder, Tensor(images)).data
        np.testing.assert_allclose(mean_feature(model.encoder, images, batch_size=2), rows.mean(axis=0), rtol=1e-5)

    def test_feature_has_no_gradient_history_outside_tape(self, small_model_cfg):
        model = JsccModel(small_model_cfg, np.random.default_rng(0))
        feat = extract_feature(model.encoder, Tensor(np.zeros(small_model_cfg.image_shape)))
        assert feat.shape == (small_model_cfg.feature_dim,)
        assert not feat.requires_grad


class TestAttentionComplexity:
    def test_reference_point(self):
        assert attention_complexity(7, 7, 96, 7) == (2267328, 2267328)

    def test_window_is_cheaper_on_large_maps(self):
        msa, wmsa = attention_complexity(56, 56, 96, 7)
        assert wmsa < msa
        assert wmsa == 4 * 3136 * 96 * 96 + 2 * 49 * 3136 * 96

    @pytest.mark.parametrize("args", [(0, 7, 96, 7), (7, 7, -1, 7), (7, 7, 96, 0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigurationError):
            attention_complexity(*args)
