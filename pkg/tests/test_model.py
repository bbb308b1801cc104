import json

import numpy as np
import pytest

from octcodec.autodiff import Tensor
from octcodec.model import CodecConfig, CodecModel, named_config
from octcodec.octave import MFTensor, inv_softplus


def image(rng, size, dtype=np.float32):
    return Tensor(rng.uniform(0, 1, size=(1, size, size, 3)).astype(dtype))


class TestConfig:
    def test_presets(self):
        paper = named_config("paper")
        assert (paper.n, paper.alpha, paper.m) == (448, 0.5, 256)
        assert paper.n_split == (224, 224) and paper.granule == 128
        tiny = named_config("tiny")
        assert (tiny.n, tiny.m) == (32, 32)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            named_config("huge")

    @pytest.mark.parametrize("kwargs", [dict(alpha=0.0), dict(alpha=1.0), dict(n=33), dict(sigma_min=0.0), dict(hyper_strides=(2, 2))])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            CodecConfig(**kwargs)

    def test_file_roundtrip(self, tmp_path):
        cfg = CodecConfig(n=64, alpha=0.25, m=32, sigma_min=0.2)
        cfg.save(tmp_path / "c.json")
        assert json.loads((tmp_path / "c.json").read_text())["n"] == 64
        assert CodecConfig.load(tmp_path / "c.json") == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            CodecConfig.from_dict({"n": 32, "depth": 3})


class TestTinyModel:
    def test_shapes(self, tiny_model, rng):
        x = image(rng, 128)
        y = tiny_model.encode_analysis(x, 0.01)
        assert y.hf.shape == (1, 8, 8, 16) and y.lf.shape == (1, 4, 4, 16)
        z = tiny_model.hyper_encode(y)
        assert z.hf.shape == (1, 2, 2, 16) and z.lf.shape == (1, 1, 1, 16)
        mu_l, delta_l, psi_h = tiny_model.hyper_decode(z)
        assert mu_l.shape == delta_l.shape == y.lf.shape
        assert psi_h.shape == (1, 8, 8, 32)
        hf = tiny_model.estimate_hf_params(y.lf, psi_h)
        assert hf.mu.shape == hf.delta.shape == y.hf.shape
        assert tiny_model.decode_synthesis(y, 0.01).shape == x.shape
        shapes = tiny_model.latent_shapes(128, 128)
        assert shapes["y_h"] == y.hf.shape and shapes["z_l"] == z.lf.shape

    def test_non_granule_input_rejected(self, tiny_model, rng):
        with pytest.raises(ValueError):
            tiny_model.encode_analysis(image(rng, 96), 0.01)

    def test_zero_image_zero_latents_and_back(self, tiny_model):
        y = tiny_model.encode_analysis(Tensor(np.zeros((1, 128, 128, 3), np.float32)), 0.01)
        assert not y.hf.data.any() and not y.lf.data.any()
        assert not tiny_model.decode_synthesis(y, 0.01).data.any()
        assert not tiny_model.hyper_encode(y).hf.data.any()

    def test_zero_z_closed_form_scale(self, tiny_model):
        z = MFTensor(Tensor(np.zeros((1, 2, 2, 16), np.float32)), Tensor(np.zeros((1, 1, 1, 16), np.float32)))
        _, delta_l, _ = tiny_model.hyper_decode(z)
        np.testing.assert_allclose(delta_l.data, 0.11 + np.log(2.0), rtol=1e-6)

    def test_scales_floored(self, tiny_model, rng):
        z = MFTensor(Tensor(rng.normal(scale=50, size=(1, 2, 2, 16)).astype(np.float32)), Tensor(rng.normal(scale=50, size=(1, 1, 1, 16)).astype(np.float32)))
        _, delta_l, psi_h = tiny_model.hyper_decode(z)
        hf = tiny_model.estimate_hf_params(Tensor(rng.normal(scale=50, size=(1, 4, 4, 16)).astype(np.float32)), psi_h)
        assert delta_l.data.min() >= 0.11 and hf.delta.data.min() >= 0.11

    def test_lambda_changes_latents(self, tiny_model, rng):
        x = image(rng, 128)
        a = tiny_model.encode_analysis(x, 0.001).hf.data
        b = tiny_model.encode_analysis(x, 0.1).hf.data
        assert not np.allclose(a, b)

    def test_hyper_ignores_lambda_by_construction(self, tiny_model):
        assert all(not layer.modulated for layer in tiny_model.hyper_enc + tiny_model.hyper_dec)

    def test_lf_conditioning_is_live(self, tiny_model, rng):
        psi = Tensor(rng.normal(size=(1, 8, 8, 32)).astype(np.float32))
        a = tiny_model.estimate_hf_params(Tensor(np.zeros((1, 4, 4, 16), np.float32)), psi)
        b = tiny_model.estimate_hf_params(Tensor(rng.normal(size=(1, 4, 4, 16)).astype(np.float32)), psi)
        assert not np.allclose(a.mu.data, b.mu.data)

    def test_decode_deterministic(self, tiny_model, rng):
        y = tiny_model.encode_analysis(image(rng, 128), 0.01)
        assert np.array_equal(tiny_model.decode_synthesis(y, 0.01).data, tiny_model.decode_synthesis(y, 0.01).data)

    def test_decoder_output_is_bounded_at_init(self, tiny_model, rng):
        x = image(rng, 128)
        out = tiny_model.decode_synthesis(tiny_model.encode_analysis(x, 0.01), 0.01)
        assert np.abs(out.data).std() < 5.0

    def test_seeded_init_reproducible(self):
        a = CodecModel(named_config("tiny"), seed=3).store.state()
        b = CodecModel(named_config("tiny"), seed=3).store.state()
        assert all(np.array_equal(a[k], b[k]) for k in a)


def test_gdn_init_values():
    from octcodec.params import ParamStore
    from octcodec.octave import GDN

    g = GDN(ParamStore(np.float64), "g", 3)
    beta, gamma = g.effective()
    np.testing.assert_allclose(beta.data, 1.0)
    np.testing.assert_allclose(np.diag(gamma.data), 0.1)
    assert abs(inv_softplus(2.0) - np.log(np.expm1(2.0))) < 1e-15
