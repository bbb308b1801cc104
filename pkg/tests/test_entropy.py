import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octcodec import coding
from octcodec.autodiff import Tensor
from octcodec.entropy import (
    P_MIN,
    FactorizedPrior,
    QuantMode,
    estimate_rate,
    factorized_prior_probability,
    gaussian_bin_probability,
    gaussian_rate,
    logistic_bin_probability,
    quantize,
)
from octcodec.gradcheck import grad_check
from octcodec.params import ParamStore
from octcodec.rangecoder import PROB_TOTAL, RangeCoderError, RangeDecoder, RangeEncoder, quantize_pmf, range_decode, range_encode


def erf_bin(k, mu, delta):
    cdf = lambda v: 0.5 * (1.0 + math.erf((v - mu) / (delta * math.sqrt(2.0))))  # noqa: E731
    return cdf(k + 0.5) - cdf(k - 0.5)


class TestQuantize:
    def test_rounding_rule(self):
        out = quantize(np.array([0.4, -0.5, 0.5, 1.5, -2.5, -0.49]), QuantMode.ROUND)
        assert out.tolist() == [0.0, -1.0, 1.0, 2.0, -3.0, 0.0]

    def test_round_error_bounded(self, rng):
        y = rng.normal(scale=10, size=1000)
        assert np.abs(quantize(y, "round") - y).max() <= 0.5

    def test_noise_statistics_and_seed(self):
        y = np.zeros(10**6)
        a = quantize(y, "noise", np.random.default_rng(0))
        b = quantize(y, "noise", np.random.default_rng(0))
        assert np.array_equal(a, b)
        assert abs(a.mean()) < 1e-3
        assert a.min() >= -0.5 and a.max() < 0.5

    def test_noise_needs_rng(self):
        with pytest.raises(ValueError):
            quantize(np.zeros(3), "noise")

    def test_tensor_noise_passes_gradient(self, rng):
        y = Tensor(np.zeros(4), requires_grad=True)
        quantize(y, "noise", rng).sum().backward()
        assert np.array_equal(y.grad, np.ones(4))


class TestGaussianBins:
    def test_p0_against_erf(self):
        p = float(gaussian_bin_probability(0, 0.0, 1.0))
        assert abs(p - erf_bin(0, 0.0, 1.0)) < 1e-12
        assert abs(p - 0.382925) < 1e-6

    def test_normalization(self):
        ks = np.arange(-10**4, 10**4 + 1)
        assert abs(gaussian_bin_probability(ks, 0.0, 3.0).sum() - 1.0) < 1e-9

    def test_mode_at_mean(self):
        ks = np.arange(-20, 21)
        p = gaussian_bin_probability(ks, 3.0, 2.5)
        assert ks[np.argmax(p)] == 3

    def test_far_tail_floor(self):
        assert gaussian_bin_probability(1000, 0.0, 0.11, floor=P_MIN) == P_MIN
        # the lower-tail evaluation keeps precision far out
        assert float(gaussian_bin_probability(30, 0.0, 1.0)) > 0.0

    def test_rate_gradient_wrt_mu(self, rng):
        y = Tensor(np.round(rng.normal(size=30)))
        mu = Tensor(rng.normal(size=30), requires_grad=True)
        delta = Tensor(rng.uniform(0.3, 2.0, size=30), requires_grad=True)
        assert grad_check(lambda: gaussian_rate(y, mu, delta).sum(), [mu, delta], samples_per_param=None) < 1e-4


class TestFactorizedPrior:
    def prior(self, channels=3, seed=0):
        return FactorizedPrior(ParamStore(np.float64, seed=seed), "p", channels)

    def test_init_is_logistic(self):
        p = self.prior()
        expected = logistic_bin_probability(0.0)
        assert abs(expected - 0.2449) < 1e-4
        for c in range(3):
            assert abs(factorized_prior_probability(0, c, p) - expected) < 1e-9
            assert abs(p.probability(3, c) - logistic_bin_probability(3.0)) < 1e-9

    def perturbed(self, rng):
        p = self.prior()
        for t in p.matrices + p.biases + p.factors:
            t.data += rng.normal(scale=0.5, size=t.shape)
        return p

    def test_sums_to_one_and_nonnegative(self, rng):
        p = self.perturbed(rng)
        table = p.pmf_table(np.arange(-2000, 2001))
        assert np.all(table >= 0)
        np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-6)

    def test_cdf_monotone(self, rng):
        p = self.perturbed(rng)
        x = Tensor(np.broadcast_to(np.linspace(-30, 30, 400), (3, 1, 400)).copy())
        logits = p.logits(x).data
        assert np.all(np.diff(logits, axis=-1) >= 0)

    def test_bits_gradient(self, rng):
        p = self.perturbed(rng)
        v = Tensor(np.round(rng.normal(scale=2, size=(4, 3))))
        assert grad_check(lambda: p.bits(v).sum(), p.matrices + p.biases + p.factors) < 1e-4


class TestEstimateRate:
    def test_definition(self):
        assert estimate_rate([0.5]) == 1.0
        assert estimate_rate(np.ones(10)) == 0.0
        assert estimate_rate([0.0]) == 16.0


class TestRangeCoder:
    def test_empty(self):
        blob = range_encode([], quantize_pmf([[0.5, 0.5]]))
        assert range_decode(blob, quantize_pmf([[0.5, 0.5]]), 0) == []
        assert len(blob) <= 8

    def test_quantized_cdf_rows(self):
        cdf = quantize_pmf(np.array([[1.0, 0.0, 0.0, 1e-12], [0.25, 0.25, 0.25, 0.25]]))
        assert np.all(cdf[:, 0] == 0) and np.all(cdf[:, -1] == PROB_TOTAL)
        assert np.all(np.diff(cdf, axis=1) >= 1)

    def test_gaussian_stream_near_entropy(self):
        rng = np.random.default_rng(42)
        sym = np.round(rng.normal(scale=2.0, size=10**5)).astype(np.int64)
        mu, delta = np.zeros(sym.size), np.full(sym.size, 2.0)
        blob = coding.encode_gaussian(sym, mu, delta)
        assert np.array_equal(coding.decode_gaussian(blob, mu, delta), sym)
        ideal = estimate_rate(gaussian_bin_probability(sym, 0.0, 2.0)) / 8
        assert len(blob) <= 1.01 * ideal + 64

    def test_escape_path(self, rng):
        sym = np.array([0, 1, -1, 5000, -70000, 2, 300, -256], dtype=np.int64)
        mu, delta = np.zeros(sym.size), np.ones(sym.size)
        blob = coding.encode_gaussian(sym, mu, delta)
        assert np.array_equal(coding.decode_gaussian(blob, mu, delta), sym)
        prior = FactorizedPrior(ParamStore(np.float64), "p", 2)
        z = np.array([[0, 999], [-400, 3]])
        assert np.array_equal(coding.decode_factorized(coding.encode_factorized(z, prior), z.shape, prior), z)

    def test_truncated_stream_is_detected(self, rng):
        sym = np.round(rng.normal(scale=3, size=500)).astype(np.int64)
        mu, delta = np.zeros(500), np.full(500, 3.0)
        blob = coding.encode_gaussian(sym, mu, delta)
        with pytest.raises(coding.LatentDecodeError):
            coding.decode_gaussian(blob[: len(blob) // 2], mu, delta)
        with pytest.raises(coding.LatentDecodeError):
            coding.decode_gaussian(blob + b"\x00", mu, delta)

    def test_bits_bypass(self):
        enc = RangeEncoder()
        enc.encode_bits(0xDEADBEEF, 32)
        enc.encode(10, 5, 100)
        dec = RangeDecoder(enc.finish())
        assert dec.decode_bits(32) == 0xDEADBEEF
        t = dec.target(100)
        assert 10 <= t < 15
        dec.consume(10, 5)
        dec.check_exhausted()

    def test_rejects_invalid_interval(self):
        with pytest.raises((RangeCoderError, ValueError)):
            RangeEncoder().encode(0, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 5), max_size=200), st.integers(0, 2**31))
    def test_roundtrip_property(self, idx, seed):
        rng = np.random.default_rng(seed)
        pmf = rng.dirichlet(np.ones(6) * 0.3, size=max(1, len(idx)))
        cdfs = quantize_pmf(pmf)
        blob = range_encode(idx, cdfs)
        assert range_decode(blob, cdfs, len(idx)) == idx


class TestLatentTransport:
    def random_latents(self, model, rng, scale):
        from octcodec.octave import MFTensor

        s = model.latent_shapes(128, 256)
        mk = lambda shape, sc: Tensor(np.round(rng.normal(scale=sc, size=shape)).astype(np.float32))  # noqa: E731
        return MFTensor(mk(s["y_h"], scale), mk(s["y_l"], scale)), MFTensor(mk(s["z_h"], 2.0), mk(s["z_l"], 2.0))

    def test_roundtrip_and_rate(self, tiny_model, rng):
        y, z = self.random_latents(tiny_model, rng, 3.0)
        streams = coding.code_latents(tiny_model, y, z)
        dec = coding.decode_latents(tiny_model, streams, 128, 256)
        assert np.array_equal(dec.y_h, y.hf.data) and np.array_equal(dec.y_l, y.lf.data)
        assert np.array_equal(dec.z_h, z.hf.data) and np.array_equal(dec.z_l, z.lf.data)
        est = sum(coding.latent_rate_bits(tiny_model, y, z).values())
        actual = 8 * sum(len(s) for s in streams)
        assert actual <= 1.02 * est + 256 * 8

    def test_deterministic(self, tiny_model, rng):
        y, z = self.random_latents(tiny_model, rng, 1.0)
        assert coding.code_latents(tiny_model, y, z) == coding.code_latents(tiny_model, y, z)

    def test_hf_decode_requires_lf(self, tiny_model, rng):
        import inspect

        assert "y_l_hat" in inspect.signature(coding.decode_hf).parameters

    def test_stream_count_checked(self, tiny_model):
        with pytest.raises(coding.LatentDecodeError):
            coding.decode_latents(tiny_model, [b""] * 3, 128, 128)
