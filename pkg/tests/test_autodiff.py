import numpy as np
import pytest

from octcodec import autodiff as ad
from octcodec.autodiff import Tensor
from octcodec.gradcheck import grad_check


def naive_conv(x, w, b, stride):
    """Direct loop over output positions with symmetric k//2 zero padding."""
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    p = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((n, ho, wo, cout))
    for bi in range(n):
        for i in range(ho):
            for j in range(wo):
                for di in range(k):
                    for dj in range(k):
                        r, c = i * stride + di - p, j * stride + dj - p
                        if 0 <= r < h and 0 <= c < wd:
                            out[bi, i, j] += x[bi, r, c] @ w[di, dj]
    return out + b


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestConv:
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_loop_oracle(self, rng, stride, k):
        x = rng.normal(size=(2, 8, 8, 2))
        w = rng.normal(size=(k, k, 2, 3))
        b = rng.normal(size=3)
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride), atol=1e-12)

    def test_odd_input_ceil_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 7, 5, 2)))
        w = Tensor(rng.normal(size=(3, 3, 2, 4)))
        assert ad.conv2d(x, w, stride=2).shape == (1, 4, 3, 4)

    def test_single_pixel_definition(self):
        out = ad.conv2d(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.array([0.5])))
        assert out.data.item() == 6.5

    def test_zero_input_zero_output(self, rng):
        w = Tensor(rng.normal(size=(3, 3, 2, 2)))
        assert not ad.conv2d(Tensor(np.zeros((1, 6, 6, 2))), w, stride=2).data.any()
        assert not ad.tconv2d(Tensor(np.zeros((1, 3, 3, 2))), w, stride=2).data.any()

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            ad.conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 2, 1))))
        with pytest.raises(ValueError):
            ad.tconv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 1, 2))), stride=2)

    def test_bad_stride_and_even_kernel(self):
        with pytest.raises(ValueError):
            ad.conv2d(Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.zeros((3, 3, 1, 1))), stride=3)
        with pytest.raises(ValueError):
            ad.conv2d(Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.zeros((2, 2, 1, 1))))

    def test_tconv_shape(self, rng):
        out = ad.tconv2d(Tensor(rng.normal(size=(1, 4, 4, 3))), Tensor(rng.normal(size=(5, 5, 6, 3))), stride=2)
        assert out.shape == (1, 8, 8, 6)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_adjoint_identity(self, rng, stride):
        k = rng.normal(size=(5, 5, 3, 4))
        a = rng.normal(size=(1, 6, 6, 3))
        b = rng.normal(size=(1, 6 // stride, 6 // stride, 4))
        lhs = np.sum(ad.conv2d(Tensor(a), Tensor(k), stride=stride).data * b)
        # tconv takes (k, k, Cout, Cin) with Cout the channels it produces
        rhs = np.sum(a * ad.tconv2d(Tensor(b), Tensor(k), stride=stride).data)
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


class TestGradients:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv(self, rng, stride):
        x, w, b = param(rng.normal(size=(2, 6, 6, 2))), param(rng.normal(size=(3, 3, 2, 3))), param(rng.normal(size=3))
        t = rng.normal(size=(2, 6 // stride, 6 // stride, 3))
        err = grad_check(lambda: (ad.conv2d(x, w, b, stride) * Tensor(t)).sum(), [x, w, b])
        assert err < 1e-4

    @pytest.mark.parametrize("stride", [1, 2])
    def test_tconv(self, rng, stride):
        x, w, b = param(rng.normal(size=(1, 3, 3, 2))), param(rng.normal(size=(5, 5, 3, 2))), param(rng.normal(size=3))
        t = rng.normal(size=(1, 3 * stride, 3 * stride, 3))
        err = grad_check(lambda: (ad.tconv2d(x, w, b, stride) * Tensor(t)).sum(), [x, w, b])
        assert err < 1e-4

    @pytest.mark.parametrize("inverse", [False, True])
    def test_gdn(self, rng, inverse):
        x = param(rng.normal(size=(1, 3, 3, 4)))
        beta = param(rng.uniform(0.5, 1.5, size=4))
        gamma = param(rng.uniform(0.0, 0.3, size=(4, 4)))
        t = rng.normal(size=(1, 3, 3, 4))
        err = grad_check(lambda: (ad.gdn(x, beta, gamma, inverse) * Tensor(t)).sum(), [x, beta, gamma])
        assert err < 1e-4

    @pytest.mark.parametrize(
        "op",
        [ad.exp, ad.tanh, ad.sigmoid, ad.softplus, ad.square, lambda a: ad.leaky_relu(a, 0.2)],
    )
    def test_elementwise(self, rng, op):
        x = param(rng.normal(size=(3, 4)) + 0.05)
        t = rng.normal(size=(3, 4))
        assert grad_check(lambda: (op(x) * Tensor(t)).sum(), [x]) < 1e-4

    def test_positive_domain_ops(self, rng):
        x = param(rng.uniform(0.5, 2.0, size=(3, 4)))
        for op in (ad.sqrt, ad.log, ad.log2, ad.log10, lambda a: ad.power(a, 1.7)):
            assert grad_check(lambda: op(x).sum(), [x]) < 1e-4

    def test_broadcast_and_reductions(self, rng):
        a, b = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(4,)))
        w = param(rng.normal(size=(4, 5)))

        def f():
            y = (a * b + b) / (ad.square(b) + 1.0)
            z = ad.concat(ad.split(y @ w, [2, 3]), axis=-1)
            return z.mean(axis=(0, 1)).sum() + ad.transpose(z, (2, 1, 0))[1:3].sum()

        assert grad_check(f, [a, b, w], samples_per_param=None) < 1e-4

    def test_gaussian_bits(self, rng):
        v = param(rng.normal(scale=2.0, size=50))
        mu = param(rng.normal(size=50))
        delta = param(rng.uniform(0.2, 3.0, size=50))
        err = grad_check(lambda: ad.gaussian_bits(v, mu, delta, 2.0**-16).sum(), [v, mu, delta], samples_per_param=None)
        assert err < 1e-4

    def test_gradient_accumulates_over_reuse(self):
        x = param([2.0])
        y = x * x + x
        y.sum().backward()
        assert x.grad[0] == 5.0

    def test_backward_needs_scalar(self):
        with pytest.raises(ValueError):
            param(np.ones(3)).backward()


def test_gdn_matches_scalar_loop(rng):
    x = rng.normal(size=(1, 2, 2, 3))
    beta = rng.uniform(0.5, 1.5, size=3)
    gamma = rng.uniform(0.0, 0.4, size=(3, 3))
    got = ad.gdn(Tensor(x), Tensor(beta), Tensor(gamma)).data
    inv = ad.gdn(Tensor(x), Tensor(beta), Tensor(gamma), inverse=True).data
    for idx in np.ndindex(1, 2, 2):
        for i in range(3):
            norm = beta[i] + sum(gamma[i, j] * x[idx][j] ** 2 for j in range(3))
            assert abs(got[idx][i] - x[idx][i] / np.sqrt(norm)) < 1e-12
            assert abs(inv[idx][i] - x[idx][i] * np.sqrt(norm)) < 1e-12


def test_leaky_relu_slope_checked():
    with pytest.raises(ValueError):
        ad.leaky_relu(Tensor(np.ones(2)), 1.5)


def test_grad_check_flags_wrong_gradient(rng):
    x = param(rng.normal(size=4))

    def wrong():
        return ad._make(x.data * 2.0, (x,), lambda g: (g * 3.0,)).sum()

    assert grad_check(wrong, [x]) > 0.1
    assert grad_check(wrong, [x], retry_eps=1e-7) > 0.1


def test_grad_check_retry_steps_past_kink():
    x = param(np.array([3e-6]))

    def fn():
        return ad.leaky_relu(x, 0.2).sum()

    assert grad_check(fn, [x], eps=1e-5) > 0.1
    assert grad_check(fn, [x], eps=1e-5, retry_eps=1e-6) < 1e-9
