import numpy as np
import pytest

from unrolled_cs.gradcheck import check_unrolled_loss
from unrolled_cs.operators import BoxDownsampleOperator, MaskedFourierOperator, complex_to_channels, generate_mask
from unrolled_cs.tensor_core import (
    ConvLayerParams,
    ShapeError,
    activation,
    batchnorm_forward,
    conv2d_forward,
)
from unrolled_cs.training import LossWeights, generator_loss
from unrolled_cs.unrolled import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    StaleCacheError,
    UnrolledModel,
)


class IdentityStub:
    def forward(self, x):
        return x.copy(), None

    def backward(self, cache, g):
        return g

    def parameters(self):
        return []


class ZeroStub(IdentityStub):
    def forward(self, x):
        return np.zeros_like(x), None


@pytest.fixture
def rng():
    return np.random.default_rng(5)


@pytest.fixture(scope="module")
def op16():
    return MaskedFourierOperator(generate_mask(16, 16, 0.3, seed=2))


def cplx(rng, *shape):
    return rng.random(shape) + 1j * rng.random(shape)


def small_gen(rng, blocks=1, dtype="float64"):
    return Generator(GeneratorConfig(blocks, 4, 2, 2, dtype=dtype), rng)


class TestGenerator:
    def test_range_and_shape(self, rng):
        g = small_gen(rng, 2)
        x = 10 * rng.standard_normal((3, 2, 9, 7))
        out, _ = g.forward(x)
        assert out.shape == x.shape
        assert np.all((out > 0) & (out < 1))

    def test_zero_head_gives_half(self, rng):
        g = small_gen(rng)
        last = g.head.layers[-2]
        last.weight.value[...] = 0
        last.bias.value[...] = 0
        out, _ = g.forward(rng.standard_normal((2, 2, 8, 8)))
        np.testing.assert_array_equal(out, 0.5)

    def test_matches_layer_by_layer(self, rng):
        g = small_gen(rng, 2)
        for p in g.parameters():
            if p.name.endswith((".bias", ".shift")):
                p.value[...] = rng.standard_normal(p.value.shape) * 0.1
        x = rng.standard_normal((2, 2, 8, 8))

        def conv(layer, z):
            b = None if layer.bias is None else layer.bias.value
            return conv2d_forward(z, ConvLayerParams(layer.weight.value, b))

        h = activation(conv(g.lift.layers[0], x), "relu")
        for rb in g.blocks:
            c1, bn1, _, c2, bn2 = rb.body.layers
            t = activation(batchnorm_forward(conv(c1, h), bn1.bn), "relu")
            t = batchnorm_forward(conv(c2, t), bn2.bn)
            h = activation(h + t, "relu")
        h1, _, h2, _, h3, _ = g.head.layers
        ref = activation(conv(h3, activation(conv(h2, activation(conv(h1, h), "relu")), "relu")), "sigmoid")
        np.testing.assert_allclose(g.forward(x)[0], ref, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            small_gen(rng).forward(np.zeros((1, 3, 8, 8)))

    def test_residual_block_wiring(self, rng):
        g = small_gen(rng)
        rb = g.blocks[0]
        x = np.abs(rng.standard_normal((1, 4, 6, 6)))
        # silencing the second BN leaves the block as ReLU(identity)
        bn2 = rb.body.layers[4]
        bn2.scale.value[...] = 0
        bn2.shift.value[...] = 0
        np.testing.assert_array_equal(rb.forward(x)[0], x)


class TestDiscriminator:
    def test_schedule(self, rng):
        d = Discriminator(DiscriminatorConfig(), rng)
        convs = [lay for lay in d.net.layers if hasattr(lay, "weight")]
        assert len(convs) == 8
        assert [c.weight.value.shape[0] for c in convs] == [8, 16, 32, 64, 64, 64, 32, 1]
        assert [c.weight.value.shape[-1] for c in convs] == [3, 3, 3, 3, 3, 3, 1, 1]
        assert [c.stride for c in convs] == [2, 2, 2, 2, 1, 1, 1, 1]

    def test_identical_images_identical_scores(self, rng):
        d = Discriminator(DiscriminatorConfig(), rng)
        d.set_mode("eval")
        img = rng.random((1, 1, 32, 32))
        s, _ = d.forward(np.concatenate([img, img]))
        assert s.shape == (2,)
        assert s[0] == s[1]

    def test_sensitive_to_brightness(self, rng):
        d = Discriminator(DiscriminatorConfig(in_channels=3), rng)
        d.set_mode("eval")
        img = rng.random((1, 3, 16, 16))
        s1, cache = d.forward(img)
        s2, _ = d.forward(2 * img)
        assert s1[0] != s2[0]
        assert np.linalg.norm(d.backward(cache, np.ones(1))) > 0

    def test_zero_last_layer(self, rng):
        d = Discriminator(DiscriminatorConfig(), rng)
        last = d.net.layers[-1]
        last.weight.value[...] = 0
        last.bias.value[...] = 0
        s, _ = d.forward(np.zeros((2, 1, 16, 16)))
        np.testing.assert_array_equal(s, 0)

    def test_too_small(self, rng):
        with pytest.raises(ShapeError, match="minimum"):
            Discriminator(DiscriminatorConfig(), rng).forward(np.zeros((1, 1, 8, 16)))


class TestUnrolledForward:
    def test_identity_stub_exact_consistency(self, rng, op16):
        truth = cplx(rng, 2, 16, 16)
        y = op16.forward(truth)
        m = UnrolledModel(op16, 1, generators=[IdentityStub()])
        x_tilde = complex_to_channels(cplx(rng, 2, 16, 16))
        x_hat, inter = m.forward(y, x_tilde)
        assert len(inter) == 1
        assert np.max(np.abs(op16.forward(op16.from_channels(x_hat)) - y)) < 1e-12

    def test_zero_measurement_zero_stub(self, op16):
        m = UnrolledModel(op16, 3, generators=[ZeroStub()])
        x_hat, _ = m.forward(np.zeros((1, op16.mask.count), complex), np.ones((1, 2, 16, 16)))
        assert not x_hat.any()

    def test_manual_recursion_shared(self, rng, op16):
        m = UnrolledModel(op16, 3, GeneratorConfig(1, 4, dtype="float64"), seed=3)
        for k, a in enumerate(m.alpha_raw):
            a.value[0] = 0.7 + 0.2 * k
        m.set_mode("eval")
        g = m.generators[0]
        y = op16.forward(cplx(rng, 2, 16, 16))
        x = complex_to_channels(op16.adjoint(y))
        x_hat, inter = m.forward(y, x)
        for k in range(3):
            xc = g.forward(x)[0]
            np.testing.assert_array_equal(xc, inter[k])
            z = op16.from_channels(xc)
            x = complex_to_channels(z + m.alphas[k] * op16.adjoint(y - op16.forward(z)))
        np.testing.assert_allclose(x_hat, x, atol=1e-14)

    def test_intermediates_in_unit_range(self, rng, op16):
        m = UnrolledModel(op16, 3, GeneratorConfig(1, 4), seed=1)
        y = op16.forward(cplx(rng, 2, 16, 16))
        x_hat, inter = m.forward(y, complex_to_channels(op16.adjoint(y), np.float32))
        assert x_hat.shape == (2, 2, 16, 16)
        for xc in inter:
            assert xc.shape == x_hat.shape and np.all((xc > 0) & (xc < 1))

    def test_final_dc_single_precision(self, rng, op16):
        m = UnrolledModel(op16, 2, GeneratorConfig(1, 4), seed=1)
        truth = cplx(rng, 2, 16, 16)
        y = op16.forward(truth)
        x_hat, _ = m.forward(y, complex_to_channels(op16.adjoint(y), np.float32))
        assert x_hat.dtype == np.float32
        assert np.max(np.abs(op16.forward(op16.from_channels(x_hat)) - y)) < 1e-6

    def test_box_operator(self, rng):
        op = BoxDownsampleOperator(4, 3)
        m = UnrolledModel(op, 2, GeneratorConfig(1, 4, 3, 3), alpha_init=16.0)
        x = rng.random((2, 3, 16, 16))
        y = op.forward(x)
        x_hat, _ = m.forward(y, op.adjoint(y) * 16)
        np.testing.assert_allclose(op.forward(x_hat), y, atol=1e-6)

    def test_bad_arguments(self, op16):
        with pytest.raises(ValueError, match="K >= 1"):
            UnrolledModel(op16, 0)
        with pytest.raises(ValueError):
            UnrolledModel(op16, 2, weight_mode="tied")
        with pytest.raises(ValueError):
            UnrolledModel(op16, 2, generators=[IdentityStub()], weight_mode="independent")

    def test_parameter_count(self, op16):
        cfg = GeneratorConfig(2, 8)
        for K in (1, 2, 5):
            shared = UnrolledModel(op16, K, cfg, "shared")
            indep = UnrolledModel(op16, K, cfg, "independent")
            assert indep.generator_parameter_count() == K * shared.generator_parameter_count()
            assert all(g is shared.generators[0] for g in (shared.generator(k) for k in range(K)))


def _loss_backward(model, y, x_tilde, x_truth, op):
    model.zero_grad()
    x_hat, inter = model.forward(y, x_tilde)
    terms = generator_loss(y, inter, x_hat, x_truth, None, LossWeights(eta=1.0, gamma=0.3), op)
    model.backward(terms.grad_xhat, terms.grad_intermediates)
    return terms


class TestUnrolledBackward:
    def test_stale_cache(self, rng, op16):
        m = UnrolledModel(op16, 2, GeneratorConfig(1, 4))
        with pytest.raises(StaleCacheError):
            m.backward(np.zeros((1, 2, 16, 16)))
        y = op16.forward(cplx(rng, 1, 16, 16))
        m.forward(y, np.zeros((1, 2, 16, 16)))
        m.backward(np.zeros((1, 2, 16, 16)))
        with pytest.raises(StaleCacheError):
            m.backward(np.zeros((1, 2, 16, 16)))

    def test_k1_equals_plain_generator(self, rng, op16):
        m = UnrolledModel(op16, 1, GeneratorConfig(1, 4, dtype="float64"), seed=4, learn_alpha=False)
        m.alpha_raw[0].value[0] = 0.0  # no DC step: x_hat = G(x_tilde)
        g = m.generators[0]
        x = rng.random((2, 2, 16, 16))
        y = op16.forward(cplx(rng, 2, 16, 16))
        w = rng.standard_normal(x.shape)
        m.zero_grad()
        m.forward(y, x)
        gin_model = m.backward(w)
        model_grads = [p.grad.copy() for p in g.parameters()]
        g.zero_grad()
        _, cache = g.forward(x)
        gin_plain = g.backward(cache, w)
        np.testing.assert_allclose(gin_model, gin_plain, atol=1e-14)
        for a, b in zip(model_grads, [p.grad for p in g.parameters()]):
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_shared_is_sum_of_independent(self, rng, op16):
        cfg = GeneratorConfig(1, 4, dtype="float64")
        shared = UnrolledModel(op16, 3, cfg, "shared", seed=8)
        indep = UnrolledModel(op16, 3, cfg, "independent", seed=9)
        for g in indep.generators:
            for p, q in zip(g.parameters(), shared.generators[0].parameters()):
                p.value[...] = q.value
        truth = cplx(rng, 2, 16, 16)
        y = op16.forward(truth)
        x_tilde = complex_to_channels(op16.adjoint(y))
        a = _loss_backward(shared, y, x_tilde, complex_to_channels(truth), op16)
        b = _loss_backward(indep, y, x_tilde, complex_to_channels(truth), op16)
        assert a.total == pytest.approx(b.total, abs=1e-12)
        for i, p in enumerate(shared.generators[0].parameters()):
            total = sum(g.parameters()[i].grad for g in indep.generators)
            assert np.max(np.abs(p.grad - total)) < 1e-10
        for pa, pb in zip(shared.alpha_raw, indep.alpha_raw):
            assert abs(pa.grad[0] - pb.grad[0]) < 1e-10

    def test_copy_gradient_matches_single_copy(self, rng, op16):
        # with loss terms only on copy 1, copy-1 gradients equal a K=1 model's
        cfg = GeneratorConfig(1, 4, dtype="float64")
        one = UnrolledModel(op16, 1, cfg, "shared", seed=2)
        indep = UnrolledModel(op16, 2, cfg, "independent", seed=3)
        for p, q in zip(indep.generators[0].parameters(), one.generators[0].parameters()):
            p.value[...] = q.value
        y = op16.forward(cplx(rng, 2, 16, 16))
        x_tilde = complex_to_channels(op16.adjoint(y))
        w = rng.standard_normal(x_tilde.shape)
        one.zero_grad()
        indep.zero_grad()
        one.forward(y, x_tilde)
        one.backward(np.zeros_like(w), [w])
        indep.forward(y, x_tilde)
        indep.backward(np.zeros_like(w), [w, None])
        for p, q in zip(indep.generators[0].parameters(), one.generators[0].parameters()):
            assert np.max(np.abs(p.grad - q.grad)) < 1e-12
        assert all(not p.grad.any() for p in indep.generators[1].parameters())

    @pytest.mark.parametrize("mode", ["shared", "independent"])
    def test_finite_differences(self, mode):
        res = check_unrolled_loss(np.random.default_rng(11), copies=2, blocks=1, size=8, weight_mode=mode)
        assert res.max_rel_error < 1e-4, res
