import numpy as np
import pytest

from disco.errors import DomainError
from disco.modconv import (ConvKernel, ExpressionFeature, ScaleHead,
                           ScaleVector, checkpoint_from_bytes,
                           checkpoint_to_bytes, conv2d, expression_scales,
                           expression_scales_vjp, leaky_relu, leaky_relu_vjp,
                           load_checkpoint, modconv_forward, modconv_vjp,
                           modulate_weights, save_checkpoint, sigmoid,
                           sigmoid_vjp, upsample_bilinear,
                           upsample_bilinear_vjp)
from disco.synthbench import central_difference, relative_error

FD_STEP = 1e-4


def naive_conv_same(x, w, b):
    """Independent dense evaluation (explicit loops, stride 1)."""
    o, c, kh, kw = w.shape
    _, h, wd = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((c, h + 2 * ph, wd + 2 * pw))
    xp[:, ph:ph + h, pw:pw + wd] = x
    y = np.zeros((o, h, wd))
    for oy in range(h):
        for ox in range(wd):
            for oc in range(o):
                acc = 0.0
                for ic in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[oc, ic, i, j] * xp[ic, oy + i, ox + j]
                y[oc, oy, ox] = acc + (b[oc] if b is not None else 0.0)
    return y


class TestModulateWeights:
    def test_unit_scales_l2_normalize(self):
        rng = np.random.default_rng(0)
        k = ConvKernel(rng.normal(size=(4, 3, 3, 3)))
        out = modulate_weights(k, ScaleVector(np.ones(3)), eps=0.0)
        norms = np.sqrt((out.weights ** 2).sum(axis=(1, 2, 3)))
        assert np.max(np.abs(norms - 1.0)) < 1e-12

    def test_global_rescale_cancels(self):
        rng = np.random.default_rng(1)
        k = ConvKernel(rng.normal(size=(2, 5, 3, 3)))
        s = ScaleVector(rng.uniform(0.5, 2.0, size=5))
        a = modulate_weights(k, s, eps=0.0)
        b = modulate_weights(k, ScaleVector(3.7 * s.scales), eps=0.0)
        assert np.max(np.abs(a.weights - b.weights)) < 1e-12

    def test_scalar_case(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 3.0))
        out = modulate_weights(k, ScaleVector(np.array([2.0])), eps=0.0)
        assert out.weights[0, 0, 0, 0] == 1.0

    def test_norm_at_most_one(self):
        rng = np.random.default_rng(2)
        k = ConvKernel(rng.normal(size=(3, 4, 3, 3)))
        s = ScaleVector(rng.uniform(0.5, 1.5, size=4))
        for eps in (1e-2, 1e-8):
            out = modulate_weights(k, s, eps=eps)
            norms2 = (out.weights ** 2).sum(axis=(1, 2, 3))
            assert np.all(norms2 <= 1.0 + 1e-12)
        tight = modulate_weights(k, s, eps=1e-12)
        assert np.all((tight.weights ** 2).sum(axis=(1, 2, 3)) > 1.0 - 1e-9)

    def test_length_mismatch_rejected(self):
        k = ConvKernel(np.zeros((2, 3, 1, 1)) + 1.0)
        with pytest.raises(DomainError):
            modulate_weights(k, ScaleVector(np.ones(4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(DomainError):
            ConvKernel(np.ones((1, 1, 2, 2)))

    def test_nonpositive_scales_rejected(self):
        with pytest.raises(DomainError):
            ScaleVector(np.array([1.0, 0.0]))


class TestConv2d:
    @pytest.mark.parametrize("shape", [(2, 5, 4, 3, 1), (3, 6, 5, 2, 3),
                                       (2, 8, 7, 3, 5)])
    def test_matches_naive_dense(self, shape):
        c, h, w, o, k = shape
        rng = np.random.default_rng(k)
        x = rng.normal(size=(c, h, w))
        wts = rng.normal(size=(o, c, k, k))
        b = rng.normal(size=o)
        assert np.max(np.abs(conv2d(x, wts, b) - naive_conv_same(x, wts, b))) < 1e-12

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DomainError):
            conv2d(np.zeros((2, 4, 4)), np.ones((1, 3, 3, 3)))


class TestModconvForward:
    def test_1x1_matches_hand_matrix_product(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4, 4))
        k = ConvKernel(rng.normal(size=(2, 3, 1, 1)), rng.normal(size=2))
        s = ScaleVector(rng.uniform(0.5, 1.5, size=3))
        eps = 1e-8
        out = modconv_forward(x, k, s, eps)
        # direct dense evaluation of the modulated 1x1 mixing
        m = k.weights[:, :, 0, 0] * s.scales[None, :]
        m = m / np.sqrt((m ** 2).sum(axis=1, keepdims=True) + eps)
        for y in range(4):
            for xx in range(4):
                expect = m @ x[:, y, xx] + k.bias
                assert np.max(np.abs(out[:, y, xx] - expect)) < 1e-12

    def test_zero_input_broadcasts_bias(self):
        k = ConvKernel(np.ones((2, 3, 3, 3)), np.array([1.5, -0.5]))
        out = modconv_forward(np.zeros((3, 5, 5)), k, ScaleVector(np.ones(3)))
        assert np.allclose(out[0], 1.5) and np.allclose(out[1], -0.5)

    def test_unit_scales_reduce_to_plain_conv(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        k = ConvKernel(w, b)
        got = modconv_forward(x, k, ScaleVector(np.ones(3)), eps=0.0)
        wn = w / np.sqrt((w ** 2).sum(axis=(1, 2, 3)))[:, None, None, None]
        assert np.max(np.abs(got - conv2d(x, wn, b))) < 1e-12

    def test_scale_invariance_of_forward(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 5, 5))
        k = ConvKernel(rng.normal(size=(2, 3, 3, 3)))
        s = rng.uniform(0.5, 1.5, size=3)
        a = modconv_forward(x, k, ScaleVector(s), eps=0.0)
        b = modconv_forward(x, k, ScaleVector(0.037 * s), eps=0.0)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_linear_in_input(self):
        rng = np.random.default_rng(6)
        k = ConvKernel(rng.normal(size=(2, 3, 3, 3)))
        s = ScaleVector(rng.uniform(0.5, 1.5, size=3))
        x1 = rng.normal(size=(3, 4, 4))
        x2 = rng.normal(size=(3, 4, 4))
        lhs = modconv_forward(2.0 * x1 - 0.5 * x2, k, s)
        rhs = 2.0 * modconv_forward(x1, k, s) - 0.5 * modconv_forward(x2, k, s)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


class TestModconvVjp:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4, 4))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        sv = rng.uniform(0.5, 1.5, size=3)
        eps = 1e-8
        up = rng.normal(size=(2, 4, 4))

        gx, gw, gs, gb = modconv_vjp(x, ConvKernel(w, b), ScaleVector(sv), eps, up)

        def run(xx, ww, bb, ss):
            return float((modconv_forward(
                xx, ConvKernel(ww, bb), ScaleVector(ss), eps) * up).sum())

        fd = central_difference(lambda a: run(a, w, b, sv), x, FD_STEP)
        assert relative_error(gx, fd, floor=1e-7) < 1e-5
        fd = central_difference(lambda a: run(x, a, b, sv), w, FD_STEP)
        assert relative_error(gw, fd, floor=1e-7) < 1e-5
        fd = central_difference(lambda a: run(x, w, b, a), sv.copy(), FD_STEP)
        assert relative_error(gs, fd, floor=1e-7) < 1e-5
        fd = central_difference(lambda a: run(x, w, a, sv), b, FD_STEP)
        assert relative_error(gb, fd, floor=1e-7) < 1e-5

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 3))
        k = ConvKernel(rng.normal(size=(2, 2, 1, 1)), rng.normal(size=2))
        s = ScaleVector(rng.uniform(0.5, 1.5, size=2))
        gx, gw, gs, gb = modconv_vjp(x, k, s, 1e-8, np.zeros((2, 3, 3)))
        for g in (gx, gw, gs, gb):
            assert np.all(g == 0.0)

    def test_scale_grad_orthogonal_to_scales(self):
        # eps = 0 makes the forward invariant to rescaling s, so the
        # gradient must be orthogonal to s.
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 4, 4))
        k = ConvKernel(rng.normal(size=(2, 3, 3, 3)))
        s = ScaleVector(rng.uniform(0.5, 1.5, size=3))
        up = rng.normal(size=(2, 4, 4))
        _, _, gs, _ = modconv_vjp(x, k, s, 0.0, up)
        assert abs(float(gs @ s.scales)) < 1e-10

    def test_scale_grad_length(self):
        x = np.zeros((5, 2, 2))
        k = ConvKernel(np.ones((2, 5, 1, 1)))
        s = ScaleVector(np.ones(5))
        _, _, gs, _ = modconv_vjp(x, k, s, 1e-8, np.ones((2, 2, 2)))
        assert gs.shape == (5,)


class TestExpressionScales:
    def test_zero_initialization_gives_unit_scales(self):
        head = ScaleHead(np.zeros((6, 4)), np.zeros(6))
        s = expression_scales(ExpressionFeature(np.zeros(4)), head)
        assert np.array_equal(s.scales, np.ones(6))

    def test_output_length_matches_head(self):
        rng = np.random.default_rng(0)
        for in_c in (3, 8):
            head = ScaleHead(rng.normal(size=(in_c, 5)), rng.normal(size=in_c))
            s = expression_scales(ExpressionFeature(rng.normal(size=5)), head)
            assert len(s.scales) == in_c
            assert np.all(s.scales > 0)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        head = ScaleHead(rng.normal(size=(4, 3)), rng.normal(size=4))
        f = ExpressionFeature(rng.normal(size=3))
        assert np.array_equal(expression_scales(f, head).scales,
                              expression_scales(f, head).scales)

    def test_dimension_mismatch_rejected(self):
        head = ScaleHead(np.zeros((4, 3)), np.zeros(4))
        with pytest.raises(DomainError):
            expression_scales(ExpressionFeature(np.zeros(5)), head)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        f = rng.normal(size=3)
        up = rng.normal(size=4)

        gf, gw, gb = expression_scales_vjp(
            ExpressionFeature(f), ScaleHead(w, b), up)

        def run(ww, bb, ff):
            return float((expression_scales(
                ExpressionFeature(ff), ScaleHead(ww, bb)).scales * up).sum())

        assert relative_error(gf, central_difference(
            lambda a: run(w, b, a), f.copy(), FD_STEP), floor=1e-7) < 1e-5
        assert relative_error(gw, central_difference(
            lambda a: run(a, b, f), w.copy(), FD_STEP), floor=1e-7) < 1e-5
        assert relative_error(gb, central_difference(
            lambda a: run(w, a, f), b.copy(), FD_STEP), floor=1e-7) < 1e-5


class TestPointwiseAndResampling:
    def test_leaky_relu_vjp(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4))
        up = rng.normal(size=(3, 4))
        g = leaky_relu_vjp(x, up)
        fd = central_difference(lambda a: float((leaky_relu(a) * up).sum()),
                                x.copy(), 1e-6)
        assert relative_error(g, fd, floor=1e-7) < 1e-5

    def test_sigmoid_range_and_vjp(self):
        rng = np.random.default_rng(4)
        y = sigmoid(rng.normal(size=(20,)) * 5)
        assert np.all((y > 0) & (y < 1))
        extreme = sigmoid(np.array([-1e3, 1e3]))
        assert np.all(np.isfinite(extreme))
        assert np.all((extreme >= 0) & (extreme <= 1))
        x = rng.normal(size=(3, 3))
        up = rng.normal(size=(3, 3))
        g = sigmoid_vjp(sigmoid(x), up)
        fd = central_difference(lambda a: float((sigmoid(a) * up).sum()),
                                x.copy(), 1e-6)
        assert relative_error(g, fd, floor=1e-7) < 1e-5

    def test_upsample_matches_fd(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 4))
        up = rng.normal(size=(2, 6, 8))
        g = upsample_bilinear_vjp(x, 6, 8, up)
        fd = central_difference(
            lambda a: float((upsample_bilinear(a, 6, 8) * up).sum()), x, FD_STEP)
        assert relative_error(g, fd, floor=1e-7) < 1e-5

    def test_upsample_preserves_corners(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 3, 3))
        y = upsample_bilinear(x, 6, 6)
        assert y[0, 0, 0] == x[0, 0, 0]
        assert y[0, -1, -1] == x[0, -1, -1]


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        tensors = {"b.w": rng.normal(size=(2, 3, 3, 3)),
                   "a.scale": rng.normal(size=(5,)),
                   "z": np.array(2.5)}
        path = tmp_path / "p.dchk"
        save_checkpoint(path, tensors)
        back = load_checkpoint(path)
        assert set(back) == set(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])
            assert back[k].shape == tensors[k].shape

    def test_serialization_is_name_sorted_and_stable(self):
        t = {"b": np.zeros(2), "a": np.ones(3)}
        data = checkpoint_to_bytes(t)
        assert data[:4] == b"DCHK"
        assert data.index(b"a") < data.index(b"b")
        assert data == checkpoint_to_bytes(dict(reversed(list(t.items()))))

    def test_bad_magic_rejected(self):
        with pytest.raises(DomainError, match="magic"):
            checkpoint_from_bytes(b"XXXX\0\0\0\0")

    def test_truncated_rejected(self):
        data = checkpoint_to_bytes({"a": np.ones(4)})
        with pytest.raises(DomainError):
            checkpoint_from_bytes(data[:-5])

    def test_trailing_bytes_rejected(self):
        data = checkpoint_to_bytes({"a": np.ones(4)})
        with pytest.raises(DomainError, match="trailing"):
            checkpoint_from_bytes(data + b"\0")
