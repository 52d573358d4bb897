import numpy as np
import pytest

from protofed import tensor as T
from protofed.errors import ConfigurationError, NumericError

from oracles import naive_conv2d, naive_linear, naive_maxpool2d, naive_sliding_sq_l2


def t(arr, trainable=False):
    return T.Tensor(np.asarray(arr, dtype=np.float64), trainable=trainable)


class TestConv2d:
    def test_all_ones_3x3(self):
        x = t(np.ones((1, 1, 3, 3)))
        k = t(np.ones((1, 1, 3, 3)))
        b = t(np.zeros(1))
        out = T.conv2d(x, k, b)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = t(rng.normal(size=(2, 1, 5, 5)))
        k = t(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, k, t(np.zeros(1)))
        assert np.array_equal(out.data, x.data)

    def test_strided_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 8, 8))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(t(x), t(k), t(b), stride=2, padding=1)
        assert out.data.shape == (2, 4, 4, 4)
        assert np.array_equal(out.data, naive_conv2d(x, k, b, stride=2, padding=1))

    def test_gemm_path_matches_oracle(self):
        # large enough to take the GEMM path; tolerance instead of bitwise
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 8, 16, 16))
        k = rng.normal(size=(16, 8, 3, 3))
        b = rng.normal(size=16)
        out = T.conv2d(t(x), t(k), t(b), stride=1, padding=1)
        ref = naive_conv2d(x, k, b, stride=1, padding=1)
        assert np.max(np.abs(out.data - ref)) < 1e-11

    def test_channel_mismatch_raises(self):
        with pytest.raises(ConfigurationError, match="channels"):
            T.conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 3, 3))), None)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 8, 8))
        k = rng.normal(size=(4, 3, 3, 3))
        a = T.conv2d(t(x), t(k), None, stride=1, padding=1).data
        b = T.conv2d(t(x), t(k), None, stride=1, padding=1).data
        assert np.array_equal(a, b)


class TestRelu:
    def test_basic(self):
        out = T.relu(t([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_grad(self):
        x = t(-np.ones((3, 3)), trainable=True)
        out = T.relu(x)
        out.backward(np.ones((3, 3)))
        assert np.all(out.data == 0.0)
        assert np.all(x.grad == 0.0)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3, 4, 5))
        assert np.array_equal(T.relu(t(x)).data, np.maximum(x, 0.0))


class TestMaxpool:
    def test_2x2(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = T.maxpool2d(x, 2, 2)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 4.0

    def test_constant_input(self):
        x = t(np.full((1, 2, 4, 4), 3.5))
        out = T.maxpool2d(x, 2, 2)
        assert np.all(out.data == 3.5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(1, 2, 6, 6))
        out = T.maxpool2d(t(x), 2, 2)
        assert np.array_equal(out.data, naive_maxpool2d(x, 2, 2))

    def test_overlapping_windows_match_oracle(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 2, 5, 5))
        out = T.maxpool2d(t(x), 3, 1)
        assert np.array_equal(out.data, naive_maxpool2d(x, 3, 1))

    def test_tie_routes_to_first_in_scan_order(self):
        x = t(np.zeros((1, 1, 2, 2)), trainable=True)
        out = T.maxpool2d(x, 2, 2)
        out.backward(np.ones((1, 1, 1, 1)))
        expect = np.zeros((1, 1, 2, 2))
        expect[0, 0, 0, 0] = 1.0
        assert np.array_equal(x.grad, expect)

    def test_window_too_large(self):
        with pytest.raises(ConfigurationError, match="window"):
            T.maxpool2d(t(np.ones((1, 1, 2, 2))), 3, 1)


class TestLinear:
    def test_identity(self):
        x = t(np.arange(12.0).reshape(3, 4))
        out = T.linear(x, t(np.eye(4)))
        assert np.array_equal(out.data, x.data)

    def test_zero_weights(self):
        out = T.linear(t(np.ones((2, 5))), t(np.zeros((5, 3))))
        assert np.all(out.data == 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(6, 2))
        assert np.array_equal(T.linear(t(x), t(w)).data, naive_linear(x, w))

    def test_mismatch_raises(self):
        with pytest.raises(ConfigurationError, match="inner"):
            T.linear(t(np.ones((2, 3))), t(np.ones((4, 2))))


class TestSlidingSqL2:
    def test_exact_match_gives_zero(self):
        rng = np.random.default_rng(19)
        feat = rng.uniform(size=(1, 3, 4, 4))
        template = feat[0, :, 0:2, 0:2].copy()
        out = T.sliding_sq_l2(t(feat), t(template))
        assert out.data[0, 0, 0] == 0.0
        assert np.all(out.data >= 0.0)

    def test_zero_feature_unit_template(self):
        feat = t(np.zeros((2, 4, 3, 3)))
        template = t(np.ones((4, 1, 1)))
        out = T.sliding_sq_l2(feat, template)
        assert out.data.shape == (2, 3, 3)
        assert np.all(out.data == 4.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(23)
        feat = rng.normal(size=(1, 5, 6, 6))
        template = rng.normal(size=(5, 1, 1))
        out = T.sliding_sq_l2(t(feat), t(template))
        ref = naive_sliding_sq_l2(feat, template)
        assert np.max(np.abs(out.data - ref)) < 1e-12

    def test_depth_mismatch(self):
        with pytest.raises(ConfigurationError, match="depth"):
            T.sliding_sq_l2(t(np.ones((1, 3, 4, 4))), t(np.ones((2, 1, 1))))

    def test_template_too_large(self):
        with pytest.raises(ConfigurationError, match="exceeds"):
            T.sliding_sq_l2(t(np.ones((1, 3, 2, 2))), t(np.ones((3, 3, 3))))

    def test_multi_template_maps_agree_with_single(self):
        rng = np.random.default_rng(29)
        feat = rng.normal(size=(2, 4, 5, 5))
        templates = rng.normal(size=(3, 4, 2, 2))
        multi = T.sq_l2_maps(t(feat), t(templates))
        for j in range(3):
            single = T.sliding_sq_l2(t(feat), t(templates[j]))
            assert np.allclose(multi.data[:, j], single.data, rtol=0, atol=1e-12)


class TestSpatialMin:
    def test_routes_to_first_argmin(self):
        x = t(np.array([[[[2.0, 1.0], [1.0, 3.0]]]]), trainable=True)
        out = T.spatial_min(x)
        assert out.data[0, 0] == 1.0
        out.backward(np.ones((1, 1)))
        expect = np.zeros((1, 1, 2, 2))
        expect[0, 0, 0, 1] = 1.0  # first 1.0 in scan order
        assert np.array_equal(x.grad, expect)


class TestBackwardMachinery:
    def test_grad_skipped_for_frozen_leaves(self):
        x = t(np.ones((1, 1, 4, 4)), trainable=False)
        k = t(np.full((1, 1, 3, 3), 0.5), trainable=True)
        out = T.conv2d(x, k, None, padding=1)
        loss = T.spatial_min(out)
        loss.backward(np.ones((1, 1)))
        assert x.grad is None
        assert k.grad is not None

    def test_no_grad_blocks_graph(self):
        x = t(np.ones((2, 2)), trainable=True)
        with T.no_grad():
            out = T.relu(x)
        assert out.parents == ()

    def test_repeated_backward_is_reproducible(self):
        rng = np.random.default_rng(31)
        xd = rng.normal(size=(1, 2, 6, 6))
        kd = rng.normal(size=(3, 2, 3, 3))

        def run():
            x = t(xd, trainable=True)
            k = t(kd, trainable=True)
            h = T.relu(T.conv2d(x, k, None, padding=1))
            p = T.maxpool2d(h, 2, 2)
            s = T.spatial_min(p)
            s.backward(np.ones_like(s.data))
            return x.grad.copy(), k.grad.copy()

        g1 = run()
        g2 = run()
        assert np.array_equal(g1[0], g2[0])
        assert np.array_equal(g1[1], g2[1])


class TestGradCheck:
    def test_square_function(self):
        x = T.Tensor(np.array([3.0]))

        def fn(point):
            v = point["x"]
            sq = T.Tensor(v.data * v.data, parents=(v,),
                          backward=lambda g, v=v: v.accumulate(2.0 * v.data * g))
            return T.sum_all(sq)

        report = T.grad_check(fn, {"x": x}, step=1e-6, tolerance=1e-6)
        assert report.passed
        assert abs(report.params[0].analytic - 6.0) < 1e-9

    def test_constant_function(self):
        x = T.Tensor(np.array([1.0, 2.0]))

        def fn(point):
            return T.Tensor(np.array(5.0))

        report = T.grad_check(fn, {"x": x}, step=1e-6, tolerance=1e-8)
        assert report.passed
        assert report.max_rel_err <= 1e-8

    def test_nonfinite_raises(self):
        x = T.Tensor(np.array([0.0]))

        def fn(point):
            with np.errstate(divide="ignore"):
                return T.Tensor(np.array(np.log(point["x"].data[0])))

        with pytest.raises(NumericError):
            T.grad_check(fn, {"x": x}, step=1e-6)

    def test_primitive_ops_pass_at_many_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = T.Tensor(rng.normal(size=(2, 2, 5, 5)))
            k = T.Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5)
            b = T.Tensor(rng.normal(size=3) * 0.1)
            tmpl = T.Tensor(rng.normal(size=(3, 1, 1)))

            def fn(point):
                h = T.conv2d(point["x"], point["k"], point["b"], stride=1, padding=1)
                h = T.relu(h)
                h = T.maxpool2d(h, 2, 2)
                d = T.sliding_sq_l2(h, point["tmpl"])
                return T.sum_all(d)

            report = T.grad_check(fn, {"x": x, "k": k, "b": b, "tmpl": tmpl}, step=1e-6)
            assert report.passed, f"seed {seed}:\n{report.summary()}"
