import math

import numpy as np
import pytest

from mbrbf.errors import ConfigError, ShapeError
from mbrbf.layers import (
    DenseReLU,
    RBFBranch,
    ReduceConv,
    SoftmaxClassifier,
    dense_relu_backward,
    dense_relu_forward,
    grad_check,
    linear_backward,
    rbf_backward,
    rbf_forward,
    reduce_conv_backward,
    reduce_conv_forward,
    softmax_cross_entropy,
)


def rbf_naive(centers, log_radii, x):
    """Independent per-element reimplementation with explicit loops."""
    units, dim = centers.shape
    h = np.empty(units)
    for i in range(units):
        sq = 0.0
        for j in range(dim):
            diff = x[j] - centers[i, j]
            sq += diff * diff
        sigma = math.exp(log_radii[i])
        h[i] = math.exp(-sq / (2.0 * sigma * sigma))
    return h


def random_branch(rng, units=3, dim=5, sigma_lo=0.5, sigma_hi=2.0):
    return RBFBranch(
        centers=rng.standard_normal((units, dim)),
        log_radii=np.log(rng.uniform(sigma_lo, sigma_hi, size=units)),
    )


class TestRBFForward:
    def test_center_hit_gives_one(self):
        br = random_branch(np.random.default_rng(0))
        h = rbf_forward(br, br.centers[1])
        assert h[1] == 1.0

    def test_distance_sqrt2_sigma_gives_inv_e(self):
        sigma = 0.7
        br = RBFBranch(centers=np.zeros((1, 4)), log_radii=np.log([sigma]))
        x = np.zeros(4)
        x[0] = sigma * np.sqrt(2.0)  # ||x - mu||^2 == 2 sigma^2
        h = rbf_forward(br, x)
        assert h[0] == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_sigma_offset_gives_exp_half(self):
        sigma = 0.0528
        br = RBFBranch(centers=np.zeros((1, 2)), log_radii=np.log([sigma]))
        h = rbf_forward(br, np.array([sigma, 0.0]))
        assert h[0] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert h[0] == pytest.approx(0.606531, abs=1e-6)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            units = int(rng.integers(1, 6))
            dim = int(rng.integers(1, 8))
            br = random_branch(rng, units, dim)
            x = rng.standard_normal(dim)
            np.testing.assert_allclose(
                rbf_forward(br, x), rbf_naive(br.centers, br.log_radii, x), rtol=1e-12, atol=1e-12
            )

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(3)
        br = random_branch(rng, 8, 6)
        h = rbf_forward(br, rng.standard_normal(6))
        assert np.all(h > 0.0) and np.all(h <= 1.0)

    def test_coordinate_permutation_invariance(self):
        rng = np.random.default_rng(4)
        br = random_branch(rng, 4, 6)
        x = rng.standard_normal(6)
        perm = rng.permutation(6)
        br_p = RBFBranch(centers=br.centers[:, perm], log_radii=br.log_radii)
        np.testing.assert_allclose(rbf_forward(br, x), rbf_forward(br_p, x[perm]), rtol=1e-15)

    def test_dimension_mismatch(self):
        br = random_branch(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            rbf_forward(br, np.zeros(br.dim + 1))


class TestRBFBackward:
    def test_zero_at_center(self):
        br = random_branch(np.random.default_rng(0), units=3, dim=5)
        x = br.centers[2].copy()
        _, gc, gr = rbf_backward(br, x, np.ones(3))
        np.testing.assert_array_equal(gc[2], np.zeros(5))
        assert gr[2] == 0.0

    def test_zero_upstream_gives_zero(self):
        rng = np.random.default_rng(1)
        br = random_branch(rng)
        gx, gc, gr = rbf_backward(br, rng.standard_normal(br.dim), np.zeros(br.units))
        assert not gx.any() and not gc.any() and not gr.any()

    def test_upstream_scaling_is_linear(self):
        rng = np.random.default_rng(2)
        br = random_branch(rng)
        x = rng.standard_normal(br.dim)
        g = rng.standard_normal(br.units)
        gx1, gc1, gr1 = rbf_backward(br, x, g)
        gx2, gc2, gr2 = rbf_backward(br, x, 3.0 * g)
        np.testing.assert_allclose(gx2, 3.0 * gx1, rtol=1e-12)
        np.testing.assert_allclose(gc2, 3.0 * gc1, rtol=1e-12)
        np.testing.assert_allclose(gr2, 3.0 * gr1, rtol=1e-12)

    def test_matches_finite_differences(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            br = random_branch(rng, units=3, dim=5)
            x = rng.standard_normal(5)
            coeff = rng.standard_normal(3)

            def loss():
                return float(coeff @ rbf_forward(br, x))

            gx, gc, gr = rbf_backward(br, x, coeff)
            err = grad_check(loss, [x, br.centers, br.log_radii], [gx, gc, gr], eps=1e-6)
            assert err < 1e-5

    def test_sigma_floor_flagged(self):
        br = RBFBranch(centers=np.zeros((1, 2)), log_radii=np.array([-15.0]))
        with pytest.raises(ConfigError, match="floor"):
            rbf_backward(br, np.zeros(2), np.ones(1))


class TestReduceConv:
    def test_paper_geometry_shapes(self):
        rng = np.random.default_rng(0)
        rc = ReduceConv(weights=rng.standard_normal((16, 512)), bias=np.zeros(16))
        out = reduce_conv_forward(rc, rng.standard_normal((512, 7, 7)))
        assert out.shape == (16, 7, 7)
        assert out[0].reshape(-1).shape == (49,)

    def test_one_hot_filter_selects_channel(self):
        rng = np.random.default_rng(1)
        fmap = rng.standard_normal((4, 3, 3))
        w = np.zeros((1, 4))
        w[0, 0] = 1.0
        rc = ReduceConv(weights=w, bias=np.zeros(1))
        np.testing.assert_array_equal(reduce_conv_forward(rc, fmap)[0], fmap[0])

    def test_bias_only(self):
        rc = ReduceConv(weights=np.zeros((2, 3)), bias=np.array([0.5, -1.5]))
        out = reduce_conv_forward(rc, np.random.default_rng(2).standard_normal((3, 4, 4)))
        np.testing.assert_array_equal(out[0], np.full((4, 4), 0.5))
        np.testing.assert_array_equal(out[1], np.full((4, 4), -1.5))

    def test_grad_bias_identity(self):
        rng = np.random.default_rng(3)
        rc = ReduceConv(weights=rng.standard_normal((2, 4)), bias=rng.standard_normal(2))
        fmap = rng.standard_normal((4, 3, 3))
        gout = rng.standard_normal((2, 3, 3))
        _, _, gb = reduce_conv_backward(rc, fmap, gout)
        np.testing.assert_allclose(gb, gout.sum(axis=(1, 2)), rtol=1e-12)

    def test_zero_grad_out(self):
        rng = np.random.default_rng(4)
        rc = ReduceConv(weights=rng.standard_normal((2, 4)), bias=rng.standard_normal(2))
        gf, gw, gb = reduce_conv_backward(rc, rng.standard_normal((4, 3, 3)), np.zeros((2, 3, 3)))
        assert not gf.any() and not gw.any() and not gb.any()

    def test_matches_finite_differences(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            rc = ReduceConv(weights=rng.standard_normal((2, 4)), bias=rng.standard_normal(2))
            fmap = rng.standard_normal((4, 3, 3))
            coeff = rng.standard_normal((2, 3, 3))

            def loss():
                return float((coeff * reduce_conv_forward(rc, fmap)).sum())

            gf, gw, gb = reduce_conv_backward(rc, fmap, coeff)
            err = grad_check(loss, [fmap, rc.weights, rc.bias], [gf, gw, gb], eps=1e-6)
            assert err < 1e-6

    def test_channel_mismatch(self):
        rc = ReduceConv(weights=np.ones((2, 4)), bias=np.zeros(2))
        with pytest.raises(ShapeError):
            reduce_conv_forward(rc, np.zeros((5, 3, 3)))


class TestDenseReLU:
    def test_identity_weights(self):
        layer = DenseReLU(weights=np.eye(2), bias=np.zeros(2))
        np.testing.assert_array_equal(dense_relu_forward(layer, np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_dead_units(self):
        rng = np.random.default_rng(0)
        layer = DenseReLU(weights=rng.standard_normal((3, 4)), bias=np.full(3, -100.0))
        x = rng.standard_normal(4)
        assert not dense_relu_forward(layer, x).any()
        gx, _, _ = dense_relu_backward(layer, x, np.ones(3))
        assert not gx.any()

    def test_matches_finite_differences_away_from_kinks(self):
        checked = 0
        for seed in range(30):
            rng = np.random.default_rng(seed)
            layer = DenseReLU(weights=rng.standard_normal((3, 4)), bias=rng.standard_normal(3))
            x = rng.standard_normal(4)
            pre = layer.weights @ x + layer.bias
            if np.min(np.abs(pre)) < 1e-4:  # skip near-kink instances
                continue
            coeff = rng.standard_normal(3)

            def loss():
                return float(coeff @ dense_relu_forward(layer, x))

            gx, gw, gb = dense_relu_backward(layer, x, coeff)
            err = grad_check(loss, [x, layer.weights, layer.bias], [gx, gw, gb], eps=1e-6)
            assert err < 1e-6
            checked += 1
        assert checked >= 10


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        clf = SoftmaxClassifier(weights=np.zeros((7, 3)), bias=np.zeros(7))
        loss, probs, _ = softmax_cross_entropy(clf, np.ones(3), 4)
        assert loss == pytest.approx(math.log(7.0), abs=1e-12)
        assert loss == pytest.approx(1.945910, abs=1e-6)
        np.testing.assert_allclose(probs, np.full(7, 1.0 / 7.0), rtol=1e-12)

    def test_saturated_correct_class(self):
        clf = SoftmaxClassifier(weights=np.zeros((3, 1)), bias=np.array([100.0, 0.0, 0.0]))
        loss, _, _ = softmax_cross_entropy(clf, np.zeros(1), 0)
        assert loss < 1e-6

    def test_probs_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(5)
        clf = SoftmaxClassifier(
            weights=rng.standard_normal((5, 4)), bias=rng.standard_normal(5)
        )
        x = rng.standard_normal(4)
        _, probs, _ = softmax_cross_entropy(clf, x, 2)
        assert abs(probs.sum() - 1.0) < 1e-12
        shifted = SoftmaxClassifier(weights=clf.weights, bias=clf.bias + 123.0)
        _, probs2, _ = softmax_cross_entropy(shifted, x, 2)
        np.testing.assert_allclose(probs, probs2, atol=1e-12)

    def test_grad_logits_matches_finite_differences(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            logits = rng.standard_normal(5)
            label = int(rng.integers(5))
            # identity classifier exposes the logits as the input
            clf = SoftmaxClassifier(weights=np.eye(5), bias=np.zeros(5))

            def loss():
                return softmax_cross_entropy(clf, logits, label)[0]

            _, _, grad_logits = softmax_cross_entropy(clf, logits, label)
            err = grad_check(loss, [logits], [grad_logits], eps=1e-6)
            assert err < 1e-6

    def test_label_out_of_range(self):
        clf = SoftmaxClassifier(weights=np.zeros((3, 2)), bias=np.zeros(3))
        with pytest.raises(ConfigError):
            softmax_cross_entropy(clf, np.zeros(2), 3)


def test_linear_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    x = rng.standard_normal(4)
    coeff = rng.standard_normal(3)

    def loss():
        return float(coeff @ (w @ x + b))

    gx, gw, gb = linear_backward(w, x, coeff)
    err = grad_check(loss, [x, w], [gx, gw], eps=1e-6)
    assert err < 1e-6
    np.testing.assert_allclose(gb, coeff, rtol=1e-12)


def test_batched_forward_matches_per_sample():
    rng = np.random.default_rng(12)
    br = random_branch(rng, 4, 6)
    xs = rng.standard_normal((5, 6))
    batched = rbf_forward(br, xs)
    for i in range(5):
        np.testing.assert_allclose(batched[i], rbf_forward(br, xs[i]), rtol=1e-15)


def test_batched_backward_sums_parameter_grads():
    rng = np.random.default_rng(13)
    br = random_branch(rng, 4, 6)
    xs = rng.standard_normal((5, 6))
    gs = rng.standard_normal((5, 4))
    gx_b, gc_b, gr_b = rbf_backward(br, xs, gs)
    gc_sum = np.zeros_like(gc_b)
    gr_sum = np.zeros_like(gr_b)
    for i in range(5):
        gx_i, gc_i, gr_i = rbf_backward(br, xs[i], gs[i])
        np.testing.assert_allclose(gx_b[i], gx_i, rtol=1e-12)
        gc_sum += gc_i
        gr_sum += gr_i
    np.testing.assert_allclose(gc_b, gc_sum, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(gr_b, gr_sum, rtol=1e-9, atol=1e-12)


def test_branch_invariant_validation():
    with pytest.raises(ConfigError):
        RBFBranch(centers=np.array([[np.nan, 0.0]]), log_radii=np.zeros(1))
    with pytest.raises(ShapeError):
        RBFBranch(centers=np.zeros((2, 3)), log_radii=np.zeros(3))
