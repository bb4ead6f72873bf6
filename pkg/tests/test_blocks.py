"""Tests for the gated style-modulation block and its sub-operations."""

import numpy as np
import pytest

from caim.autodiff import Tensor, backward, finite_diff_check, instance_stats
from caim.blocks import (
    CaimParams,
    InstanceNormConfig,
    adain,
    aim,
    caim_forward,
    estimate_affine,
    init_caim,
    instance_norm,
    instance_norm_residual,
    stylizer_forward,
)


def random_map(rng, b=2, c=3, h=5, w=5):
    return Tensor(rng.standard_normal((b, c, h, w)))


def trained_like_params(rng, channels, scale=0.3):
    """Params with nonzero prediction heads, as after some training."""
    p = init_caim(seed=int(rng.integers(1 << 31)), channels=channels)
    for t in (p.fc_scale_w, p.fc_scale_b, p.fc_shift_w, p.fc_shift_b):
        t.data[...] = rng.standard_normal(t.shape) * scale
    return p


class TestInstanceNorm:
    def test_direct_formula(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        out = instance_norm(x, InstanceNormConfig(eps=0.0)).data.ravel()
        np.testing.assert_allclose(out, [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)

    def test_constant_channel_zeroes_out(self):
        x = Tensor(np.full((1, 2, 3, 3), 7.0))
        out = instance_norm(x, InstanceNormConfig(eps=1e-5))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_affine_parameters(self):
        rng = np.random.default_rng(0)
        x = random_map(rng)
        base = instance_norm(x, InstanceNormConfig(eps=1e-5)).data
        out = instance_norm(x, InstanceNormConfig(eps=1e-5, gamma=2.0, beta=3.0)).data
        np.testing.assert_allclose(out, 2.0 * base + 3.0, atol=1e-12)

    def test_output_statistics(self):
        rng = np.random.default_rng(1)
        x = random_map(rng, b=3, c=4, h=6, w=6)
        out = instance_norm(x, InstanceNormConfig(eps=0.0)).data
        assert np.abs(out.mean(axis=(2, 3))).max() < 1e-9
        assert np.abs(out.var(axis=(2, 3)) - 1.0).max() < 1e-7


class TestAdain:
    def test_fixed_point(self):
        rng = np.random.default_rng(2)
        x = random_map(rng)
        out = adain(x, x, eps=0.0)
        np.testing.assert_allclose(out.data, x.data, atol=1e-9)

    def test_output_matches_style_statistics(self):
        rng = np.random.default_rng(3)
        content, style = random_map(rng), random_map(rng)
        out = adain(content, style, eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=(2, 3)), style.data.mean(axis=(2, 3)), atol=1e-9)
        np.testing.assert_allclose(
            out.std(axis=(2, 3)), style.data.std(axis=(2, 3)), atol=1e-6
        )

    def test_constant_style_channel(self):
        rng = np.random.default_rng(4)
        content = random_map(rng, b=1, c=1, h=4, w=4)
        style = Tensor(np.full((1, 1, 4, 4), 0.6))
        out = adain(content, style, eps=0.0).data
        np.testing.assert_allclose(out, 0.6, atol=1e-12)

    def test_equivalence_via_normalize_scale_shift(self):
        # substituting external style statistics reproduces the oracle
        from caim.autodiff import normalize_scale_shift

        rng = np.random.default_rng(5)
        content, style = random_map(rng), random_map(rng)
        content_stats = instance_stats(content, eps=0.0)
        style_stats = instance_stats(style, eps=0.0)
        via_norm = normalize_scale_shift(
            content, content_stats, style_stats.std, style_stats.mean
        )
        np.testing.assert_allclose(via_norm.data, adain(content, style, eps=0.0).data, atol=1e-9)


class TestStylizer:
    def test_zero_input_zero_biases(self):
        params = init_caim(seed=0, channels=3)
        code = stylizer_forward(Tensor(np.zeros((2, 3, 4, 4))), params)
        np.testing.assert_array_equal(code.data, np.zeros((2, 3)))

    @pytest.mark.parametrize("hw", [(3, 3), (5, 7), (8, 4)])
    def test_code_shape_independent_of_spatial_size(self, hw):
        rng = np.random.default_rng(6)
        params = init_caim(seed=1, channels=2, stylizer_width=4)
        code = stylizer_forward(Tensor(rng.standard_normal((3, 2) + hw)), params)
        assert code.shape == (3, 4)

    def test_spatial_permutation_invariance_with_pointwise_kernels(self):
        rng = np.random.default_rng(7)
        params = init_caim(seed=2, channels=3)
        for w in (params.conv1_w, params.conv2_w):
            center = rng.standard_normal(w.shape[:2]) * 0.5
            w.data[...] = 0.0
            w.data[:, :, 1, 1] = center

        x = rng.standard_normal((2, 3, 4, 4))
        perm = rng.permutation(16)
        x_perm = x.reshape(2, 3, 16)[:, :, perm].reshape(2, 3, 4, 4)

        code = stylizer_forward(Tensor(x), params).data
        code_perm = stylizer_forward(Tensor(x_perm), params).data
        np.testing.assert_allclose(code, code_perm, atol=1e-12)

    def test_channel_mismatch_raises(self):
        params = init_caim(seed=3, channels=4)
        with pytest.raises(ValueError, match="channels"):
            stylizer_forward(Tensor(np.zeros((1, 3, 4, 4))), params)


class TestEstimateAffine:
    def test_zero_heads_give_zero(self):
        rng = np.random.default_rng(8)
        params = init_caim(seed=4, channels=3)
        code = stylizer_forward(random_map(rng), params)
        affine = estimate_affine(code, params)
        np.testing.assert_array_equal(affine.scale.data, np.zeros((2, 3)))
        np.testing.assert_array_equal(affine.shift.data, np.zeros((2, 3)))

    def test_identity_scale_head_passes_code_through(self):
        rng = np.random.default_rng(9)
        params = init_caim(seed=5, channels=3)
        params.fc_scale_w.data[...] = np.eye(3)
        code = stylizer_forward(random_map(rng), params)
        affine = estimate_affine(code, params)
        np.testing.assert_allclose(affine.scale.data, code.data, atol=1e-15)
        np.testing.assert_array_equal(affine.shift.data, np.zeros((2, 3)))

    def test_gradient_reaches_stylizer_conv(self):
        rng = np.random.default_rng(10)
        params = trained_like_params(rng, channels=3)
        x = random_map(rng)
        affine = estimate_affine(stylizer_forward(x, params), params)
        backward((affine.scale.sum() + affine.shift.sum()))
        assert params.conv1_w.grad is not None
        assert np.abs(params.conv1_w.grad).max() > 0

        def f(w1):
            p = CaimParams(
                w1, params.conv1_b, params.conv2_w, params.conv2_b,
                params.fc_scale_w, params.fc_scale_b, params.fc_shift_w, params.fc_shift_b,
            )
            a = estimate_affine(stylizer_forward(x, p), p)
            return (a.scale.sum() + a.shift.sum())

        assert finite_diff_check(f, params.conv1_w, h=1e-5) < 1e-4


class TestAim:
    def test_zero_params_zero_output(self):
        rng = np.random.default_rng(11)
        params = init_caim(seed=6, channels=3)
        out = aim(random_map(rng), params)
        np.testing.assert_array_equal(out.data, np.zeros(out.shape))

    def test_forced_external_statistics_match_adain(self):
        # single-sample batch: constant-bias heads pin the predicted stats
        rng = np.random.default_rng(12)
        content = random_map(rng, b=1)
        style = random_map(rng, b=1)
        style_stats = instance_stats(style, eps=0.0)

        params = init_caim(seed=7, channels=3)
        params.fc_scale_b.data[...] = style_stats.std.data[0]
        params.fc_shift_b.data[...] = style_stats.mean.data[0]

        out = aim(content, params, eps=0.0)
        np.testing.assert_allclose(out.data, adain(content, style, eps=0.0).data, atol=1e-9)

    def test_output_mean_equals_predicted_shift(self):
        rng = np.random.default_rng(13)
        params = trained_like_params(rng, channels=3)
        x = random_map(rng)
        affine = estimate_affine(stylizer_forward(x, params), params)
        out = aim(x, params, eps=0.0)
        np.testing.assert_allclose(out.data.mean(axis=(2, 3)), affine.shift.data, atol=1e-9)


class TestCaimForward:
    def test_closed_gate_returns_input_object(self):
        rng = np.random.default_rng(14)
        params = trained_like_params(rng, channels=3)
        x = random_map(rng)
        assert caim_forward(x, 0, params) is x

    def test_closed_gate_bitwise_over_random_tensors(self):
        rng = np.random.default_rng(15)
        params = trained_like_params(rng, channels=2)
        for _ in range(20):
            x = random_map(rng, c=2)
            out = caim_forward(x, 0, params)
            assert out.data.tobytes() == x.data.tobytes()

    def test_open_gate_identity_at_init(self):
        rng = np.random.default_rng(16)
        params = init_caim(seed=8, channels=3)
        for _ in range(20):
            x = random_map(rng)
            out = caim_forward(x, 1, params)
            assert out.data.tobytes() == x.data.tobytes()

    def test_open_gate_with_trained_params_differs(self):
        rng = np.random.default_rng(17)
        params = trained_like_params(rng, channels=3)
        x = random_map(rng)
        out = caim_forward(x, 1, params)
        assert np.abs(out.data - x.data).max() > 1e-3

    def test_invalid_gate(self):
        params = init_caim(seed=9, channels=1)
        with pytest.raises(ValueError, match="gate"):
            caim_forward(Tensor(np.zeros((1, 1, 2, 2))), 2, params)

    def test_gradcheck_through_full_block(self):
        rng = np.random.default_rng(18)
        params = trained_like_params(rng, channels=2)
        weight = Tensor(rng.standard_normal((2, 2, 4, 4)))

        def f(t):
            return (caim_forward(t, 1, params) * weight).sum()

        x = Tensor(rng.standard_normal((2, 2, 4, 4)))
        assert finite_diff_check(f, x, h=1e-5) < 1e-4

    def test_gradcheck_wrt_block_parameters(self):
        rng = np.random.default_rng(19)
        params = trained_like_params(rng, channels=2)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        weight = Tensor(rng.standard_normal((1, 2, 4, 4)))

        def rebuild(**over):
            fields = dict(
                conv1_w=params.conv1_w, conv1_b=params.conv1_b,
                conv2_w=params.conv2_w, conv2_b=params.conv2_b,
                fc_scale_w=params.fc_scale_w, fc_scale_b=params.fc_scale_b,
                fc_shift_w=params.fc_shift_w, fc_shift_b=params.fc_shift_b,
            )
            fields.update(over)
            return CaimParams(**fields)

        for name in ("conv1_w", "fc_scale_w", "fc_shift_b"):
            def f(t, _name=name):
                return (caim_forward(x, 1, rebuild(**{_name: t}), eps=1e-5) * weight).sum()

            err = finite_diff_check(f, getattr(params, name), h=1e-5)
            assert err < 1e-4, f"{name}: rel err {err}"


class TestInstanceNormResidual:
    def test_matches_manual_composition(self):
        rng = np.random.default_rng(20)
        x = random_map(rng)
        out = instance_norm_residual(x, eps=1e-5)
        expected = instance_norm(x, InstanceNormConfig(eps=1e-5)).data + x.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestInitCaim:
    def test_same_seed_identical(self):
        a, b = init_caim(seed=42, channels=4), init_caim(seed=42, channels=4)
        for ta, tb in zip(a.tensors(), b.tensors()):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_differs_only_in_convs(self):
        a, b = init_caim(seed=1, channels=4), init_caim(seed=2, channels=4)
        assert np.any(a.conv1_w.data != b.conv1_w.data)
        assert np.any(a.conv2_w.data != b.conv2_w.data)
        for pa, pb in ((a.fc_scale_w, b.fc_scale_w), (a.fc_shift_w, b.fc_shift_w)):
            np.testing.assert_array_equal(pa.data, np.zeros(pa.shape))
            np.testing.assert_array_equal(pb.data, np.zeros(pb.shape))

    def test_all_tensors_trainable(self):
        params = init_caim(seed=3, channels=2)
        assert all(t.requires_grad for t in params.tensors())

    def test_stylizer_width_default_matches_channels(self):
        params = init_caim(seed=4, channels=5)
        assert params.stylizer_width == 5
