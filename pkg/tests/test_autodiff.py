"""Unit tests for the tensor engine: forward values, gradients, invariants."""

import io

import numpy as np
import pytest

from caim.autodiff import (
    GraphReuseError,
    NonFiniteError,
    Tensor,
    backward,
    conv2d_3x3,
    finite_diff_check,
    global_avg_pool,
    instance_stats,
    l2_normalize,
    linear,
    load_tensors,
    maximum_scalar,
    no_grad,
    normalize_scale_shift,
    read_tensor_record,
    relu,
    save_tensors,
    sqrt,
    sum_rows,
    write_tensor_record,
)


def rand_tensor(rng, *shape, requires_grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = conv2d_3x3(x, Tensor(k), Tensor([0.0]), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_kernel_sums_full_map(self):
        # every padded 3x3 window covers the whole 2x2 map -> 1+2+3+4 = 10
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = conv2d_3x3(x, Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), padding=1)
        np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 10.0), atol=1e-12)

    def test_zero_input_yields_bias(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.zeros((2, 3, 4, 4)))
        w = rand_tensor(rng, 5, 3, 3, 3)
        b = Tensor([1.0, -2.0, 0.5, 3.0, -0.25])
        out = conv2d_3x3(x, w, b, stride=1, padding=1)
        expected = np.broadcast_to(b.data[None, :, None, None], out.shape)
        np.testing.assert_array_equal(out.data, expected)

    def test_output_shape_stride2(self):
        x = Tensor(np.zeros((1, 2, 32, 32)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        out = conv2d_3x3(x, w, Tensor(np.zeros(4)), stride=2, padding=1)
        assert out.shape == (1, 4, 16, 16)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            conv2d_3x3(x, w, Tensor(np.zeros(4)))

    def test_invalid_stride_raises(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ValueError, match="stride"):
            conv2d_3x3(x, w, Tensor(np.zeros(1)), stride=3)

    def test_linearity_bias_folded_out(self):
        rng = np.random.default_rng(7)
        xa = rng.standard_normal((2, 3, 5, 5))
        xb = rng.standard_normal((2, 3, 5, 5))
        w = rand_tensor(rng, 4, 3, 3, 3)
        zero_b = Tensor(np.zeros(4))
        a, b = 1.7, -0.3
        combined = conv2d_3x3(Tensor(a * xa + b * xb), w, zero_b, stride=1, padding=1)
        separate = (
            a * conv2d_3x3(Tensor(xa), w, zero_b, stride=1, padding=1).data
            + b * conv2d_3x3(Tensor(xb), w, zero_b, stride=1, padding=1).data
        )
        np.testing.assert_allclose(combined.data, separate, atol=1e-12)


class TestRelu:
    def test_values(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        out = relu(Tensor([-3.0, -0.5, -1e-9]))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_subgradient(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        backward(relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        backward(relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0])


class TestGlobalAvgPool:
    def test_mean(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert global_avg_pool(x).data[0, 0] == pytest.approx(2.5)

    def test_constant_channel(self):
        x = Tensor(np.full((2, 3, 4, 5), 0.7))
        np.testing.assert_allclose(global_avg_pool(x).data, 0.7)

    def test_gradient_is_inverse_area(self):
        x = Tensor(np.zeros((1, 1, 2, 3)), requires_grad=True)
        backward(global_avg_pool(x).sum())
        np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 3), 1.0 / 6.0))


class TestLinear:
    def test_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weight_gives_bias(self):
        x = Tensor(np.ones((3, 4)))
        out = linear(x, Tensor(np.zeros((2, 4))), Tensor([5.0, -1.0]))
        np.testing.assert_array_equal(out.data, np.tile([5.0, -1.0], (3, 1)))

    def test_direct_arithmetic(self):
        out = linear(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([5.0]))
        assert out.data[0, 0] == pytest.approx(16.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


class TestInstanceStats:
    def test_direct_formula(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        stats = instance_stats(x, eps=0.0)
        assert stats.mean.data[0, 0] == pytest.approx(2.5)
        assert stats.std.data[0, 0] == pytest.approx(np.sqrt(1.25))

    def test_constant_channel_eps(self):
        x = Tensor(np.full((1, 2, 3, 3), 4.2))
        stats = instance_stats(x, eps=1e-5)
        np.testing.assert_allclose(stats.std.data, np.sqrt(1e-5), atol=1e-15)

    def test_independent_per_sample(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((1, 2, 4, 4))
        b = rng.standard_normal((1, 2, 4, 4))
        both = instance_stats(Tensor(np.concatenate([a, b])), eps=0.0)
        only_a = instance_stats(Tensor(a), eps=0.0)
        np.testing.assert_allclose(both.mean.data[0], only_a.mean.data[0], atol=1e-15)
        np.testing.assert_allclose(both.std.data[0], only_a.std.data[0], atol=1e-15)


class TestNormalizeScaleShift:
    def test_zero_mean_unit_variance(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        stats = instance_stats(x, eps=0.0)
        ones = Tensor(np.ones((2, 3)))
        zeros = Tensor(np.zeros((2, 3)))
        out = normalize_scale_shift(x, stats, ones, zeros).data
        np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, atol=1e-9)

    def test_zero_scale_gives_shift(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        stats = instance_stats(x, eps=0.0)
        shift = Tensor([[0.3, -1.2]])
        out = normalize_scale_shift(x, stats, Tensor(np.zeros((1, 2))), shift).data
        np.testing.assert_allclose(out[0, 0], 0.3, atol=1e-15)
        np.testing.assert_allclose(out[0, 1], -1.2, atol=1e-15)

    def test_zero_std_with_zero_eps_errors(self):
        x = Tensor(np.full((1, 1, 2, 2), 3.0))
        stats = instance_stats(x, eps=0.0)
        ones = Tensor(np.ones((1, 1)))
        zeros = Tensor(np.zeros((1, 1)))
        with pytest.raises(NonFiniteError):
            normalize_scale_shift(x, stats, ones, zeros)


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_zero_vector_guarded(self):
        out = l2_normalize(Tensor([[0.0, 0.0, 0.0]]), eps=1e-12)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_unit_vector_unchanged(self):
        v = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(l2_normalize(Tensor(v)).data, v, atol=1e-15)


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_sum_of_squares_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            backward(x * x)

    def test_repeated_backward_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(GraphReuseError):
            backward(loss)

    def test_op_on_spent_graph_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * x
        backward(y.sum())
        with pytest.raises(GraphReuseError):
            y * y

    def test_grad_accumulates_through_shared_node(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0
        backward((y + y).sum())
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_no_grad_suppresses_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = (x * x).sum()
        assert y._grad_fn is None


class TestFiniteDiffCheck:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal(6))
        err = finite_diff_check(lambda t: (t * t).sum(), x, h=1e-5)
        assert err < 1e-6

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(1)
        vals = rng.standard_normal(8)
        vals[np.abs(vals) < 0.11] = 0.4  # keep every coordinate off the kink
        err = finite_diff_check(lambda t: relu(t).sum(), Tensor(vals), h=1e-5)
        assert err < 1e-6

    def test_conv_relu_gap_linear_chain(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.4)
        b = Tensor(rng.standard_normal(4) * 0.1)
        lw = Tensor(rng.standard_normal((3, 4)) * 0.4)
        lb = Tensor(rng.standard_normal(3) * 0.1)

        def f(t):
            h = relu(conv2d_3x3(t, w, b, stride=1, padding=1))
            return linear(global_avg_pool(h), lw, lb).sum()

        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        assert finite_diff_check(f, x, h=1e-5) < 1e-4


class TestGradcheckSweep:
    """Gradient correctness for every differentiable op at seeded random points."""

    @pytest.mark.parametrize("seed", range(10))
    def test_smooth_ops(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        w = Tensor(rng.standard_normal((3, 3, 3, 3)) * 0.3)
        b = Tensor(rng.standard_normal(3) * 0.1)
        lw = Tensor(rng.standard_normal((4, 3)) * 0.3)
        lb = Tensor(rng.standard_normal(4) * 0.1)
        scale = Tensor(rng.standard_normal((2, 3)))
        shift = Tensor(rng.standard_normal((2, 3)))
        probe_rows = Tensor(rng.standard_normal((2, 3)))
        other_rows = Tensor(rng.standard_normal((2, 3)))
        probe_map = Tensor(rng.standard_normal((2, 3, 4, 4)))

        cases = [
            ("conv_input", lambda t: conv2d_3x3(t, w, b, stride=2, padding=1).sum(), x, 1e-5),
            ("conv_weight", lambda t: conv2d_3x3(x, t, b).sum(), w, 1e-5),
            ("conv_bias", lambda t: conv2d_3x3(x, w, t).sum(), b, 1e-5),
            ("gap", lambda t: (global_avg_pool(t) * global_avg_pool(t)).sum(), x, 1e-5),
            ("linear_input", lambda t: linear(t, lw, lb).sum(), probe_rows, 1e-5),
            ("linear_weight", lambda t: linear(probe_rows, t, lb).sum(), lw, 1e-5),
            ("linear_bias", lambda t: linear(probe_rows, lw, t).sum(), lb, 1e-5),
            (
                # h=1e-4: at 1e-5 this composite is roundoff-dominated on its
                # near-zero gradient coordinates
                "stats_through_norm",
                lambda t: (
                    normalize_scale_shift(t, instance_stats(t, eps=1e-3), scale, shift) * probe_map
                ).sum(),
                x,
                1e-4,
            ),
            ("l2norm", lambda t: (l2_normalize(t) * other_rows).sum(), probe_rows, 1e-5),
        ]
        for name, fn, point, h in cases:
            err = finite_diff_check(fn, point, h=h)
            assert err < 1e-6, f"{name}: rel err {err}"

    @pytest.mark.parametrize("seed", range(10))
    def test_kinked_ops(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = Tensor(rng.standard_normal((2, 2, 3, 3)))
        err = finite_diff_check(lambda t: relu(t).sum(), x, h=1e-5)
        assert err < 1e-4


class TestDeterminism:
    def test_bit_identical_outputs_and_gradients(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
            b = Tensor(rng.standard_normal(4), requires_grad=True)
            out = relu(conv2d_3x3(x, w, b, stride=2, padding=1))
            loss = (global_avg_pool(out) * global_avg_pool(out)).sum()
            backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy(), b.grad.copy()

        first, second = run(), run()
        assert first[0] == second[0]
        for a, b in zip(first[1:], second[1:]):
            np.testing.assert_array_equal(a, b)


class TestFiniteChecks:
    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_inf_result_rejected(self):
        big = Tensor([1e308])
        with pytest.raises(NonFiniteError):
            big + big


class TestHelpers:
    def test_maximum_scalar_gradient(self):
        x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
        backward(maximum_scalar(x, 1.0).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_sqrt_gradient_zero_at_zero(self):
        x = Tensor([0.0, 4.0], requires_grad=True)
        backward(sqrt(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.25])

    def test_sum_rows(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        out = sum_rows(x)
        np.testing.assert_array_equal(out.data, [3.0, 7.0])
        backward((out * Tensor([2.0, 5.0])).sum())
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [5.0, 5.0]])


class TestSerialization:
    def test_round_trip_single_record(self):
        rng = np.random.default_rng(5)
        arr = rng.standard_normal((3, 4, 5))
        buf = io.BytesIO()
        write_tensor_record(buf, arr)
        buf.seek(0)
        back = read_tensor_record(buf)
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)

    def test_round_trip_file(self, tmp_path):
        rng = np.random.default_rng(6)
        arrays = [rng.standard_normal(s) for s in [(2, 2), (5,), (1, 3, 3)]]
        path = tmp_path / "weights.bin"
        save_tensors(path, arrays)
        loaded = load_tensors(path)
        assert len(loaded) == 3
        for a, b in zip(arrays, loaded):
            np.testing.assert_array_equal(a, b)

    def test_header_is_json_line(self, tmp_path):
        path = tmp_path / "one.bin"
        save_tensors(path, [np.zeros((2, 3))])
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii")
        assert header == '{"shape": [2, 3]}\n'

    def test_truncated_payload_raises(self):
        buf = io.BytesIO(b'{"shape": [4]}\n' + b"\x00" * 8)
        with pytest.raises(ValueError, match="truncated"):
            read_tensor_record(buf)
