import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pleomorph.errors import DegenerateInputError, InvalidConfigError, InvalidInputError, InvalidShapeError
from pleomorph.gradsuite import op_checks
from pleomorph.numerics import (
    Adam,
    AdamState,
    BatchNorm,
    Linear,
    Parameter,
    Tape,
    Tensor,
    adam_step,
    avg_pool2d,
    batch_norm,
    conv2d,
    conv_output_size,
    cosine_similarity,
    dense_concat,
    grad_check,
    grad_check_report,
    linear,
    max_pool2d,
    mean,
    mul,
    smooth_l1,
    split_channels,
    sum_all,
)
from pleomorph.regressor import build_regression_net

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for q in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, q * stride:q * stride + kw]
                    out[i, o, r, q] = (patch * w[o]).sum()
    return out


class TestTape:
    def test_integer_input_becomes_float(self):
        assert Tensor([1, 2]).dtype == np.float64

    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = mul(x, 2.0)
        assert y.is_leaf

    def test_nothing_recorded_without_grad_inputs(self):
        with Tape() as tape:
            mul(Tensor(np.ones(3)), 2.0)
        assert len(tape) == 0

    def test_reused_input_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            y = sum_all(mul(x, x))
        tape.backward(y)
        assert x.grad[0] == 6.0

    def test_backward_runs_in_reverse(self):
        order = []
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            a = mul(x, 2.0)
            b = mul(a, 3.0)
            c = sum_all(b)
        ops = [node.op for node in tape.nodes]
        assert ops == ["mul", "mul", "sum"] or len(ops) == 3
        tape.backward(c)
        order.append(x.grad.tolist())
        assert order == [[6.0, 6.0]]

    def test_intermediate_gradients_on_request(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            a = mul(x, 2.0)
            a.retain_grad = True
            s = sum_all(mul(a, a))
        tape.backward(s)
        np.testing.assert_array_equal(a.grad, [4.0, 4.0])


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        w[[0, 1, 2], [0, 1, 2]] = 1.0
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w)).data, x)

    def test_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2)))).data
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 4.0))

    def test_large_stride_shape(self):
        assert conv_output_size(512, 7, 3, 0) == 169
        out = conv2d(Tensor(np.zeros((1, 1, 512, 512), np.float32)), Tensor(np.zeros((1, 1, 7, 7), np.float32)), stride=3)
        assert out.shape == (1, 1, 169, 169)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 0)])
    def test_matches_naive_loops(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data,
                                   naive_conv(x, w, stride, pad), rtol=1e-12, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(InvalidShapeError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(InvalidShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
        with pytest.raises(InvalidShapeError):
            conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)

    @given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.integers(0, 2 ** 31))
    def test_linear_in_input_and_kernel(self, a, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        base = conv2d(Tensor(x), Tensor(w), padding=1).data
        scale = np.abs(base).max() * abs(a)
        np.testing.assert_allclose(conv2d(Tensor(a * x), Tensor(w), padding=1).data, a * base, rtol=0,
                                   atol=1e-12 * scale)
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(a * w), padding=1).data, a * base, rtol=0,
                                   atol=1e-12 * scale)


class TestConcat:
    def test_single_input_bytes(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        assert dense_concat([Tensor(x)]).data.tobytes() == x.tobytes()

    def test_channel_sum(self):
        parts = [Tensor(np.zeros((1, c, 2, 2))) for c in (16, 12, 12)]
        assert dense_concat(parts).shape == (1, 40, 2, 2)

    def test_backward_of_ones(self):
        parts = [Tensor(np.zeros((1, c, 2, 2)), requires_grad=True) for c in (2, 3)]
        with Tape() as tape:
            s = sum_all(dense_concat(parts))
        tape.backward(s)
        for p in parts:
            np.testing.assert_array_equal(p.grad, np.ones_like(p.data))

    def test_spatial_mismatch(self):
        with pytest.raises(InvalidShapeError):
            dense_concat([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2 ** 31))
    def test_split_inverts_concat(self, sizes, seed):
        rng = np.random.default_rng(seed)
        parts = [rng.standard_normal((2, c, 3, 3)) for c in sizes]
        back = split_channels(dense_concat([Tensor(p) for p in parts]), sizes)
        for p, b in zip(parts, back):
            assert p.tobytes() == np.ascontiguousarray(b.data).tobytes()


class TestPooling:
    def test_max_and_avg(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(max_pool2d(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])
        np.testing.assert_array_equal(avg_pool2d(Tensor(x)).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_odd_extent_drops_remainder(self):
        assert max_pool2d(Tensor(np.zeros((1, 1, 5, 7)))).shape == (1, 1, 2, 3)


class TestBatchNorm:
    def test_training_normalizes_and_updates_running_stats(self, rng):
        x = rng.standard_normal((8, 2, 3, 3)) * 3 + 1
        rm, rv = np.zeros(2), np.ones(2)
        out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, rtol=1e-4)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_eval_uses_running_stats(self, rng):
        x = rng.standard_normal((4, 2, 2, 2))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False).data
        expected = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out, expected)


class TestSmoothL1:
    @pytest.mark.parametrize("x,expected", [(0.5, 0.25), (2.0, 2.0), (1.0, 1.0), (-0.5, 0.25), (-3.0, 3.0)])
    def test_examples(self, x, expected):
        assert smooth_l1(np.array([x]), np.array([0.0]), 1.0).data[0] == expected

    def test_alpha_must_be_positive(self):
        with pytest.raises(InvalidConfigError):
            smooth_l1(np.zeros(1), np.zeros(1), 0.0)

    def test_gradient_branches(self):
        p = Tensor(np.array([0.5, 2.0, -3.0]), requires_grad=True)
        with Tape() as tape:
            s = sum_all(smooth_l1(p, np.zeros(3), 1.0))
        tape.backward(s)
        np.testing.assert_array_equal(p.grad, [1.0, 1.0, -1.0])

    @given(finite, finite, st.floats(1e-3, 10))
    def test_non_negative_and_zero_only_at_target(self, p, t, alpha):
        v = smooth_l1(np.array([p]), np.array([t]), alpha).data[0]
        assert v >= 0
        assert (v == 0) == (p == t) or abs(p - t) < 1e-150

    @given(st.floats(1e-3, 100))
    def test_continuous_at_alpha(self, alpha):
        below = smooth_l1(np.array([np.nextafter(alpha, 0)]), np.zeros(1), alpha).data[0]
        above = smooth_l1(np.array([np.nextafter(alpha, np.inf)]), np.zeros(1), alpha).data[0]
        assert abs(above - below) <= 1e-9 * max(1.0, alpha)


class TestCosine:
    @pytest.mark.parametrize("a,b,expected", [((1, 2, 3), (1, 2, 3), 1.0), ((1, 0), (0, 1), 0.0),
                                              ((1, 0), (-2, 0), -1.0)])
    def test_examples(self, a, b, expected):
        assert cosine_similarity(np.array(a, float), np.array(b, float)).data == pytest.approx(expected, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity(np.zeros(3), np.ones(3))

    @given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
    def test_bounded(self, a, b):
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        assert -1.0 <= float(cosine_similarity(a, b).data) <= 1.0


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam, written out independently."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return p


class TestAdam:
    def test_zero_gradient_first_step(self):
        p = np.array([1.5])
        adam_step([p], [np.zeros(1)], AdamState(learning_rate=1e-3))
        assert p[0] == 1.5

    def test_first_step_is_learning_rate(self):
        p = np.array([1.0])
        adam_step([p], [np.array([0.3])], AdamState(learning_rate=1e-3))
        assert p[0] == pytest.approx(1.0 - 1e-3, rel=1e-9)

    def test_two_steps(self):
        p = np.array([1.0])
        state = AdamState()
        for _ in range(2):
            adam_step([p], [np.array([0.5])], state)
        assert state.t == 2
        assert 0 < state.m[0][0] < 0.5
        assert 0 < state.v[0][0] < 0.25

    @given(st.lists(finite, min_size=1, max_size=20), st.floats(1e-5, 1e-1))
    def test_matches_textbook_recurrence(self, grads, lr):
        p = np.array([0.7])
        state = AdamState(learning_rate=lr)
        for g in grads:
            adam_step([p], [np.array([g])], state)
        assert p[0] == pytest.approx(reference_adam(0.7, grads, lr), rel=1e-9, abs=1e-12)

    def test_zero_learning_rate_is_bit_identical(self, rng):
        p = np.concatenate([rng.standard_normal(5), [0.0, -0.0]])
        before = p.tobytes()
        state = AdamState(learning_rate=0.0)
        for _ in range(3):
            adam_step([p], [rng.standard_normal(7)], state)
        assert p.tobytes() == before

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            adam_step([np.zeros(3)], [np.zeros(2)], AdamState())

    def test_optimizer_wrapper(self):
        w = Parameter(np.array([1.0, 2.0]))
        opt = Adam([w], learning_rate=0.1)
        w.grad = np.array([1.0, -1.0])
        opt.step()
        np.testing.assert_allclose(w.data, [0.9, 2.1])
        opt.zero_grad()
        assert w.grad is None


class TestGradCheck:
    def test_quadratic(self):
        assert grad_check(lambda x: sum_all(mul(x, x)), Tensor(np.array([3.0]))) < 1e-8

    def test_dense_layer_with_smooth_l1(self, rng):
        w, b = Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal(3))
        target = rng.standard_normal((4, 3))
        err = grad_check(lambda x: mean(smooth_l1(linear(x, w, b), target)), Tensor(rng.standard_normal((4, 5))))
        assert err < 1e-6

    def test_kink_is_excluded(self):
        report = grad_check_report(lambda x: sum_all(smooth_l1(x, np.zeros(2), 1.0)), Tensor(np.array([1.0, 0.3])))
        assert report.excluded == 1 and report.checked == 1
        assert report.max_rel_error < 1e-8

    def test_non_finite_value(self):
        with pytest.raises(DegenerateInputError):
            grad_check(lambda x: mul(x, np.inf), Tensor(np.ones(1)))

    def test_bad_step(self):
        with pytest.raises(InvalidInputError):
            grad_check(lambda x: sum_all(x), Tensor(np.ones(1)), h=0.0)

    @pytest.mark.parametrize("check", op_checks(), ids=lambda c: c.name)
    def test_every_op(self, check):
        assert check.report.checked > 0
        assert check.report.max_rel_error < check.tolerance


class TestModules:
    def test_state_dict_order_and_round_trip(self, rng):
        bn = BatchNorm(3, dtype=np.float64)
        keys = list(bn.state_dict())
        assert keys == ["gamma", "beta", "running_mean", "running_var"]
        state = {k: rng.standard_normal(3) for k in keys}
        bn.load_state_dict(state)
        for k in keys:
            np.testing.assert_array_equal(bn.state_dict()[k], state[k])

    def test_linear_init_is_seeded(self):
        a = Linear(4, 3, rng=np.random.default_rng(5))
        b = Linear(4, 3, rng=np.random.default_rng(5))
        assert a.weight.data.tobytes() == b.weight.data.tobytes()

    def test_full_network_gradients_finite(self, rng):
        net = build_regression_net(seed=3)
        x = rng.uniform(0, 1, (4, 3, 64, 64)).astype(np.float32)
        with Tape() as tape:
            loss = mean(smooth_l1(net(x), np.array([1.0, 2.0, 3.0, 2.5], np.float32)))
        tape.backward(loss)
        for name, p in net.named_parameters():
            assert p.grad is not None and np.isfinite(p.grad).all(), name
