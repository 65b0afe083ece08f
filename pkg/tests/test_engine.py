import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbnet.engine import Tensor, backward, check_gradients, current_tape, no_grad
from lbnet.engine import functional as F
from lbnet.errors import ConfigError, DimensionError, UsageError
from oracles import conv_oracle, matmul_oracle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestTensor:
    def test_shape_invariants(self):
        t = Tensor(np.zeros((2, 3, 4, 5)))
        assert t.numel == 120 and t.data.dtype == np.float64
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_grad_accumulates_additively(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(F.sum(F.mul(x, x)))
        first = x.grad.copy()
        backward(F.sum(F.mul(x, x)))
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_tape_replayed_once_and_cleared(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        y = F.relu(F.scale(x, 3.0))
        tape = current_tape()
        assert len(tape) == 2
        backward(F.sum(y))
        assert len(tape) == 0
        np.testing.assert_array_equal(x.data, x.data)  # leaf intact
        assert x.requires_grad

    def test_no_grad_records_nothing(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with no_grad():
            y = F.sum(x)
        assert not y.requires_grad
        assert len(current_tape()) == 0

    def test_backward_sum_and_square(self, rng):
        xv = rng.normal(size=(2, 3))
        x = Tensor(xv, requires_grad=True)
        backward(F.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
        x.zero_grad()
        backward(F.sum(F.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * xv, rtol=0, atol=1e-15)

    def test_backward_rejects_nonscalar(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with pytest.raises(UsageError):
            backward(F.relu(x))
        current_tape().clear()


class TestConv2d:
    def test_identity_permutation(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        perm = [2, 0, 1]
        w = np.zeros((3, 3, 1, 1))
        for o, c in enumerate(perm):
            w[o, c, 0, 0] = 1.0
        y = F.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x.data[:, perm])

    def test_same_padding_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 32, 100, 100)))
        y = F.conv2d(x, Tensor(rng.normal(size=(32, 32, 3, 3))), padding=1)
        assert y.shape == (1, 32, 100, 100)

    @pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 0, 2)])
    def test_matches_direct_oracle(self, rng, stride, pad, groups):
        x = rng.normal(size=(2, 4, 5, 5))
        w = rng.normal(size=(6, 4 // groups, 3, 3))
        b = rng.normal(size=6)
        got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, groups=groups).data
        np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, pad, groups), rtol=0, atol=1e-10)

    def test_groups_equal_independent_slices(self, rng):
        x = rng.normal(size=(1, 6, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        grouped = F.conv2d(Tensor(x), Tensor(w), padding=1, groups=2).data
        parts = [F.conv2d(Tensor(x[:, 3 * g:3 * g + 3]), Tensor(w[2 * g:2 * g + 2]), padding=1).data
                 for g in range(2)]
        np.testing.assert_allclose(grouped, np.concatenate(parts, axis=1), rtol=0, atol=1e-10)

    def test_errors(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 5, 5)))
        with pytest.raises(DimensionError) as info:
            F.conv2d(x, Tensor(rng.normal(size=(2, 3, 3, 3))))
        assert info.value.axis == 1
        with pytest.raises(ConfigError):
            F.conv2d(x, Tensor(rng.normal(size=(3, 4, 3, 3))), groups=3)

    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 2), (1, 0, 1)])
    def test_gradients(self, rng, stride, pad, groups):
        x = Tensor(rng.normal(size=(2, 4, 6, 6)))
        w = Tensor(rng.normal(size=(4, 4 // groups, 3, 3)))
        b = Tensor(rng.normal(size=4))
        proj = rng.normal(size=F.conv2d(x, w, b, stride, pad, groups).shape)

        def f(_):
            return F.sum(F.mul(F.conv2d(x, w, b, stride, pad, groups), Tensor(proj)))

        for t in (x, w, b):
            assert check_gradients(f, t) < 1e-4

    def test_conv_relu_sum_graph(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        # shift pre-activations away from the kink
        pre = F.conv2d(x, w, padding=1).data
        b = Tensor(np.where(np.abs(pre).min() < 1e-3, 0.01, 0.0) * np.ones(3))

        def f(_):
            return F.sum(F.relu(F.conv2d(x, w, b, padding=1)))

        assert check_gradients(f, w) < 1e-4
        assert check_gradients(f, x) < 1e-4


class TestLinearMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 3, 4))
        y = F.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(y.data, x)

    def test_hand_arithmetic(self):
        y = F.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [[3.0, -1.0]])

    def test_linear_vs_loops(self, rng):
        x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
        expect = np.array([[b[o] + sum(x[i, c] * w[o, c] for c in range(5)) for o in range(4)]
                           for i in range(3)])
        np.testing.assert_allclose(F.linear(Tensor(x), Tensor(w), Tensor(b)).data, expect, atol=1e-10)

    def test_linear_dimension_error(self, rng):
        with pytest.raises(DimensionError):
            F.linear(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 5))))

    def test_matmul_identity_and_scalar(self, rng):
        a = rng.normal(size=(2, 3, 4))
        np.testing.assert_array_equal(F.matmul(Tensor(a), Tensor(np.broadcast_to(np.eye(4), (2, 4, 4)))).data, a)
        assert F.matmul(Tensor([[2.0]]), Tensor([[3.5]])).item() == 7.0

    def test_matmul_vs_loops(self, rng):
        a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 5, 2))
        np.testing.assert_allclose(F.matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b), atol=1e-10)

    def test_matmul_mismatch(self, rng):
        with pytest.raises(DimensionError):
            F.matmul(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 5, 4))))
        with pytest.raises(DimensionError):
            F.matmul(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(3, 4, 4))))

    def test_gradients(self, rng):
        x, w, b = (Tensor(rng.normal(size=s)) for s in [(2, 3, 5), (4, 5), (4,)])
        proj = Tensor(rng.normal(size=(2, 3, 4)))
        f = lambda _: F.sum(F.mul(F.linear(x, w, b), proj))  # noqa: E731
        assert max(check_gradients(f, t) for t in (x, w, b)) < 1e-4
        a, c = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4, 2)))
        proj2 = Tensor(rng.normal(size=(2, 3, 2)))
        g = lambda _: F.sum(F.mul(F.matmul(a, c), proj2))  # noqa: E731
        assert max(check_gradients(g, t) for t in (a, c)) < 1e-4

    def test_linear_function_is_exact(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(2, 4)))
        assert check_gradients(lambda t: F.sum(F.linear(t, w)), x) < 1e-10


class TestSoftmaxLayerNorm:
    def test_constant_slice(self):
        np.testing.assert_allclose(F.softmax(Tensor(np.full((2, 4), 3.0))).data, 0.25, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, math.log(3.0)]), axis=0).data, [0.25, 0.75],
                                   atol=1e-15)

    def test_large_input_stable(self):
        y = F.softmax(Tensor([1e4, 0.0, -1e4, 1e4 - 1])).data
        assert np.all(np.isfinite(y))
        assert abs(y.sum() - 1) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
    def test_slices_sum_to_one(self, values):
        y = F.softmax(Tensor(values), axis=0).data
        assert abs(y.sum() - 1.0) < 1e-6
        assert np.all((y >= 0) & (y <= 1))

    def test_softmax_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5)))
        proj = Tensor(rng.normal(size=(2, 3, 5)))
        assert check_gradients(lambda t: F.sum(F.mul(F.softmax(t, axis=-1), proj)), x) < 1e-4

    def test_layer_norm_cases(self, rng):
        one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
        np.testing.assert_array_equal(F.layer_norm(Tensor(np.full((2, 4), 7.0)), one, zero).data, 0.0)
        y = F.layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_array_equal(y.data, [[-1.0, 1.0]])
        x = rng.normal(size=(3, 6))
        g, b = rng.normal(size=6), rng.normal(size=6)
        expect = np.empty_like(x)
        for i in range(3):
            m = sum(x[i]) / 6
            v = sum((x[i] - m) ** 2) / 6
            expect[i] = (x[i] - m) / math.sqrt(v + 1e-5) * g + b
        np.testing.assert_allclose(F.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, expect, atol=1e-10)
        normed = F.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-12).data
        np.testing.assert_allclose(normed.mean(-1), 0, atol=1e-6)
        np.testing.assert_allclose(normed.var(-1), 1, atol=1e-6)
        with pytest.raises(DimensionError):
            F.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5)))

    def test_layer_norm_gradient(self, rng):
        x, g, b = Tensor(rng.normal(size=(2, 3, 6))), Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        proj = Tensor(rng.normal(size=(2, 3, 6)))
        f = lambda _: F.sum(F.mul(F.layer_norm(x, g, b), proj))  # noqa: E731
        assert max(check_gradients(f, t) for t in (x, g, b)) < 1e-4


class TestPixelShufflePooling:
    def test_shape(self, rng):
        assert F.pixel_shuffle(Tensor(rng.normal(size=(1, 12, 4, 4))), 2).shape == (1, 3, 8, 8)

    def test_layout(self):
        y = F.pixel_shuffle(Tensor(np.arange(4.0).reshape(1, 4, 1, 1)), 2)
        np.testing.assert_array_equal(y.data[0, 0], [[0, 1], [2, 3]])

    def test_layout_formula_and_identity(self, rng):
        x = rng.normal(size=(2, 18, 3, 4))
        y = F.pixel_shuffle(Tensor(x), 3).data
        for n, c, h, w, i, j in [(0, 0, 0, 0, 0, 0), (1, 1, 2, 3, 2, 1), (0, 1, 1, 2, 1, 2)]:
            assert y[n, c, h * 3 + i, w * 3 + j] == x[n, c * 9 + i * 3 + j, h, w]
        np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
        np.testing.assert_array_equal(F.pixel_shuffle(Tensor(x), 1).data, x)
        with pytest.raises(ConfigError):
            F.pixel_shuffle(Tensor(x), 4)

    def test_pixel_shuffle_gradient(self, rng):
        x = Tensor(rng.normal(size=(1, 8, 2, 3)))
        proj = Tensor(rng.normal(size=(1, 2, 4, 6)))
        assert check_gradients(lambda t: F.sum(F.mul(F.pixel_shuffle(t, 2), proj)), x) < 1e-4

    def test_pool_constants_and_hand_values(self):
        x = Tensor(np.full((1, 3, 4, 4), 2.5))
        for kind in ("global_avg", "channel_avg", "channel_max"):
            np.testing.assert_array_equal(F.pool_stats(x, kind).data, 2.5)
        y = Tensor(np.array([3.0, 5.0]).reshape(1, 2, 1, 1))
        assert F.pool_stats(y, "channel_max").item() == 5.0
        assert F.pool_stats(y, "channel_avg").item() == 4.0

    def test_pool_vs_loops(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        gap = np.array([[sum(x[n, c].ravel()) / 20 for c in range(3)] for n in range(2)])
        np.testing.assert_allclose(F.pool_stats(Tensor(x), "global_avg").data[:, :, 0, 0], gap, atol=1e-12)
        mx = np.array([[[max(x[n, :, i, j]) for j in range(5)] for i in range(4)] for n in range(2)])
        np.testing.assert_array_equal(F.pool_stats(Tensor(x), "channel_max").data[:, 0], mx)

    def test_max_tie_routes_to_lowest_index(self):
        x = Tensor(np.ones((1, 3, 1, 1)), requires_grad=True)
        backward(F.sum(F.pool_stats(x, "channel_max")))
        np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 0])

    @pytest.mark.parametrize("kind", ["global_avg", "channel_avg", "channel_max"])
    def test_pool_gradient(self, rng, kind):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        proj = Tensor(rng.normal(size=F.pool_stats(x, kind).shape))
        assert check_gradients(lambda t: F.sum(F.mul(F.pool_stats(t, kind), proj)), x) < 1e-4


class TestElementwise:
    def test_values(self):
        np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
        assert F.sigmoid(Tensor(0.0)).item() == 0.5
        x = Tensor(np.linspace(-5, 5, 11))
        np.testing.assert_array_equal(F.relu(F.relu(x)).data, F.relu(x).data)

    def test_attention_map_broadcast(self, rng):
        a = rng.normal(size=(2, 3, 4, 5))
        m = rng.normal(size=(2, 3, 1, 1))
        out = F.mul(Tensor(a), Tensor(m)).data
        assert out[1, 2, 3, 4] == a[1, 2, 3, 4] * m[1, 2, 0, 0]
        s = rng.normal(size=(2, 1, 4, 5))
        assert F.mul(Tensor(a), Tensor(s)).data[1, 2, 3, 4] == a[1, 2, 3, 4] * s[1, 0, 3, 4]

    def test_other_broadcasts_rejected(self, rng):
        with pytest.raises(DimensionError):
            F.add(Tensor(rng.normal(size=(2, 3, 4, 5))), Tensor(rng.normal(size=(1, 3, 4, 5))))
        with pytest.raises(DimensionError):
            F.mul(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4,))))

    @pytest.mark.parametrize("op", ["sigmoid", "gelu", "scale", "abs"])
    def test_unary_gradients(self, rng, op):
        x = Tensor(rng.normal(size=(2, 3, 4)) + 0.5)
        fn = {"sigmoid": F.sigmoid, "gelu": F.gelu, "scale": lambda t: F.scale(t, -1.7), "abs": F.abs}[op]
        proj = Tensor(rng.normal(size=(2, 3, 4)))
        assert check_gradients(lambda t: F.sum(F.mul(fn(t), proj)), x) < 1e-6

    def test_relu_gradient_away_from_kink(self, rng):
        h = 1e-5
        v = rng.normal(size=(3, 4))
        v = np.where(np.abs(v) < 10 * h, 0.5, v)
        assert check_gradients(lambda t: F.sum(F.relu(t)), Tensor(v), h=h) < 1e-6

    def test_broadcast_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4, 4)))
        for shape in [(2, 3, 1, 1), (2, 1, 4, 4)]:
            m = Tensor(rng.normal(size=shape))
            f = lambda _: F.sum(F.mul(F.add(a, m), F.mul(a, m)))  # noqa: E731
            assert max(check_gradients(f, t) for t in (a, m)) < 1e-4


class TestConcatSplitTokens:
    def test_concat_shape_and_roundtrip(self, rng):
        a, b = rng.normal(size=(1, 8, 4, 4)), rng.normal(size=(1, 8, 4, 4))
        y = F.concat([Tensor(a), Tensor(b)])
        assert y.shape == (1, 16, 4, 4)
        parts = F.split(y, [8, 8])
        np.testing.assert_array_equal(parts[0].data, a)
        np.testing.assert_array_equal(parts[1].data, b)
        with pytest.raises(DimensionError):
            F.concat([Tensor(a), Tensor(rng.normal(size=(1, 8, 4, 5)))])

    def test_slice_gradient_routing(self, rng):
        xs = [Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True) for _ in range(3)]
        parts = F.split(F.concat(xs), [2, 2, 2])
        backward(F.sum(parts[1]))
        np.testing.assert_array_equal(xs[1].grad, 1.0)
        np.testing.assert_array_equal(xs[0].grad, 0.0)
        np.testing.assert_array_equal(xs[2].grad, 0.0)

    def test_unfold_fold_identity(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        for k in (1, 3, 5):
            t = F.unfold_tokens(Tensor(x), k)
            assert t.shape == (2, 20, 3 * k * k)
            np.testing.assert_allclose(F.fold_tokens(t, 3, 5, 4, k).data, x, atol=1e-15)

    def test_unfold_layout(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        t = F.unfold_tokens(Tensor(x), 3).data
        # token at (1, 2), channel 1, kernel offset (0, 2) -> pixel (0, 3)
        assert t[0, 1 * 4 + 2, 1 * 9 + 0 * 3 + 2] == x[0, 1, 0, 3]
        assert t[0, 0, 0] == 0.0  # zero padding

    def test_token_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 3)))
        p1 = Tensor(rng.normal(size=(1, 12, 18)))
        assert check_gradients(lambda t: F.sum(F.mul(F.unfold_tokens(t, 3), p1)), x) < 1e-4
        tok = Tensor(rng.normal(size=(1, 12, 18)))
        p2 = Tensor(rng.normal(size=(1, 2, 4, 3)))
        assert check_gradients(lambda t: F.sum(F.mul(F.fold_tokens(t, 2, 4, 3, 3), p2)), tok) < 1e-4

    def test_reshape_permute_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        p = Tensor(rng.normal(size=(4, 2, 3)))
        f = lambda t: F.sum(F.mul(F.permute(F.reshape(t, (2, 12)), (1, 0)), F.reshape(p, (12, 2))))  # noqa
        assert check_gradients(f, x) < 1e-6


class TestMacCounter:
    def test_conv_and_linear_counts(self, rng):
        with F.count_macs() as c:
            F.conv2d(Tensor(rng.normal(size=(1, 32, 100, 100))), Tensor(rng.normal(size=(32, 32, 3, 3))),
                     padding=1)
            F.linear(Tensor(rng.normal(size=(7, 5))), Tensor(rng.normal(size=(3, 5))))
            F.matmul(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4, 5))))
        assert c["conv"] == 92_160_000
        assert c["linear"] == 7 * 5 * 3
        assert c["matmul"] == 2 * 3 * 4 * 5
