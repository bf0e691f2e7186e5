import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqphon import tensor as tt
from vqphon.gradcheck import check_gradients
from vqphon.tensor import (
    DimensionError,
    Tensor,
    conv1d,
    glu,
    layer_norm,
    leaky_relu,
    no_grad,
    sigmoid,
    sqrt,
    stop_gradient,
    straight_through,
)


def conv1d_loop_oracle(x, w, b):
    """Triple-nested-loop direct same-padded convolution."""
    B, c_in, T = x.shape
    c_out, _, k = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    out = np.zeros((B, c_out, T))
    for bi in range(B):
        for o in range(c_out):
            for t in range(T):
                acc = 0.0
                for c in range(c_in):
                    for j in range(k):
                        acc += xp[bi, c, t + j] * w[o, c, j]
                out[bi, o, t] = acc + b[o]
    return out


class TestConv1d:
    def test_identity_kernel(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
        w = Tensor(np.array([[[1.0]]]))
        b = Tensor(np.zeros(1))
        y = conv1d(x, w, b)
        assert np.array_equal(y.data, x.data)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5))
        w = rng.standard_normal((3, 2, 3))
        b = rng.standard_normal(3)
        y = conv1d(Tensor(x), Tensor(w), Tensor(b))
        expect = conv1d_loop_oracle(x, w, b)
        assert np.max(np.abs(y.data - expect)) < 1e-12

    def test_preserves_time_length(self, rng):
        for T in (1, 2, 7, 33):
            x = Tensor(rng.standard_normal((2, 3, T)))
            w = Tensor(rng.standard_normal((4, 3, 5)))
            y = conv1d(x, w, Tensor(np.zeros(4)))
            assert y.shape == (2, 4, T)

    def test_gradients_match_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True, name="x")
        w = Tensor(rng.standard_normal((4, 3, 3)) * 0.5, requires_grad=True, name="w")
        b = Tensor(rng.standard_normal(4), requires_grad=True, name="b")
        check_gradients(lambda: conv1d(x, w, b).mean(), [x, w, b], rel_tol=1e-6)

    def test_channel_mismatch_names_axis(self):
        x = Tensor(np.zeros((1, 3, 4)))
        w = Tensor(np.zeros((2, 5, 3)))
        with pytest.raises(DimensionError, match="channel axis"):
            conv1d(x, w, Tensor(np.zeros(2)))

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError, match="odd"):
            conv1d(Tensor(np.zeros((1, 1, 4))), Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros(1)))


class TestLeakyRelu:
    def test_definition(self):
        y = leaky_relu(Tensor(np.array([-1.0, 0.0, 2.0])), slope=0.2)
        assert np.allclose(y.data, [-0.2, 0.0, 2.0])

    def test_unit_slope_is_identity(self, rng):
        x = rng.standard_normal(17)
        y = leaky_relu(Tensor(x), slope=1.0)
        assert np.array_equal(y.data, x)

    def test_gradient(self, rng):
        # keep entries away from the kink at 0
        x = Tensor(np.sign(rng.standard_normal(24)) * (0.1 + np.abs(rng.standard_normal(24))),
                   requires_grad=True)
        check_gradients(lambda: leaky_relu(x, 0.2).mean(), [x], rel_tol=1e-6)


class TestGlu:
    def test_zero_gate_halves_content(self, rng):
        a = rng.standard_normal((1, 2, 4))
        x = np.concatenate([a, np.zeros_like(a)], axis=1)
        y = glu(Tensor(x))
        assert np.allclose(y.data, 0.5 * a)

    def test_zero_content_gives_zero(self, rng):
        b = rng.standard_normal((1, 2, 4))
        x = np.concatenate([np.zeros_like(b), b], axis=1)
        y = glu(Tensor(x))
        assert np.all(y.data == 0.0)

    def test_odd_channels_rejected(self):
        with pytest.raises(DimensionError, match="even"):
            glu(Tensor(np.zeros((1, 3, 4))))

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
        check_gradients(lambda: glu(x).mean(), [x], rel_tol=1e-6)


class TestLayerNorm:
    def test_constant_input_gives_zero(self):
        x = Tensor(np.full((2, 5, 3), 7.25))
        y = layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        assert np.allclose(y.data, 0.0)

    def test_normalizes_per_position(self, rng):
        x = Tensor(rng.standard_normal((2, 16, 7)) * 3 + 1)
        y = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        mean = y.data.mean(axis=1)
        std = y.data.std(axis=1)
        assert np.max(np.abs(mean)) < 1e-10
        assert np.max(np.abs(std - 1.0)) < 1e-3

    def test_gradient_including_affine(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 4)), requires_grad=True, name="x")
        gamma = Tensor(1.0 + 0.1 * rng.standard_normal(6), requires_grad=True, name="gamma")
        beta = Tensor(0.1 * rng.standard_normal(6), requires_grad=True, name="beta")
        check_gradients(lambda: layer_norm(x, gamma, beta).mean(), [x, gamma, beta], rel_tol=1e-5)


class TestStopGradient:
    def test_forward_identity_bits(self, rng):
        x = Tensor(rng.standard_normal(9), requires_grad=True)
        y = stop_gradient(x)
        assert np.array_equal(y.data, x.data)

    def test_blocks_gradient(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        stop_gradient(x).sum().backward()
        assert x.grad is None or np.all(x.grad == 0.0)

    def test_product_with_detached_factor(self, rng):
        # d/dx sum(sg(x) * x) = sg(x) = x
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        (stop_gradient(x) * x).sum().backward()
        assert np.allclose(x.grad, x.data)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_composite_chain_matches_fd(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 5)), requires_grad=True, name="x")
        w = Tensor(rng.standard_normal((4, 3, 3)) * 0.4, requires_grad=True, name="w")
        b = Tensor(np.zeros(4), requires_grad=True, name="b")
        gamma = Tensor(np.ones(4), requires_grad=True, name="gamma")
        beta = Tensor(np.zeros(4), requires_grad=True, name="beta")

        def f():
            return layer_norm(leaky_relu(conv1d(x, w, b), 0.2), gamma, beta).mean()

        check_gradients(f, [x, w, b, gamma, beta], rel_tol=1e-5)

    def test_repeated_backward_accumulates(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        loss = x.sum()
        loss.backward()
        loss.backward()
        assert np.array_equal(x.grad, 2.0 * np.ones(4))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()

    def test_no_grad_blocks_recording(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        with no_grad():
            y = (x * 3.0).sum()
        assert y._backward is None
        y.backward()
        assert x.grad is None

    def test_frozen_decided_at_forward_time(self, rng):
        # freeze during forward, backward after restore: still no gradient
        w = Tensor(rng.standard_normal(4), requires_grad=True)
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        with tt.frozen([w]):
            y = (w * x).sum()
        y.backward()
        assert w.grad is None
        assert np.allclose(x.grad, w.data)


class TestMisc:
    def test_sigmoid_gradient(self, rng):
        x = Tensor(rng.standard_normal(11), requires_grad=True)
        check_gradients(lambda: sigmoid(x).mean(), [x], rel_tol=1e-6)

    def test_sqrt_gradient(self, rng):
        x = Tensor(1.0 + np.abs(rng.standard_normal(7)), requires_grad=True)
        check_gradients(lambda: sqrt(x).mean(), [x], rel_tol=1e-6)

    def test_abs_gradient(self, rng):
        x = Tensor(np.sign(rng.standard_normal(9)) * (0.2 + np.abs(rng.standard_normal(9))),
                   requires_grad=True)
        check_gradients(lambda: x.abs().mean(), [x], rel_tol=1e-6)

    def test_mean_axes_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        check_gradients(lambda: x.mean(axes=(1, 2)).sum(), [x], rel_tol=1e-6)

    def test_concat_and_broadcast_gradients(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        v = Tensor(rng.standard_normal(2), requires_grad=True)

        def f():
            bc = tt.broadcast_channels(v, 2, 4)
            return tt.concat_channels(a, bc).mean()

        check_gradients(f, [a, v], rel_tol=1e-6)

    def test_gather_rows_scatter_adds(self, rng):
        m = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        idx = np.array([[0, 2], [2, 4]])
        tt.gather_rows(m, idx).sum().backward()
        expect = np.zeros((5, 3))
        for i in idx.ravel():
            expect[i] += 1.0
        assert np.array_equal(m.grad, expect)

    def test_straight_through_forward_bits_and_identity_grad(self, rng):
        z = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
        codes = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
        out = straight_through(z, codes)
        assert np.array_equal(out.data, codes.data)
        (out * 2.0).sum().backward()
        assert np.allclose(z.grad, 2.0)
        assert codes.grad is None


class TestDeterminism:
    def test_replay_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(777)
            x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
            b = Tensor(rng.standard_normal(4), requires_grad=True)
            loss = layer_norm(leaky_relu(conv1d(x, w, b)),
                              Tensor(np.ones(4)), Tensor(np.zeros(4))).mean()
            loss.backward()
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


@settings(max_examples=30, deadline=None)
@given(
    b=st.integers(1, 3),
    c_in=st.integers(1, 4),
    c_out=st.integers(1, 4),
    t=st.integers(1, 9),
    k=st.sampled_from([1, 3, 5]),
    seed=st.integers(0, 2**32 - 1),
)
def test_conv1d_matches_loop_oracle_property(b, c_in, c_out, t, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c_in, t))
    w = rng.standard_normal((c_out, c_in, k))
    bias = rng.standard_normal(c_out)
    y = conv1d(Tensor(x), Tensor(w), Tensor(bias))
    assert np.max(np.abs(y.data - conv1d_loop_oracle(x, w, bias))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_stop_gradient_identity_property(seed, n):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(n), requires_grad=True)
    y = stop_gradient(x)
    assert np.array_equal(y.data, x.data)
    (y * x).sum().backward()
    assert np.allclose(x.grad, x.data)


class TestAdam:
    def test_zero_gradient_first_step_unchanged(self):
        from vqphon.optim import AdamState, adam_step

        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamState.for_params([p], lr=0.1)
        adam_step([p], [np.zeros(2)], state)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_hand_computed(self):
        from vqphon.optim import AdamState, adam_step

        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState.for_params([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        adam_step([p], [np.array([1.0])], state)
        # hand-computed: m=0.1, v=0.001, mhat=1, vhat=1 -> delta = lr/(1+eps)
        expect = -lr * 1.0 / (np.sqrt(1.0) + eps)
        assert abs(p.data[0] - expect) < 1e-15
        assert abs(p.data[0] + 0.1) < 1e-7

    def test_constant_gradient_descends_monotonically(self):
        from vqphon.optim import AdamState, adam_step

        p = Tensor(np.array([0.5]), requires_grad=True)
        state = AdamState.for_params([p], lr=0.01)
        values = [p.data[0]]
        for _ in range(20):
            adam_step([p], [np.array([1.0])], state)
            values.append(p.data[0])
        diffs = np.diff(values)
        assert np.all(diffs < 0)

    def test_shape_mismatch_rejected(self):
        from vqphon.optim import AdamState, adam_step

        p = Tensor(np.zeros(3), requires_grad=True)
        state = AdamState.for_params([p])
        with pytest.raises(ValueError, match="shape"):
            adam_step([p], [np.zeros(4)], state)
