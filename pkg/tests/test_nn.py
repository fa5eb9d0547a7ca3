import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distiv import nn
from distiv.errors import ConfigurationError, InputError, NumericalError, ShapeError


def _sum_sq_loss(x):
    def loss(ms):
        out = nn.mlp_forward(ms[0], x)
        return nn.mean(nn.mul(out, out))

    return loss


class TestInit:
    def test_same_seed_is_bit_identical(self):
        a = nn.init_mlp([3, 2], rng=7)
        b = nn.init_mlp([3, 2], rng=7)
        for p, q in zip(a.params(), b.params()):
            assert p.tobytes() == q.tobytes()

    def test_too_few_layers(self):
        with pytest.raises(ConfigurationError):
            nn.init_mlp([1])

    def test_nonpositive_dims(self):
        with pytest.raises(ConfigurationError):
            nn.init_mlp([3, 0, 1])

    def test_default_architecture_shapes(self):
        net = nn.init_mlp([4, 100, 100, 100, 1], rng=0)
        assert len(net.weights) == 4
        assert net.weights[0].shape == (100, 4)
        assert net.weights[-1].shape == (1, 100)
        assert [b.shape for b in net.biases] == [(100,), (100,), (100,), (1,)]

    def test_uniform_fan_in_range_and_zero_bias(self):
        net = nn.init_mlp([25, 40, 3], rng=1)
        for w in net.weights:
            bound = np.sqrt(1.0 / w.shape[1])
            assert np.all(np.abs(w) <= bound)
            # a fan-in scaled uniform has standard deviation bound / sqrt(3)
            assert abs(w.std() - bound / np.sqrt(3)) < 0.2 * bound
        for b in net.biases:
            np.testing.assert_array_equal(b, 0.0)

    def test_weight_shape_validation(self):
        with pytest.raises(ShapeError):
            nn.Mlp((2, 3), (np.zeros((2, 3)),), (np.zeros(3),))


class TestForward:
    def test_identity_layer(self):
        net = nn.Mlp((3, 3), (np.eye(3),), (np.zeros(3),), "identity")
        x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]])
        np.testing.assert_array_equal(nn.mlp_forward(net, x), x)

    def test_zero_weights_give_last_bias(self):
        net = nn.Mlp((2, 4, 1), (np.zeros((4, 2)), np.zeros((1, 4))), (np.ones(4), np.array([2.5])))
        out = nn.mlp_forward(net, np.random.default_rng(0).normal(size=(5, 2)))
        np.testing.assert_array_equal(out, 2.5)

    def test_hand_unrolled_two_layer(self):
        net = nn.init_mlp([3, 5, 2], rng=3)
        net = net.with_params(net.params()[:2] + [np.linspace(-1, 1, 5), np.array([0.3, -0.2])])
        x = np.array([0.4, -1.2, 2.0])
        hidden = np.maximum(net.weights[0] @ x + net.biases[0], 0.0)
        expected = net.weights[1] @ hidden + net.biases[1]
        np.testing.assert_allclose(nn.mlp_forward(net, x[None, :])[0], expected, atol=1e-12)

    def test_softplus_hidden(self):
        net = nn.init_mlp([2, 3, 1], "softplus", rng=4)
        x = np.array([[0.5, -0.5]])
        hidden = np.logaddexp(0.0, net.weights[0] @ x[0])
        np.testing.assert_allclose(nn.mlp_forward(net, x)[0], net.weights[1] @ hidden, atol=1e-12)

    def test_shape_mismatch(self):
        net = nn.init_mlp([3, 2], rng=0)
        with pytest.raises(ShapeError):
            nn.mlp_forward(net, np.zeros((4, 2)))

    def test_nonfinite_input(self):
        net = nn.init_mlp([2, 2], rng=0)
        with pytest.raises(InputError):
            nn.mlp_forward(net, np.array([[np.nan, 1.0]]))

    def test_float32_preserved(self):
        net = nn.init_mlp([2, 3, 1], rng=0)
        net = net.with_params([p.astype(np.float32) for p in net.params()])
        out = nn.mlp_forward(net, np.ones((2, 2), dtype=np.float32))
        assert out.dtype == np.float32


class TestGradients:
    def test_closed_form_linear_net(self):
        w = np.array([[1.0, -2.0], [0.5, 3.0]])
        b = np.array([0.1, -0.4])
        net = nn.Mlp((2, 2), (w,), (b,), "identity")
        x = np.array([0.7, -1.3])

        def loss(ms):
            out = nn.mlp_forward(ms[0], x[None, :])
            return nn.mul(nn.mean(nn.mul(out, out)), 2.0)  # sum of squares over 2 outputs

        bundle = nn.value_and_grad(loss, [net])
        r = w @ x + b
        np.testing.assert_allclose(bundle.loss_value, np.sum(r**2))
        np.testing.assert_allclose(bundle.grads[0][0], 2.0 * np.outer(r, x), atol=1e-12)
        np.testing.assert_allclose(bundle.grads[0][1], 2.0 * r, atol=1e-12)

    def test_constant_loss_has_zero_gradients(self):
        net = nn.init_mlp([3, 4, 1], rng=0)
        bundle = nn.value_and_grad(lambda ms: nn.Tensor(np.array(1.5)), [net])
        assert bundle.loss_value == 1.5
        for g in bundle.grads[0]:
            np.testing.assert_array_equal(g, 0.0)

    def test_nonfinite_loss_raises_with_value(self):
        net = nn.init_mlp([1, 1], rng=0)
        with pytest.raises(NumericalError) as info:
            nn.value_and_grad(lambda ms: nn.mul(nn.mean(nn.mlp_forward(ms[0], np.ones((1, 1)))), np.inf), [net])
        assert not np.isfinite(info.value.value)

    def test_value_and_grad_is_pure(self):
        net = nn.init_mlp([3, 6, 2], rng=2)
        before = [p.copy() for p in net.params()]
        nn.value_and_grad(_sum_sq_loss(np.ones((4, 3))), [net])
        for p, q in zip(before, net.params()):
            np.testing.assert_array_equal(p, q)

    def test_has_aux(self):
        net = nn.init_mlp([2, 1], rng=0)
        bundle = nn.value_and_grad(lambda ms: (nn.mean(nn.mlp_forward(ms[0], np.ones((3, 2)))), "tag"), [net], has_aux=True)
        assert bundle.aux == "tag"

    def test_quadratic_tiny_net_fd(self):
        net = nn.init_mlp([2, 2], "identity", rng=5)
        err = nn.finite_diff_check(_sum_sq_loss(np.array([[0.3, -0.8], [1.1, 0.2]])), [net])
        assert err < 1e-6

    def test_identity_net_linear_loss_fd(self):
        net = nn.init_mlp([3, 1], "identity", rng=6)
        err = nn.finite_diff_check(lambda ms: nn.mean(nn.mlp_forward(ms[0], np.ones((2, 3)))), [net])
        assert err < 1e-8

    def test_relu_net_random_loss_fd(self):
        rng = np.random.default_rng(11)
        net = nn.init_mlp([3, 8, 8, 2], rng=rng)
        x = rng.normal(size=(6, 3))
        target = rng.normal(size=(6, 2))

        def loss(ms):
            return nn.mean(nn.row_norm(nn.sub(nn.mlp_forward(ms[0], x), target)))

        assert nn.finite_diff_check(loss, [net]) < 1e-4

    def test_multiple_models_and_concat(self):
        rng = np.random.default_rng(12)
        a = nn.init_mlp([2, 4, 1], "softplus", rng=rng)
        b = nn.init_mlp([3, 3, 2], "softplus", rng=rng)
        x = rng.normal(size=(5, 2))
        e = rng.normal(size=(5, 2))

        def loss(ms):
            h = nn.mlp_forward(ms[0], x)
            out = nn.mlp_forward(ms[1], nn.concat([h, e]))
            return nn.mean(nn.row_norm(nn.take_cols(out, [1, 0])))

        assert nn.finite_diff_check(loss, [a, b]) < 1e-6

    def test_row_norm_zero_row_subgradient(self):
        x = nn.Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]))
        out = nn.mean(nn.row_norm(x))
        out.backward()
        np.testing.assert_allclose(x.grad, [[0.0, 0.0], [0.3, 0.4]])

    def test_straight_through_identity_gradient(self):
        x = nn.Tensor(np.array([[0.2], [0.9]]))
        out = nn.straight_through_step(x, 0.5, 0.0, 1.0)
        np.testing.assert_array_equal(out.value, [[0.0], [1.0]])
        nn.mean(nn.mul(out, 3.0)).backward()
        np.testing.assert_allclose(x.grad, [[1.5], [1.5]])

    def test_finite_diff_rejects_bad_step(self):
        net = nn.init_mlp([1, 1], rng=0)
        with pytest.raises(ConfigurationError):
            nn.finite_diff_check(_sum_sq_loss(np.ones((1, 1))), [net], h=0.0)

    @settings(max_examples=15, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        widths=st.lists(st.integers(1, 16), min_size=0, max_size=2),
        activation=st.sampled_from(["softplus", "identity", "relu"]),
    )
    def test_property_matches_finite_differences(self, seed, widths, activation):
        rng = np.random.default_rng(seed)
        dims = [3, *widths, 2]
        net = nn.init_mlp(dims, activation, rng=rng)
        net = net.with_params(net.params()[: len(dims) - 1] + [rng.normal(size=b.shape) for b in net.biases])
        x = rng.normal(size=(4, 3))
        if activation == "relu":
            # keep pre-activations away from the kink
            h = x
            for w, b in zip(net.weights[:-1], net.biases[:-1]):
                pre = h @ w.T + b
                if np.min(np.abs(pre)) < 1e-3:
                    return
                h = np.maximum(pre, 0.0)
        assert nn.finite_diff_check(_sum_sq_loss(x), [net]) < 1e-4


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        net = nn.init_mlp([2, 3, 1], rng=0)
        state = nn.AdamState.for_models([net])
        grads = nn.GradBundle(0.0, [[np.zeros_like(p) for p in net.params()]])
        (new,), state = nn.adam_step([net], grads, state, 1e-3)
        for p, q in zip(net.params(), new.params()):
            np.testing.assert_array_equal(p, q)
        assert state.step_count == 1

    def test_scalar_hand_update(self):
        net = nn.Mlp((1, 1), (np.array([[2.0]]),), (np.array([0.0]),), "identity")
        state = nn.AdamState.for_models([net])
        grads = nn.GradBundle(0.0, [[np.array([[1.0]]), np.array([0.0])]])
        (new,), state = nn.adam_step([net], grads, state, 0.1)
        np.testing.assert_allclose(new.weights[0][0, 0], 2.0 - 0.1 / (1.0 + 1e-8), rtol=0, atol=1e-15)
        np.testing.assert_allclose(state.first_moment[0], [[0.1]])
        np.testing.assert_allclose(state.second_moment[0], [[0.001]])

    def test_step_count_increments(self):
        net = nn.init_mlp([2, 1], rng=0)
        state = nn.AdamState.for_models([net])
        grads = nn.GradBundle(0.0, [[np.ones_like(p) for p in net.params()]])
        models = [net]
        for _ in range(2):
            models, state = nn.adam_step(models, grads, state, 0.01)
        assert state.step_count == 2
        assert all(np.all(m2 >= 0) for m2 in state.second_moment)

    def test_shape_mismatch(self):
        net = nn.init_mlp([2, 1], rng=0)
        state = nn.AdamState.for_models([net])
        with pytest.raises(ShapeError):
            nn.adam_step([net], nn.GradBundle(0.0, [[np.ones((3, 3)), np.ones(1)]]), state, 0.1)

    def test_nonpositive_lr(self):
        net = nn.init_mlp([2, 1], rng=0)
        with pytest.raises(ConfigurationError):
            nn.adam_step([net], nn.GradBundle(0.0, [[np.zeros_like(p) for p in net.params()]]), nn.AdamState.for_models([net]), 0.0)

    def test_minimizes_quadratic(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 3))
        w_true = np.array([[1.0, -2.0, 0.5]])
        y = x @ w_true.T
        net = nn.init_mlp([3, 1], "identity", rng=1)

        def loss(ms):
            r = nn.sub(nn.mlp_forward(ms[0], x), y)
            return nn.mean(nn.mul(r, r))

        models, state = [net], nn.AdamState.for_models([net])
        for _ in range(2000):
            models, state = nn.adam_step(models, nn.value_and_grad(loss, models), state, 0.05)
        np.testing.assert_allclose(models[0].weights[0], w_true, atol=1e-3)
