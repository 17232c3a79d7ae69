import math

import numpy as np
from django.test import SimpleTestCase

from grasping import nn_core as nn
from grasping.exceptions import ConfigError, DimensionError, TrainingError, UsageError

SEEDS = range(20)
TOLERANCE = 1e-3


def f64(rng, *shape):
    return nn.tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


class LinearTests(SimpleTestCase):
    def test_zero_input_passes_bias(self):
        rng = np.random.default_rng(0)
        out = nn.linear(nn.tensor(np.zeros((1, 3))), nn.tensor(rng.standard_normal((3, 2))), nn.tensor([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_identity_weight(self):
        out = nn.linear(nn.tensor([[3.0, 4.0]]), nn.tensor(np.eye(2)), nn.tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            nn.linear(nn.tensor(np.zeros((2, 3))), nn.tensor(np.zeros((4, 2))))
        self.assertIn('(2, 3)', str(ctx.exception))
        self.assertIn('(4, 2)', str(ctx.exception))

    def test_gradients_match_finite_differences(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            x, w, b = f64(rng, 2, 3), f64(rng, 3, 4), f64(rng, 4)
            err = nn.gradcheck(lambda x, w, b: nn.linear(x, w, b).sum(), [x, w, b])
            self.assertLess(err, TOLERANCE, f"seed {seed}")


class Conv2dTests(SimpleTestCase):
    def test_unit_kernel_is_identity(self):
        x = nn.tensor(np.random.default_rng(1).standard_normal((2, 1, 8, 6)))
        out = nn.conv2d(x, nn.tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_ones_kernel_counts_neighbours(self):
        out = nn.conv2d(nn.tensor(np.ones((1, 1, 8, 6))), nn.tensor(np.ones((1, 1, 3, 3))), padding=1)
        self.assertEqual(out.shape, (1, 1, 8, 6))
        np.testing.assert_array_equal(out.data[0, 0, 1:-1, 1:-1], 9.0)
        self.assertEqual(out.data[0, 0, 0, 0], 4.0)

    def test_output_size_with_stride(self):
        out = nn.conv2d(nn.tensor(np.zeros((1, 2, 8, 6))), nn.tensor(np.zeros((3, 2, 3, 3))), stride=2, padding=1)
        self.assertEqual(out.shape, (1, 3, 4, 3))

    def test_kernel_larger_than_input_rejected(self):
        with self.assertRaises(DimensionError):
            nn.conv2d(nn.tensor(np.zeros((1, 1, 2, 2))), nn.tensor(np.zeros((1, 1, 3, 3))))

    def test_gradients_match_finite_differences(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            stride = 1 + seed % 2
            x, k, b = f64(rng, 2, 2, 5, 4), f64(rng, 3, 2, 3, 3), f64(rng, 3)
            weights = rng.standard_normal(nn.conv2d(x, k, b, stride=stride, padding=1).shape)
            err = nn.gradcheck(lambda x, k, b: (nn.conv2d(x, k, b, stride=stride, padding=1) * weights).sum(),
                               [x, k, b])
            self.assertLess(err, TOLERANCE, f"seed {seed}")


class BatchNormTests(SimpleTestCase):
    def setUp(self):
        self.gamma = nn.tensor(np.ones(3), requires_grad=True)
        self.beta = nn.tensor([0.5, -1.0, 2.0], requires_grad=True)
        self.mean = np.zeros(3, dtype=np.float32)
        self.var = np.ones(3, dtype=np.float32)

    def test_constant_input_gives_beta(self):
        out = nn.batchnorm2d(nn.tensor(np.full((4, 3, 2, 2), 7.0)), self.gamma, self.beta,
                             self.mean, self.var, training=True)
        for channel, value in enumerate(self.beta.data):
            np.testing.assert_allclose(out.data[:, channel], value, atol=1e-6)

    def test_standardized_input_passes_through(self):
        rng = np.random.default_rng(2)
        raw = rng.standard_normal((8, 3, 4, 4))
        raw = (raw - raw.mean(axis=(0, 2, 3), keepdims=True)) / raw.std(axis=(0, 2, 3), keepdims=True)
        beta = nn.tensor(np.zeros(3))
        out = nn.batchnorm2d(nn.tensor(raw), self.gamma, beta, self.mean, self.var, training=True)
        self.assertLess(np.max(np.abs(out.data - raw)), 1e-4)

    def test_training_batch_moments(self):
        rng = np.random.default_rng(3)
        x = nn.tensor(rng.normal(5.0, 3.0, size=(6, 3, 4, 4)))
        out = nn.batchnorm2d(x, self.gamma, nn.tensor(np.zeros(3)), self.mean, self.var, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_momentum(self):
        x = nn.tensor(np.full((2, 3, 1, 1), 10.0))
        nn.batchnorm2d(x, self.gamma, self.beta, self.mean, self.var, training=True)
        np.testing.assert_allclose(self.mean, 1.0, rtol=1e-6)
        np.testing.assert_allclose(self.var, 0.9, rtol=1e-6)

    def test_eval_mode_uses_running_stats(self):
        self.mean[:] = 1.0
        self.var[:] = 4.0
        out = nn.batchnorm2d(nn.tensor(np.full((1, 3, 1, 1), 3.0)), self.gamma, nn.tensor(np.zeros(3)),
                             self.mean, self.var, training=False)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-5)

    def test_single_sample_training_rejected(self):
        with self.assertRaises(UsageError):
            nn.batchnorm2d(nn.tensor(np.zeros((1, 3, 2, 2))), self.gamma, self.beta, self.mean, self.var, True)

    def test_gradients_match_finite_differences(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            x, gamma, beta = f64(rng, 3, 2, 3, 2), f64(rng, 2), f64(rng, 2)
            mean, var = np.zeros(2), np.ones(2)
            weights = rng.standard_normal(x.shape)
            training = seed % 2 == 0
            err = nn.gradcheck(
                lambda x, g, b: (nn.batchnorm2d(x, g, b, mean, var, training) * weights).sum(), [x, gamma, beta])
            self.assertLess(err, TOLERANCE, f"seed {seed}")


class LayerNormTests(SimpleTestCase):
    def test_constant_vector_gives_beta(self):
        out = nn.layernorm(nn.tensor(np.full((2, 5), 3.0)), nn.tensor(np.ones(5)), nn.tensor(np.arange(5.0)))
        np.testing.assert_allclose(out.data, np.tile(np.arange(5.0), (2, 1)), atol=1e-6)

    def test_rows_are_standardized(self):
        x = nn.tensor(np.random.default_rng(4).normal(2.0, 5.0, size=(4, 32)), dtype=np.float64)
        out = nn.layernorm(x, nn.tensor(np.ones(32), dtype=np.float64), nn.tensor(np.zeros(32), dtype=np.float64))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-5)

    def test_gradients_match_finite_differences(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            x, gamma, beta = f64(rng, 2, 3, 6), f64(rng, 6), f64(rng, 6)
            weights = rng.standard_normal(x.shape)
            err = nn.gradcheck(lambda x, g, b: (nn.layernorm(x, g, b) * weights).sum(), [x, gamma, beta])
            self.assertLess(err, TOLERANCE, f"seed {seed}")


class AttentionTests(SimpleTestCase):
    def build(self, seed, dim=8, heads=2):
        return nn.MultiHeadAttention(dim, heads, np.random.default_rng(seed)).to(np.float64)

    def test_single_context_token_takes_full_weight(self):
        attn = self.build(0)
        rng = np.random.default_rng(1)
        query = nn.tensor(rng.standard_normal((3, 8)), dtype=np.float64)
        context = nn.tensor(rng.standard_normal((1, 8)), dtype=np.float64)
        out, weights = attn(query, context, return_weights=True)
        np.testing.assert_array_equal(weights.data, 1.0)
        expected = attn.o(attn.v(context)).data
        np.testing.assert_allclose(out.data, np.repeat(expected, 3, axis=0), atol=1e-12)

    def test_identical_context_gives_uniform_weights(self):
        attn = self.build(2)
        rng = np.random.default_rng(3)
        query = nn.tensor(rng.standard_normal((2, 4, 8)), dtype=np.float64)
        context = nn.tensor(np.tile(rng.standard_normal(8), (2, 5, 1)), dtype=np.float64)
        _, weights = attn(query, context, return_weights=True)
        np.testing.assert_allclose(weights.data, 0.2, atol=1e-12)

    def test_rows_of_weights_sum_to_one(self):
        attn = self.build(4)
        x = nn.tensor(np.random.default_rng(5).standard_normal((2, 6, 8)), dtype=np.float64)
        _, weights = attn(x, x, return_weights=True)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_heads_must_divide_width(self):
        with self.assertRaises(ConfigError):
            nn.MultiHeadAttention(10, 4, np.random.default_rng(0))

    def test_gradients_match_finite_differences(self):
        for seed in SEEDS:
            attn = self.build(seed)
            rng = np.random.default_rng(100 + seed)
            query, context = f64(rng, 3, 8), f64(rng, 4, 8)
            weights = rng.standard_normal((3, 8))
            err = nn.gradcheck(lambda *args: (attn(query, context) * weights).sum(),
                               [query, context] + attn.parameters())
            self.assertLess(err, TOLERANCE, f"seed {seed}")

    def test_key_bias_gradient_vanishes(self):
        # a shared shift of every score leaves the softmax unchanged
        attn = self.build(1)
        rng = np.random.default_rng(101)
        query, context = f64(rng, 3, 8), f64(rng, 4, 8)
        weights = rng.standard_normal((3, 8))

        def loss(*args):
            return (attn(query, context) * weights).sum()

        loss().backward()
        np.testing.assert_allclose(attn.k.bias.grad, 0.0, atol=1e-12)
        self.assertLess(nn.gradcheck(loss, [attn.k.bias]), TOLERANCE)


class ElementwiseTests(SimpleTestCase):
    def test_relu(self):
        np.testing.assert_array_equal(nn.relu(nn.tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_softmax_of_constant_row_is_uniform(self):
        out = nn.softmax(nn.tensor(np.full((2, 4), 3.0)), axis=-1)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_softmax_rows_non_negative_and_normalized(self):
        out = nn.softmax(nn.tensor(np.random.default_rng(6).normal(0, 10, size=(5, 7))), axis=1)
        self.assertTrue(np.all(out.data >= 0))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_gaussian_log_prob_at_mean(self):
        zero = nn.tensor(np.zeros((1, 2)), dtype=np.float64)
        out = nn.gaussian_log_prob(zero, zero, zero)
        self.assertAlmostEqual(out.item(), -math.log(2 * math.pi), places=12)

    def test_elementwise_gradients(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            x = nn.tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True, dtype=np.float64)
            y = f64(rng, 3, 4)

            def fn(x, y):
                mixed = (x.log() * y.tanh() + (y * 0.5).exp() / x + y.softplus() - x ** 2).clip(-50, 50)
                return (nn.softmax(mixed, axis=0) * y).sum() + nn.concat([x, y], axis=1).mean()

            self.assertLess(nn.gradcheck(fn, [x, y]), TOLERANCE, f"seed {seed}")

    def test_gaussian_log_prob_gradients(self):
        for seed in SEEDS:
            rng = np.random.default_rng(200 + seed)
            mean, sample = f64(rng, 4, 2), f64(rng, 4, 2)
            log_std = nn.tensor(rng.uniform(-1.0, 1.0, size=(4, 2)), requires_grad=True, dtype=np.float64)
            weights = rng.standard_normal(4)
            err = nn.gradcheck(lambda m, s, x: (nn.gaussian_log_prob(m, s, x) * weights).sum(),
                               [mean, log_std, sample])
            self.assertLess(err, TOLERANCE, f"seed {seed}")

    def test_minimum_routes_gradient_to_smaller(self):
        x = nn.tensor([1.0, 5.0], requires_grad=True)
        y = nn.tensor([3.0, 2.0], requires_grad=True)
        nn.minimum(x, y).sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])
        np.testing.assert_array_equal(y.grad, [0.0, 1.0])


class BackwardTests(SimpleTestCase):
    def test_gradients_accumulate_and_reset(self):
        rng = np.random.default_rng(7)
        w = nn.tensor(rng.standard_normal((3, 2)), requires_grad=True)
        x = nn.tensor(rng.standard_normal((4, 3)))
        (x @ w).tanh().sum().backward()
        first = w.grad.copy()
        (x @ w).tanh().sum().backward()
        np.testing.assert_allclose(w.grad, 2 * first, rtol=1e-6)
        w.zero_grad()
        (x @ w).tanh().sum().backward()
        np.testing.assert_array_equal(w.grad, first)

    def test_shared_subgraph_sums_paths(self):
        x = nn.tensor([3.0], requires_grad=True, dtype=np.float64)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_no_grad_records_nothing(self):
        x = nn.tensor([1.0], requires_grad=True)
        with nn.no_grad():
            y = x * 2
        self.assertFalse(y.requires_grad)
        with self.assertRaises(UsageError):
            y.backward()

    def test_non_scalar_backward_needs_gradient(self):
        x = nn.tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(UsageError):
            (x * 2).backward()


class AdamTests(SimpleTestCase):
    def test_zero_gradient_leaves_parameters(self):
        p = nn.Parameter([1.0, -2.0])
        state = nn.AdamState(learning_rate=0.1)
        nn.adam_step([('p', p)], {'p': np.zeros(2)}, state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        self.assertEqual(state.step_count, 1)

    def test_first_step_moves_by_learning_rate(self):
        p = nn.Parameter([0.0, 0.0], dtype=np.float64)
        nn.adam_step([('p', p)], {'p': np.array([3.0, -0.5])}, nn.AdamState(learning_rate=0.01))
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)

    def test_descends_quadratic(self):
        x = nn.Parameter([1.0], dtype=np.float64)
        optimizer = nn.Adam([('x', x)], learning_rate=0.1)
        for _ in range(100):
            optimizer.zero_grad()
            (x * x).sum().backward()
            optimizer.step()
        self.assertLess(abs(x.data[0]), 0.5)
        self.assertEqual(optimizer.state.step_count, 100)

    def test_non_finite_gradient_names_parameter(self):
        p = nn.Parameter([1.0])
        with self.assertRaises(TrainingError) as ctx:
            nn.adam_step([('head.bias', p)], {'head.bias': np.array([np.nan])}, nn.AdamState())
        self.assertEqual(ctx.exception.name, 'head.bias')
        np.testing.assert_array_equal(p.data, [1.0])


class ModuleTests(SimpleTestCase):
    def test_state_dict_round_trip(self):
        source = nn.BatchNorm2d(3)
        source.weight.data[:] = [1.0, 2.0, 3.0]
        source._buffers['running_mean'][:] = 0.25
        target = nn.BatchNorm2d(3)
        target.load_state_dict(source.state_dict())
        for (name, a), (_, b) in zip(source.state_dict().items(), target.state_dict().items()):
            np.testing.assert_array_equal(a, b, err_msg=name)
