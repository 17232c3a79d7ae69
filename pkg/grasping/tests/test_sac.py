import csv
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy.stats import chisquare

from grasping import nn_core as nn
from grasping import sac
from grasping.env import OBSERVATION_SHAPE, EnvConfig, VectorGraspEnv
from grasping.exceptions import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    TrainingError,
    UnknownParameterError,
    UsageError,
)
from grasping.policy import PolicyConfig
from grasping.sac import Batch, ReplayBuffer, SacAgent, TrainConfig

SMALL = PolicyConfig(token_dim=8, mlp_dim=16, depth=1, num_heads=4, projection_channels=(4, 8),
                     head_hidden=(16,), critic_hidden=(16,))
SMALL_CNN = PolicyConfig(arch='cnn', cnn_channels=(4, 4), cnn_hidden=(8,), critic_hidden=(8,))


def observations(batch, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.2, 0.2, size=(batch,) + OBSERVATION_SHAPE).astype(np.float32)


class RecordingVectorEnv(VectorGraspEnv):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.outcomes = []

    def step(self, actions):
        stepped = super().step(actions)
        self.outcomes.extend(stepped.outcomes)
        return stepped


class CriticTargetTests(SimpleTestCase):
    def test_bootstrapped_target(self):
        y = sac.critic_target([1.0], [0.0], np.array([2.0]), np.array([3.0]), [-1.0], 0.99, 0.5)
        self.assertAlmostEqual(y[0], 1.0 + 0.99 * 2.5, places=12)

    def test_success_cuts_bootstrap(self):
        y = sac.critic_target([1.0], [1.0], np.array([2.0]), np.array([3.0]), [-1.0], 0.99, 0.5)
        self.assertEqual(y[0], 1.0)

    def test_ignore_done_keeps_bootstrap(self):
        y = sac.critic_target([1.0], [1.0], np.array([2.0]), np.array([3.0]), [-1.0], 0.99, 0.5,
                              ignore_done=True)
        self.assertAlmostEqual(y[0], 3.475, places=12)

    def test_minimum_of_twin_critics(self):
        y = sac.critic_target([0.0, 0.0], [0.0, 0.0], np.array([5.0, -1.0]), np.array([4.0, 2.0]),
                              [0.0, 0.0], 0.5, 1.0)
        np.testing.assert_allclose(y, [2.0, -0.5])


class PolyakTests(SimpleTestCase):
    def modules(self):
        rng = np.random.default_rng(0)
        return nn.Linear(3, 2, rng), nn.Linear(3, 2, rng)

    def test_full_copy(self):
        target, source = self.modules()
        sac.polyak_update(target, source, 1.0)
        np.testing.assert_array_equal(target.weight.data, source.weight.data)

    def test_zero_rate_keeps_target(self):
        target, source = self.modules()
        before = target.weight.data.copy()
        sac.polyak_update(target, source, 0.0)
        np.testing.assert_array_equal(target.weight.data, before)

    def test_partial_mix(self):
        target, source = self.modules()
        expected = 0.7 * target.weight.data + 0.3 * source.weight.data
        sac.polyak_update(target, source, 0.3)
        np.testing.assert_allclose(target.weight.data, expected, rtol=1e-6)

    def test_buffers_are_mixed(self):
        target, source = nn.BatchNorm2d(2), nn.BatchNorm2d(2)
        source._buffers['running_mean'][:] = 1.0
        sac.polyak_update(target, source, 0.5)
        np.testing.assert_allclose(target._buffers['running_mean'], 0.5)


class ReplayBufferTests(SimpleTestCase):
    def filled(self, count, capacity):
        buffer = ReplayBuffer(capacity, obs_shape=(1,))
        for i in range(count):
            buffer.push([i], [0.0, 0.0], float(i), [i + 1], i % 2 == 0)
        return buffer

    def test_ring_overwrites_oldest(self):
        buffer = self.filled(5, 3)
        self.assertEqual(len(buffer), 3)
        self.assertEqual(sorted(buffer.obs[:, 0].tolist()), [2.0, 3.0, 4.0])

    def test_uniform_sampling(self):
        buffer = self.filled(1000, 1000)
        rng = np.random.default_rng(0)
        counts = np.zeros(1000)
        for _ in range(1000):
            idx = buffer.sample_indices(100, rng)
            self.assertEqual(len(set(idx.tolist())), 100)
            counts += np.bincount(idx, minlength=1000)
        self.assertEqual(counts.sum(), 100000)
        self.assertGreater(chisquare(counts).pvalue, 0.001)

    def test_sample_fields_line_up(self):
        batch = self.filled(10, 10).sample(4, np.random.default_rng(1))
        np.testing.assert_array_equal(batch.next_obs[:, 0], batch.obs[:, 0] + 1)
        np.testing.assert_array_equal(batch.rewards, batch.obs[:, 0])

    def test_oversized_batch_rejected(self):
        with self.assertRaises(UsageError):
            self.filled(3, 10).sample(4, np.random.default_rng(0))


class SacUpdateTests(SimpleTestCase):
    def single_transition(self, reward=1.0, copies=4):
        obs = np.repeat(observations(1), copies, axis=0)
        actions = np.tile([0.2, -0.3], (copies, 1)).astype(np.float32)
        return Batch(obs, actions, np.full(copies, reward, dtype=np.float32), obs.copy(),
                     np.ones(copies, dtype=np.float32))

    def test_critic_fits_terminal_reward(self):
        agent = SacAgent(SMALL, TrainConfig(learning_rate=1e-3), seed=0)
        batch = self.single_transition()
        losses = None
        for _ in range(500):
            losses = agent.update(batch)
            if losses.critic < 1e-3:
                break
        self.assertLess(losses.critic, 1e-3)
        self.assertEqual(agent.update_count, agent.critic_optimizer.state.step_count)

    def test_targets_track_critics(self):
        agent = SacAgent(SMALL, TrainConfig(tau=1.0), seed=1)
        agent.update(self.single_transition())
        for (_, t), (_, s) in zip(agent.target1.named_parameters(), agent.critic1.named_parameters()):
            np.testing.assert_array_equal(t.data, s.data)

    def test_entropy_coefficient_moves(self):
        agent = SacAgent(SMALL, TrainConfig(learning_rate=1e-2), seed=2)
        before = agent.entropy_coef
        losses = agent.update(self.single_transition())
        self.assertNotEqual(losses.entropy_coef, before)
        self.assertGreater(losses.entropy_coef, 0)

    def test_nan_reward_aborts_update(self):
        agent = SacAgent(SMALL, seed=3)
        with self.assertRaises(TrainingError) as ctx:
            agent.update(self.single_transition(reward=float('nan')))
        self.assertEqual(ctx.exception.name, 'critic1')
        self.assertEqual(ctx.exception.step, 1)

    def test_invalid_train_config(self):
        with self.assertRaises(ConfigError):
            TrainConfig(gamma=1.0)
        with self.assertRaises(ConfigError):
            TrainConfig(batch_size=0)

    def test_cnn_needs_batches_of_two(self):
        with self.assertRaises(ConfigError) as ctx:
            SacAgent(SMALL_CNN, TrainConfig(batch_size=1), seed=0)
        self.assertEqual(ctx.exception.key, 'train.batch_size')
        SacAgent(SMALL, TrainConfig(batch_size=1), seed=0)


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_byte_identical(self):
        agent = SacAgent(SMALL, seed=4)
        first, second = self.dir / 'a.tgl', self.dir / 'b.tgl'
        agent.save(first)
        params = sac.load_checkpoint(first)
        self.assertEqual(list(params), list(agent.state_dict()))
        other = SacAgent(SMALL, seed=5)
        other.load_state_dict(params)
        other.save(second)
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_bad_magic(self):
        path = self.dir / 'a.tgl'
        SacAgent(SMALL, seed=0).save(path)
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with self.assertRaises(CheckpointVersionError):
            sac.load_checkpoint(path)

    def test_unknown_version(self):
        path = self.dir / 'a.tgl'
        SacAgent(SMALL, seed=0).save(path)
        data = bytearray(path.read_bytes())
        data[4] = 2
        path.write_bytes(bytes(data))
        with self.assertRaises(CheckpointVersionError):
            sac.load_checkpoint(path)

    def test_truncated_file(self):
        path = self.dir / 'a.tgl'
        SacAgent(SMALL, seed=0).save(path)
        path.write_bytes(path.read_bytes()[:-3])
        with self.assertRaises(CheckpointFormatError):
            sac.load_checkpoint(path)

    def test_unknown_parameter_rejected(self):
        agent = SacAgent(SMALL, seed=0)
        state = agent.state_dict()
        state['actor.trunk.extra'] = np.zeros(3, dtype=np.float32)
        with self.assertRaises(UnknownParameterError) as ctx:
            agent.load_state_dict(state)
        self.assertEqual(ctx.exception.name, 'actor.trunk.extra')

    def test_cnn_checkpoint_does_not_fit_transformer(self):
        path = self.dir / 'cnn.tgl'
        SacAgent(SMALL_CNN, seed=0).save(path)
        with self.assertRaises(UnknownParameterError):
            sac.load_actor(path, SMALL)

    def test_actor_architecture_is_inferred(self):
        obs = observations(3)
        for cfg in (SMALL, SMALL_CNN):
            agent = SacAgent(cfg, seed=6)
            path = self.dir / f"{cfg.arch}.tgl"
            agent.save(path)
            actor = sac.load_actor(path)
            self.assertEqual(actor.cfg.arch, cfg.arch)
            expected = agent.actor.eval().act(obs)
            np.testing.assert_array_equal(actor.act(obs), expected)


class TrainingLoopTests(SimpleTestCase):
    config = TrainConfig(total_env_steps=40, n_envs=2, batch_size=8, warmup_steps=10, buffer_capacity=100,
                         checkpoint_every=20)

    def run_once(self, out_dir):
        return sac.train(lambda seed: VectorGraspEnv(2, master_seed=seed), SMALL, self.config, seed=7,
                         out_dir=out_dir)

    def test_runs_are_reproducible(self):
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            first, second = self.run_once(a), self.run_once(b)
            self.assertEqual(first.env_steps, 40)
            self.assertGreater(first.updates, 0)
            self.assertGreaterEqual(len(first.rows), 4)
            self.assertEqual(first.rows, second.rows)
            names = sorted(p.name for p in Path(a).glob('*.tgl'))
            self.assertEqual(names, ['checkpoint_20.tgl', 'checkpoint_40.tgl', 'checkpoint_final.tgl'])
            for name in names:
                self.assertEqual((Path(a) / name).read_bytes(), (Path(b) / name).read_bytes())

    def test_log_matches_rows(self):
        with tempfile.TemporaryDirectory() as out:
            result = self.run_once(out)
            with open(Path(out) / 'training_log.csv', newline='') as handle:
                rows = list(csv.reader(handle))
            self.assertEqual(tuple(rows[0]), sac.TRAINING_LOG_COLUMNS)
            self.assertEqual(len(rows) - 1, len(result.rows))
            for written, row in zip(rows[1:], result.rows):
                self.assertEqual(int(written[0]), row[0])
                self.assertEqual(float(written[3]), row[3])
                self.assertLessEqual(int(written[4]), 10)
                self.assertIn(written[5], ('0', '1'))

    def test_only_successes_are_stored_as_done(self):
        envs = []

        def factory(seed):
            envs.append(RecordingVectorEnv(4, master_seed=seed, env_config=EnvConfig(max_attempts=1)))
            return envs[0]

        config = TrainConfig(total_env_steps=200, n_envs=4, batch_size=8, warmup_steps=1000, buffer_capacity=500,
                             checkpoint_every=0)
        result = sac.train(factory, SMALL, config, seed=3)
        outcomes = envs[0].outcomes
        self.assertEqual(result.updates, 0)
        self.assertEqual(len(result.buffer), len(outcomes))

        dones = result.buffer.dones[:len(outcomes)]
        successes = [i for i, outcome in enumerate(outcomes) if outcome.terminal]
        truncations = [i for i, outcome in enumerate(outcomes) if outcome.truncated]
        self.assertTrue(successes)
        self.assertTrue(truncations)
        np.testing.assert_array_equal(dones[successes], 1.0)
        np.testing.assert_array_equal(dones[truncations], 0.0)
        self.assertEqual(len(successes) + len(truncations), len(outcomes))
