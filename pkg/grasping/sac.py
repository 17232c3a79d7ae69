"""
Soft Actor-Critic over the vectorised re-grasp environment.

Twin critics with Polyak-averaged targets, a tanh-Gaussian actor and an
entropy coefficient tuned in log space. Success (termination) cuts the
bootstrap; running out of attempts (truncation) does not.
"""

import csv
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .env import ACTION_DIM, OBSERVATION_SHAPE
from .exceptions import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    TrainingError,
    UnknownParameterError,
    UsageError,
)
from .policy import Actor, Critic, PolicyConfig, to_physical

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'TGL1'
CHECKPOINT_VERSION = 1
TRAINING_LOG_COLUMNS = (
    'env_step', 'episode', 'alpha', 'return', 'attempts', 'success', 'excess_force',
    'actor_loss', 'critic_loss', 'entropy_coef',
)
AGENT_PARTS = ('actor', 'critic1', 'critic2', 'target1', 'target2')


@dataclass(frozen=True)
class TrainConfig:
    total_env_steps: int = 30000
    n_envs: int = 8
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    learning_rate: float = 3e-4
    entropy_target: float = -2.0
    initial_entropy_coef: float = 1.0
    warmup_steps: int = 500
    updates_per_env_step: int = 1
    max_gradient_updates: int = 0
    buffer_capacity: int = 100000
    checkpoint_every: int = 5000
    workers: int = 0
    ignore_done: bool = False

    def __post_init__(self):
        for name in ('total_env_steps', 'n_envs', 'batch_size', 'buffer_capacity', 'updates_per_env_step'):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}", "must be a positive integer")
        for name in ('warmup_steps', 'max_gradient_updates', 'checkpoint_every', 'workers'):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name}", "must not be negative")
        if not 0 < self.gamma < 1:
            raise ConfigError('train.gamma', f"must lie in (0, 1), got {self.gamma}")
        if not 0 <= self.tau <= 1:
            raise ConfigError('train.tau', f"must lie in [0, 1], got {self.tau}")
        if self.learning_rate <= 0 or self.initial_entropy_coef <= 0:
            raise ConfigError('train.learning_rate', "learning rate and entropy coefficient must be positive")


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Ring buffer over preallocated arrays; actions are stored normalised to [-1, 1]."""

    def __init__(self, capacity, obs_shape=OBSERVATION_SHAPE, action_dim=ACTION_DIM):
        if capacity < 1:
            raise ConfigError('train.buffer_capacity', "must be positive")
        self.capacity = capacity
        self.ptr = 0
        self.size = 0
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity,) + tuple(obs_shape), dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)

    def push(self, obs, action, reward, next_obs, done):
        self.obs[self.ptr] = obs
        self.actions[self.ptr] = action
        self.rewards[self.ptr] = reward
        self.next_obs[self.ptr] = next_obs
        self.dones[self.ptr] = float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size, rng):
        if batch_size > self.size:
            raise UsageError(f"cannot sample {batch_size} transitions from a buffer of {self.size}")
        return rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size, rng):
        idx = self.sample_indices(batch_size, rng)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])

    def __len__(self):
        return self.size


def critic_target(rewards, dones, next_q1, next_q2, next_log_prob, gamma, entropy_coef, ignore_done=False):
    """y = r + (1 − done)·γ·(min(Q'₁, Q'₂) − α·log π(a'|s'))."""
    rewards = np.asarray(rewards, dtype=np.float64)
    soft_value = np.minimum(next_q1, next_q2) - entropy_coef * np.asarray(next_log_prob, dtype=np.float64)
    mask = 1.0 if ignore_done else 1.0 - np.asarray(dones, dtype=np.float64)
    return rewards + mask * gamma * soft_value


def polyak_update(target, source, tau):
    """target ← (1 − τ)·target + τ·source, parameters and buffers alike."""
    for (_, t), (_, s) in zip(target.named_parameters(), source.named_parameters()):
        t.data = ((1.0 - tau) * t.data + tau * s.data).astype(t.data.dtype, copy=False)
    for t_mod, s_mod in zip(target.modules(), source.modules()):
        for name, value in s_mod._buffers.items():
            current = t_mod._buffers[name]
            t_mod._buffers[name] = ((1.0 - tau) * current + tau * value).astype(current.dtype, copy=False)


@dataclass
class UpdateLosses:
    critic1: float
    critic2: float
    actor: float
    entropy: float
    entropy_coef: float

    @property
    def critic(self):
        return 0.5 * (self.critic1 + self.critic2)


def _prefixed(prefix, module):
    return [(f"{prefix}.{name}", param) for name, param in module.named_parameters()]


def check_batch_size(policy_config, train_config):
    # batchnorm needs two samples per training batch
    if policy_config.arch == 'cnn' and train_config.batch_size < 2:
        raise ConfigError('train.batch_size',
                          f"the cnn trunk needs batches of at least 2, got {train_config.batch_size}")


class SacAgent:
    def __init__(self, policy_config=None, train_config=None, seed=0):
        self.policy_config = policy_config or PolicyConfig()
        self.config = train_config or TrainConfig()
        check_batch_size(self.policy_config, self.config)
        self.rng = np.random.default_rng(seed)
        self.actor = Actor(self.policy_config, self.rng)
        self.critic1 = Critic(self.policy_config, self.rng)
        self.critic2 = Critic(self.policy_config, self.rng)
        self.target1 = self.critic1.clone()
        self.target2 = self.critic2.clone()
        self.log_alpha = nn.Parameter(np.array([math.log(self.config.initial_entropy_coef)]))
        lr = self.config.learning_rate
        self.actor_optimizer = nn.Adam(_prefixed('actor', self.actor), learning_rate=lr)
        self.critic_optimizer = nn.Adam(
            _prefixed('critic1', self.critic1) + _prefixed('critic2', self.critic2), learning_rate=lr)
        self.alpha_optimizer = nn.Adam([('log_alpha', self.log_alpha)], learning_rate=lr)
        self.update_count = 0

    @property
    def entropy_coef(self):
        return float(np.exp(self.log_alpha.data[0]))

    def act(self, obs, deterministic=False):
        self.actor.eval()
        try:
            return self.actor.act(obs, self.rng, deterministic=deterministic)
        finally:
            self.actor.train()

    def _check(self, name, value):
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} loss", name=name, step=self.update_count + 1)
        return value

    def compute_targets(self, batch):
        alpha = self.entropy_coef
        with nn.no_grad():
            next_action, next_log_prob = self.actor.sample(batch.next_obs, self.rng)
            next_q1 = self.target1(batch.next_obs, next_action).data
            next_q2 = self.target2(batch.next_obs, next_action).data
        return critic_target(batch.rewards, batch.dones, next_q1, next_q2, next_log_prob.data,
                             self.config.gamma, alpha, ignore_done=self.config.ignore_done)

    def update(self, batch):
        alpha = self.entropy_coef
        targets = nn.Tensor(self.compute_targets(batch).astype(np.float32))

        self.critic_optimizer.zero_grad()
        loss1 = nn.mse_loss(self.critic1(batch.obs, batch.actions), targets)
        loss2 = nn.mse_loss(self.critic2(batch.obs, batch.actions), targets)
        critic1_loss = self._check('critic1', loss1.item())
        critic2_loss = self._check('critic2', loss2.item())
        (loss1 + loss2).backward()
        self.critic_optimizer.step()

        self.actor_optimizer.zero_grad()
        action, log_prob = self.actor.sample(batch.obs, self.rng)
        q = nn.minimum(self.critic1(batch.obs, action), self.critic2(batch.obs, action))
        actor_loss = (log_prob * alpha - q).mean()
        actor_value = self._check('actor', actor_loss.item())
        actor_loss.backward()
        self.actor_optimizer.step()

        self.alpha_optimizer.zero_grad()
        drive = nn.Tensor(log_prob.data + self.config.entropy_target)
        alpha_loss = -(self.log_alpha * drive).mean()
        entropy_value = self._check('entropy', alpha_loss.item())
        alpha_loss.backward()
        self.alpha_optimizer.step()

        polyak_update(self.target1, self.critic1, self.config.tau)
        polyak_update(self.target2, self.critic2, self.config.tau)
        self.update_count += 1
        return UpdateLosses(critic1_loss, critic2_loss, actor_value, entropy_value, self.entropy_coef)

    def state_dict(self):
        state = OrderedDict()
        for part in AGENT_PARTS:
            for name, array in getattr(self, part).state_dict().items():
                state[f"{part}.{name}"] = array
        state['log_alpha'] = self.log_alpha.data
        return state

    def load_state_dict(self, state):
        grouped = {part: OrderedDict() for part in AGENT_PARTS}
        for name, array in state.items():
            if name == 'log_alpha':
                self.log_alpha.data = np.array(array, dtype=self.log_alpha.data.dtype).reshape(1)
                continue
            part, _, rest = name.partition('.')
            if part not in grouped:
                raise UnknownParameterError("checkpoint names an unknown parameter", name)
            grouped[part][rest] = array
        for part, sub in grouped.items():
            try:
                getattr(self, part).load_state_dict(sub)
            except UnknownParameterError as exc:
                raise UnknownParameterError("checkpoint does not fit the model", f"{part}.{exc.name}") from exc

    def save(self, path):
        save_checkpoint(self.state_dict(), path)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params, path):
    """Write named float32 arrays: magic, u16 version, then one record per array."""
    with open(path, 'wb') as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack('<H', CHECKPOINT_VERSION))
        for name, array in params.items():
            values = np.ascontiguousarray(array, dtype='<f4')
            encoded = name.encode('utf-8')
            handle.write(struct.pack('<I', len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack('<B', values.ndim))
            handle.write(struct.pack(f'<{values.ndim}I', *values.shape))
            handle.write(values.tobytes())
    logger.debug(f"Saved {len(params)} arrays to {path}")


def load_checkpoint(path):
    data = Path(path).read_bytes()
    header = len(CHECKPOINT_MAGIC) + 2
    if len(data) < header or data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from('<H', data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")

    offset = header
    params = OrderedDict()

    def take(count, what):
        nonlocal offset
        if offset + count > len(data):
            raise CheckpointFormatError(f"{path}: truncated while reading {what} at byte {offset}")
        chunk = data[offset:offset + count]
        offset += count
        return chunk

    while offset < len(data):
        (name_len,) = struct.unpack('<I', take(4, 'name length'))
        try:
            name = take(name_len, 'name').decode('utf-8')
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: parameter name is not UTF-8 at byte {offset}") from exc
        (rank,) = struct.unpack('<B', take(1, f"rank of {name}"))
        shape = struct.unpack(f'<{rank}I', take(4 * rank, f"shape of {name}"))
        count = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * count, f"values of {name}")
        if name in params:
            raise CheckpointFormatError(f"{path}: duplicate parameter {name}")
        params[name] = np.frombuffer(payload, dtype='<f4').reshape(shape).astype(np.float32)
    return params


def _widths(params, prefix, axis):
    """Output widths of ``<prefix>.<i>.weight`` arrays, in layer order."""
    found = {}
    for name, array in params.items():
        if name.startswith(prefix) and name.endswith('.weight'):
            index = name[len(prefix):].split('.')[0]
            if index.isdigit():
                found[int(index)] = array.shape[axis]
    return tuple(found[i] for i in sorted(found))


def infer_policy_config(params, base=None):
    """Recover the actor architecture from checkpoint parameter names and shapes.

    Head count is not visible in the weights and comes from ``base``.
    """
    base = base or PolicyConfig()
    if 'actor.trunk.readout' in params:
        blocks = {name.split('.')[3] for name in params if name.startswith('actor.trunk.blocks.')}
        token_dim = params['actor.trunk.readout'].shape[0]
        fc1 = params.get('actor.trunk.blocks.0.fc1.weight')
        num_heads = base.num_heads if token_dim % base.num_heads == 0 else 1
        return replace(
            base, arch='transformer', token_dim=token_dim, num_heads=num_heads,
            depth=len(blocks) or base.depth,
            mlp_dim=fc1.shape[1] if fc1 is not None else base.mlp_dim,
            projection_channels=_widths(params, 'actor.trunk.projection.convs.', 0) or base.projection_channels,
            head_hidden=_widths(params, 'actor.head.mlp.layers.', 1),
        )
    return replace(
        base, arch='cnn',
        cnn_channels=_widths(params, 'actor.trunk.convs.', 0) or base.cnn_channels,
        cnn_hidden=_widths(params, 'actor.trunk.fc.layers.', 1) or base.cnn_hidden,
    )


def load_actor(path, policy_config=None):
    """Actor with weights from an agent checkpoint; arch inferred when no config is given."""
    params = load_checkpoint(path)
    config = policy_config or infer_policy_config(params)
    actor = Actor(config, np.random.default_rng(0))
    sub = OrderedDict((name[len('actor.'):], array) for name, array in params.items() if name.startswith('actor.'))
    if not sub:
        raise UnknownParameterError("checkpoint holds no actor parameters", str(path))
    try:
        actor.load_state_dict(sub)
    except UnknownParameterError as exc:
        raise UnknownParameterError("checkpoint does not fit the actor", f"actor.{exc.name}") from exc
    return actor.eval()


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    agent: SacAgent
    buffer: ReplayBuffer = None
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    env_steps: int = 0
    updates: int = 0


def train(env_factory, policy_config, config, seed, out_dir=None, final_name='checkpoint_final.tgl',
          log_name='training_log.csv'):
    """Collect experience from ``env_factory(seed)`` and update the agent until the env-step budget is spent.

    ``env_factory`` returns a VectorGraspEnv. One log row is produced per
    completed episode; checkpoints land in ``out_dir`` when it is given.
    """
    agent = SacAgent(policy_config, config, seed)
    vec = env_factory(seed)
    alpha = vec.reward_config.alpha
    env_config = vec.env_config
    n = vec.num_envs
    buffer = ReplayBuffer(min(config.buffer_capacity, config.total_env_steps + n))
    result = TrainResult(agent=agent, buffer=buffer)

    out_path = Path(out_dir) if out_dir is not None else None
    log_handle = None
    writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_handle = open(out_path / log_name, 'w', newline='')
        writer = csv.writer(log_handle)
        writer.writerow(TRAINING_LOG_COLUMNS)

    returns = np.zeros(n)
    losses = None
    next_checkpoint = config.checkpoint_every or None
    logger.info(f"SAC training: arch={agent.policy_config.arch} alpha={alpha} seed={seed} "
                f"steps={config.total_env_steps} envs={n}")
    try:
        obs = vec.reset()
        while result.env_steps < config.total_env_steps:
            if result.env_steps < config.warmup_steps:
                actions = agent.rng.uniform(-1.0, 1.0, size=(n, ACTION_DIM))
            else:
                actions = agent.act(obs)
            stepped = vec.step(to_physical(actions, env_config))
            result.env_steps += n

            finished = []
            for index, outcome in enumerate(stepped.outcomes):
                buffer.push(obs[index], actions[index], outcome.reward, outcome.observation, outcome.terminal)
                returns[index] += outcome.reward
                if outcome.done:
                    finished.append((index, outcome))
            obs = stepped.observations

            if result.env_steps >= config.warmup_steps and len(buffer) >= config.batch_size:
                for _ in range(n * config.updates_per_env_step):
                    if config.max_gradient_updates and result.updates >= config.max_gradient_updates:
                        break
                    losses = agent.update(buffer.sample(config.batch_size, agent.rng))
                    result.updates += 1

            for index, outcome in finished:
                row = (
                    result.env_steps, len(result.rows) + 1, alpha, float(returns[index]), outcome.attempt_index,
                    int(outcome.terminal), outcome.delta_f,
                    losses.actor if losses else '', losses.critic if losses else '',
                    losses.entropy_coef if losses else agent.entropy_coef,
                )
                returns[index] = 0.0
                result.rows.append(row)
                if writer is not None:
                    writer.writerow(row)
            if finished:
                successes = sum(outcome.terminal for _, outcome in finished)
                logger.info(f"env_step={result.env_steps} episodes={len(result.rows)} "
                            f"finished={len(finished)} successes={successes}")

            if out_path is not None and next_checkpoint and result.env_steps >= next_checkpoint:
                path = out_path / f"checkpoint_{result.env_steps}.tgl"
                agent.save(path)
                result.checkpoints.append(path)
                logger.info(f"Checkpoint written: {path}")
                while next_checkpoint <= result.env_steps:
                    next_checkpoint += config.checkpoint_every

        if out_path is not None:
            path = out_path / final_name
            agent.save(path)
            result.checkpoints.append(path)
            logger.info(f"Final checkpoint written: {path}")
    except Exception as e:
        logger.error(f"Training failed at env_step={result.env_steps} updates={result.updates}: {str(e)}")
        raise
    finally:
        if log_handle is not None:
            log_handle.close()
        vec.close()
    return result
