"""
Re-grasp environment: every step lowers the bar, moves the grasp by a
relative (Δx, Δf), lifts again and scores the lift with the two-objective
reward (stability first, then excess force).
"""

import hashlib
import json
import logging
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import gymnasium as gym
import numpy as np

from .exceptions import ConfigError, DimensionError, UsageError
from .grasp_sim import (
    LIFT_SAMPLES,
    SENSOR_COUNT,
    TACTILE_SHAPE,
    WorldConfig,
    WorldState,
    load_bounds,
    lower,
    run_lift,
)

logger = logging.getLogger(__name__)

# one lock for every episode log; vector workers share the file
_episode_log_lock = threading.Lock()

OBSERVATION_SHAPE = (LIFT_SAMPLES, SENSOR_COUNT) + TACTILE_SHAPE
ACTION_DIM = 2
_MASK64 = (1 << 64) - 1


def hash64(*parts):
    """Stable 64-bit mix of integers (per-env and per-episode seed derivation)."""
    payload = b''.join(struct.pack('<Q', int(part) & _MASK64) for part in parts)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), 'little')


@dataclass(frozen=True)
class EnvConfig:
    force_min_n: float = 1.0
    force_max_n: float = 2.0
    load_mass_min_kg: float = 0.025
    load_mass_max_kg: float = 0.100
    friction_min: float = 0.11
    friction_max: float = 0.17
    size_jitter: float = 0.3
    max_dx_m: float = 0.010
    max_df_n: float = 0.125
    max_attempts: int = 10

    def __post_init__(self):
        if not 0 < self.force_min_n < self.force_max_n:
            raise ConfigError('env.force_min_n', "force bounds must satisfy 0 < min < max")
        if not 0 < self.load_mass_min_kg < self.load_mass_max_kg:
            raise ConfigError('env.load_mass_min_kg', "load mass bounds must satisfy 0 < min < max")
        if not 0 < self.friction_min <= self.friction_max:
            raise ConfigError('env.friction_min', "friction bounds must satisfy 0 < min <= max")
        if not 0 <= self.size_jitter < 1:
            raise ConfigError('env.size_jitter', "must lie in [0, 1)")
        if self.max_dx_m <= 0 or self.max_df_n <= 0:
            raise ConfigError('env.max_dx_m', "action bounds must be positive")
        if self.max_attempts < 1:
            raise ConfigError('env.max_attempts', "must be at least 1")

    @property
    def action_scale(self):
        return np.array([self.max_dx_m, self.max_df_n])


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 30.0
    tilt_threshold_rad: float = 0.02
    slip_threshold_m: float = 0.003
    theta_norm: float = 0.3
    slip_norm: float = 0.020

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError('reward.alpha', f"must be positive, got {self.alpha}")
        if self.theta_norm <= 0 or self.slip_norm <= 0:
            raise ConfigError('reward.theta_norm', "normalisation denominators must be positive")
        if not 0 < self.tau_r < 1:
            raise ConfigError('reward.tilt_threshold_rad', "normalised threshold must lie in (0, 1)")
        if not 0 < self.tau_s < 1:
            raise ConfigError('reward.slip_threshold_m', "normalised threshold must lie in (0, 1)")

    @property
    def tau_r(self):
        return self.tilt_threshold_rad / self.theta_norm

    @property
    def tau_s(self):
        return self.slip_threshold_m / self.slip_norm


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    delta_r: float
    delta_s: float
    delta_f: float
    terminal: bool
    truncated: bool
    attempt_index: int
    grasp_x_m: float
    grip_force_n: float
    load_mass_kg: float
    theta_final: float
    slip_final: float
    load_pos_before: float
    load_pos_after: float
    action_clamped: bool = False

    @property
    def done(self):
        return self.terminal or self.truncated

    def as_record(self):
        record = {f.name: getattr(self, f.name) for f in fields(self) if f.name != 'observation'}
        return {key: (value.item() if isinstance(value, np.generic) else value) for key, value in record.items()}


def _normalize(value, low, high):
    clamped = min(max(value, low), high)
    return (clamped - low) / (high - low), clamped != value


def normalize_force(force, cfg):
    """Map f onto [0, 1]; returns (f̂, clamped)."""
    return _normalize(force, cfg.force_min_n, cfg.force_max_n)


def normalize_weight(mass, cfg):
    """Map load mass onto [0, 1]; returns (ŵ, clamped)."""
    return _normalize(mass, cfg.load_mass_min_kg, cfg.load_mass_max_kg)


def excess_force(force, mass, cfg):
    f_hat, _ = normalize_force(force, cfg)
    w_hat, _ = normalize_weight(mass, cfg)
    return f_hat - w_hat


def compute_reward(delta_r, delta_s, delta_f, cfg):
    """Return (reward, terminal): a failed lift is penalised by its worse error, a stable one pays α(1 − δ_f)."""
    if delta_r > cfg.tau_r or delta_s > cfg.tau_s:
        return -max(delta_r, delta_s), False
    return cfg.alpha * (1.0 - delta_f), True


_STATE_OVERRIDES = frozenset({'load_pos_m', 'grasp_x_m', 'grip_force_n'})


def draw_episode(rng, template, cfg, overrides=None):
    """Randomise load mass, friction, size and start position; returns (world, load_pos)."""
    overrides = overrides or {}
    jitter = rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter)
    world = replace(
        template,
        load_mass_kg=rng.uniform(cfg.load_mass_min_kg, cfg.load_mass_max_kg),
        load_bar_friction=rng.uniform(cfg.friction_min, cfg.friction_max),
        load_halfwidth_m=template.load_halfwidth_m * jitter,
    )
    world_keys = {f.name for f in fields(WorldConfig)}
    unknown = set(overrides) - world_keys - _STATE_OVERRIDES
    if unknown:
        raise ConfigError(sorted(unknown)[0], "not a world or state override")
    world = replace(world, **{k: v for k, v in overrides.items() if k in world_keys})
    low, high = load_bounds(world)
    load_pos = rng.uniform(low, high)
    return world, overrides.get('load_pos_m', load_pos)


def grasp_limits(world):
    """Grasp locations that keep the whole sensor patch on the bar."""
    half = 0.5 * world.patch_length_m
    return half, world.bar_length_m - half


class GraspEnv(gym.Env):
    """Single re-grasp episode over a randomised bar-and-load world.

    ``reset`` performs the initial lift at the bar centre with half-range force;
    it is not counted as an attempt. ``regrasp`` is the attempt itself and
    returns a StepOutcome; ``step`` wraps it in the gymnasium signature.
    """

    metadata = {'render_modes': []}

    def __init__(self, world=None, env_config=None, reward_config=None, seed=0, episode_log=None):
        super().__init__()
        self.world_template = world or WorldConfig()
        self.config = env_config or EnvConfig()
        self.reward_config = reward_config or RewardConfig()
        if self.world_template.force_max_n != self.config.force_max_n:
            self.world_template = replace(self.world_template, force_max_n=self.config.force_max_n)
        self.observation_space = gym.spaces.Box(-np.inf, np.inf, shape=OBSERVATION_SHAPE, dtype=np.float32)
        scale = self.config.action_scale.astype(np.float32)
        self.action_space = gym.spaces.Box(-scale, scale, dtype=np.float32)
        self.base_seed = int(seed) & _MASK64
        self.episode_seed = None
        self.episode_log = episode_log
        self._world = None
        self._state = None
        self._attempts = 0
        self._finished = True

    # -- privileged accessors (oracle and harness only) ----------------------

    @property
    def world_config(self):
        return self._world

    @property
    def world_state(self):
        return self._state

    @property
    def attempts(self):
        return self._attempts

    @property
    def finished(self):
        return self._finished

    # -- episode -------------------------------------------------------------

    def _next_seed(self, seed):
        if seed is not None:
            return int(seed) & _MASK64
        if self.episode_seed is None:
            return self.base_seed
        return hash64(self.episode_seed, 1)

    def reset(self, seed=None, options=None):
        """Draw a new world (``options`` may pin world fields, load_pos_m, grasp_x_m or grip_force_n)."""
        self.episode_seed = self._next_seed(seed)
        super().reset(seed=self.episode_seed)
        overrides = dict(options or {})
        self._world, load_pos = draw_episode(self.np_random, self.world_template, self.config, overrides)
        self._state = WorldState(
            grasp_x_m=overrides.get('grasp_x_m', 0.5 * self._world.bar_length_m),
            grip_force_n=overrides.get('grip_force_n', 0.5 * (self.config.force_min_n + self.config.force_max_n)),
            load_pos_m=load_pos,
        )
        trace = run_lift(self._state, self._world, self.np_random)
        self._state = lower(trace.final_state)
        self._attempts = 0
        self._finished = False
        info = {
            'episode_seed': self.episode_seed,
            'load_mass_kg': self._world.load_mass_kg,
            'theta_final': trace.theta_final,
            'slip_final': trace.slip_final,
        }
        return self._observation(trace), info

    def _observation(self, trace):
        return trace.samples.reshape(OBSERVATION_SHAPE).astype(np.float32)

    def clamp_action(self, action):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (ACTION_DIM,):
            raise DimensionError("action must hold (dx, df)", action.shape, (ACTION_DIM,))
        scale = self.config.action_scale
        clamped = np.clip(action, -scale, scale)
        return clamped, bool(np.any(clamped != action))

    def regrasp(self, action):
        if self._state is None or self._finished:
            raise UsageError("episode is finished; call reset() before stepping again")
        (dx, df), action_clamped = self.clamp_action(action)
        low, high = grasp_limits(self._world)
        grasp_x = min(max(self._state.grasp_x_m + dx, low), high)
        force = min(max(self._state.grip_force_n + df, self.config.force_min_n), self.config.force_max_n)

        before = self._state.load_pos_m
        trace = run_lift(replace(self._state, grasp_x_m=grasp_x, grip_force_n=force), self._world, self.np_random)
        self._state = lower(trace.final_state)
        self._attempts += 1

        rc = self.reward_config
        delta_r = min(abs(trace.theta_final) / rc.theta_norm, 1.0)
        delta_s = min(trace.slip_final / rc.slip_norm, 1.0)
        delta_f = excess_force(force, self._world.load_mass_kg, self.config)
        reward, terminal = compute_reward(delta_r, delta_s, delta_f, rc)
        truncated = not terminal and self._attempts >= self.config.max_attempts
        self._finished = terminal or truncated
        if self._finished:
            logger.debug(f"Episode seed={self.episode_seed} ended after {self._attempts} attempts "
                         f"(success={terminal}, reward={reward:.3f})")

        outcome = StepOutcome(
            observation=self._observation(trace),
            reward=float(reward),
            delta_r=float(delta_r),
            delta_s=float(delta_s),
            delta_f=float(delta_f),
            terminal=terminal,
            truncated=truncated,
            attempt_index=self._attempts,
            grasp_x_m=float(grasp_x),
            grip_force_n=float(force),
            load_mass_kg=float(self._world.load_mass_kg),
            theta_final=float(trace.theta_final),
            slip_final=float(trace.slip_final),
            load_pos_before=float(before),
            load_pos_after=float(self._state.load_pos_m),
            action_clamped=action_clamped,
        )
        if self.episode_log is not None:
            self._log_attempt(outcome)
        return outcome

    def step(self, action):
        outcome = self.regrasp(action)
        return outcome.observation, outcome.reward, outcome.terminal, outcome.truncated, {'outcome': outcome}

    def _log_attempt(self, outcome):
        record = {'seed': self.episode_seed, 'attempt': outcome.attempt_index}
        record.update(outcome.as_record())
        line = json.dumps(record) + '\n'
        with _episode_log_lock, open(self.episode_log, 'a') as handle:
            handle.write(line)


@dataclass
class VectorStep:
    observations: np.ndarray
    outcomes: list
    reset_mask: np.ndarray


class VectorGraspEnv:
    """n independent GraspEnv instances stepped in lock-step with auto-reset.

    Env i is seeded with hash64(master_seed, i). A finished env is reset at
    once; its final outcome is still returned and the batch observation holds
    the first observation of the new episode.
    """

    def __init__(self, num_envs, master_seed=0, workers=0, world=None, env_config=None,
                 reward_config=None, episode_log=None):
        if num_envs < 1:
            raise ConfigError('train.n_envs', f"need at least one environment, got {num_envs}")
        self.num_envs = num_envs
        self.master_seed = int(master_seed)
        self.envs = [
            GraspEnv(world, env_config, reward_config, seed=hash64(self.master_seed, index), episode_log=episode_log)
            for index in range(num_envs)
        ]
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None

    @property
    def reward_config(self):
        return self.envs[0].reward_config

    @property
    def env_config(self):
        return self.envs[0].config

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(item) for item in items]
        return list(self._pool.map(fn, items))

    def reset(self):
        results = self._map(lambda env: env.reset()[0], self.envs)
        return np.stack(results)

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs, ACTION_DIM):
            raise DimensionError("vector step expects one action per env", actions.shape,
                                 (self.num_envs, ACTION_DIM))

        def advance(index):
            env = self.envs[index]
            outcome = env.regrasp(actions[index])
            if outcome.done:
                observation, _ = env.reset()
                return outcome, observation, True
            return outcome, outcome.observation, False

        results = self._map(advance, range(self.num_envs))
        return VectorStep(
            observations=np.stack([obs for _, obs, _ in results]),
            outcomes=[outcome for outcome, _, _ in results],
            reset_mask=np.array([was_reset for _, _, was_reset in results]),
        )

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
