"""
Run configuration files: flat ``section.field = value`` lines, ``#`` comments.

Every key maps onto a field of one of the core dataclasses; anything else is
rejected. Values are read through python-decouple, so an environment variable
of the same name overrides the file, or the default when no file is given.
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from decouple import Config, Csv, RepositoryEmpty, RepositoryEnv

from grasping.env import EnvConfig, RewardConfig, VectorGraspEnv
from grasping.exceptions import ConfigError
from grasping.grasp_sim import WorldConfig
from grasping.policy import PolicyConfig
from grasping.sac import TrainConfig, check_batch_size

logger = logging.getLogger(__name__)

DEFAULT_EVAL_EPISODES = 500


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = DEFAULT_EVAL_EPISODES
    workers: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError('eval.episodes', f"need at least one episode, got {self.episodes}")
        if self.workers < 0:
            raise ConfigError('eval.workers', "must not be negative")


SECTIONS = {
    'world': WorldConfig,
    'env': EnvConfig,
    'reward': RewardConfig,
    'policy': PolicyConfig,
    'train': TrainConfig,
    'eval': EvalConfig,
}


def _key_types():
    types = {'seed': int}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            types[f"{section}.{f.name}"] = f.type
    return types


KEY_TYPES = _key_types()


def _caster(kind):
    if kind is tuple:
        return Csv(cast=int, post_process=tuple)
    return kind


def _format(value):
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        check_batch_size(self.policy, self.train)

    def with_values(self, values):
        """Copy with dotted keys replaced, e.g. ``{'reward.alpha': 50.0}``."""
        grouped = {}
        top = {}
        for key, value in values.items():
            if key not in KEY_TYPES:
                raise ConfigError(key, "unknown configuration key")
            section, _, name = key.partition('.')
            if name:
                grouped.setdefault(section, {})[name] = value
            else:
                top[section] = value
        sections = {section: replace(getattr(self, section), **changes) for section, changes in grouped.items()}
        return replace(self, **sections, **top)

    def items(self):
        yield 'seed', self.seed
        for section in SECTIONS:
            part = getattr(self, section)
            for f in fields(part):
                yield f"{section}.{f.name}", getattr(part, f.name)

    def write(self, path):
        lines = ['# tactile grasp lab run configuration']
        lines.extend(f"{key} = {_format(value)}" for key, value in self.items())
        Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')

    def env_factory(self):
        """Callable seed -> VectorGraspEnv, as the trainer expects."""
        def build(seed):
            return VectorGraspEnv(self.train.n_envs, master_seed=seed, workers=self.train.workers,
                                  world=self.world, env_config=self.env, reward_config=self.reward)
        return build


def load_run_config(path=None, overrides=None):
    """Read a RunConfig file (defaults when ``path`` is None) and apply dotted overrides."""
    values = {}
    repository = RepositoryEmpty()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError('config', f"configuration file not found: {path}")
        repository = RepositoryEnv(str(path))
        unknown = sorted(set(repository.data) - set(KEY_TYPES))
        if unknown:
            raise ConfigError(unknown[0], f"unknown configuration key in {path}")
    source = Config(repository)
    for key, kind in KEY_TYPES.items():
        if key not in os.environ and key not in getattr(repository, 'data', {}):
            continue
        try:
            values[key] = source(key, cast=_caster(kind))
        except ValueError as e:
            raise ConfigError(key, f"cannot parse value: {str(e)}") from e
    logger.debug(f"Read {len(values)} configuration keys from {path or 'the environment'}")
    values.update(overrides or {})
    return RunConfig().with_values(values)
