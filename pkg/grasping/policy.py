"""
Actor and critic networks over tactile observations.

Two trunks are provided. The transformer projects every tactile map into a
token with a shared CNN, adds a sine-cosine timestamp encoding and reads the
sequence out through a learnable token. The CNN baseline stacks all maps in
the channel dimension.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .env import ACTION_DIM, OBSERVATION_SHAPE
from .exceptions import ConfigError, DimensionError

logger = logging.getLogger(__name__)

ARCHITECTURES = ('transformer', 'cnn')
ATTENTION_MODES = ('self', 'cross')


@dataclass(frozen=True)
class PolicyConfig:
    arch: str = 'transformer'
    token_dim: int = 32
    mlp_dim: int = 128
    depth: int = 8
    num_heads: int = 4
    attention: str = 'self'
    projection_channels: tuple = (16, 32)
    readout_init_std: float = 0.02
    head_hidden: tuple = (128, 128, 128)
    cnn_channels: tuple = (32, 64, 64)
    cnn_hidden: tuple = (128, 128, 128)
    critic_hidden: tuple = (128, 128)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError('policy.arch', f"expected one of {', '.join(ARCHITECTURES)}, got {self.arch!r}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError('policy.attention', f"expected self or cross, got {self.attention!r}")
        if self.token_dim < 2 or self.token_dim % 2:
            raise ConfigError('policy.token_dim', "must be a positive even number")
        if self.num_heads < 1 or self.token_dim % self.num_heads:
            raise ConfigError('policy.num_heads', f"token_dim {self.token_dim} is not divisible by {self.num_heads}")
        if self.depth < 1:
            raise ConfigError('policy.depth', "must be at least 1")
        if not self.projection_channels or self.projection_channels[-1] != self.token_dim:
            raise ConfigError('policy.projection_channels', "last projection width must equal token_dim")
        if not self.cnn_channels or not self.cnn_hidden:
            raise ConfigError('policy.cnn_channels', "CNN baseline needs conv and FC blocks")


def _batched(obs):
    """Accept one observation or a batch; always return (tensor, had_batch_dim)."""
    data = obs.data if isinstance(obs, nn.Tensor) else np.asarray(obs, dtype=np.float32)
    if data.shape == OBSERVATION_SHAPE:
        data = data[None]
        squeeze = True
    else:
        squeeze = False
    if data.shape[1:] != OBSERVATION_SHAPE:
        raise DimensionError("observation shape mismatch", data.shape, OBSERVATION_SHAPE)
    tensor = obs if isinstance(obs, nn.Tensor) and not squeeze else nn.Tensor(data)
    return tensor, squeeze


def sinusoid_table(positions, dim):
    table = np.zeros((positions, dim), dtype=np.float64)
    pos = np.arange(positions)[:, None]
    rate = np.power(10000.0, np.arange(0, dim, 2) / dim)
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


class Mlp(nn.Module):
    """Linear-ReLU stack with an optional linear output layer."""

    def __init__(self, in_dim, hidden, rng, out_dim=None):
        super().__init__()
        widths = (in_dim,) + tuple(hidden)
        self.layers = [nn.Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.output = nn.Linear(widths[-1], out_dim, rng) if out_dim else None

    def forward(self, x):
        for layer in self.layers:
            x = layer(x).relu()
        return self.output(x) if self.output is not None else x


class ProjectionBlock(nn.Module):
    """Shared per-map CNN: 3×3 conv-ReLU stack then global average pooling."""

    def __init__(self, in_channels, channels, rng):
        super().__init__()
        widths = (in_channels,) + tuple(channels)
        self.convs = [nn.Conv2d(a, b, 3, rng, padding=1) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, maps):
        x = maps
        for conv in self.convs:
            x = conv(x).relu()
        return x.mean(axis=(2, 3))


class EncoderBlock(nn.Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.token_dim)
        self.attn = nn.MultiHeadAttention(cfg.token_dim, cfg.num_heads, rng)
        self.norm2 = nn.LayerNorm(cfg.token_dim)
        self.fc1 = nn.Linear(cfg.token_dim, cfg.mlp_dim, rng)
        self.fc2 = nn.Linear(cfg.mlp_dim, cfg.token_dim, rng)

    def mlp(self, x):
        return self.fc2(self.fc1(self.norm2(x)).relu())

    def forward(self, x):
        normed = self.norm1(x)
        x = x + self.attn(normed, normed)
        return x + self.mlp(x)

    def forward_cross(self, readout, tokens):
        # only the readout queries; tokens serve as keys and values
        context = nn.concat([readout, tokens], axis=1)
        readout = readout + self.attn(self.norm1(readout), self.norm1(context))
        return readout + self.mlp(readout)


class TactileTransformer(nn.Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.tokens_per_obs = OBSERVATION_SHAPE[0] * OBSERVATION_SHAPE[1]
        self.projection = ProjectionBlock(OBSERVATION_SHAPE[2], cfg.projection_channels, rng)
        self.readout = nn.Parameter(rng.normal(0.0, cfg.readout_init_std, size=(cfg.token_dim,)))
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.depth)]
        self._positions = sinusoid_table(self.tokens_per_obs, cfg.token_dim)

    @property
    def embedding_dim(self):
        return self.cfg.token_dim

    def tokenize(self, obs):
        """[batch, T, S, F, H, W] -> [batch, T·S, token_dim] with weights shared over time."""
        batch = obs.shape[0]
        maps = obs.reshape((batch * self.tokens_per_obs,) + OBSERVATION_SHAPE[2:])
        return self.projection(maps).reshape(batch, self.tokens_per_obs, self.cfg.token_dim)

    def positional_encode(self, tokens):
        return tokens + self._positions.astype(tokens.dtype)

    def encode(self, tokens):
        batch = tokens.shape[0]
        readout = (self.readout.reshape(1, 1, -1) + np.zeros((batch, 1, 1), dtype=tokens.dtype))
        if self.cfg.attention == 'cross':
            for block in self.blocks:
                readout = block.forward_cross(readout, tokens)
            return readout[:, 0]
        x = nn.concat([readout, tokens], axis=1)
        for block in self.blocks:
            x = block(x)
        return x[:, 0]

    def forward(self, obs):
        return self.encode(self.positional_encode(self.tokenize(obs)))


class TactileCnn(nn.Module):
    """Baseline: T·S·F maps stacked as channels, conv-BN-ReLU blocks then FC-ReLU blocks."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.in_channels = int(np.prod(OBSERVATION_SHAPE[:3]))
        widths = (self.in_channels,) + tuple(cfg.cnn_channels)
        self.convs = [nn.Conv2d(a, b, 3, rng, padding=1) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [nn.BatchNorm2d(b) for b in cfg.cnn_channels]
        flat = cfg.cnn_channels[-1] * OBSERVATION_SHAPE[3] * OBSERVATION_SHAPE[4]
        self.fc = Mlp(flat, cfg.cnn_hidden, rng)

    @property
    def embedding_dim(self):
        return self.cfg.cnn_hidden[-1]

    def forward(self, obs):
        batch = obs.shape[0]
        x = obs.reshape((batch, self.in_channels) + OBSERVATION_SHAPE[3:])
        for conv, norm in zip(self.convs, self.norms):
            x = norm(conv(x)).relu()
        return self.fc(x.reshape(batch, -1))


def build_trunk(cfg, rng):
    trunk = TactileTransformer(cfg, rng) if cfg.arch == 'transformer' else TactileCnn(cfg, rng)
    logger.debug(f"Built {cfg.arch} trunk with {trunk.parameter_count()} parameters")
    return trunk


def _log_one_minus_tanh_sq(u):
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    return (math.log(2.0) - u - (u * -2.0).softplus()) * 2.0


def squashed_log_prob(mean, log_std, pre_tanh):
    """Log density of tanh(u) for u ~ N(mean, exp(log_std)), in normalised action space."""
    return nn.gaussian_log_prob(mean, log_std, pre_tanh) - _log_one_minus_tanh_sq(pre_tanh).sum(axis=-1)


def sample_action(mean, log_std, rng=None, deterministic=False):
    """Reparameterised tanh-Gaussian draw; returns (action in [-1, 1], log_prob)."""
    if deterministic:
        pre_tanh = mean
    else:
        noise = rng.standard_normal(mean.shape).astype(mean.dtype)
        pre_tanh = mean + log_std.exp() * noise
    return pre_tanh.tanh(), squashed_log_prob(mean, log_std, pre_tanh)


def action_log_prob(mean, log_std, action):
    """Log density of a given normalised action (|a| < 1)."""
    action = np.clip(np.asarray(action, dtype=mean.dtype), -1 + 1e-6, 1 - 1e-6)
    return squashed_log_prob(mean, log_std, nn.Tensor(np.arctanh(action)))


def to_physical(action, env_config):
    """Normalised [-1, 1] actions -> (Δx m, Δf N)."""
    return np.asarray(action, dtype=np.float64) * env_config.action_scale


class GaussianHead(nn.Module):
    def __init__(self, in_dim, hidden, rng):
        super().__init__()
        self.mlp = Mlp(in_dim, hidden, rng, out_dim=2 * ACTION_DIM)

    def forward(self, embedding):
        out = self.mlp(embedding)
        mean = out[..., :ACTION_DIM]
        log_std = out[..., ACTION_DIM:].clip(nn.LOG_STD_MIN, nn.LOG_STD_MAX)
        return mean, log_std


class Actor(nn.Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.trunk = build_trunk(cfg, rng)
        hidden = cfg.head_hidden if cfg.arch == 'transformer' else ()
        self.head = GaussianHead(self.trunk.embedding_dim, hidden, rng)

    def forward(self, obs):
        obs, _ = _batched(obs)
        return self.head(self.trunk(obs))

    def sample(self, obs, rng=None, deterministic=False):
        mean, log_std = self(obs)
        return sample_action(mean, log_std, rng, deterministic)

    def act(self, obs, rng=None, deterministic=True):
        """Rollout helper: numpy in, normalised numpy actions out, no graph recorded."""
        _, squeeze = _batched(obs)
        with nn.no_grad():
            action, _ = self.sample(obs, rng, deterministic)
        return action.data[0] if squeeze else action.data


class Critic(nn.Module):
    """Q(s, a): its own trunk, the normalised action joined to the embedding."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.trunk = build_trunk(cfg, rng)
        self.head = Mlp(self.trunk.embedding_dim + ACTION_DIM, cfg.critic_hidden, rng, out_dim=1)

    def forward(self, obs, action):
        obs, _ = _batched(obs)
        action = action if isinstance(action, nn.Tensor) else nn.Tensor(np.asarray(action, dtype=np.float32))
        if action.ndim == 1:
            action = action.reshape(1, -1)
        embedding = self.trunk(obs)
        if action.shape != (embedding.shape[0], ACTION_DIM):
            raise DimensionError("critic action batch does not match observations", action.shape, embedding.shape)
        return self.head(nn.concat([embedding, action], axis=-1)).reshape(-1)
