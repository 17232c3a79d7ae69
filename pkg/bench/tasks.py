"""
Harness tasks behind the management commands: training launches, evaluation
rollouts, the privileged oracle, the alpha sweep and scripted trace lifts.
"""

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from django.conf import settings

from grasping import sac
from grasping.env import GraspEnv, hash64, normalize_force, normalize_weight
from grasping.exceptions import CheckpointError, UsageError
from grasping.grasp_sim import (
    WorldState,
    combined_com,
    grip_capacities,
    mirror,
    run_lift,
    write_maps_csv,
    write_trace_csv,
)
from grasping.policy import to_physical

from .models import EvaluationRun, TrainingRun
from .run_config import load_run_config

logger = logging.getLogger(__name__)

EPISODE_COLUMNS = (
    'episode', 'seed', 'weight_g', 'final_force_N', 'weight_norm', 'force_norm', 'excess_force', 'attempts',
    'success',
)
SWEEP_COLUMNS = ('arch', 'alpha', 'success_rate', 'avg_attempts', 'avg_excess_force')
TRACE_SCENARIOS = ('com-grasp', 'offset-grasp', 'low-friction-slide', 'opposite-side')
ORACLE_FORCE_MARGIN = 1.05


def lab_setting(key, default=None):
    return getattr(settings, 'GRASP_LAB_SETTINGS', {}).get(key, default)


# -- evaluation --------------------------------------------------------------


@dataclass
class EpisodeRow:
    episode: int
    seed: int
    weight_g: float
    final_force_n: float
    weight_norm: float
    force_norm: float
    excess_force: float
    attempts: int
    success: bool

    def as_csv(self):
        return (self.episode, self.seed, self.weight_g, self.final_force_n, self.weight_norm, self.force_norm,
                self.excess_force, self.attempts, int(self.success))


@dataclass
class EvalReport:
    """Aggregates over all episodes; excess force and attempt spread over successes only."""
    n_episodes: int
    success_rate: float
    avg_attempts: float
    avg_excess_force: float = None
    std_attempts: float = None
    rows: list = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows):
        if not rows:
            raise UsageError("cannot build a report from zero episodes")
        rows = sorted(rows, key=lambda row: row.episode)
        successes = [row for row in rows if row.success]
        attempts_total = 0
        excess_total = 0.0
        for row in rows:
            attempts_total += row.attempts
            if row.success:
                excess_total += row.excess_force
        avg_excess = excess_total / len(successes) if successes else None
        if len(successes) > 1:
            std_attempts = float(np.std([row.attempts for row in successes], ddof=1))
        else:
            std_attempts = 0.0 if successes else None
        return cls(
            n_episodes=len(rows),
            success_rate=len(successes) / len(rows),
            avg_attempts=attempts_total / len(rows),
            avg_excess_force=avg_excess,
            std_attempts=std_attempts,
            rows=rows,
        )

    def summary(self):
        data = asdict(self)
        data.pop('rows')
        return data

    def write(self, out_dir, extra=None):
        """Write report.json and episodes.csv into ``out_dir``; returns the JSON path."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / 'episodes.csv', 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(EPISODE_COLUMNS)
            writer.writerows(row.as_csv() for row in self.rows)
        report = dict(extra or {})
        report.update(self.summary())
        path = out_dir / 'report.json'
        path.write_text(json.dumps(report, indent=2) + '\n', encoding='utf-8')
        logger.info(f"Wrote evaluation report to {path}")
        return path


def run_episode(policy, episode_seed, run_config, index=0):
    """Play one episode to termination or truncation; ``policy(env, obs)`` returns a physical action."""
    env = GraspEnv(run_config.world, run_config.env, run_config.reward)
    obs, _ = env.reset(seed=episode_seed)
    outcome = None
    while not env.finished:
        outcome = env.regrasp(policy(env, obs))
        obs = outcome.observation
    force_norm, _ = normalize_force(outcome.grip_force_n, env.config)
    weight_norm, _ = normalize_weight(outcome.load_mass_kg, env.config)
    return EpisodeRow(
        episode=index,
        seed=episode_seed,
        weight_g=outcome.load_mass_kg * 1000.0,
        final_force_n=outcome.grip_force_n,
        weight_norm=weight_norm,
        force_norm=force_norm,
        excess_force=outcome.delta_f,
        attempts=outcome.attempt_index,
        success=outcome.terminal,
    )


def evaluate(policy, run_config, episodes=None, seed=None, workers=None):
    """Roll ``policy`` over ``episodes`` seeded episodes (episode i uses hash64(seed, i))."""
    episodes = run_config.eval.episodes if episodes is None else episodes
    seed = run_config.seed if seed is None else seed
    if workers is None:
        workers = run_config.eval.workers or lab_setting('EVAL_WORKERS', 0)
    if episodes < 1:
        raise UsageError(f"need at least one evaluation episode, got {episodes}")

    def play(index):
        return run_episode(policy, hash64(seed, index), run_config, index)

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(play, range(episodes)))
        else:
            rows = [play(index) for index in range(episodes)]
        report = EvalReport.from_rows(rows)
        logger.info(f"Evaluated {episodes} episodes (seed={seed}): success={report.success_rate:.3f} "
                    f"attempts={report.avg_attempts:.3f}")
        return report
    except Exception as e:
        logger.error(f"Evaluation failed: {str(e)}")
        raise


def actor_policy(actor):
    """Deterministic-mode actor as an evaluation policy."""
    def policy(env, obs):
        return to_physical(actor.act(obs, deterministic=True), env.config)
    return policy


# -- oracle ------------------------------------------------------------------


def required_force(world, env_config, margin=ORACLE_FORCE_MARGIN):
    """Grip force whose lift capacity exceeds the bar-plus-load weight by ``margin``."""
    capacity_per_newton, _ = grip_capacities(1.0, world)
    force = margin * world.total_weight_n / capacity_per_newton
    return min(max(force, env_config.force_min_n), env_config.force_max_n)


def oracle_policy(state, world, env_config):
    """Privileged (Δx, Δf): step the grasp toward the combined CoM and the force toward the required grip."""
    max_dx, max_df = env_config.action_scale
    dx = combined_com(world, state.load_pos_m) - state.grasp_x_m
    df = required_force(world, env_config) - state.grip_force_n
    return np.array([min(max(dx, -max_dx), max_dx), min(max(df, -max_df), max_df)])


def oracle(env, obs):
    return oracle_policy(env.world_state, env.world_config, env.config)


def run_oracle(run_config, episodes=None, seed=None, out_dir=None, workers=None):
    report = evaluate(oracle, run_config, episodes, seed, workers)
    report_path = report.write(out_dir, {'policy': 'oracle'}) if out_dir is not None else None
    EvaluationRun.objects.create(
        arch='oracle',
        alpha=run_config.reward.alpha,
        episodes=report.n_episodes,
        seed=run_config.seed if seed is None else seed,
        success_rate=report.success_rate,
        avg_attempts=report.avg_attempts,
        avg_excess_force=report.avg_excess_force,
        std_attempts=report.std_attempts,
        report_path=str(report_path or ''),
    )
    return report


# -- training and checkpoints ------------------------------------------------


def run_dir_name(arch, alpha):
    return f"{arch}_alpha{alpha:g}"


def run_training(run_config, out_dir):
    """Train one agent into ``out_dir`` and register the launch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_config.write(out_dir / lab_setting('RUN_CONFIG_NAME', 'run_config.conf'))
    record = TrainingRun.objects.create(
        arch=run_config.policy.arch,
        alpha=run_config.reward.alpha,
        seed=run_config.seed,
        out_dir=str(out_dir),
    )
    try:
        result = sac.train(
            run_config.env_factory(),
            run_config.policy,
            run_config.train,
            run_config.seed,
            out_dir=out_dir,
            final_name=lab_setting('CHECKPOINT_NAME', 'checkpoint_final.tgl'),
            log_name=lab_setting('TRAINING_LOG_NAME', 'training_log.csv'),
        )
    except Exception as e:
        logger.error(f"Training run {record.pk} ({record}) failed: {str(e)}")
        raise
    record.mark_finished(result.checkpoints[-1], result.env_steps, len(result.rows))
    logger.info(f"Training run {record.pk} finished: {result.env_steps} env steps, {len(result.rows)} episodes")
    return result, record


def checkpoint_run_config(checkpoint):
    """The run config saved beside a checkpoint by ``run_training``, if any."""
    path = Path(checkpoint).parent / lab_setting('RUN_CONFIG_NAME', 'run_config.conf')
    return load_run_config(path) if path.is_file() else None


def evaluate_checkpoint(checkpoint, run_config, episodes=None, seed=None, out_dir=None, workers=None):
    saved = checkpoint_run_config(checkpoint)
    actor = sac.load_actor(checkpoint, saved.policy if saved is not None else None)
    report = evaluate(actor_policy(actor), run_config, episodes, seed, workers)
    alpha = saved.reward.alpha if saved is not None else None
    extra = {'checkpoint': str(checkpoint), 'arch': actor.cfg.arch, 'alpha': alpha,
             'seed': run_config.seed if seed is None else seed}
    report_path = report.write(out_dir, extra) if out_dir is not None else None
    EvaluationRun.objects.create(
        checkpoint_path=str(checkpoint),
        arch=actor.cfg.arch,
        alpha=alpha,
        episodes=report.n_episodes,
        seed=extra['seed'],
        success_rate=report.success_rate,
        avg_attempts=report.avg_attempts,
        avg_excess_force=report.avg_excess_force,
        std_attempts=report.std_attempts,
        report_path=str(report_path or ''),
    )
    return report


def resolve_checkpoint(runs_dir, arch, alpha):
    """``<runs_dir>/<arch>_alpha<α>/`` first, then the latest finished registered run."""
    candidate = Path(runs_dir) / run_dir_name(arch, alpha) / lab_setting('CHECKPOINT_NAME', 'checkpoint_final.tgl')
    if candidate.is_file():
        return candidate
    run = (TrainingRun.objects.filter(arch=arch, alpha=alpha, finished_at__isnull=False)
           .order_by('-finished_at').first())
    if run is not None and run.checkpoint_path and Path(run.checkpoint_path).is_file():
        return Path(run.checkpoint_path)
    raise CheckpointError(f"missing checkpoint for arch={arch} alpha={alpha:g} (looked for {candidate})")


# -- sweep -------------------------------------------------------------------


@dataclass
class SweepRow:
    arch: str
    alpha: float
    report: EvalReport

    def as_csv(self):
        r = self.report
        return (self.arch, self.alpha, r.success_rate, r.avg_attempts,
                '' if r.avg_excess_force is None else r.avg_excess_force)


def _fixed(value):
    return '-' if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.3f}"


def format_table(rows):
    """Aligned text table, three decimals per metric."""
    header = ('Model', 'alpha', 'Success rate', 'Avg. # attempts', 'Avg. excess force')
    body = [
        (row.arch, f"{row.alpha:g}", _fixed(row.report.success_rate), _fixed(row.report.avg_attempts),
         _fixed(row.report.avg_excess_force))
        for row in rows
    ]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ['  '.join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
             for line in [header] + body]
    lines.insert(1, '  '.join('-' * width for width in widths))
    return '\n'.join(lines) + '\n'


def sweep(alphas, archs, run_config, runs_dir, out_dir, episodes=None, seed=None, train_missing=False,
          workers=None):
    """Evaluate one policy per (arch, α); writes sweep.csv and sweep.txt into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for arch in archs:
        for alpha in alphas:
            cfg = run_config.with_values({'policy.arch': arch, 'reward.alpha': alpha})
            try:
                checkpoint = resolve_checkpoint(runs_dir, arch, alpha)
            except CheckpointError:
                if not train_missing:
                    raise
                logger.info(f"No checkpoint for {arch} alpha={alpha:g}; training in-line")
                _, record = run_training(cfg, Path(runs_dir) / run_dir_name(arch, alpha))
                checkpoint = Path(record.checkpoint_path)
            report = evaluate_checkpoint(checkpoint, cfg, episodes, seed, out_dir / run_dir_name(arch, alpha),
                                         workers)
            rows.append(SweepRow(arch, alpha, report))

    with open(out_dir / 'sweep.csv', 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows(row.as_csv() for row in rows)
    (out_dir / 'sweep.txt').write_text(format_table(rows), encoding='utf-8')
    logger.info(f"Sweep of {len(rows)} policies written to {out_dir}")
    return rows


# -- trace scenarios ---------------------------------------------------------


def scenario_lifts(name, world):
    """(suffix, world, state) for each scripted lift of a trace scenario."""
    if name == 'com-grasp':
        world = replace(world, load_mass_kg=0.05)
        grasp = combined_com(world, 0.15)
        return [('', world, WorldState(grasp_x_m=grasp, grip_force_n=2.0, load_pos_m=0.15))]
    if name == 'offset-grasp':
        world = replace(world, load_mass_kg=0.05)
        return [('', world, WorldState(grasp_x_m=0.08, grip_force_n=1.0, load_pos_m=0.13))]
    if name == 'low-friction-slide':
        world = replace(world, load_mass_kg=0.05, load_bar_friction=0.11)
        return [('', world, WorldState(grasp_x_m=0.11, grip_force_n=1.5, load_pos_m=0.08))]
    if name == 'opposite-side':
        world = replace(world, load_mass_kg=0.06, load_bar_friction=0.15)
        right = WorldState(grasp_x_m=0.11, grip_force_n=1.2, load_pos_m=0.14)
        return [('left', world, mirror(right, world)), ('right', world, right)]
    raise UsageError(f"unknown scenario {name!r}; choose one of {', '.join(TRACE_SCENARIOS)}")


def trace(scenario, out, run_config, noise=False):
    """Run a scenario's lifts and write trace and tactile-map CSVs; returns [(trace_path, maps_path, LiftTrace)]."""
    lifts = scenario_lifts(scenario, run_config.world)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(run_config.seed) if noise else None
    results = []
    for suffix, world, state in lifts:
        trace_path = out.with_name(f"{out.stem}_{suffix}{out.suffix or '.csv'}") if suffix else out
        maps_path = trace_path.with_name(f"{trace_path.stem}_maps.csv")
        lift = run_lift(state, world, rng, record_trace=True)
        write_trace_csv(lift.rows, trace_path)
        write_maps_csv(lift.samples, maps_path)
        results.append((trace_path, maps_path, lift))
    logger.info(f"Trace scenario {scenario}: {len(results)} lift(s) written next to {out}")
    return results
