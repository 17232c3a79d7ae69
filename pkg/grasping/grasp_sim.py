"""
Quasi-static 2-D simulator of one grasp-lift attempt on a bar carrying a
sliding load, and the tactile shear renderer for the gripper's sensor.

Conventions: x runs along the bar from its left end, positive tilt means the
right end goes down, torque about the grasp point is positive when the mass
distribution pulls the right end down.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

TAXEL_ROWS = 8
TAXEL_COLS = 6
SHEAR_COMPONENTS = 2
SENSOR_COUNT = 1
LIFT_SAMPLES = 11
TACTILE_SHAPE = (SHEAR_COMPONENTS, TAXEL_ROWS, TAXEL_COLS)

TRACE_COLUMNS = (
    'substep', 't_s', 'theta_rad', 'slip_m', 'load_pos_m', 'load_vel_mps', 'tau_g_Nm', 'shear_mag_mean_N',
)

_MAX_SLIDE_EVENTS = 8


@dataclass(frozen=True)
class WorldConfig:
    bar_length_m: float = 0.220
    bar_mass_kg: float = 0.050
    stopper_margin_m: float = 0.010
    load_mass_kg: float = 0.050
    load_halfwidth_m: float = 0.030
    load_bar_friction: float = 0.14
    gripper_bar_friction: float = 0.3155
    grip_torsion_radius_m: float = 0.006
    lift_height_m: float = 0.020
    lift_duration_s: float = 2.0
    substeps_per_lift: int = 400
    gravity: float = 9.81
    tilt_rate: float = 0.5
    slip_rate: float = 0.01
    tilt_cap_rad: float = 0.3
    engage_height_m: float = 0.002
    patch_length_m: float = 0.014
    patch_height_m: float = 0.010
    collision_gain: float = 10.0
    collision_decay_substeps: float = 3.0
    noise_fraction: float = 0.002
    force_max_n: float = 2.0

    def __post_init__(self):
        positive = (
            'bar_length_m', 'bar_mass_kg', 'stopper_margin_m', 'load_mass_kg', 'load_halfwidth_m',
            'load_bar_friction', 'gripper_bar_friction', 'grip_torsion_radius_m', 'lift_height_m',
            'lift_duration_s', 'gravity', 'tilt_rate', 'slip_rate', 'tilt_cap_rad', 'patch_length_m',
            'patch_height_m', 'collision_decay_substeps', 'force_max_n',
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"world.{name}", f"must be strictly positive, got {getattr(self, name)}")
        for name in ('engage_height_m', 'collision_gain', 'noise_fraction'):
            if getattr(self, name) < 0:
                raise ConfigError(f"world.{name}", "must not be negative")
        if self.substeps_per_lift < LIFT_SAMPLES - 1 or self.substeps_per_lift % (LIFT_SAMPLES - 1):
            raise ConfigError('world.substeps_per_lift',
                              f"must be a positive multiple of {LIFT_SAMPLES - 1}, got {self.substeps_per_lift}")
        if self.engage_height_m > self.lift_height_m:
            raise ConfigError('world.engage_height_m', "cannot exceed the lift height")
        low, high = load_bounds(self)
        if low >= high:
            raise ConfigError('world.load_halfwidth_m', "load does not fit between the stoppers")

    @property
    def dt(self):
        return self.lift_duration_s / self.substeps_per_lift

    @property
    def lift_speed(self):
        return self.lift_height_m / self.lift_duration_s

    @property
    def engage_time_s(self):
        return self.engage_height_m / self.lift_speed

    @property
    def total_weight_n(self):
        return self.gravity * (self.bar_mass_kg + self.load_mass_kg)


@dataclass(frozen=True)
class WorldState:
    grasp_x_m: float
    grip_force_n: float
    load_pos_m: float
    load_vel_mps: float = 0.0
    bar_tilt_rad: float = 0.0
    bar_slip_m: float = 0.0
    gripper_height_m: float = 0.0
    lift_height_attained_m: float = 0.0
    collision_impulse: float = 0.0
    elapsed_s: float = 0.0


@dataclass
class LiftTrace:
    samples: np.ndarray
    theta_final: float
    slip_final: float
    load_displacement: float
    final_state: WorldState
    rows: list = field(default_factory=list)


def load_bounds(cfg):
    """Range of the load centre that keeps its body between the stoppers."""
    low = cfg.stopper_margin_m + cfg.load_halfwidth_m
    return low, cfg.bar_length_m - low


def combined_com(cfg, load_pos):
    bar_center = 0.5 * cfg.bar_length_m
    return (cfg.bar_mass_kg * bar_center + cfg.load_mass_kg * load_pos) / (cfg.bar_mass_kg + cfg.load_mass_kg)


def grip_capacities(force, cfg):
    """(lift capacity in N, torsion capacity in N·m) of a two-finger grip at per-finger force f."""
    lift = 2.0 * cfg.gripper_bar_friction * force
    return lift, lift * cfg.grip_torsion_radius_m


def gravity_torque(cfg, grasp_x, load_pos):
    return cfg.gravity * (
        cfg.bar_mass_kg * (0.5 * cfg.bar_length_m - grasp_x) + cfg.load_mass_kg * (load_pos - grasp_x)
    )


def engagement(cfg, elapsed):
    """Fraction of the bar's weight carried by the gripper after ``elapsed`` seconds of lift."""
    t_engage = cfg.engage_time_s
    if t_engage <= 0:
        return 1.0
    return min(1.0, max(0.0, elapsed / t_engage))


def slide_acceleration(cfg, theta, direction):
    """Kinetic acceleration along +x of a load moving in ``direction`` on a bar tilted by theta."""
    return cfg.gravity * (math.sin(theta) - cfg.load_bar_friction * math.cos(theta) * direction)


def _positive_part_integral(start, end, length):
    if start >= 0 and end >= 0:
        return 0.5 * (start + end) * length
    if start <= 0 and end <= 0:
        return 0.0
    peak = max(start, end)
    return 0.5 * peak * length * peak / (abs(start) + abs(end))


def _excess_integral(cfg, ratio, t0, t1):
    # integral of max(0, ratio * r(t) - 1) over [t0, t1], r the engagement ramp
    t_engage = cfg.engage_time_s
    total = 0.0
    if t_engage > 0 and t0 < t_engage:
        end = min(t1, t_engage)
        total += _positive_part_integral(ratio * t0 / t_engage - 1.0, ratio * end / t_engage - 1.0, end - t0)
    if t1 > t_engage:
        start = max(t0, t_engage)
        total += max(0.0, ratio - 1.0) * (t1 - start)
    return total


def _tilt_increment(cfg, torque, torsion_cap, t0, t1):
    if torque == 0.0:
        return 0.0
    if torsion_cap <= 0:
        return math.copysign(cfg.tilt_cap_rad, torque)
    excess = _excess_integral(cfg, abs(torque) / torsion_cap, t0, t1)
    return math.copysign(cfg.tilt_rate * excess, torque)


def _clamp(value, low, high):
    return min(max(value, low), high)


def _time_to_reach(distance, speed, accel):
    # first t >= 0 with speed*t + accel*t^2/2 == distance, motion measured toward the target
    if distance <= 0:
        return 0.0
    disc = speed * speed + 2.0 * accel * distance
    if disc < 0:
        return math.inf
    denom = speed + math.sqrt(disc)
    if denom <= 0:
        return math.inf
    return 2.0 * distance / denom


def _slide(cfg, pos, vel, theta_start, theta_end, dt):
    """Advance the load over dt while the tilt moves linearly between the two angles.

    Returns (position, velocity, collision impulse).
    """
    low, high = load_bounds(cfg)
    mu = cfg.load_bar_friction
    cone = math.atan(mu)
    elapsed = 0.0
    theta = 0.5 * (theta_start + theta_end)
    if vel == 0.0:
        if abs(theta_start) <= cone and abs(theta_end) <= cone:
            return pos, vel, 0.0
        if abs(theta_start) <= cone < abs(theta_end):
            edge = math.copysign(cone, theta_end)
            fraction = (edge - theta_start) / (theta_end - theta_start)
            elapsed = fraction * dt
            theta = 0.5 * (edge + theta_end)

    impulse = 0.0
    sin_t = math.sin(theta)
    cos_t = math.cos(theta)
    for _ in range(_MAX_SLIDE_EVENTS):
        remaining = dt - elapsed
        if remaining <= 0:
            break
        if vel == 0.0:
            if abs(sin_t) <= mu * cos_t:
                break
            direction = 1.0 if sin_t > 0 else -1.0
            if (direction > 0 and pos >= high) or (direction < 0 and pos <= low):
                break
        else:
            direction = 1.0 if vel > 0 else -1.0
        accel = slide_acceleration(cfg, theta, direction)

        t_stop = -vel / accel if vel != 0.0 and accel * direction < 0 else math.inf
        target = high if direction > 0 else low
        t_hit = _time_to_reach((target - pos) * direction, vel * direction, accel * direction)

        step = min(remaining, t_stop, t_hit)
        new_vel = vel + accel * step
        elapsed += step
        if step == t_hit:
            impulse += cfg.load_mass_kg * abs(new_vel)
            pos, vel = target, 0.0
        elif step == t_stop:
            pos, vel = pos + vel * step + 0.5 * accel * step * step, 0.0
        else:
            pos, vel = pos + vel * step + 0.5 * accel * step * step, new_vel
            break
    return _clamp(pos, low, high), vel, impulse


def substep(state, cfg, dt):
    """Advance one attempt by dt seconds.

    Tilt and slip rates are integrated exactly over the engagement ramp; the
    tilt and the load position are coupled with a predictor-corrector pass.
    """
    t0 = state.elapsed_s
    t1 = t0 + dt
    lift_cap, torsion_cap = grip_capacities(state.grip_force_n, cfg)
    cap_theta = cfg.tilt_cap_rad

    tau_start = gravity_torque(cfg, state.grasp_x_m, state.load_pos_m)
    step_start = _tilt_increment(cfg, tau_start, torsion_cap, t0, t1)
    theta_guess = _clamp(state.bar_tilt_rad + step_start, -cap_theta, cap_theta)
    pos_guess, _, _ = _slide(cfg, state.load_pos_m, state.load_vel_mps, state.bar_tilt_rad, theta_guess, dt)

    if pos_guess == state.load_pos_m:
        theta = theta_guess
    else:
        tau_end = gravity_torque(cfg, state.grasp_x_m, pos_guess)
        step_end = _tilt_increment(cfg, tau_end, torsion_cap, t0, t1)
        theta = _clamp(state.bar_tilt_rad + 0.5 * (step_start + step_end), -cap_theta, cap_theta)
    pos, vel, impulse = _slide(cfg, state.load_pos_m, state.load_vel_mps, state.bar_tilt_rad, theta, dt)

    if lift_cap > 0:
        slip = state.bar_slip_m + cfg.slip_rate * _excess_integral(cfg, cfg.total_weight_n / lift_cap, t0, t1)
    else:
        slip = state.bar_slip_m + cfg.slip_rate * dt
    gripper = min(cfg.lift_height_m, cfg.lift_speed * t1)
    decay = math.exp(-1.0 / cfg.collision_decay_substeps)

    return replace(
        state,
        load_pos_m=pos,
        load_vel_mps=vel,
        bar_tilt_rad=theta,
        bar_slip_m=slip,
        gripper_height_m=gripper,
        lift_height_attained_m=max(0.0, gripper - slip),
        collision_impulse=state.collision_impulse * decay + impulse,
        elapsed_s=t1,
    )


def lower(state):
    """Put the bar back down: tilt, slip and motion reset, the load stays where it is."""
    return replace(
        state,
        load_vel_mps=0.0,
        bar_tilt_rad=0.0,
        bar_slip_m=0.0,
        gripper_height_m=0.0,
        lift_height_attained_m=0.0,
        collision_impulse=0.0,
        elapsed_s=0.0,
    )


def _taxel_offsets(cfg):
    rows = (np.arange(TAXEL_ROWS) - 0.5 * (TAXEL_ROWS - 1)) * (cfg.patch_length_m / TAXEL_ROWS)
    cols = (np.arange(TAXEL_COLS) - 0.5 * (TAXEL_COLS - 1)) * (cfg.patch_height_m / TAXEL_COLS)
    return np.meshgrid(rows, cols, indexing='ij')


def full_scale_shear(cfg):
    """Largest translational shear a single taxel can carry (at maximum force)."""
    lift_cap, _ = grip_capacities(cfg.force_max_n, cfg)
    return lift_cap / (TAXEL_ROWS * TAXEL_COLS * SENSOR_COUNT)


def render_tactile(state, cfg, rng=None):
    """Shear map F×H×W of the observed finger; ``rng`` adds sensor noise when given.

    Component 0 is shear along the bar, component 1 is vertical shear.
    """
    ratio = engagement(cfg, state.elapsed_s)
    lift_cap, torsion_cap = grip_capacities(state.grip_force_n, cfg)
    supported = min(cfg.total_weight_n * ratio, lift_cap)
    torque = gravity_torque(cfg, state.grasp_x_m, state.load_pos_m) * ratio
    twist = math.copysign(min(abs(torque), torsion_cap), torque)

    along, vertical = _taxel_offsets(cfg)
    shear = np.zeros(TACTILE_SHAPE)
    shear[1] += supported / (TAXEL_ROWS * TAXEL_COLS * SENSOR_COUNT)
    if twist != 0.0:
        scale = twist / (SENSOR_COUNT * float(np.sum(along * along + vertical * vertical)))
        shear[0] -= scale * vertical
        shear[1] += scale * along
    if state.collision_impulse > 0:
        radius = np.hypot(along, vertical)
        spike = cfg.collision_gain * state.collision_impulse
        shear[0] += spike * along / radius
        shear[1] += spike * vertical / radius
    if rng is not None and cfg.noise_fraction > 0:
        shear += rng.normal(0.0, cfg.noise_fraction * full_scale_shear(cfg), size=TACTILE_SHAPE)
    return shear


def shear_magnitude_mean(shear):
    return float(np.mean(np.hypot(shear[0], shear[1])))


def _trace_row(index, state, cfg):
    torque = gravity_torque(cfg, state.grasp_x_m, state.load_pos_m) * engagement(cfg, state.elapsed_s)
    return (
        index, state.elapsed_s, state.bar_tilt_rad, state.bar_slip_m, state.load_pos_m, state.load_vel_mps,
        torque, shear_magnitude_mean(render_tactile(state, cfg)),
    )


def run_lift(state, cfg, rng=None, record_trace=False):
    """Lift once from the lowered configuration and sample 11 tactile maps.

    Sample k is taken after k/10 of the substeps; sample 0 precedes the first
    substep. With ``record_trace`` every substep is kept as a trace row.
    """
    state = lower(state)
    low, high = load_bounds(cfg)
    state = replace(state, load_pos_m=_clamp(state.load_pos_m, low, high))
    start_pos = state.load_pos_m
    dt = cfg.dt
    stride = cfg.substeps_per_lift // (LIFT_SAMPLES - 1)

    samples = np.empty((LIFT_SAMPLES,) + TACTILE_SHAPE)
    samples[0] = render_tactile(state, cfg, rng)
    rows = [_trace_row(0, state, cfg)] if record_trace else []
    for index in range(1, cfg.substeps_per_lift + 1):
        state = substep(state, cfg, dt)
        if record_trace:
            rows.append(_trace_row(index, state, cfg))
        if index % stride == 0:
            samples[index // stride] = render_tactile(state, cfg, rng)

    return LiftTrace(
        samples=samples,
        theta_final=state.bar_tilt_rad,
        slip_final=state.bar_slip_m,
        load_displacement=state.load_pos_m - start_pos,
        final_state=state,
        rows=rows,
    )


def mirror(state, cfg):
    """Reflect the load about the grasp point (the bar is symmetric only for a centred grasp)."""
    return replace(state, load_pos_m=2.0 * state.grasp_x_m - state.load_pos_m, load_vel_mps=-state.load_vel_mps,
                   bar_tilt_rad=-state.bar_tilt_rad)


def write_trace_csv(rows, path):
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(rows)
    logger.info(f"Wrote {len(rows)} trace rows to {path}")


def write_maps_csv(samples, path):
    """Flatten sampled tactile maps to one row per (sample, component, row, col)."""
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(('sample', 'component', 'row', 'col', 'shear_N'))
        for index, shear in enumerate(samples):
            for (component, row, col), value in np.ndenumerate(shear):
                writer.writerow((index, component, row, col, repr(float(value))))
    logger.info(f"Wrote {len(samples)} tactile maps to {path}")
