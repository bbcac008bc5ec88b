"""
Episodic UAV service environment.

The UAV flies its nose direction (body velocity (V, 0, 0) rotated by the
direction cosine matrix), serves every ground user whose received power
clears the threshold, and the episode ends when all payloads are delivered
and the UAV is back home, or at the step cap.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from app.services.channel_service import expected_loss_db, ground_truth_loss_db, rate_bps, received_power_dbm
from app.services.geometry_service import Position, elevation_angle_deg
from app.utils.errors import NonFiniteError

logger = logging.getLogger(__name__)

ACTION_NAMES = ('acceleration', 'pitch', 'roll', 'yaw', 'power_dbm')
ACTION_DIM = len(ACTION_NAMES)
BOUND_TOLERANCE = 1e-9
# every tag check_feasibility can emit, in the order the mission problem states them
CONSTRAINTS = (
    'mission_time', 'home', 'pitch', 'roll', 'yaw', 'speed', 'acceleration', 'power', 'link_threshold', 'association',
    'payload',
)


def dcm(roll, pitch, yaw):
    """Body-to-inertial rotation R_z(yaw) R_y(pitch) R_x(roll)."""
    return Rotation.from_euler('ZYX', [yaw, pitch, roll]).as_matrix()


def action_bounds(cfg, link):
    """(low, high) arrays of the action box."""
    low = np.array([-cfg.a_max, -math.pi / 2, -math.pi, -math.pi, link.p_floor_dbm])
    high = np.array([cfg.a_max, math.pi / 2, math.pi, math.pi, link.p_max_dbm])
    return low, high


def start_position(env, cfg):
    if cfg.start is not None:
        return np.asarray(cfg.start, dtype=float)
    return np.array([0.0, 0.0, env.h_min])


# Channel oracles: callables (uav (3,), gus (n, 3)) -> loss dB (n,)

class LosOracle:
    """Analytic elevation-angle LoS model."""
    name = 'los'

    def __init__(self, params):
        self.params = params

    def for_episode(self, seed):
        return self

    def __call__(self, uav, gus):
        return np.atleast_1d(expected_loss_db(np.asarray(uav)[None, :], gus, self.params))


class TruthOracle:
    """Geometric blockage plus shadowing, one seeded stream per episode."""
    name = 'truth'

    def __init__(self, env, params, seed=0):
        self.env = env
        self.params = params
        self.rng = np.random.default_rng(seed)

    def for_episode(self, seed):
        return TruthOracle(self.env, self.params, 0 if seed is None else seed)

    def __call__(self, uav, gus):
        uav = np.broadcast_to(np.asarray(uav, dtype=float), np.shape(gus))
        return np.atleast_1d(ground_truth_loss_db(uav, gus, self.env, self.params, self.rng))


class CkmOracle:
    """Loss predicted by a trained CKM."""
    name = 'ckm'

    def __init__(self, model):
        self.model = model

    def for_episode(self, seed):
        return self

    def __call__(self, uav, gus):
        # imported here: the CKM stack is only needed when this oracle is used
        from app.services.ckm_service import predict_loss_db
        return predict_loss_db(self.model, np.asarray(uav)[None, :], gus)


@dataclass(frozen=True)
class UavState:
    position: np.ndarray
    speed: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0


@dataclass(frozen=True)
class GuState:
    position: Position
    remaining_payload: float
    associated: bool
    delivered: float


@dataclass(frozen=True)
class MdpState:
    uav: UavState
    start: np.ndarray
    payload: np.ndarray
    delivered: np.ndarray
    associated: np.ndarray
    received_dbm: np.ndarray
    step: int = 0

    @property
    def remaining(self):
        return np.maximum(0.0, self.payload - self.delivered)

    @property
    def satisfied(self):
        return self.delivered >= self.payload

    def gu_states(self, env):
        return [
            GuState(env.gu_positions[i], float(self.remaining[i]), bool(self.associated[i]), float(self.delivered[i]))
            for i in range(env.n_gus)
        ]


@dataclass(frozen=True)
class TransitionRecord:
    """Everything the reward needs to know about one step."""
    step: int
    t_max: int
    moved: float
    progress: float
    useful_bits: np.ndarray
    newly_satisfied: int
    success: bool
    timeout: bool
    # nan when every GU is satisfied
    max_elevation_unsatisfied_deg: float


@dataclass(frozen=True)
class StepRecord:
    step: int
    position: np.ndarray
    speed: float
    roll: float
    pitch: float
    yaw: float
    acceleration: float
    power_dbm: float
    received_dbm: np.ndarray
    associated: np.ndarray
    rates: np.ndarray
    reward: float
    components: Dict[str, float]


@dataclass
class TrajectoryResult:
    start: np.ndarray
    home: np.ndarray
    payload: np.ndarray
    dt: float
    steps: List[StepRecord] = field(default_factory=list)
    success: bool = False
    info: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return len(self.steps)

    @property
    def t_end(self):
        """Flight time in seconds."""
        return self.n_steps * self.dt

    @property
    def delivered(self):
        if not self.steps:
            return np.zeros_like(self.payload)
        return np.sum([s.rates * s.associated * self.dt for s in self.steps], axis=0)

    @property
    def total_bits(self):
        return float(np.sum(self.delivered))

    @property
    def throughput(self):
        """Average delivered bits per second over the flight."""
        return self.total_bits / self.t_end if self.t_end > 0 else 0.0

    @property
    def total_reward(self):
        return float(sum(s.reward for s in self.steps))

    def positions(self):
        return np.vstack([self.start] + [s.position for s in self.steps])

    def to_frame(self):
        """Per-step trace; row 0 is the initial state."""
        n = len(self.payload)
        rows = [{
            'step': 0, 'x': self.start[0], 'y': self.start[1], 'z': self.start[2],
            'V': 0.0, 'roll': 0.0, 'pitch': 0.0, 'yaw': 0.0, 'acceleration': 0.0, 'P_T': 0.0,
            **{f'alpha_{i}': 0 for i in range(n)},
            **{f'rate_{i}': 0.0 for i in range(n)},
            'reward': 0.0,
        }]
        for s in self.steps:
            rows.append({
                'step': s.step, 'x': s.position[0], 'y': s.position[1], 'z': s.position[2],
                'V': s.speed, 'roll': s.roll, 'pitch': s.pitch, 'yaw': s.yaw,
                'acceleration': s.acceleration, 'P_T': s.power_dbm,
                **{f'alpha_{i}': int(s.associated[i]) for i in range(n)},
                **{f'rate_{i}': float(s.rates[i]) for i in range(n)},
                'reward': s.reward,
            })
        return pd.DataFrame(rows)

    def summary(self):
        return {
            't_end': self.t_end,
            'throughput': self.throughput,
            'total_bits': self.total_bits,
            'success': bool(self.success),
            'steps': self.n_steps,
            'delivered_bits': [float(v) for v in self.delivered],
            'total_reward': self.total_reward,
        }


def reset(env, cfg, seed=None):
    """
    Initial state: UAV at the start point at rest, every payload outstanding
    Args:
        env (Environment): scene
        cfg (EpisodeConfig): episode settings
        seed (int): unused by the dynamics; kept so every stage resets the same way
    Returns:
        MdpState
    """
    n = env.n_gus
    start = start_position(env, cfg)
    return MdpState(
        uav=UavState(position=start.copy()),
        start=start,
        payload=np.full(n, float(cfg.payload_bits)),
        delivered=np.zeros(n),
        associated=np.zeros(n, dtype=bool),
        received_dbm=np.full(n, -np.inf),
        step=0,
    )


def _target_point(position, state, env):
    """Overhead point of the nearest unsatisfied GU at the current altitude, or home."""
    open_gus = np.flatnonzero(~state.satisfied)
    if not len(open_gus):
        return state.start
    gus = env.gu_array[open_gus]
    nearest = gus[np.argmin(np.linalg.norm(gus[:, :2] - position[:2], axis=1))]
    return np.array([nearest[0], nearest[1], position[2]])


def reward_components(record, cfg):
    """Unweighted reward terms r1..r5 of one transition."""
    excess = max(0.0, record.moved - record.progress)
    elevation = record.max_elevation_unsatisfied_deg
    return {
        'r1': -1.0 - cfg.move_penalty_per_m * excess,
        'r2': float(np.sum(record.useful_bits)) / 1e6 + cfg.new_gu_bonus * record.newly_satisfied,
        'r3': cfg.early_bonus * (record.t_max - record.step) / record.t_max if record.success else 0.0,
        'r4': -cfg.timeout_penalty if record.timeout else 0.0,
        'r5': -1.0 if (not math.isnan(elevation) and elevation < cfg.elevation_threshold_deg) else 0.0,
    }


def reward(record, cfg):
    """Weighted sum w1 r1 + ... + w5 r5."""
    terms = reward_components(record, cfg)
    w = cfg.weights
    return w.w1 * terms['r1'] + w.w2 * terms['r2'] + w.w3 * terms['r3'] + w.w4 * terms['r4'] + w.w5 * terms['r5']


def step(state, action, env, cfg, link, oracle):
    """
    Advance one time step
    Args:
        state (MdpState): current state
        action: (acceleration m/s^2, pitch, roll, yaw rad, power dBm); clamped to the action box
        env (Environment): scene
        cfg (EpisodeConfig): episode settings
        link (LinkBudget): power and bandwidth settings
        oracle: channel oracle (uav, gus) -> loss dB
    Returns:
        tuple: (next MdpState, reward, done, info dict)
    """
    action = np.asarray(action, dtype=float)
    if action.shape != (ACTION_DIM,):
        raise ValueError(f"action must have shape ({ACTION_DIM},), got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise NonFiniteError(f"non-finite action {action.tolist()}")

    low, high = action_bounds(cfg, link)
    accel, pitch, roll, yaw, power = np.clip(action, low, high)
    uav = state.uav
    speed = float(np.clip(uav.speed + accel * cfg.dt, 0.0, cfg.v_max))
    velocity = dcm(roll, pitch, yaw) @ np.array([speed, 0.0, 0.0])
    position = np.clip(uav.position + velocity * cfg.dt, env.lower_bounds, env.upper_bounds)

    gus = env.gu_array
    loss = oracle(position, gus)
    p_r = received_power_dbm(power, loss)
    associated = p_r >= link.p_min_dbm
    n_associated = int(associated.sum())
    rates = np.zeros(env.n_gus)
    if n_associated:
        rates[associated] = rate_bps(p_r[associated], link, link.bandwidth_hz / n_associated)
    step_bits = rates * cfg.dt
    delivered = state.delivered + step_bits
    useful = np.minimum(step_bits, state.remaining)

    count = state.step + 1
    next_state = MdpState(
        uav=UavState(position, speed, float(roll), float(pitch), float(yaw)),
        start=state.start,
        payload=state.payload,
        delivered=delivered,
        associated=associated,
        received_dbm=p_r,
        step=count,
    )
    all_met = bool(np.all(next_state.satisfied))
    at_home = float(np.linalg.norm(position - state.start)) <= cfg.home_tolerance
    success = all_met and at_home
    timeout = (not success) and count >= cfg.t_max

    target = _target_point(uav.position, state, env)
    open_after = ~next_state.satisfied
    elevation = (
        float(np.max(elevation_angle_deg(position[None, :], gus[open_after])))
        if open_after.any() else float('nan')
    )
    record = TransitionRecord(
        step=count,
        t_max=cfg.t_max,
        moved=float(np.linalg.norm(position - uav.position)),
        progress=float(np.linalg.norm(uav.position - target) - np.linalg.norm(position - target)),
        useful_bits=useful,
        newly_satisfied=int(np.sum(next_state.satisfied & ~state.satisfied)),
        success=success,
        timeout=timeout,
        max_elevation_unsatisfied_deg=elevation,
    )
    components = reward_components(record, cfg)
    total = reward(record, cfg)
    info = {
        'acceleration': (speed - uav.speed) / cfg.dt,
        'power_dbm': float(power),
        'rates': rates,
        'components': components,
        'record': record,
        'success': success,
        'timeout': timeout,
    }
    return next_state, total, success or timeout, info


def observation(state, env, cfg):
    """Flat state vector fed to the policy and value networks."""
    lower, upper = env.lower_bounds, env.upper_bounds
    uav = state.uav
    parts = [
        (uav.position - lower) / (upper - lower),
        [uav.speed / cfg.v_max, uav.roll / math.pi, uav.pitch / (math.pi / 2), uav.yaw / math.pi],
    ]
    relative = (env.gu_array - uav.position) / env.side_x
    remaining = state.remaining / state.payload
    parts.append(np.column_stack([relative, remaining]).reshape(-1))
    parts.append([state.step / cfg.t_max])
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def observation_dim(n_gus):
    return 8 + 4 * n_gus


class UavMdp:
    """Stateful wrapper around step() that records the trajectory."""

    def __init__(self, env, cfg, link, oracle):
        self.env = env
        self.cfg = cfg
        self.link = link
        self.oracle = oracle
        self.action_low, self.action_high = action_bounds(cfg, link)
        self.state = None
        self.trajectory = None
        self._episode_oracle = oracle

    @property
    def observation_dim(self):
        return observation_dim(self.env.n_gus)

    def reset(self, seed=None):
        self.state = reset(self.env, self.cfg, seed)
        self._episode_oracle = self.oracle.for_episode(seed)
        self.trajectory = TrajectoryResult(
            start=self.state.start.copy(),
            home=self.state.start.copy(),
            payload=self.state.payload.copy(),
            dt=self.cfg.dt,
        )
        return observation(self.state, self.env, self.cfg)

    def step(self, action):
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        self.state, total, done, info = step(self.state, action, self.env, self.cfg, self.link, self._episode_oracle)
        uav = self.state.uav
        self.trajectory.steps.append(StepRecord(
            step=self.state.step,
            position=uav.position,
            speed=uav.speed,
            roll=uav.roll,
            pitch=uav.pitch,
            yaw=uav.yaw,
            acceleration=info['acceleration'],
            power_dbm=info['power_dbm'],
            received_dbm=self.state.received_dbm,
            associated=self.state.associated,
            rates=info['rates'],
            reward=total,
            components=info['components'],
        ))
        if done:
            self.trajectory.success = info['success']
        return observation(self.state, self.env, self.cfg), total, done, info


def run_episode(mdp, controller, seed=None):
    """
    Roll out one episode
    Args:
        mdp (UavMdp): environment
        controller: callable (observation, MdpState) -> action
        seed (int): episode seed
    Returns:
        TrajectoryResult
    """
    obs = mdp.reset(seed)
    done = False
    while not done:
        obs, _, done, _ = mdp.step(controller(obs, mdp.state))
    return mdp.trajectory


def heading_action(state, target, cfg, link, power_dbm=None):
    """Action that points the nose at target and brakes to arrive without overshoot."""
    position = state.uav.position
    delta = np.asarray(target, dtype=float) - position
    distance = float(np.linalg.norm(delta))
    horizontal = float(np.hypot(delta[0], delta[1]))
    yaw = math.atan2(delta[1], delta[0]) if horizontal > 0 else state.uav.yaw
    # R_y(pitch) maps the nose to (cos, 0, -sin): climbing needs negative pitch
    pitch = -math.atan2(delta[2], horizontal) if distance > 0 else 0.0
    desired = min(cfg.v_max, distance / cfg.dt, math.sqrt(2.0 * cfg.a_max * distance))
    accel = float(np.clip((desired - state.uav.speed) / cfg.dt, -cfg.a_max, cfg.a_max))
    power = link.p_max_dbm if power_dbm is None else power_dbm
    return np.array([accel, pitch, 0.0, yaw, power])


@dataclass(frozen=True)
class Violation:
    constraint: str
    step: int
    magnitude: float


def check_feasibility(traj, cfg, link, constraints=None):
    """
    Check a trajectory against the flight and service constraints
    Args:
        traj (TrajectoryResult): trajectory to check
        cfg (EpisodeConfig): limits
        link (LinkBudget): power limits
        constraints (set): optional subset of constraint tags (e.g. 'speed', 'payload') to check
    Returns:
        list: Violation entries, empty when every constraint holds at every step
    """
    unknown = set(constraints or ()) - set(CONSTRAINTS)
    if unknown:
        raise ValueError(f"unknown constraint tags {sorted(unknown)}")
    tol = BOUND_TOLERANCE
    violations = []

    def flag(tag, index, magnitude):
        if constraints is None or tag in constraints:
            violations.append(Violation(tag, int(index), float(magnitude)))

    if traj.n_steps > cfg.t_max:
        flag('mission_time', traj.n_steps, traj.n_steps - cfg.t_max)
    start_gap = float(np.linalg.norm(traj.start - traj.home))
    if start_gap > tol:
        flag('home', 0, start_gap)
    end_gap = float(np.linalg.norm(traj.positions()[-1] - traj.home))
    if end_gap > cfg.home_tolerance:
        flag('home', traj.n_steps, end_gap - cfg.home_tolerance)

    for s in traj.steps:
        if abs(s.pitch) > math.pi / 2 + tol:
            flag('pitch', s.step, abs(s.pitch) - math.pi / 2)
        if abs(s.roll) > math.pi + tol:
            flag('roll', s.step, abs(s.roll) - math.pi)
        if abs(s.yaw) > math.pi + tol:
            flag('yaw', s.step, abs(s.yaw) - math.pi)
        if s.speed < -tol or s.speed > cfg.v_max + tol:
            flag('speed', s.step, max(-s.speed, s.speed - cfg.v_max))
        if abs(s.acceleration) > cfg.a_max + tol:
            flag('acceleration', s.step, abs(s.acceleration) - cfg.a_max)
        if s.power_dbm < -tol or s.power_dbm > link.p_max_dbm + tol:
            flag('power', s.step, max(-s.power_dbm, s.power_dbm - link.p_max_dbm))
        alpha = np.asarray(s.associated)
        binary = np.isin(alpha.astype(float), (0.0, 1.0))
        for i in np.flatnonzero(~binary):
            flag('association', s.step, abs(float(alpha[i]) - round(float(alpha[i]))))
        short = alpha.astype(float) * (np.asarray(s.received_dbm) - link.p_min_dbm)
        for i in np.flatnonzero(short < -tol):
            flag('link_threshold', s.step, -short[i])

    missing = traj.payload - traj.delivered
    for i in np.flatnonzero(missing > tol):
        flag('payload', traj.n_steps, missing[i])
    return violations


def replace_step(traj, index, **changes):
    """Copy of traj with one step record modified; used to build hand-made trajectories."""
    steps = list(traj.steps)
    steps[index] = replace(steps[index], **changes)
    return TrajectoryResult(traj.start, traj.home, traj.payload, traj.dt, steps, traj.success, dict(traj.info))
