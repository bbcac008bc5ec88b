"""
Block coordinate descent baseline over a discretized trajectory.

Three blocks alternate on a smooth surrogate of the mission time built on the
analytic LoS model: per-waypoint transmit power, the threshold association
(which sets the bandwidth split), and the waypoints themselves (projected
gradient step with backtracking). The optimized waypoints are then flown by
a tracking controller through the MDP, and only that replay is scored.
"""
import logging
from dataclasses import replace

import numpy as np
import torch

from app.services.channel_service import expected_loss_db, expected_loss_db_tensor
from app.services.mdp_service import (
    LosOracle, UavMdp, check_feasibility, heading_action, run_episode, start_position,
)
from app.services.neural_service import as_tensor

logger = logging.getLogger(__name__)

RATE_EPS = 1.0


def initial_waypoints(env, cfg, start, v_max, dt):
    """Straight line from the start toward the GU centroid at full speed, then hold."""
    rng = np.random.default_rng(cfg.seed)
    centroid = env.gu_array.mean(axis=0)
    goal = np.array([centroid[0], centroid[1], start[2]])
    offset = goal - start
    length = float(np.linalg.norm(offset))
    direction = offset / length if length > 0 else np.zeros(3)
    travel = np.minimum(np.arange(cfg.waypoints) * v_max * dt, length)
    waypoints = start + travel[:, None] * direction
    # small seeded jitter breaks ties between symmetric GUs
    waypoints[1:] += rng.normal(0.0, 1.0, size=(cfg.waypoints - 1, 3))
    return waypoints


def project(waypoints, env, start, v_max, dt, pin_start):
    """Clamp into the flight box and cap every hop at v_max * dt."""
    lower = as_tensor(env.lower_bounds)
    upper = as_tensor(env.upper_bounds)
    w = torch.minimum(torch.maximum(waypoints.detach().clone(), lower), upper)
    if pin_start:
        w[0] = as_tensor(start)
    hop = v_max * dt
    for k in range(1, len(w)):
        delta = w[k] - w[k - 1]
        length = torch.linalg.norm(delta)
        if length > hop:
            w[k] = w[k - 1] + delta * (hop / length)
    return w


def surrogate(waypoints, power, n_associated, env, link, params, episode, cfg, home):
    """
    Smooth estimate of the mission time
    Args:
        waypoints (torch.Tensor): (K, 3) positions
        power: (K,) transmit powers in dBm
        n_associated: (K,) associated-GU counts fixing the bandwidth split
        env (Environment): scene
        link (LinkBudget): link budget
        params (ChannelParams): analytic model constants
        episode (EpisodeConfig): dt, v_max and payload
        cfg (BcdConfig): association temperature
        home (torch.Tensor): return point
    Returns:
        torch.Tensor: scalar seconds
    """
    gus = as_tensor(env.gu_array)
    loss = expected_loss_db_tensor(waypoints[:, None, :], gus[None, :, :], params)
    p_r = as_tensor(power)[:, None] - loss
    soft_alpha = torch.sigmoid((p_r - link.p_min_dbm) / cfg.association_temperature_db)
    bandwidth = link.bandwidth_hz / torch.clamp(as_tensor(n_associated), min=1.0)
    snr = torch.pow(10.0, (p_r - link.noise_dbm) / 10.0)
    rate = soft_alpha * bandwidth[:, None] * torch.log2(1.0 + snr)
    served = rate.sum(dim=0) * episode.dt
    horizon = len(waypoints) * episode.dt
    service_time = (horizon * episode.payload_bits / (served + RATE_EPS)).sum()
    return service_time + torch.linalg.norm(waypoints[-1] - home) / episode.v_max


def power_block(waypoints, env, link, params):
    """P_max wherever some GU would clear the threshold at full power, the floor elsewhere."""
    loss = expected_loss_db(waypoints[:, None, :], env.gu_array[None, :, :], params)
    reachable = np.any(link.p_max_dbm - loss >= link.p_min_dbm, axis=1)
    return np.where(reachable, link.p_max_dbm, link.p_floor_dbm)


def association_block(waypoints, power, env, link, params):
    loss = expected_loss_db(waypoints[:, None, :], env.gu_array[None, :, :], params)
    alpha = (power[:, None] - loss) >= link.p_min_dbm
    return alpha, alpha.sum(axis=1).astype(float)


def waypoint_block(waypoints, objective, cfg, env, start, episode, pin_start):
    """Projected gradient step with backtracking; returns (waypoints, value), unchanged if nothing improves."""
    w = waypoints.detach().clone().requires_grad_(True)
    value = objective(w)
    (grad,) = torch.autograd.grad(value, w)
    scale = float(torch.max(torch.abs(grad)))
    if scale == 0.0 or not np.isfinite(scale):
        return waypoints, float(value)
    direction = grad / scale
    step = cfg.step_size
    for _ in range(cfg.line_search_steps):
        candidate = project(waypoints - step * direction, env, start, episode.v_max, episode.dt, pin_start)
        with torch.no_grad():
            candidate_value = float(objective(candidate))
        if candidate_value < float(value):
            return candidate, candidate_value
        step /= 2.0
    return waypoints, float(value)


def tracking_controller(waypoints, power, episode, link, reach=None):
    """Follow the waypoints in order, then head home once every payload is delivered."""
    reach = episode.v_max * episode.dt / 2.0 if reach is None else reach
    state_index = {'k': 1 if len(waypoints) > 1 else 0}

    def control(obs, state):
        position = state.uav.position
        if np.all(state.satisfied):
            return heading_action(state, state.start, episode, link)
        k = state_index['k']
        while k < len(waypoints) - 1 and np.linalg.norm(waypoints[k] - position) <= reach:
            k += 1
        state_index['k'] = k
        return heading_action(state, waypoints[k], episode, link, float(power[k]))
    return control


def solve_bcd(env, cfg, link, params, episode, eval_oracle=None):
    """
    Plan a trajectory by block coordinate descent and score it by MDP replay
    Args:
        env (Environment): scene
        cfg (BcdConfig): optimizer settings and variant
        link (LinkBudget): link budget
        params (ChannelParams): analytic model used inside the optimizer
        episode (EpisodeConfig): dynamics limits and payload
        eval_oracle: oracle for the replay; the analytic model when omitted
    Returns:
        TrajectoryResult: replayed trajectory; info holds waypoints, objective history,
        feasibility and violations
    """
    pin_start = cfg.variant == 'fixed-start'
    start = start_position(env, episode)
    waypoints = project(
        as_tensor(initial_waypoints(env, cfg, start, episode.v_max, episode.dt)),
        env, start, episode.v_max, episode.dt, pin_start,
    )

    def home_of(w):
        return as_tensor(start) if pin_start else w[0]

    power = power_block(waypoints.numpy(), env, link, params)
    _, n_associated = association_block(waypoints.numpy(), power, env, link, params)

    def objective_for(p, n):
        return lambda w: surrogate(w, p, n, env, link, params, episode, cfg, home_of(w))

    with torch.no_grad():
        current = float(objective_for(power, n_associated)(waypoints))
    history = [current]
    logger.info(f"BCD {cfg.variant}: initial objective {current:.4f}")

    for iteration in range(cfg.max_iterations):
        previous = current
        w_np = waypoints.numpy()

        new_power = power_block(w_np, env, link, params)
        with torch.no_grad():
            value = float(objective_for(new_power, n_associated)(waypoints))
        if value <= current:
            power, current = new_power, value

        _, new_count = association_block(w_np, power, env, link, params)
        with torch.no_grad():
            value = float(objective_for(power, new_count)(waypoints))
        if value <= current:
            n_associated, current = new_count, value

        waypoints, current = waypoint_block(
            waypoints, objective_for(power, n_associated), cfg, env, start, episode, pin_start
        )
        history.append(current)
        logger.info(f"BCD {cfg.variant} iteration {iteration}: objective {current:.4f}")
        if abs(previous - current) <= cfg.tolerance * max(abs(previous), 1.0):
            break

    waypoints_np = waypoints.detach().numpy()
    power = power_block(waypoints_np, env, link, params)
    replay_cfg = episode if pin_start else replace(episode, start=tuple(float(v) for v in waypoints_np[0]))
    oracle = eval_oracle if eval_oracle is not None else LosOracle(params)
    mdp = UavMdp(env, replay_cfg, link, oracle)
    traj = run_episode(mdp, tracking_controller(waypoints_np, power, replay_cfg, link), seed=cfg.seed)

    violations = check_feasibility(traj, replay_cfg, link)
    feasible = bool(traj.success and not violations)
    if not feasible:
        logger.warning(
            f"BCD {cfg.variant} result infeasible: "
            f"{sorted({v.constraint for v in violations}) or 'episode did not finish'}"
        )
    traj.info.update({
        'method': f"bcd-{cfg.variant}",
        'waypoints': waypoints_np,
        'power_dbm': power,
        'objective_history': history,
        'feasible': feasible,
        'violations': violations,
    })
    return traj
