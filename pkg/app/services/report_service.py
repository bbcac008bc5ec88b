"""
Comparison tables and SVG figures.
"""
import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pandas.plotting import scatter_matrix  # noqa: E402

from app.services.dataset_service import FEATURES  # noqa: E402
from app.services.mdp_service import check_feasibility  # noqa: E402

logger = logging.getLogger(__name__)

RADAR_AXES = ('train_seconds', 'infer_seconds_per_1k', 'mape', 'mse_reduction', 'param_count')
RADAR_FLOOR = 0.1


def radar_table(rows):
    """
    Scale each radar axis to [0.1, 1] across models
    Args:
        rows (list): dicts with 'model' and the five axis values
    Returns:
        pandas.DataFrame: raw axis columns plus '<axis>_scaled' columns; constant axes scale to 1.0
    """
    frame = pd.DataFrame(rows)
    missing = [a for a in RADAR_AXES if a not in frame.columns]
    if missing:
        raise ValueError(f"radar rows lack axes {missing}")
    for axis in RADAR_AXES:
        values = frame[axis].astype(float)
        lo, hi = values.min(), values.max()
        if hi == lo:
            frame[f'{axis}_scaled'] = 1.0
        else:
            frame[f'{axis}_scaled'] = RADAR_FLOOR + (1.0 - RADAR_FLOOR) * (values - lo) / (hi - lo)
    return frame


def radar_svg(table, path):
    angles = np.linspace(0.0, 2.0 * np.pi, len(RADAR_AXES), endpoint=False)
    closed = np.append(angles, angles[0])
    fig, ax = plt.subplots(figsize=(6, 6), subplot_kw={'projection': 'polar'})
    for _, row in table.iterrows():
        values = [row[f'{a}_scaled'] for a in RADAR_AXES]
        ax.plot(closed, values + values[:1], label=str(row.get('model', '')))
    ax.set_xticks(angles)
    ax.set_xticklabels(RADAR_AXES, fontsize=8)
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc='upper right', fontsize=7)
    fig.savefig(path, format='svg')
    plt.close(fig)
    return path


def comparison_table(rows):
    """Aggregate per-seed planner results into {method, mean_t_end, mean_throughput, success_rate, n_seeds}."""
    frame = pd.DataFrame(rows, columns=['method', 'seed', 't_end', 'throughput', 'success'])
    grouped = frame.groupby('method', sort=False)
    table = pd.DataFrame({
        'mean_t_end': grouped['t_end'].mean(),
        'mean_throughput': grouped['throughput'].mean(),
        'success_rate': grouped['success'].mean(),
        'n_seeds': grouped['seed'].count(),
    }).reset_index()
    return table


def compare_methods(planners, n_seeds, seed_for):
    """
    Run every planner on every seed
    Args:
        planners (dict): method name -> callable seed -> (TrajectoryResult, EpisodeConfig, LinkBudget)
        n_seeds (int): repetitions per method
        seed_for: callable repetition index -> seed
    Returns:
        tuple: (comparison DataFrame, per-run rows, dict method -> first-seed trajectory)
    """
    rows = []
    first = {}
    for method, plan in planners.items():
        for index in range(n_seeds):
            seed = seed_for(index)
            traj, episode, link = plan(seed)
            feasible = not check_feasibility(traj, episode, link)
            rows.append({
                'method': method,
                'seed': seed,
                't_end': traj.t_end,
                'throughput': traj.throughput,
                'success': float(traj.success and feasible),
            })
            first.setdefault(method, traj)
        logger.info(f"Compared {method} over {n_seeds} seeds")
    return comparison_table(rows), rows, first


def pairplot_svg(real, synth, path, max_points=1000, seed=0):
    """Scatter matrix of the eight features, real and synthetic rows overlaid."""
    real_frame = real.frame.sample(n=min(max_points, len(real)), random_state=seed)
    synth_frame = synth.frame.sample(n=min(max_points, len(synth)), random_state=seed)
    combined = pd.concat([real_frame, synth_frame], ignore_index=True)[list(FEATURES)]
    colors = ['tab:blue'] * len(real_frame) + ['tab:orange'] * len(synth_frame)
    axes = scatter_matrix(combined, figsize=(12, 12), c=colors, alpha=0.3, s=4, diagonal='hist')
    fig = axes[0, 0].get_figure()
    fig.suptitle('real (blue) vs synthetic (orange)')
    fig.savefig(path, format='svg')
    plt.close(fig)
    return path


def trajectories_svg(traces, env, path, dt=1.0):
    """
    Planar paths per method with GU markers, plus altitude over time
    Args:
        traces (dict): method -> trace DataFrame (TrajectoryResult.to_frame layout)
        env (Environment): scene drawn underneath
        path (str): output SVG
        dt (float): step length in seconds
    """
    fig, (top, side) = plt.subplots(1, 2, figsize=(12, 5))
    for method, frame in traces.items():
        top.plot(frame['x'], frame['y'], label=method)
        side.plot(frame['step'] * dt, frame['z'], label=method)
    gus = env.gu_array
    top.scatter(gus[:, 0], gus[:, 1], marker='^', color='black', label='GU')
    for b in env.buildings:
        top.add_patch(plt.Rectangle(b.min_corner, b.footprint[0], b.footprint[1], color='grey', alpha=0.3))
    top.set_xlim(0, env.side_x)
    top.set_ylim(0, env.side_x)
    top.set_xlabel('x (m)')
    top.set_ylabel('y (m)')
    top.legend(fontsize=7)
    side.set_xlabel('time (s)')
    side.set_ylabel('altitude (m)')
    fig.savefig(path, format='svg')
    plt.close(fig)
    return path


def learning_curve_svg(curve, path, window=10):
    frame = pd.DataFrame(curve)
    fig, ax = plt.subplots(figsize=(7, 4))
    if len(frame):
        ax.plot(frame['episode'], frame['return'], alpha=0.4, label='return')
        ax.plot(frame['episode'], frame['return'].rolling(window, min_periods=1).mean(), label=f'{window}-episode mean')
    ax.set_xlabel('episode')
    ax.set_ylabel('return')
    ax.legend()
    fig.savefig(path, format='svg')
    plt.close(fig)
    return path
