import numpy as np
import pandas as pd
import pytest

from app.services.dataset_service import generate_dataset
from app.services.mdp_service import LosOracle, UavMdp, heading_action, run_episode
from app.services.report_service import (
    RADAR_AXES, comparison_table, compare_methods, learning_curve_svg, pairplot_svg, radar_svg, radar_table,
    trajectories_svg,
)


def radar_rows():
    return [
        {'model': 'plain', 'mse': 4.0, 'mape': 2.0, 'train_seconds': 10.0, 'infer_seconds_per_1k': 0.2,
         'mse_reduction': 0.0, 'param_count': 500},
        {'model': 'kd', 'mse': 0.0, 'mape': 0.0, 'train_seconds': 30.0, 'infer_seconds_per_1k': 0.4,
         'mse_reduction': 0.0, 'param_count': 500},
    ]


def test_radar_scaling():
    table = radar_table(radar_rows())
    assert all(f"{axis}_scaled" in table.columns for axis in RADAR_AXES)
    assert list(table['mape_scaled']) == [1.0, pytest.approx(0.1)]
    assert list(table['train_seconds_scaled']) == [pytest.approx(0.1), 1.0]
    # constant axes sit on the rim
    assert list(table['param_count_scaled']) == [1.0, 1.0]
    assert list(table['mse_reduction_scaled']) == [1.0, 1.0]


def test_radar_needs_every_axis():
    rows = [{k: v for k, v in radar_rows()[0].items() if k != 'mape'}]
    with pytest.raises(ValueError):
        radar_table(rows)


def test_comparison_table_aggregates_per_method():
    rows = [
        {'method': 'bcd', 'seed': 1, 't_end': 40.0, 'throughput': 1e5, 'success': 1.0},
        {'method': 'bcd', 'seed': 2, 't_end': 60.0, 'throughput': 3e5, 'success': 0.0},
        {'method': 'ppo', 'seed': 1, 't_end': 30.0, 'throughput': 2e5, 'success': 1.0},
    ]
    table = comparison_table(rows).set_index('method')
    assert table.loc['bcd', 'mean_t_end'] == 50.0
    assert table.loc['bcd', 'mean_throughput'] == 2e5
    assert table.loc['bcd', 'success_rate'] == 0.5
    assert table.loc['ppo', 'n_seeds'] == 1


def test_compare_methods_runs_every_seed(open_env, episode, link, params):
    def hover_home(seed):
        mdp = UavMdp(open_env, episode, link, LosOracle(params))
        traj = run_episode(mdp, lambda obs, state: heading_action(state, state.start, episode, link), seed=seed)
        return traj, episode, link

    table, rows, first = compare_methods({'home': hover_home}, 3, lambda i: 100 + i)
    assert [r['seed'] for r in rows] == [100, 101, 102]
    assert table.loc[0, 'success_rate'] == 1.0
    assert set(first) == {'home'}


def test_figures_are_written(tmp_path, open_env, city_env, params, episode, link):
    table = radar_table(radar_rows())
    paths = [radar_svg(table, str(tmp_path / 'radar.svg'))]

    real = generate_dataset(city_env, params, 60, seed=0)
    synth = generate_dataset(city_env, params, 60, seed=1)
    paths.append(pairplot_svg(real, synth, str(tmp_path / 'pairplot.svg'), max_points=30))

    curve = [{'episode': i, 'return': float(np.sin(i)), 'length': 10, 'success': False} for i in range(20)]
    paths.append(learning_curve_svg(curve, str(tmp_path / 'curve.svg')))

    mdp = UavMdp(open_env, episode, link, LosOracle(params))
    traj = run_episode(mdp, lambda obs, state: heading_action(state, [100.0, 100.0, 100.0], episode, link), seed=0)
    frame = traj.to_frame()
    paths.append(trajectories_svg({'a': frame, 'b': pd.DataFrame(frame)}, open_env, str(tmp_path / 'traj.svg')))

    for path in paths:
        with open(path) as handle:
            assert '<svg' in handle.read()
