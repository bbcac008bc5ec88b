import json
import os

import pandas as pd
import pytest

from app import create_app
from app.routes.main_routes import Artifacts, ckm_radar_rows, main, make_oracle
from app.utils.errors import ConfigError
from app.utils.file_utils import write_json
from config.run_config import RunConfig

SMALL_SCENE = os.path.join(os.path.dirname(__file__), '..', 'config', 'scenes', 'small.json')

TINY = {
    'environment': {'side_x': 200.0, 'h_min': 60.0, 'h_max': 150.0, 'n_gus': 2, 'gu_height': 0.0,
                    'n_buildings': 2, 'footprint_range': [20.0, 40.0], 'height_range': [20.0, 50.0],
                    'grid_cells': [4, 4]},
    'dataset': {'n_real': 120},
    'wgan': {'latent_dim': 4, 'batch_size': 16, 'iterations': 3, 'hidden_sizes': [8], 'log_every': 1},
    'ckm_arch': {'hidden_sizes': [8], 'encoder_sizes': [4]},
    'ckm_train': {'max_epochs': 2, 'batch_size': 16},
    'episode': {'t_max': 10, 'payload_bits': 1e6},
    'ppo': {'episodes': 2, 'rollout_length': 8, 'minibatch_size': 4, 'update_epochs': 1, 'hidden_sizes': [8]},
    'bcd': {'waypoints': 5, 'max_iterations': 2},
    'compare': {'n_seeds': 1, 'eval_oracle': 'los'},
}


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / 'tiny.json'
    config.write_text(json.dumps(TINY))
    out = tmp_path / 'out'

    def run(*argv):
        return main.run([argv[0], '--config', str(config), '--out', str(out), *argv[1:]])
    return run, out


def last_json_line(text):
    return json.loads(text.strip().splitlines()[-1])


def data_of(capsys):
    return json.loads(capsys.readouterr().out)['data']


def test_create_app_registers_every_stage():
    app = create_app()
    assert {'gen-env', 'gen-data', 'augment', 'train-ckm', 'eval-ckm', 'train-ppo', 'plan', 'compare',
            'report'} <= set(app.commands)


def test_unknown_argument_exits_with_usage_error(workspace):
    run, _ = workspace
    assert run('gen-data', '--rows', 'many') == 2
    assert main.run(['no-such-stage']) == 2


def test_missing_input_exits_with_error_json(workspace, capsys):
    run, _ = workspace
    assert run('gen-data') == 1
    error = last_json_line(capsys.readouterr().err)['error']
    assert error['code'] == 'MISSING_INPUT'


def test_bad_config_exits_with_config_error(tmp_path, capsys):
    config = tmp_path / 'bad.json'
    config.write_text(json.dumps({'bcd': {'variant': 'sideways'}}))
    assert main.run(['gen-env', '--config', str(config), '--out', str(tmp_path)]) == 1
    assert last_json_line(capsys.readouterr().err)['error']['code'] == 'CONFIG_ERROR'


def test_scene_is_reproducible(tmp_path):
    for name in ('a', 'b'):
        assert main.run(['gen-env', '--seed', '3', '--out', str(tmp_path / name),
                         '--config', SMALL_SCENE]) == 0
    assert (tmp_path / 'a' / 'environment.json').read_text() == (tmp_path / 'b' / 'environment.json').read_text()


def test_make_oracle_rejects_unknown_kind(city_env):
    with pytest.raises(ConfigError):
        make_oracle('radar', city_env, RunConfig())


def test_radar_rows_pair_augmented_models(tmp_path):
    artifacts = Artifacts(str(tmp_path))
    base = {'mse': 10.0, 'mape': 3.0, 'train_seconds': 1.0, 'infer_seconds_per_1k': 0.1, 'param_count': 50}
    files = [
        write_json({**base, 'model': 'kd'}, artifacts.model('kd', '_metrics.json')),
        write_json({**base, 'model': 'kd-aug', 'mse': 8.0}, artifacts.model('kd-aug', '_metrics.json')),
    ]
    rows = {r['model']: r for r in ckm_radar_rows(files)}
    assert rows['kd']['mse_reduction'] == 0.0
    assert rows['kd-aug']['mse_reduction'] == pytest.approx(20.0)


def test_radar_rows_with_zero_baseline(tmp_path):
    artifacts = Artifacts(str(tmp_path))
    base = {'mse': 0.0, 'mape': 0.0, 'train_seconds': 1.0, 'infer_seconds_per_1k': 0.1, 'param_count': 50}
    files = [
        write_json({**base, 'model': 'plain'}, artifacts.model('plain', '_metrics.json')),
        write_json({**base, 'model': 'plain-aug'}, artifacts.model('plain-aug', '_metrics.json')),
    ]
    rows = {r['model']: r for r in ckm_radar_rows(files)}
    assert rows['plain-aug']['mse_reduction'] == 0.0


def test_report_rejects_non_finite_metrics(tmp_path, capsys):
    artifacts = Artifacts(str(tmp_path))
    metrics = {'model': 'kd', 'mse': float('nan'), 'mape': float('inf'), 'train_seconds': 1.0,
               'infer_seconds_per_1k': 0.1, 'param_count': 50}
    write_json(metrics, artifacts.model('kd', '_metrics.json'))
    assert main.run(['report', '--out', str(tmp_path)]) == 1
    error = last_json_line(capsys.readouterr().err)['error']
    assert error['code'] == 'NON_FINITE'
    assert 'mape' in error['message'] and 'mse' in error['message']


def test_artifact_paths_only_create_folders_for_outputs(tmp_path):
    artifacts = Artifacts(str(tmp_path / 'out'))
    assert not os.path.exists(os.path.dirname(artifacts.data('train')))
    assert not os.path.exists(os.path.dirname(artifacts.model('kd')))
    written = artifacts.output(artifacts.report('radar.csv'))
    assert os.path.isdir(os.path.dirname(written))
    assert not os.path.exists(written)


def test_full_pipeline(workspace, capsys):
    run, out = workspace
    assert run('gen-env') == 0
    assert os.path.exists(data_of(capsys)['environment'])

    assert run('gen-data') == 0
    rows = data_of(capsys)['rows']
    assert rows == {'real': 120, 'train': 84, 'val': 36}

    assert run('augment') == 0
    augmented = data_of(capsys)
    assert os.path.exists(augmented['generator'])

    assert run('train-ckm', '--variant', 'kd') == 0
    kd = data_of(capsys)
    assert kd['checkpoint'].endswith(os.path.join('models', 'kd.pt'))
    assert run('train-ckm', '--variant', 'kd', '--augmented') == 0
    capsys.readouterr()

    assert run('eval-ckm', '--model', kd['checkpoint']) == 0
    assert data_of(capsys)['mse'] >= 0

    assert run('train-ppo', '--oracle', 'los') == 0
    los = data_of(capsys)
    curve = pd.read_csv(los['learning_curve'])
    assert len(curve) == 2
    assert run('train-ppo', '--oracle', f"ckm:{kd['checkpoint']}", '--name', 'ckm') == 0
    capsys.readouterr()

    for method in (['bcd'], ['bcd', '--loose'], ['ppo'], ['random']):
        assert run('plan', '--method', *method) == 0
        assert os.path.exists(data_of(capsys)['trace'])

    assert run('compare') == 0
    table = data_of(capsys)['table']
    assert {r['method'] for r in table} == {'los-BCD', 'los-BCD-loose', 'los-PPO', 'KDCKM-PPO', 'random'}
    first_table = (out / 'comparison.csv').read_text()
    assert run('compare') == 0
    assert data_of(capsys)['table'] == table
    assert (out / 'comparison.csv').read_text() == first_table

    assert run('report') == 0
    written = data_of(capsys)
    assert {'radar', 'pairplot', 'learning_curve_los', 'learning_curve_ckm', 'trajectories'} <= set(written)
    radar = pd.read_csv(out / 'report' / 'radar.csv')
    assert set(radar['model']) == {'kd', 'kd-aug'}


@pytest.mark.slow
def test_blockage_scene_planner_ordering(tmp_path, capsys):
    def run(*argv):
        return main.run([argv[0], '--config', 'blockage', '--out', str(tmp_path), *argv[1:]])

    for stage in (('gen-env',), ('gen-data',), ('train-ckm', '--variant', 'kd')):
        assert run(*stage) == 0
    kd = data_of(capsys)['checkpoint']
    assert run('train-ppo', '--oracle', 'los') == 0
    assert run('train-ppo', '--oracle', f"ckm:{kd}", '--name', 'ckm') == 0
    capsys.readouterr()

    assert run('compare') == 0
    table = pd.DataFrame(data_of(capsys)['table']).set_index('method')
    flight = table['mean_t_end']
    assert flight['los-PPO'] < flight['random']
    assert flight['KDCKM-PPO'] <= flight['los-PPO']
    assert table.loc['los-PPO', 'success_rate'] >= 0.7
    if table.loc['los-BCD', 'success_rate'] == 1.0 and table.loc['los-BCD-loose', 'success_rate'] == 1.0:
        assert flight['los-BCD-loose'] <= flight['los-BCD']
