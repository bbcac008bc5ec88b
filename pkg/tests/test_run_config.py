import json

import pytest

from config.run_config import (
    RunConfig, config_from_dict, format_error_response, format_success_response, load_run_config,
    save_run_config,
)
from app.utils.errors import ConfigError


def test_defaults_are_valid():
    cfg = config_from_dict({})
    assert cfg == RunConfig()
    assert cfg.bcd.variant == 'fixed-start'
    assert cfg.channel.amplitude_db == pytest.approx(-19.0)


def test_nested_overrides_merge():
    cfg = config_from_dict({'episode': {'t_max': 30, 'weights': {'w4': 2.0}}, 'ppo': {'hidden_sizes': [16, 8]}})
    assert cfg.episode.t_max == 30
    assert cfg.episode.weights.w4 == 2.0 and cfg.episode.weights.w1 == 1.0
    assert cfg.episode.v_max == 50.0
    assert cfg.ppo.hidden_sizes == (16, 8)


@pytest.mark.parametrize('data', [
    {'wgan': {'learning_rate': 1e-3}},
    {'unknown_block': {}},
    {'episode': 5},
])
def test_bad_keys_are_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


@pytest.mark.parametrize('data', [
    {'environment': {'h_min': 800.0}},
    {'environment': {'height_range': [50.0, 300.0]}},
    {'bcd': {'variant': 'sideways'}},
    {'compare': {'eval_oracle': 'ckm'}},
    {'episode': {'dt': 0.0}},
])
def test_invalid_values_are_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_file_round_trip_with_overrides(tmp_path):
    cfg = config_from_dict({'dataset': {'n_real': 123}, 'episode': {'start': [1.0, 2.0, 300.0]}})
    path = tmp_path / 'run.json'
    save_run_config(cfg, str(path))
    loaded = load_run_config(str(path))
    assert loaded == cfg
    assert load_run_config(str(path), seed=99, output_dir='elsewhere').seed == 99


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / 'absent.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{"seed": ')
    with pytest.raises(ConfigError):
        load_run_config(str(broken))


def test_response_envelopes():
    assert format_success_response({'a': 1}) == {'success': True, 'data': {'a': 1}}
    error = format_error_response('boom', 'NON_FINITE')
    assert json.loads(json.dumps(error))['error'] == {'message': 'boom', 'code': 'NON_FINITE'}


def test_shipped_scenes_load_by_name():
    small = load_run_config('small')
    assert small.environment.side_x == 200.0
    blockage = load_run_config('blockage')
    assert blockage.environment.n_gus == 5 and blockage.environment.side_x == 400.0
    assert load_run_config('default').environment == RunConfig().environment
