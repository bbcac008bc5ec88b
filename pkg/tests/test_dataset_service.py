import numpy as np
import pandas as pd
import pytest

from app.services.channel_service import fspl_db
from app.services.dataset_service import (
    FEATURES, Dataset, NormStats, concat, denormalize, from_positions, generate_dataset, normalize,
    read_csv, read_stats, split, stats_path, write_csv,
)
from app.utils.errors import MissingInputError, SchemaError


def toy(n=10, seed=0):
    rng = np.random.default_rng(seed)
    gu = rng.uniform(0, 100, size=(n, 3))
    uav = rng.uniform(0, 100, size=(n, 3)) + [0, 0, 200]
    return from_positions(gu, uav, -rng.uniform(60, 120, size=n))


def test_generate_is_deterministic(city_env, params):
    a = generate_dataset(city_env, params, 1, seed=4)
    b = generate_dataset(city_env, params, 1, seed=4)
    pd.testing.assert_frame_equal(a.frame, b.frame)


def test_generated_distance_matches_positions(city_env, params):
    ds = generate_dataset(city_env, params, 200, seed=1)
    frame = ds.frame
    d = np.linalg.norm(frame[['xU', 'yU', 'zU']].to_numpy() - frame[['xG', 'yG', 'zG']].to_numpy(), axis=1)
    np.testing.assert_allclose(frame['d'], d, rtol=1e-6)


def test_noiseless_open_scene_gain(open_env, noiseless_params):
    ds = generate_dataset(open_env, noiseless_params, 50, seed=2)
    expected = -(fspl_db(ds.frame['d'].to_numpy(), noiseless_params) + noiseless_params.eps_los)
    np.testing.assert_allclose(ds.frame['g'], expected)


def test_uav_rows_stay_in_flight_box(city_env, params):
    frame = generate_dataset(city_env, params, 300, seed=3).frame
    assert frame['zU'].between(city_env.h_min, city_env.h_max).all()
    assert frame['xU'].between(0, city_env.side_x).all()


def test_normalize_feature_scale():
    ds = toy(3)
    ds.frame['zU'] = [250.0, 500.0, 750.0]
    normed, stats = normalize(ds)
    np.testing.assert_allclose(normed.frame['zU'], [0.0, 0.5, 1.0])
    assert stats.column('zU') == (250.0, 750.0)


def test_normalize_round_trip():
    ds = toy(25)
    normed, stats = normalize(ds)
    np.testing.assert_allclose(denormalize(normed).values(), ds.values(), atol=1e-9)


def test_stored_stats_may_leave_unit_range():
    normed, stats = normalize(toy(20, seed=0))
    other, _ = normalize(toy(20, seed=1), stats)
    assert other.normalized
    assert other.stats == stats


def test_constant_column_normalizes_to_zero():
    ds = toy(5)
    ds.frame['zG'] = 0.0
    normed, stats = normalize(ds)
    assert stats.degenerate[FEATURES.index('zG')]
    assert (normed.frame['zG'] == 0.0).all()


def test_split_sizes_and_union():
    ds = toy(10)
    train, val = split(ds, 0.7, seed=3)
    assert (len(train), len(val)) == (7, 3)
    union = pd.concat([train.frame, val.frame]).sort_values(list(FEATURES)).reset_index(drop=True)
    original = ds.frame.sort_values(list(FEATURES)).reset_index(drop=True)
    pd.testing.assert_frame_equal(union, original)


def test_split_deterministic():
    a, _ = split(toy(30), 0.5, seed=11)
    b, _ = split(toy(30), 0.5, seed=11)
    pd.testing.assert_frame_equal(a.frame, b.frame)


def test_concat_rejects_mixed_scales():
    normed, _ = normalize(toy(4))
    with pytest.raises(ValueError):
        concat(normed, toy(4))


def test_csv_round_trip_is_exact(tmp_path):
    ds = toy(40)
    path = write_csv(ds, str(tmp_path / 'raw.csv'))
    pd.testing.assert_frame_equal(read_csv(path).frame, ds.frame)


def test_normalized_csv_carries_stats(tmp_path):
    normed, stats = normalize(toy(12))
    path = write_csv(normed, str(tmp_path / 'train.csv'))
    assert read_stats(stats_path(path)) == stats
    loaded = read_csv(path)
    assert loaded.normalized and loaded.stats == stats


def test_empty_dataset_writes_header_only(tmp_path):
    path = write_csv(Dataset(pd.DataFrame(columns=list(FEATURES), dtype=float)), str(tmp_path / 'empty.csv'))
    with open(path) as handle:
        assert handle.read().strip() == ','.join(FEATURES)
    assert len(read_csv(path)) == 0


def test_short_row_names_its_line(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text(','.join(FEATURES) + '\n' + ','.join(['1'] * 8) + '\n' + ','.join(['1'] * 7) + '\n')
    with pytest.raises(SchemaError) as info:
        read_csv(str(path))
    assert info.value.line == 3


def test_wrong_header(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('a,b\n1,2\n')
    with pytest.raises(SchemaError):
        read_csv(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(MissingInputError):
        read_csv(str(tmp_path / 'nope.csv'))


def test_stats_reject_inverted_range():
    with pytest.raises(SchemaError):
        NormStats.from_dict({'features': list(FEATURES), 'minimum': [1.0] * 8, 'maximum': [0.0] * 8})
