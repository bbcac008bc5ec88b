import pytest

from app.utils.errors import DimensionError, MissingInputError, SchemaError, TrainingDivergedError
from app.utils.file_utils import allowed_file, read_json, require_input, write_json
from app.utils.init_utils import STAGE_INDEX, stage_seed


def test_stage_seeds_are_stable_and_distinct():
    assert stage_seed(7, 'gen-data') == stage_seed(7, 'gen-data')
    seeds = {stage_seed(7, stage, worker) for stage in STAGE_INDEX for worker in range(3)}
    assert len(seeds) == 3 * len(STAGE_INDEX)
    assert stage_seed(7, 'plan') != stage_seed(8, 'plan')


@pytest.mark.parametrize('name, allowed', [
    ('real.csv', True), ('model.PT', True), ('notes.txt', False), ('no_extension', False), ('', False),
])
def test_allowed_file(name, allowed):
    assert allowed_file(name) is allowed


def test_require_input(tmp_path):
    with pytest.raises(SchemaError):
        require_input(str(tmp_path / 'x.txt'))
    with pytest.raises(MissingInputError):
        require_input(str(tmp_path / 'x.csv'))


def test_json_round_trip_and_bad_json(tmp_path):
    path = write_json({'b': [1, 2], 'a': None}, str(tmp_path / 'nested' / 'doc.json'))
    assert read_json(path) == {'a': None, 'b': [1, 2]}
    broken = tmp_path / 'broken.json'
    broken.write_text('{\n  "a": ]\n}')
    with pytest.raises(SchemaError) as info:
        read_json(str(broken))
    assert info.value.line == 2


def test_error_codes_and_context():
    error = DimensionError('bad width', layer_index=3)
    assert error.code == 'DIMENSION_MISMATCH' and 'layer 3' in error.message
    diverged = TrainingDivergedError('nan', last_good_state={'w': 1})
    assert diverged.code == 'TRAINING_DIVERGED' and diverged.last_good_state == {'w': 1}
