import io
import logging
import threading

import numpy as np
import pytest

from mlecs import MlecsLogHandlers, utils
from mlecs.attribute_container import AttributeContainer


class Entity(object):
    def __init__(self, ident):
        self.ident = ident


def test_streams_are_private_and_stable():
    first = utils.rng_stream(7, 'device', 0).random(4)
    again = utils.rng_stream(7, 'device', 0).random(4)
    other = utils.rng_stream(7, 'device', 1).random(4)
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)
    assert utils.stream_seed(7, 'init') != utils.stream_seed(8, 'init')
    assert 0 <= utils.stream_seed(7, 'init') < 2 ** 64


def test_minibatches_cover_every_position(rng):
    batches = utils.minibatches(10, 4)
    assert [len(batch) for batch in batches] == [4, 4, 2]
    np.testing.assert_array_equal(np.concatenate(batches), np.arange(10))
    shuffled = np.concatenate(utils.minibatches(10, 3, rng))
    assert sorted(shuffled.tolist()) == list(range(10))
    assert utils.minibatches(0, 3) == []
    with pytest.raises(ValueError):
        utils.minibatches(5, 0)


def test_digest_tracks_values_and_shapes():
    arr = np.arange(6.0)
    assert utils.digest(arr) == utils.digest(arr.copy())
    assert utils.digest(arr) != utils.digest(arr.reshape(2, 3))
    assert utils.digest({'a': arr}) != utils.digest({'b': arr})
    changed = arr.copy()
    changed[0] = 1e-300
    assert utils.digest(arr) != utils.digest(changed)


def test_threaded_operation_results_keyed_on_ident():
    entities = [Entity(ctr) for ctr in range(5)]
    seen = []
    lock = threading.Lock()

    def work(entity, scale, offset=0):
        with lock:
            seen.append(entity.ident)
        return entity.ident * scale + offset

    for workers in (None, 1, 2):
        result = utils.threaded_device_operation(
            entities, 10, (work, (3,), {'offset': 1}), workers=workers)
        assert result == dict((ctr, 3 * ctr + 1) for ctr in range(5))
    assert sorted(seen) == sorted(list(range(5)) * 3)


def test_threaded_operation_reraises_the_lowest_failure():
    entities = [Entity(ctr) for ctr in range(4)]

    def work(entity):
        if entity.ident >= 2:
            raise KeyError(entity.ident)
        return entity.ident

    with pytest.raises(KeyError) as excinfo:
        utils.threaded_device_operation(entities, 10, work, workers=3)
    assert excinfo.value.args == (2,)
    with pytest.raises(ValueError):
        utils.threaded_device_operation(entities, 10, work, workers=0)
    with pytest.raises(RuntimeError):
        utils.threaded_device_operation(entities, 10, (work, (), {}, 'x'))


def test_attribute_container():
    container = AttributeContainer([('vision', 1), ('audio', 2)])
    container['text'] = 3
    assert container.names() == ['vision', 'audio', 'text']
    assert list(container) == [1, 2, 3]
    assert container.audio == 2 and container['text'] == 3
    assert 'vision' in container and len(container) == 3
    with pytest.raises(AttributeError):
        container.vision = 5
    with pytest.raises(KeyError):
        container['depth']


def test_log_level_names(monkeypatch):
    assert MlecsLogHandlers.log_level_from_name('debug') == logging.DEBUG
    with pytest.raises(ValueError):
        MlecsLogHandlers.log_level_from_name('loud')
    monkeypatch.setenv(MlecsLogHandlers.LOG_LEVEL_ENV, 'info')
    assert MlecsLogHandlers.log_level_from_env() == logging.INFO
    monkeypatch.delenv(MlecsLogHandlers.LOG_LEVEL_ENV)
    assert MlecsLogHandlers.log_level_from_env() == logging.ERROR


def test_console_handler_fifo():
    stream = io.StringIO()
    handler = MlecsLogHandlers.MlecsConsoleHandler('sample', max_len=2,
                                                   stream=stream)
    logger = logging.getLogger('mlecs.sample')
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    try:
        for ctr in range(3):
            logger.info('round %i', ctr)
    finally:
        logger.removeHandler(handler)
        logger.setLevel(logging.NOTSET)
    assert handler.get_log_strings() == ['mlecs.sample: round 1',
                                         'mlecs.sample: round 2']
    assert handler.get_log_strings(1) == ['mlecs.sample: round 1']
    assert stream.getvalue().count('INFO mlecs.sample') == 3


def test_console_logging_is_installed_once(mlecs_logger):
    assert MlecsLogHandlers.configure_console_logging(mlecs_logger,
                                                      log_level='warning')
    assert not MlecsLogHandlers.configure_console_logging(mlecs_logger)
    assert mlecs_logger.level == logging.WARNING
    assert mlecs_logger.propagate is False


def test_file_logging(tmp_path, mlecs_logger):
    handler = MlecsLogHandlers.configure_file_logging(
        mlecs_logger, 'sample.log', str(tmp_path))
    mlecs_logger.setLevel(logging.INFO)
    try:
        logging.getLogger('mlecs.sample').warning('written to file')
    finally:
        mlecs_logger.removeHandler(handler)
        handler.close()
    text = (tmp_path / 'sample.log').read_text()
    assert 'written to file' in text
    assert ' | WARNING | mlecs.sample' in text
    with pytest.raises(ValueError):
        MlecsLogHandlers.configure_file_logging(mlecs_logger, 'x.log',
                                                str(tmp_path / 'missing'))

# end
