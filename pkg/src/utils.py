import hashlib
import logging
import queue
import threading
import time

import numpy as np

LOGGER = logging.getLogger(__name__)


def stream_seed(seed, role, ident=0):
    """
    Derive a stable 64-bit seed for one entity from the master seed.

    :param seed: the experiment master seed
    :param role: what the stream is for, e.g. 'device', 'init', 'data'
    :param ident: which one of them, e.g. the device index
    :return: an int in [0, 2**64)
    """
    key = '%d|%s|%s' % (int(seed), role, ident)
    return int.from_bytes(hashlib.sha256(key.encode('utf-8')).digest()[:8],
                          'little')


def rng_stream(seed, role, ident=0):
    """
    A numpy Generator private to (seed, role, ident). Streams for different
    entities never share state, so results do not depend on the order in
    which entities are scheduled.

    :param seed: the experiment master seed
    :param role: what the stream is for
    :param ident: which entity
    """
    return np.random.Generator(np.random.PCG64(stream_seed(seed, role, ident)))


def digest(*arrays):
    """
    SHA-256 over the raw float64 bytes (and shapes) of the given arrays.

    :param arrays: numpy arrays, or lists/dicts of them
    :return: hex digest string
    """
    sha = hashlib.sha256()

    def _feed(item):
        if isinstance(item, dict):
            for key in sorted(item):
                sha.update(str(key).encode('utf-8'))
                _feed(item[key])
        elif isinstance(item, (list, tuple)):
            for sub in item:
                _feed(sub)
        else:
            arr = np.ascontiguousarray(item, dtype=np.float64)
            sha.update(str(arr.shape).encode('utf-8'))
            sha.update(arr.tobytes())
    for array in arrays:
        _feed(array)
    return sha.hexdigest()


def minibatches(count, batch_size, rng=None):
    """
    Split positions 0..count-1 into consecutive minibatches.

    :param count: number of samples
    :param batch_size: >= 1
    :param rng: numpy Generator to shuffle with, None keeps the natural order
    :return: list of int arrays
    """
    if batch_size < 1:
        raise ValueError('batch_size must be >= 1, got %s' % batch_size)
    order = np.arange(count) if rng is None else rng.permutation(count)
    return [order[start:start + batch_size]
            for start in range(0, count, batch_size)]


def _check_target_func(target_function):
    """
    Normalise a target function to a (function, args, kwargs) tuple.

    :param target_function: a callable, or a tuple of one to three parts
    """
    if callable(target_function):
        return target_function, (), {}
    if len(target_function) == 3:
        return tuple(target_function)
    elif len(target_function) == 1:
        return target_function[0], (), {}
    elif len(target_function) == 2:
        return target_function[0], target_function[1], {}
    raise RuntimeError('target_function tuple too long? - (func, (), {})')


def threaded_device_operation(entities, timeout, target_function, workers=None):
    """
    Thread any operation against many simulated entities (devices).

    :param entities: list of objects with an `ident` attribute
    :param timeout: how long to wait for each thread, seconds, None to wait
        forever
    :param target_function: a tuple with three parts:

                            1. reference, the function object that must be
                               run - MUST take the entity as first argument
                            2. tuple, the arguments to the function
                            3. dict, the keyword arguments to the function
    :param workers: how many may run at once; 1 runs everything inline in
        the calling thread, None means one thread per entity
    :return: a dictionary of the results, keyed on entity ident
    """
    func, args, kwargs = _check_target_func(target_function)
    if workers is not None and workers < 1:
        raise ValueError('workers must be >= 1, got %s' % workers)

    if workers == 1 or len(entities) <= 1:
        return dict((entity.ident, func(entity, *args, **kwargs))
                    for entity in entities)

    limit = threading.Semaphore(workers if workers is not None
                                else len(entities))
    result_queue = queue.Queue(maxsize=len(entities))

    def jobfunc(entity):
        with limit:
            try:
                rv = func(entity, *args, **kwargs)
            except Exception as exc:
                result_queue.put_nowait((entity.ident, None, exc))
                return
            result_queue.put_nowait((entity.ident, rv, None))

    stime = time.time()
    thread_list = []
    for entity in entities:
        thread = threading.Thread(target=jobfunc, args=(entity,))
        thread.daemon = True
        thread.start()
        thread_list.append(thread)
    for thread in thread_list:
        thread.join(timeout)

    returnval = {}
    failures = []
    while True:
        try:
            ident, rv, exc = result_queue.get_nowait()
        except queue.Empty:
            break
        if exc is not None:
            failures.append((ident, exc))
        else:
            returnval[ident] = rv
    if failures:
        ident, exc = sorted(failures, key=lambda item: item[0])[0]
        LOGGER.error('Running %s on entity %s failed: %s' % (
            func.__name__, ident, exc))
        raise exc
    missing = [entity.ident for entity in entities
               if entity.ident not in returnval]
    if missing:
        errmsg = 'Ran function \'%s\' on entities. Did not get a response ' \
                 'from %s.' % (func.__name__, missing)
        LOGGER.error(errmsg)
        raise RuntimeError(errmsg)
    LOGGER.debug('Ran %s on %i entities in %.3f seconds.' % (
        func.__name__, len(entities), time.time() - stime))
    return returnval

# end
