"""
Adapter checkpoint files.

A checkpoint is a text header followed by a binary payload::

    #!/bin/mlecsckpt
    ?meta	seed	7
    ?meta	round	3
    ?adapter	0	16	16	2	1.0
    ?quit
    <float32 little-endian payload>

Each ?adapter line gives layer index, p, q, rank and scale. The payload
holds, per adapter in header order, A (rank x q) then B (p x rank), both
row-major.
"""

import logging
import os

import numpy as np

from .models import LoRAAdapter, apply_lora

LOGGER = logging.getLogger(__name__)

SHEBANG = '#!/bin/mlecsckpt'
WIRE_DTYPE = np.dtype('<f4')


class CheckpointFormatError(ValueError):
    pass


def write_checkpoint(filename, adapters, meta=None):
    """
    Write adapters to a checkpoint file.

    :param filename: where to write
    :param adapters: list of LoRAAdapter, in layer order
    :param meta: optional dict of extra header fields (no tabs or newlines)
    """
    lines = [SHEBANG]
    for key, value in sorted((meta or {}).items()):
        text = '%s\t%s' % (key, value)
        if '\n' in text or len(text.split('\t')) != 2:
            raise CheckpointFormatError('Meta field %r=%r cannot go in a '
                                        'header line' % (key, value))
        lines.append('?meta\t%s' % text)
    payload = []
    for ctr, adapter in enumerate(adapters):
        p, q = adapter.shape
        lines.append('?adapter\t%i\t%i\t%i\t%i\t%r' % (
            ctr, p, q, adapter.rank, adapter.scale))
        payload.append(adapter.a.astype(WIRE_DTYPE).tobytes())
        payload.append(adapter.b.astype(WIRE_DTYPE).tobytes())
    lines.append('?quit')
    with open(filename, 'wb') as fptr:
        fptr.write(('\n'.join(lines) + '\n').encode('ascii'))
        fptr.write(b''.join(payload))
    LOGGER.debug('Wrote %i adapters to %s' % (len(adapters), filename))


def _parse_adapter_line(filename, lineno, line):
    fields = line.split('\t')[1:]
    if len(fields) != 5:
        raise CheckpointFormatError('%s:%i: ?adapter needs 5 fields, got %i' % (
            filename, lineno, len(fields)))
    try:
        index, p, q, rank = (int(val) for val in fields[:4])
        scale = float(fields[4])
    except ValueError:
        raise CheckpointFormatError('%s:%i: bad ?adapter line %r' % (
            filename, lineno, line))
    return index, p, q, rank, scale


def read_checkpoint(filename):
    """
    Read the header and adapters from a checkpoint file.

    :param filename: the checkpoint to read
    :return: (meta dict of strings, list of LoRAAdapter)
    """
    if not os.path.isfile(filename):
        raise IOError('No such file %s' % filename)
    with open(filename, 'rb') as fptr:
        firstline = fptr.readline().decode('ascii', 'replace').rstrip('\n')
        if firstline != SHEBANG:
            raise CheckpointFormatError('%s does not look like a checkpoint '
                                        'file we can parse.' % filename)
        meta = {}
        layout = []
        lineno = 1
        while True:
            raw = fptr.readline()
            lineno += 1
            if not raw:
                raise CheckpointFormatError('%s: header ended without ?quit' %
                                            filename)
            line = raw.decode('ascii', 'replace').rstrip('\n')
            if line == '?quit':
                break
            elif line.startswith('?meta\t'):
                fields = line.split('\t')
                if len(fields) != 3:
                    raise CheckpointFormatError('%s:%i: bad ?meta line %r' % (
                        filename, lineno, line))
                meta[fields[1]] = fields[2]
            elif line.startswith('?adapter\t'):
                layout.append(_parse_adapter_line(filename, lineno, line))
            else:
                raise CheckpointFormatError('%s:%i: unknown header line %r' % (
                    filename, lineno, line))
        payload = fptr.read()
    expected = sum(rank * (p + q) for _, p, q, rank, _ in layout)
    if len(payload) != expected * WIRE_DTYPE.itemsize:
        raise CheckpointFormatError(
            '%s: payload is %i bytes, header describes %i' % (
                filename, len(payload), expected * WIRE_DTYPE.itemsize))
    values = np.frombuffer(payload, dtype=WIRE_DTYPE).astype(np.float64)
    adapters = []
    offset = 0
    for ctr, (index, p, q, rank, scale) in enumerate(layout):
        if index != ctr:
            raise CheckpointFormatError('%s: adapter %i listed as index %i' % (
                filename, ctr, index))
        a = values[offset:offset + rank * q].reshape(rank, q)
        offset += rank * q
        b = values[offset:offset + p * rank].reshape(p, rank)
        offset += p * rank
        adapters.append(LoRAAdapter(a, b, scale))
    LOGGER.debug('Read %i adapters from %s' % (len(adapters), filename))
    return meta, adapters


def load_checkpoint(model, filename):
    """
    Apply a checkpoint's adapters to a model (UnifiedModel or Backbone).

    :return: the checkpoint meta dict
    """
    meta, adapters = read_checkpoint(filename)
    apply_lora(model, adapters)
    return meta

# end
