import numpy as np
import pytest

from mlecs import checkpoint, models


def adapters_for(rng, width=8, depth=2, rank=2):
    backbone = models.Backbone.build(width, depth, 6, 2, rank, rng)
    for adapter in backbone.adapters:
        adapter.b[...] = rng.standard_normal(adapter.b.shape)
    return backbone


def test_write_then_load(tmp_path, rng):
    source = adapters_for(rng)
    filename = str(tmp_path / 'adapters.ckpt')
    checkpoint.write_checkpoint(filename, models.extract_lora(source),
                                {'seed': 7, 'mode': 'mlecs'})
    target = adapters_for(rng)
    meta = checkpoint.load_checkpoint(target, filename)
    assert meta == {'mode': 'mlecs', 'seed': '7'}
    for mine, theirs in zip(target.adapters, source.adapters):
        np.testing.assert_allclose(mine.a, theirs.a.astype(np.float32))
        np.testing.assert_allclose(mine.b, theirs.b.astype(np.float32))
    tokens = rng.standard_normal((3, 8))
    np.testing.assert_allclose(target.forward(tokens)[0],
                               source.forward(tokens)[0], rtol=1e-5, atol=1e-6)


def test_header_layout(tmp_path, rng):
    filename = str(tmp_path / 'adapters.ckpt')
    checkpoint.write_checkpoint(filename, adapters_for(rng, depth=1).adapters,
                                {'round': 3})
    with open(filename, 'rb') as fptr:
        raw = fptr.read()
    header, payload = raw.split(b'?quit\n', 1)
    assert header.decode('ascii').splitlines() == [
        '#!/bin/mlecsckpt', '?meta\tround\t3', '?adapter\t0\t8\t8\t2\t1.0']
    assert len(payload) == 2 * (8 + 8) * 4


def test_bad_files_rejected(tmp_path, rng):
    filename = str(tmp_path / 'adapters.ckpt')
    with pytest.raises(IOError):
        checkpoint.read_checkpoint(filename)
    (tmp_path / 'adapters.ckpt').write_bytes(b'#!/bin/kcpfpg\n?quit\n')
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.read_checkpoint(filename)
    (tmp_path / 'adapters.ckpt').write_bytes(b'#!/bin/mlecsckpt\n?adapter\t0\n')
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.read_checkpoint(filename)
    (tmp_path / 'adapters.ckpt').write_bytes(b'#!/bin/mlecsckpt\n?meta\ta\t1\n')
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.read_checkpoint(filename)


def test_truncated_payload(tmp_path, rng):
    filename = str(tmp_path / 'adapters.ckpt')
    checkpoint.write_checkpoint(filename, adapters_for(rng).adapters)
    with open(filename, 'rb') as fptr:
        raw = fptr.read()
    with open(filename, 'wb') as fptr:
        fptr.write(raw[:-4])
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.read_checkpoint(filename)


def test_meta_cannot_hold_tabs(tmp_path, rng):
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.write_checkpoint(str(tmp_path / 'x.ckpt'),
                                    adapters_for(rng).adapters,
                                    {'note': 'a\tb'})


def test_load_into_wrong_topology(tmp_path, rng):
    filename = str(tmp_path / 'adapters.ckpt')
    checkpoint.write_checkpoint(filename, adapters_for(rng, depth=3).adapters)
    with pytest.raises(models.ShapeMismatchError):
        checkpoint.load_checkpoint(adapters_for(rng, depth=2), filename)

# end
