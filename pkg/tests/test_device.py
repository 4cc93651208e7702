from collections import OrderedDict

import numpy as np
import pytest

from mlecs import datasets, device, models
from mlecs.utils import digest

from conftest import UNIVERSE, build_model


def make_device(seed=3, modalities=('vision', 'text'), n=120, negatives=4,
                ident=0, noise=0.3):
    rng = np.random.default_rng(seed)
    spec = datasets.SyntheticTaskSpec.generate(
        OrderedDict((m, 5) for m in UNIVERSE), 4, 4, noise, n, rng,
        orthogonal=True)
    data = datasets.synth_dataset(spec, rng).restrict(list(modalities))
    model = build_model(rng, list(modalities))
    state = device.DeviceState(ident, list(modalities), model,
                               data.take(np.arange(0, 60)),
                               data.take(np.arange(60, 80)),
                               data.take(np.arange(80, n)),
                               np.random.default_rng(seed + 100),
                               batch_size=8, negatives=negatives)
    return state


def anchors_for(state, seed=11):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((len(state.public_shard), 4))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return dict((int(sid), row) for sid, row in zip(state.public_shard.ids, rows))


def group_digests(model):
    return dict((group, models.group_digest(model, (group,)))
                for group in models.TRAINABLE_GROUPS + (models.BACKBONE,))


def test_device_needs_matching_model():
    state = make_device()
    with pytest.raises(models.UnknownModalityError):
        device.DeviceState(1, ['vision'], state.model, state.private_train,
                           state.private_test, state.public_shard,
                           np.random.default_rng(0))
    with pytest.raises(ValueError):
        device.DeviceState(1, [], state.model, state.private_train,
                           state.private_test, state.public_shard,
                           np.random.default_rng(0))
    assert state.id == 0


def test_ccl_trains_connector_and_adapters_only():
    state = make_device()
    anchors = anchors_for(state)
    anchor_digest = digest(list(anchors.values()))
    before = group_digests(state.model)
    loss = device.run_ccl(state, anchors, 1, 0.05)
    after = group_digests(state.model)
    assert np.isfinite(loss) and loss > 0
    assert after[models.ENCODERS] == before[models.ENCODERS]
    assert after[models.BACKBONE] == before[models.BACKBONE]
    for group in device.CCL_GROUPS:
        assert after[group] != before[group], group
    assert digest(list(anchors.values())) == anchor_digest


def test_amt_trains_encoders_and_adapters_only():
    state = make_device()
    before = group_digests(state.model)
    device.run_amt(state, 1, 0.05)
    after = group_digests(state.model)
    for group in models.CONNECTOR_GROUPS + (models.BACKBONE,):
        assert after[group] == before[group], group
    assert after[models.ENCODERS] != before[models.ENCODERS]
    assert after[models.ADAPTERS] != before[models.ADAPTERS]


def test_ccl_and_amt_cover_every_trainable_group():
    assert set(device.CCL_GROUPS) | set(device.AMT_GROUPS) == \
        set(models.TRAINABLE_GROUPS)
    assert models.BACKBONE not in device.CCL_GROUPS + device.AMT_GROUPS


def test_zero_epochs_evaluate_only():
    state = make_device()
    before = digest(list(models.parameters_in(
        state.model, models.TRAINABLE_GROUPS).values()))
    ccl = device.run_ccl(state, anchors_for(state), 0, 0.05)
    amt = device.run_amt(state, 0, 0.05)
    after = digest(list(models.parameters_in(
        state.model, models.TRAINABLE_GROUPS).values()))
    assert before == after
    assert ccl > 0 and amt > 0


def test_single_candidate_reduces_ccl_to_supervised_loss():
    state = make_device(negatives=1)
    shard = state.public_shard
    trace = models.forward(state.model, shard.inputs())
    supervised, _ = models.cross_entropy_and_grad(trace.logits, shard.labels)
    loss = device.run_ccl(state, anchors_for(state), 0, 0.05)
    assert loss == pytest.approx(supervised, rel=1e-10)


def test_missing_anchor_names_the_sample():
    state = make_device()
    anchors = anchors_for(state)
    missing = int(state.public_shard.ids[3])
    del anchors[missing]
    with pytest.raises(device.MissingAnchorError) as excinfo:
        device.run_ccl(state, anchors, 1, 0.05)
    assert str(missing) in str(excinfo.value)


def test_empty_private_data_rejected():
    state = make_device()
    state.private_train = state.private_train.take([])
    with pytest.raises(device.EmptyDatasetError):
        device.run_amt(state, 1, 0.05)


def test_empty_public_shard_rejected():
    state = make_device()
    state.public_shard = state.public_shard.take([])
    with pytest.raises(device.EmptyDatasetError):
        device.run_ccl(state, {}, 1, 0.05)


def test_ccl_is_deterministic():
    first, second = make_device(seed=5), make_device(seed=5)
    device.run_ccl(first, anchors_for(first), 2, 0.05)
    device.run_ccl(second, anchors_for(second), 2, 0.05)
    assert models.group_digest(first.model, models.TRAINABLE_GROUPS) == \
        models.group_digest(second.model, models.TRAINABLE_GROUPS)


def test_amt_descends_on_separable_shard():
    short, long_ = make_device(seed=8, noise=0.0), make_device(seed=8, noise=0.0)
    device.run_amt(short, 1, 0.05)
    device.run_amt(long_, 5, 0.05)
    assert device.run_amt(long_, 0, 0.05) <= device.run_amt(short, 0, 0.05)


def test_fresh_upload_and_aliasing():
    state = make_device()
    upload = device.make_upload(state)
    assert upload.modality_count == 2
    assert upload.device_id == 0
    assert all(not np.any(adapter.b) for adapter in upload.adapters)
    assert upload.parameter_count() == 2 * 2 * (8 + 8)
    frozen = digest([a.a for a in upload.adapters] + [a.b for a in upload.adapters])
    device.run_amt(state, 1, 0.05)
    assert digest([a.a for a in upload.adapters] +
                  [a.b for a in upload.adapters]) == frozen
    with pytest.raises(ValueError):
        device.LoRAUpload(0, upload.adapters, 0)


def test_server_adapters_make_devices_agree():
    first = make_device(seed=1, modalities=('vision',))
    second = make_device(seed=2, modalities=('audio', 'text'), ident=1)
    shared = models.extract_lora(first.model)
    for adapter in shared:
        adapter.b[...] = 0.1
    # the frozen W must match for outputs to agree
    second.model.backbone.layers = [layer.copy() for layer in
                                    first.model.backbone.layers]
    second.model.backbone.head = first.model.backbone.head.copy()
    device.apply_server_adapters(first, shared)
    device.apply_server_adapters(second, shared)
    for mine, theirs in zip(models.extract_lora(first.model), shared):
        np.testing.assert_array_equal(mine.b, theirs.b)
    tokens = np.random.default_rng(0).standard_normal((2, 8))
    np.testing.assert_array_equal(
        models.backbone_forward(first.model, tokens).data,
        models.backbone_forward(second.model, tokens).data)


def test_zero_adapters_leave_the_frozen_backbone():
    state = make_device()
    zeros = [models.LoRAAdapter(np.zeros_like(a.a), np.zeros_like(a.b))
             for a in state.model.adapters]
    device.apply_server_adapters(state, zeros)
    tokens = np.random.default_rng(0).standard_normal((3, 8))
    np.testing.assert_array_equal(
        models.backbone_forward(state.model, tokens).data,
        models.backbone_forward(state.model, tokens, use_lora=False).data)


def test_apply_rejects_shape_mismatch():
    state = make_device()
    with pytest.raises(models.ShapeMismatchError):
        device.apply_server_adapters(state, models.extract_lora(state.model)[:1])


def test_modality_restriction():
    state = make_device(modalities=('vision',))
    with pytest.raises(models.UnknownModalityError):
        models.forward(state.model, {'audio': np.ones((2, 5))})


def test_evaluate_and_macro_f1():
    state = make_device()
    f1 = device.evaluate(state)
    assert 0.0 <= f1 <= 1.0
    assert device.macro_f1([0, 1, 1], [0, 1, 1], 3) == pytest.approx(2.0 / 3.0)
    assert device.macro_f1([], [], 3) == 0.0

# end
