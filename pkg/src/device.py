"""
Edge-device side of a round: contrastive learning on the public shard
against the server's fused anchors, adaptive tuning on the private data,
and the LoRA upload.
"""

import logging

import numpy as np
from sklearn.metrics import f1_score

from . import models
from . import volume_align
from .utils import minibatches

LOGGER = logging.getLogger(__name__)

CCL_GROUPS = (models.PROJECTORS, models.FUSION, models.SOFT_PROMPT,
              models.ADAPTERS)
AMT_GROUPS = (models.ENCODERS, models.ADAPTERS)


class MissingAnchorError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


def macro_f1(labels, predictions, classes):
    """
    Macro-averaged F1 over every class of the task; classes that never
    occur score zero.
    """
    if len(labels) == 0:
        LOGGER.warning('Macro-F1 of an empty test split taken as 0')
        return 0.0
    return float(f1_score(labels, predictions, labels=list(range(classes)),
                          average='macro', zero_division=0))


class LoRAUpload(object):
    """
    What a device sends the server: its adapters and how many modalities
    it holds.
    """
    def __init__(self, device_id, adapters, modality_count):
        if modality_count < 1:
            raise ValueError('Device %s uploads with %s modalities' % (
                device_id, modality_count))
        self.device_id = device_id
        self.adapters = [adapter.copy() for adapter in adapters]
        self.modality_count = int(modality_count)

    def parameter_count(self):
        return sum(adapter.parameter_count() for adapter in self.adapters)

    def __repr__(self):
        return 'LoRAUpload(device=%s, adapters=%i, modalities=%i)' % (
            self.device_id, len(self.adapters), self.modality_count)


class DeviceState(object):
    """
    One edge device j.
    """
    def __init__(self, ident, modalities, model, private_train, private_test,
                 public_shard, rng, batch_size=16, negatives=16):
        """
        :param ident: device index j
        :param modalities: M(D_j), at least one
        :param model: UnifiedModel with encoders for exactly these modalities
        :param private_train: MultimodalDataset restricted to M(D_j)
        :param private_test: MultimodalDataset restricted to M(D_j)
        :param public_shard: D'_j, the public training ids restricted to M(D_j)
        :param rng: the device's own numpy Generator
        :param batch_size: minibatch size
        :param negatives: U, candidates per sample in the contrastive loss
        """
        if len(modalities) < 1:
            raise ValueError('Device %s holds no modality' % ident)
        if set(model.modalities) != set(modalities):
            raise models.UnknownModalityError(
                'Device %s holds %s but its model encodes %s' % (
                    ident, list(modalities), model.modalities))
        self.ident = ident
        self.modalities = list(modalities)
        self.model = model
        self.private_train = private_train
        self.private_test = private_test
        self.public_shard = public_shard
        self.rng = rng
        self.batch_size = int(batch_size)
        self.negatives = int(negatives)

    @property
    def id(self):
        return self.ident

    def __repr__(self):
        return 'DeviceState(%s, modalities=%s)' % (self.ident, self.modalities)


def _epoch_positions(device, count, train):
    return minibatches(count, device.batch_size, device.rng if train else None)


def _anchor_matrix(device, anchors):
    missing = [int(sid) for sid in device.public_shard.ids if sid not in anchors]
    if missing:
        raise MissingAnchorError('Device %s has no anchor for public sample '
                                 '%i (%i missing)' % (device.ident, missing[0],
                                                      len(missing)))
    return np.stack([np.asarray(anchors[sid], dtype=np.float64)
                     for sid in device.public_shard.ids])


def ccl_step(model, inputs, labels, anchors, negatives):
    """
    Loss and gradients of one contrastive-learning minibatch: supervised
    loss plus the symmetric volume loss of the device's projected
    representations against the (constant) anchors.

    :return: (loss, grads)
    """
    trace = models.forward(model, inputs)
    ce, dlogits = models.cross_entropy_and_grad(trace.logits, labels)
    batch = volume_align.ContrastiveBatch(anchors, trace.h,
                                          min(negatives, trace.n))
    contrastive, _, grad_h = \
        volume_align.symmetric_contrastive_loss_and_grad(batch)
    grads = models.backward(model, trace, dlogits, grad_h, CCL_GROUPS)
    return ce + contrastive, grads


def run_ccl(device, anchors, epochs, lr):
    """
    Contrastive learning on D'_j anchored by the server's fused vectors.
    Encoders stay frozen; projectors, fusion, soft-prompt generator and
    adapters train.

    :param device: DeviceState
    :param anchors: dict public sample id -> fused vector
    :param epochs: passes over the shard, 0 evaluates only
    :param lr: SGD step size
    :return: sample-weighted mean loss of the last epoch
    """
    shard = device.public_shard
    if len(shard) == 0:
        raise EmptyDatasetError('Device %s has an empty public shard' %
                                device.ident)
    anchor_rows = _anchor_matrix(device, anchors)
    loss = 0.0
    for epoch in range(max(epochs, 1)):
        train = epochs > 0
        total = 0.0
        for positions in _epoch_positions(device, len(shard), train):
            batch_loss, grads = ccl_step(
                device.model, shard.inputs(positions), shard.labels[positions],
                anchor_rows[positions], device.negatives)
            if train:
                models.sgd_step(device.model, grads, lr)
            total += batch_loss * positions.size
        loss = total / len(shard)
        LOGGER.debug('Device %s CCL epoch %i loss %.6f' % (
            device.ident, epoch, loss))
    return loss


def run_amt(device, epochs, lr):
    """
    Adaptive multimodal tuning on the private training data: only the
    encoders and the adapters train.

    :return: sample-weighted mean loss of the last epoch
    """
    data = device.private_train
    if len(data) == 0:
        raise EmptyDatasetError('Device %s has no private training data' %
                                device.ident)
    loss = 0.0
    for epoch in range(max(epochs, 1)):
        train = epochs > 0
        total = 0.0
        for positions in _epoch_positions(device, len(data), train):
            trace = models.forward(device.model, data.inputs(positions))
            batch_loss, dlogits = models.cross_entropy_and_grad(
                trace.logits, data.labels[positions])
            if train:
                grads = models.backward(device.model, trace, dlogits,
                                        groups=AMT_GROUPS)
                models.sgd_step(device.model, grads, lr)
            total += batch_loss * positions.size
        loss = total / len(data)
        LOGGER.debug('Device %s AMT epoch %i loss %.6f' % (
            device.ident, epoch, loss))
    return loss


def make_upload(device):
    return LoRAUpload(device.ident, models.extract_lora(device.model),
                      len(device.modalities))


def apply_server_adapters(device, adapters):
    """
    Overwrite the device's adapters with the server's.
    """
    models.apply_lora(device.model, adapters)


def evaluate(device):
    """
    Macro-F1 on the device's private test split.
    """
    data = device.private_test
    if len(data) == 0:
        return macro_f1([], [], data.classes)
    predictions = models.predict(device.model, data.inputs())
    return macro_f1(data.labels, predictions, data.classes)

# end
