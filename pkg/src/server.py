"""
Cloud-server side of a round: fused omni-modal anchors for the devices,
modality-aware aggregation of the uploaded adapters, and contrastive
learning of the large unified model with pooled-logit knowledge transfer
to and from the server's small backbone.
"""

import logging
from collections import OrderedDict

import numpy as np

from . import models
from . import numeric
from . import volume_align
from .device import macro_f1
from .utils import minibatches

LOGGER = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12


class TopologyMismatchError(ValueError):
    pass


class AggregationWeightError(ValueError):
    pass


class AggregationWeights(object):
    """
    Convex weights over the uploading devices.
    """
    def __init__(self, weights):
        self.weights = numeric.as_vector(weights, 'weights')
        if self.weights.size == 0:
            raise AggregationWeightError('No aggregation weights')
        if np.any(self.weights < 0):
            raise AggregationWeightError('Negative aggregation weight in %s' %
                                         self.weights.tolist())
        if abs(self.weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise AggregationWeightError('Aggregation weights sum to %.15f' %
                                         self.weights.sum())

    def __len__(self):
        return self.weights.size

    def tolist(self):
        return self.weights.tolist()

    def __repr__(self):
        return 'AggregationWeights(%s)' % self.weights.tolist()


class ServerState(object):
    """
    The server: an omni-modal unified model on the large backbone, a
    backbone-only small model with the devices' adapter topology, and the
    public dataset D'.
    """
    def __init__(self, unified, slm, public_train, public_test, rng,
                 batch_size=16, negatives=16):
        """
        :param unified: UnifiedModel encoding every modality
        :param slm: Backbone, same adapter topology as the devices
        :param public_train: omni-modal MultimodalDataset
        :param public_test: omni-modal MultimodalDataset
        :param rng: the server's numpy Generator
        """
        missing = [m for m in unified.universe if m not in unified.encoders]
        if missing:
            raise models.UnknownModalityError('Server unified model has no '
                                              'encoder for %s' % missing)
        flat = unified.backbone.soft_tokens * unified.backbone.width
        if flat % slm.width:
            raise TopologyMismatchError(
                'Unified soft prompt of %i floats cannot be read as tokens of '
                'the small backbone width %i' % (flat, slm.width))
        self.unified = unified
        self.slm = slm
        self.public_train = public_train
        self.public_test = public_test
        self.rng = rng
        self.batch_size = int(batch_size)
        self.negatives = int(negatives)

    @property
    def modalities(self):
        return self.unified.universe


def slm_tokens(server, prompts):
    """
    Re-read the unified model's (n, k, d_llm) soft prompts as rows of the
    small backbone's width, (n * k * d_llm / d_slm, d_slm).
    """
    return prompts.reshape(-1, server.slm.width)


def slm_logits(server, prompts):
    """
    :return: ((n, S_slm, V) logits, backbone caches)
    """
    n = prompts.shape[0]
    logits, caches = server.slm.forward(slm_tokens(server, prompts))
    return logits.reshape(n, -1, server.slm.vocab), caches


def generate_fused_public(server):
    """
    Fused, L2-normalised omni-modal representation of every public
    training sample.

    :return: OrderedDict sample id -> d-vector
    """
    data = server.public_train
    if len(data) == 0:
        return OrderedDict()
    trace = models.forward(server.unified, data.inputs())
    fused = models.normalise_rows(trace.s)[0]
    return OrderedDict((int(sid), fused[ctr].copy())
                       for ctr, sid in enumerate(data.ids))


def mma_weights(modality_counts):
    """
    w_j = |M_j| / sum_i |M_i|.
    """
    counts = np.asarray(modality_counts, dtype=np.float64)
    if counts.size == 0:
        raise AggregationWeightError('No modality counts given')
    if np.any(counts < 1):
        raise AggregationWeightError('Every device keeps >= 1 modality, got '
                                     'counts %s' % counts.tolist())
    return AggregationWeights(counts / counts.sum())


def uniform_weights(count):
    return AggregationWeights(np.full(count, 1.0 / count))


def check_topology(uploads):
    reference = uploads[0].adapters
    for upload in uploads[1:]:
        if len(upload.adapters) != len(reference):
            raise TopologyMismatchError('Device %s uploaded %i adapters, '
                                        'expected %i' % (
                                            upload.device_id,
                                            len(upload.adapters),
                                            len(reference)))
        for ctr, (mine, ref) in enumerate(zip(upload.adapters, reference)):
            if mine.a.shape != ref.a.shape or mine.b.shape != ref.b.shape:
                raise TopologyMismatchError(
                    'Layer %i of device %s is %s/%s, expected %s/%s' % (
                        ctr, upload.device_id, mine.a.shape, mine.b.shape,
                        ref.a.shape, ref.b.shape))


def mma_aggregate(uploads, weights):
    """
    Factor-wise weighted mean: A = sum_j w_j A_j and B = sum_j w_j B_j per
    layer.

    :param uploads: list of LoRAUpload
    :param weights: AggregationWeights, one per upload
    :return: list of LoRAAdapter
    """
    if len(uploads) == 0:
        raise AggregationWeightError('Nothing to aggregate')
    if len(weights) != len(uploads):
        raise AggregationWeightError('%i weights for %i uploads' % (
            len(weights), len(uploads)))
    check_topology(uploads)
    aggregated = []
    for ctr, ref in enumerate(uploads[0].adapters):
        a = np.zeros_like(ref.a)
        b = np.zeros_like(ref.b)
        for weight, upload in zip(weights.weights, uploads):
            a += weight * upload.adapters[ctr].a
            b += weight * upload.adapters[ctr].b
        aggregated.append(models.LoRAAdapter(a, b, ref.scale))
    return aggregated


def pooling_matrix(vocab, bins):
    """
    (V, bins) averaging matrix; the V % bins leftover entries go one each to
    the leading bins.
    """
    if not 1 <= bins <= vocab:
        raise ValueError('bins must lie in [1, %i], got %s' % (vocab, bins))
    base, extra = divmod(vocab, bins)
    sizes = np.full(bins, base)
    sizes[:extra] += 1
    owner = np.repeat(np.arange(bins), sizes)
    pool = np.zeros((vocab, bins))
    pool[np.arange(vocab), owner] = 1.0 / sizes[owner]
    return pool


def pool_logits(logits, bins):
    """
    Sort each position descending and average-pool into bins.

    :return: (pooled, sort order, pooling matrix)
    """
    order = np.argsort(-logits, axis=-1, kind='stable')
    ordered = np.take_along_axis(logits, order, axis=-1)
    pool = pooling_matrix(logits.shape[-1], bins)
    return ordered @ pool, order, pool


def pooled_kt_loss(y_a, y_b, bins):
    """
    sum over the first min(S_a, S_b) positions of
    KL(softmax(pool(y_a)) || softmax(pool(y_b))).

    :param y_a: LogitSequence, the target side
    :param y_b: LogitSequence
    :param bins: pooled width, <= both vocab sizes
    """
    if bins > min(y_a.vocab, y_b.vocab) or bins < 1:
        raise ValueError('bins=%s must lie in [1, %i]' % (
            bins, min(y_a.vocab, y_b.vocab)))
    length = min(y_a.length, y_b.length)
    pooled_a = pool_logits(y_a.data[:length], bins)[0]
    pooled_b = pool_logits(y_b.data[:length], bins)[0]
    return float(sum(numeric.kl_divergence(numeric.softmax(pa),
                                           numeric.softmax(pb))
                     for pa, pb in zip(pooled_a, pooled_b)))


def pooled_kt_loss_and_grad(target_logits, logits, bins):
    """
    Batched pooled KT toward constant targets.

    :param target_logits: (n, S_t, V_t), treated as constants
    :param logits: (n, S, V), the side being trained
    :param bins: pooled width
    :return: (mean over samples of the per-sample loss, dL/dlogits)
    """
    n = logits.shape[0]
    length = min(target_logits.shape[1], logits.shape[1])
    if bins > min(target_logits.shape[2], logits.shape[2]) or bins < 1:
        raise ValueError('bins=%s exceeds a vocabulary' % bins)
    target = pool_logits(target_logits[:, :length], bins)[0]
    pooled, order, pool = pool_logits(logits[:, :length], bins)
    log_p = numeric.log_softmax(target, axis=-1)
    log_q = numeric.log_softmax(pooled, axis=-1)
    p = np.exp(log_p)
    loss = float(np.sum(p * (log_p - log_q)) / n)
    dpooled = (np.exp(log_q) - p) / n
    dordered = dpooled @ pool.T
    grad = np.zeros_like(logits)
    np.put_along_axis(grad[:, :length], order, dordered, axis=-1)
    return loss, grad


def draw_anchor_modality(rng, modalities):
    return modalities[int(rng.integers(len(modalities)))]


def unified_step(server, inputs, labels, anchor, kt_bins, knowledge_transfer):
    """
    Loss and gradients of the unified model on one minibatch: supervised
    plus contrastive against the drawn anchor modality, plus pooled KT
    toward the small model's logits.
    """
    unified = server.unified
    trace = models.forward(unified, inputs)
    loss, dlogits = models.cross_entropy_and_grad(trace.logits, labels)
    grad_h = None
    others = OrderedDict((m, h) for m, h in trace.h.items() if m != anchor)
    if others:
        batch = volume_align.ContrastiveBatch(
            trace.h[anchor], others, min(server.negatives, trace.n))
        contrastive, grad_anchor, grad_h = \
            volume_align.symmetric_contrastive_loss_and_grad(batch)
        grad_h[anchor] = grad_anchor
        loss += contrastive
    if knowledge_transfer:
        target, _ = slm_logits(server, trace.prompts)
        kt, dkt = pooled_kt_loss_and_grad(target, trace.logits, kt_bins)
        loss += kt
        dlogits = dlogits + dkt
    grads = models.backward(unified, trace, dlogits, grad_h)
    return loss, grads


def slm_step(server, inputs, labels, kt_bins, knowledge_transfer):
    """
    Loss and adapter gradients of the small model on one minibatch, fed
    with the unified model's current soft prompts.
    """
    trace = models.forward(server.unified, inputs)
    logits, caches = slm_logits(server, trace.prompts)
    loss, dlogits = models.cross_entropy_and_grad(logits, labels)
    if knowledge_transfer:
        kt, dkt = pooled_kt_loss_and_grad(trace.logits, logits, kt_bins)
        loss += kt
        dlogits = dlogits + dkt
    grads = OrderedDict()
    server.slm.backward(dlogits.reshape(-1, server.slm.vocab), caches, grads)
    return loss, grads


def se_ccl(server, epochs, lr, kt_bins, knowledge_transfer=True):
    """
    Alternating training of the unified model and the small model on the
    public training data. Per minibatch: draw an anchor modality, step the
    unified model, then step the small model against the updated unified
    model. Each side sees the other's logits as constants. Without
    knowledge transfer only the unified model trains, on its supervised
    and contrastive terms.

    :param epochs: passes over D', 0 evaluates only
    :param lr: SGD step size
    :param kt_bins: pooled width of the knowledge-transfer loss
    :return: (unified-side loss, small-side loss), sample-weighted means of
        the last epoch
    """
    data = server.public_train
    if len(data) == 0:
        raise ValueError('The server has no public training data')
    llm_loss = slm_loss = 0.0
    for epoch in range(max(epochs, 1)):
        train = epochs > 0
        llm_total = slm_total = 0.0
        for positions in minibatches(len(data), server.batch_size,
                                     server.rng if train else None):
            inputs = data.inputs(positions)
            labels = data.labels[positions]
            anchor = draw_anchor_modality(server.rng, server.modalities)
            loss, grads = unified_step(server, inputs, labels, anchor,
                                        kt_bins, knowledge_transfer)
            if train:
                models.sgd_step(server.unified, grads, lr)
            llm_total += loss * positions.size
            loss, grads = slm_step(server, inputs, labels, kt_bins,
                                    knowledge_transfer)
            if train and knowledge_transfer:
                models.sgd_step(server.slm, grads, lr)
            slm_total += loss * positions.size
        llm_loss = llm_total / len(data)
        slm_loss = slm_total / len(data)
        LOGGER.debug('Server epoch %i losses: unified %.6f, small %.6f' % (
            epoch, llm_loss, slm_loss))
    return llm_loss, slm_loss


def distribute_adapters(server):
    return models.extract_lora(server.slm)


def evaluate(server):
    """
    Macro-F1 of the unified model and of the small model on the public
    test split.

    :return: (unified F1, small-model F1)
    """
    data = server.public_test
    if len(data) == 0:
        return macro_f1([], [], data.classes), macro_f1([], [], data.classes)
    trace = models.forward(server.unified, data.inputs())
    unified_pred = np.argmax(trace.logits.mean(axis=1), axis=1)
    logits, _ = slm_logits(server, trace.prompts)
    slm_pred = np.argmax(logits.mean(axis=1), axis=1)
    return (macro_f1(data.labels, unified_pred, data.classes),
            macro_f1(data.labels, slm_pred, data.classes))

# end
