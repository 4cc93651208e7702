"""
Gram-volume alignment and the volume-based cross-modal contrastive losses.

The volume of k vectors is sqrt(det(A^T A)) with the vectors as the columns
of A; it is zero for dependent sets and shrinks as the vectors align. The
contrastive losses score a candidate set by exp(-volume) and take the
negative log softmax of the positive candidate, so minimising them pulls the
modalities of one sample together and pushes other samples apart.
"""

import logging
from collections import OrderedDict

import numpy as np

from . import numeric

LOGGER = logging.getLogger(__name__)

GRADIENT_EPS = 1e-8

O2A = 'o2a'
A2O = 'a2o'


class ContrastiveBatchError(ValueError):
    pass


class RepresentationSet(object):
    """
    A set of equal-length vectors whose volume we want.
    """
    def __init__(self, vectors):
        """
        :param vectors: list of float vectors, all the same length
        """
        vectors = [numeric.as_vector(vec, 'representation %i' % ctr)
                   for ctr, vec in enumerate(vectors)]
        if len(vectors) == 0:
            raise numeric.DimensionMismatchError(
                'A representation set needs at least one vector')
        lengths = set(vec.size for vec in vectors)
        if len(lengths) != 1:
            raise numeric.DimensionMismatchError(
                'Representation vectors have mismatched lengths %s' % sorted(lengths))
        self.vectors = vectors
        self.dim = vectors[0].size

    @classmethod
    def from_columns(cls, matrix):
        matrix = numeric.as_matrix(matrix)
        return cls([matrix[:, ctr] for ctr in range(matrix.shape[1])])

    def as_columns(self):
        return np.column_stack(self.vectors)

    def __len__(self):
        return len(self.vectors)

    def __repr__(self):
        return 'RepresentationSet(k=%i, dim=%i)' % (len(self), self.dim)


def vector_volume(rep_set):
    """
    sqrt(max(det(G), 0)) of the set; 0 when there are more vectors than
    dimensions.

    :param rep_set: RepresentationSet
    """
    if len(rep_set) > rep_set.dim:
        return 0.0
    g = numeric.gram(rep_set.as_columns())
    return float(np.sqrt(max(numeric.det(g), 0.0)))


def volume_gradient(rep_set, eps=GRADIENT_EPS):
    """
    dV/dA = V * A * (G + eps*I)^-1, one gradient vector per input vector.

    :param rep_set: RepresentationSet
    :param eps: ridge for the inverse, > 0
    :return: list of float vectors
    """
    if eps <= 0:
        raise ValueError('eps must be > 0, got %s' % eps)
    columns = rep_set.as_columns()
    if len(rep_set) > rep_set.dim:
        return [np.zeros(rep_set.dim) for _ in rep_set.vectors]
    volume = vector_volume(rep_set)
    g_inv = numeric.inverse_regularized(numeric.gram(columns), eps)
    grad = volume * (columns @ g_inv)
    return [grad[:, ctr] for ctr in range(grad.shape[1])]


def stacked_volumes(columns, eps=GRADIENT_EPS, with_grad=False):
    """
    Volumes of a stack of column sets, shape (..., d, k) -> (...), and
    optionally their gradients with respect to the columns.
    """
    d, k = columns.shape[-2:]
    if k > d:
        volumes = np.zeros(columns.shape[:-2])
        return (volumes, np.zeros_like(columns)) if with_grad else volumes
    g = np.swapaxes(columns, -1, -2) @ columns
    volumes = np.sqrt(np.maximum(numeric.det_stack(g), 0.0))
    if not with_grad:
        return volumes
    g_inv = numeric.inverse_regularized_stack(g, eps)
    return volumes, volumes[..., None, None] * (columns @ g_inv)


class ContrastiveBatch(object):
    """
    Anchors plus the non-anchor modality representations of a minibatch.
    Candidate u for sample v runs over the positive (u = v) and the next
    U - 1 samples of the batch, cyclically.
    """
    def __init__(self, anchor_reps, other_reps, negative_count):
        """
        :param anchor_reps: (n, d) array or list of n anchor vectors
        :param other_reps: mapping modality -> (n, d) array, or a list of n
            per-sample mappings modality -> vector
        :param negative_count: U, 1 <= U <= n
        """
        anchors = numeric.as_matrix(np.atleast_2d(np.asarray(anchor_reps,
                                                             dtype=np.float64)),
                                    'anchor_reps')
        if isinstance(other_reps, (list, tuple)):
            other_reps = self._stack_samples(other_reps)
        others = OrderedDict()
        for modality, reps in other_reps.items():
            reps = numeric.as_matrix(np.atleast_2d(
                np.asarray(reps, dtype=np.float64)), 'reps of %s' % modality)
            if reps.shape != anchors.shape:
                raise ContrastiveBatchError(
                    'Modality %s reps have shape %s, anchors %s' % (
                        modality, reps.shape, anchors.shape))
            others[modality] = reps
        if len(others) == 0:
            raise ContrastiveBatchError(
                'Every sample needs at least one non-anchor representation')
        n = anchors.shape[0]
        if n == 0:
            raise ContrastiveBatchError('Empty contrastive batch')
        if not 1 <= negative_count <= n:
            raise ContrastiveBatchError(
                'negative_count U=%s must lie in [1, %i] (batch size)' % (
                    negative_count, n))
        self.anchor_reps = anchors
        self.other_reps = others
        self.negative_count = int(negative_count)

    @staticmethod
    def _stack_samples(samples):
        keys = list(samples[0].keys()) if samples else []
        for ctr, sample in enumerate(samples):
            if list(sample.keys()) != keys:
                raise ContrastiveBatchError(
                    'Sample %i has modalities %s, expected %s' % (
                        ctr, list(sample.keys()), keys))
        return OrderedDict((key, np.stack([sample[key] for sample in samples]))
                           for key in keys)

    @property
    def size(self):
        return self.anchor_reps.shape[0]

    @property
    def dim(self):
        return self.anchor_reps.shape[1]

    def candidate_index(self):
        """
        (n, U) sample indices of the candidates; column 0 is the positive.
        """
        n, u = self.size, self.negative_count
        return (np.arange(n)[:, None] + np.arange(u)[None, :]) % n

    def candidate_columns(self, direction):
        """
        Column sets of every candidate, shape (n, U, d, 1 + |M^O|); column 0
        is the anchor.

        :param direction: O2A keeps the anchor and swaps the other
            modalities, A2O keeps the others and swaps the anchor
        """
        idx = self.candidate_index()
        n, u, d = self.size, self.negative_count, self.dim
        others = np.stack(list(self.other_reps.values()))
        if direction == O2A:
            anchor_cols = np.broadcast_to(self.anchor_reps[:, None, :], (n, u, d))
            other_cols = others[:, idx, :]
        elif direction == A2O:
            anchor_cols = self.anchor_reps[idx]
            other_cols = np.broadcast_to(others[:, :, None, :],
                                         (others.shape[0], n, u, d))
        else:
            raise ValueError('Unknown direction %s' % direction)
        return np.stack([anchor_cols] + list(other_cols), axis=-1)


def contrastive_loss_and_grad(batch, direction, eps=GRADIENT_EPS):
    """
    One directional loss, mean over the batch, with gradients for the
    anchors and every non-anchor modality.

    :param batch: ContrastiveBatch
    :param direction: O2A or A2O
    :return: (loss, grad_anchor (n, d), OrderedDict modality -> (n, d))
    """
    n = batch.size
    idx = batch.candidate_index()
    columns = batch.candidate_columns(direction)
    volumes, dvol = stacked_volumes(columns, eps=eps, with_grad=True)
    scores = -volumes
    log_probs = numeric.log_softmax(scores, axis=-1)
    loss = float(-np.mean(log_probs[:, 0]))

    dscores = np.exp(log_probs)
    dscores[:, 0] -= 1.0
    dscores /= n
    dcols = (-dscores)[..., None, None] * dvol

    grad_anchor = np.zeros_like(batch.anchor_reps)
    grad_others = OrderedDict()
    if direction == O2A:
        grad_anchor += dcols[..., 0].sum(axis=1)
        for ctr, modality in enumerate(batch.other_reps):
            grad = np.zeros_like(batch.anchor_reps)
            np.add.at(grad, idx, dcols[..., ctr + 1])
            grad_others[modality] = grad
    else:
        np.add.at(grad_anchor, idx, dcols[..., 0])
        for ctr, modality in enumerate(batch.other_reps):
            grad_others[modality] = dcols[..., ctr + 1].sum(axis=1)
    return loss, grad_anchor, grad_others


def contrastive_loss_o2a(batch):
    """
    Others-to-anchor loss: the anchor of sample v against the non-anchor
    set of each candidate u.
    """
    return contrastive_loss_and_grad(batch, O2A)[0]


def contrastive_loss_a2o(batch):
    """
    Anchor-to-others loss: the non-anchor set of sample v against the
    anchor of each candidate u.
    """
    return contrastive_loss_and_grad(batch, A2O)[0]


def symmetric_contrastive_loss_and_grad(batch, eps=GRADIENT_EPS):
    """
    1/2 (A2O + O2A) with gradients.
    """
    loss_o, ga_o, go_o = contrastive_loss_and_grad(batch, O2A, eps)
    loss_a, ga_a, go_a = contrastive_loss_and_grad(batch, A2O, eps)
    grad_others = OrderedDict((key, 0.5 * (go_o[key] + go_a[key]))
                              for key in go_o)
    return 0.5 * (loss_a + loss_o), 0.5 * (ga_o + ga_a), grad_others


def symmetric_contrastive_loss(batch):
    return symmetric_contrastive_loss_and_grad(batch)[0]

# end
