import numpy as np
import pytest

from mlecs import numeric
from mlecs.volume_align import (A2O, O2A, ContrastiveBatch, ContrastiveBatchError,
                                RepresentationSet, contrastive_loss_a2o,
                                contrastive_loss_and_grad, contrastive_loss_o2a,
                                stacked_volumes, symmetric_contrastive_loss,
                                symmetric_contrastive_loss_and_grad,
                                vector_volume, volume_gradient)


def volume(vectors):
    return vector_volume(RepresentationSet(vectors))


def test_orthonormal_pair_has_unit_volume():
    e = np.eye(3)
    assert volume([e[0], e[1]]) == pytest.approx(1.0, abs=1e-12)


def test_dependent_set_has_zero_volume():
    v = np.array([1.0, -2.0, 0.5])
    assert volume([v, v]) < 1e-6
    assert volume([v, 3.0 * v, np.array([0.0, 1.0, 0.0])]) < 1e-6


def test_more_vectors_than_dimensions():
    assert volume(list(np.eye(2)) + [np.ones(2)]) == 0.0


def test_worked_fixture():
    columns = [np.array([1.0, 0, 1, 0]), np.array([0, 2.0, 0, 0]),
               np.array([1.0, 1, 0, 1])]
    assert volume(columns) == pytest.approx(np.sqrt(12.0), abs=1e-10)
    assert volume(columns) == pytest.approx(3.46410, abs=1e-5)


def test_scale_and_permutation(rng):
    vectors = list(rng.standard_normal((3, 6)))
    base = volume(vectors)
    assert volume([-4.0 * vectors[0]] + vectors[1:]) == \
        pytest.approx(4.0 * base, rel=1e-10)
    assert volume([vectors[2], vectors[0], vectors[1]]) == \
        pytest.approx(base, rel=1e-10)


def test_two_vector_sine():
    for theta in (0.1, 1.0, 2.5):
        pair = [np.array([1.0, 0.0]), np.array([np.cos(theta), np.sin(theta)])]
        assert volume(pair) == pytest.approx(abs(np.sin(theta)), abs=1e-8)


def test_mismatched_lengths_rejected():
    with pytest.raises(numeric.DimensionMismatchError):
        RepresentationSet([np.ones(3), np.ones(2)])
    with pytest.raises(numeric.DimensionMismatchError):
        RepresentationSet([])


def test_gradient_of_single_vector():
    v = np.array([3.0, 4.0])
    (grad,) = volume_gradient(RepresentationSet([v]))
    np.testing.assert_allclose(grad, v / 5.0, atol=1e-8)


def test_gradient_of_orthonormal_pair():
    e = np.eye(3)
    grads = volume_gradient(RepresentationSet([e[0], e[1]]))
    np.testing.assert_allclose(grads[0], e[0], atol=1e-7)
    np.testing.assert_allclose(grads[1], e[1], atol=1e-7)


def test_gradient_matches_finite_differences(rng):
    columns = rng.standard_normal((5, 3))
    analytic = np.column_stack(volume_gradient(
        RepresentationSet.from_columns(columns)))

    def f(flat):
        return vector_volume(RepresentationSet.from_columns(flat.reshape(5, 3)))
    report = numeric.grad_check(f, columns.ravel(), analytic.ravel())
    assert report.max_rel_err < 1e-4


def test_gradient_needs_positive_eps():
    with pytest.raises(ValueError):
        volume_gradient(RepresentationSet([np.ones(2)]), eps=0.0)


def test_stacked_volumes_match_single(rng):
    columns = rng.standard_normal((4, 2, 5, 3))
    volumes, grads = stacked_volumes(columns, with_grad=True)
    for i in range(4):
        for j in range(2):
            rep_set = RepresentationSet.from_columns(columns[i, j])
            assert volumes[i, j] == pytest.approx(vector_volume(rep_set),
                                                  rel=1e-10)
            np.testing.assert_allclose(
                grads[i, j], np.column_stack(volume_gradient(rep_set)),
                rtol=1e-8, atol=1e-10)


def test_batch_validation(rng):
    anchors = rng.standard_normal((3, 2))
    others = {'audio': rng.standard_normal((3, 2))}
    with pytest.raises(ContrastiveBatchError):
        ContrastiveBatch(anchors, others, 4)
    with pytest.raises(ContrastiveBatchError):
        ContrastiveBatch(anchors, others, 0)
    with pytest.raises(ContrastiveBatchError):
        ContrastiveBatch(anchors, {}, 1)
    with pytest.raises(ContrastiveBatchError):
        ContrastiveBatch(anchors, {'audio': rng.standard_normal((2, 2))}, 1)


def test_batch_from_per_sample_maps(rng):
    anchors = rng.standard_normal((3, 2))
    audio = rng.standard_normal((3, 2))
    samples = [{'audio': audio[ctr]} for ctr in range(3)]
    by_sample = ContrastiveBatch(anchors, samples, 2)
    by_modality = ContrastiveBatch(anchors, {'audio': audio}, 2)
    assert contrastive_loss_o2a(by_sample) == contrastive_loss_o2a(by_modality)


def test_single_candidate_gives_zero_loss(rng):
    batch = ContrastiveBatch(rng.standard_normal((4, 3)),
                             {'audio': rng.standard_normal((4, 3))}, 1)
    assert contrastive_loss_o2a(batch) == 0.0
    assert contrastive_loss_a2o(batch) == 0.0
    _, grad_anchor, grad_others = symmetric_contrastive_loss_and_grad(batch)
    assert not np.any(grad_anchor)
    assert not np.any(grad_others['audio'])


def test_equal_volumes_give_log_u():
    anchors = np.tile(np.eye(3)[0], (5, 1))
    others = {'audio': np.tile(np.eye(3)[1], (5, 1))}
    for u in (2, 3, 5):
        batch = ContrastiveBatch(anchors, others, u)
        assert contrastive_loss_o2a(batch) == pytest.approx(np.log(u), abs=1e-10)
        assert contrastive_loss_a2o(batch) == pytest.approx(np.log(u), abs=1e-10)


def direct_loss(anchors, others, u, direction):
    n = anchors.shape[0]
    total = 0.0
    for v in range(n):
        scores = []
        for offset in range(u):
            cand = (v + offset) % n
            if direction == O2A:
                vectors = [anchors[v]] + [rep[cand] for rep in others.values()]
            else:
                vectors = [anchors[cand]] + [rep[v] for rep in others.values()]
            g = np.array([[np.dot(a, b) for b in vectors] for a in vectors])
            scores.append(np.exp(-np.sqrt(max(np.linalg.det(g), 0.0))))
        total += -np.log(scores[0] / sum(scores))
    return total / n


def test_losses_match_direct_softmax(rng):
    anchors = rng.standard_normal((3, 2))
    others = {'audio': rng.standard_normal((3, 2))}
    batch = ContrastiveBatch(anchors, others, 3)
    assert contrastive_loss_o2a(batch) == \
        pytest.approx(direct_loss(anchors, others, 3, O2A), abs=1e-10)
    assert contrastive_loss_a2o(batch) == \
        pytest.approx(direct_loss(anchors, others, 3, A2O), abs=1e-10)
    assert symmetric_contrastive_loss(batch) == pytest.approx(
        0.5 * (direct_loss(anchors, others, 3, O2A) +
               direct_loss(anchors, others, 3, A2O)), abs=1e-10)


def test_directional_losses_are_nonnegative(rng):
    batch = ContrastiveBatch(rng.standard_normal((6, 4)),
                             {'audio': rng.standard_normal((6, 4)),
                              'text': rng.standard_normal((6, 4))}, 4)
    assert contrastive_loss_o2a(batch) >= 0.0
    assert contrastive_loss_a2o(batch) >= 0.0


@pytest.mark.parametrize('direction', [O2A, A2O])
def test_loss_gradients_match_finite_differences(rng, direction):
    anchors = rng.standard_normal((5, 4))
    audio = rng.standard_normal((5, 4))
    text = rng.standard_normal((5, 4))
    batch = ContrastiveBatch(anchors, {'audio': audio, 'text': text}, 3)
    _, grad_anchor, grad_others = contrastive_loss_and_grad(batch, direction)

    def by_anchor(flat):
        return contrastive_loss_and_grad(ContrastiveBatch(
            flat.reshape(5, 4), {'audio': audio, 'text': text}, 3),
            direction)[0]

    def by_audio(flat):
        return contrastive_loss_and_grad(ContrastiveBatch(
            anchors, {'audio': flat.reshape(5, 4), 'text': text}, 3),
            direction)[0]
    assert numeric.grad_check(by_anchor, anchors.ravel(),
                              grad_anchor.ravel()).max_abs_err < 1e-6
    assert numeric.grad_check(by_audio, audio.ravel(),
                              grad_others['audio'].ravel()).max_abs_err < 1e-6


def test_aligned_positive_scores_below_misaligned(rng):
    # the positive pair is identical, negatives are random: low loss
    aligned = rng.standard_normal((6, 3))
    aligned /= np.linalg.norm(aligned, axis=1, keepdims=True)
    tight = ContrastiveBatch(aligned, {'audio': aligned.copy()}, 6)
    loose = ContrastiveBatch(aligned, {'audio': aligned[::-1].copy()}, 6)
    assert contrastive_loss_o2a(tight) < contrastive_loss_o2a(loose)


def test_gradient_steps_descend_o2a(rng):
    anchors = rng.standard_normal((5, 4))
    others = {'audio': rng.standard_normal((5, 4)),
              'text': rng.standard_normal((5, 4))}
    losses = []
    for _ in range(50):
        loss, grad_anchor, grad_others = contrastive_loss_and_grad(
            ContrastiveBatch(anchors, others, 3), O2A)
        losses.append(loss)
        anchors = anchors - 0.02 * grad_anchor
        others = dict((m, others[m] - 0.02 * grad_others[m]) for m in others)
    losses.append(contrastive_loss_o2a(ContrastiveBatch(anchors, others, 3)))
    for before, after in zip(losses, losses[1:]):
        assert after < before + 1e-12
    assert losses[-1] < losses[0]


def spread_away_from_own_axis(n):
    # row v is unit length and orthogonal to e_v, leaning on every other axis
    rows = 1.0 - np.eye(n)
    return rows / np.sqrt(n - 1)


@pytest.mark.parametrize('direction', [O2A, A2O])
def test_smallest_positive_volume_beats_log_u(direction):
    axes = np.eye(4)
    batch = ContrastiveBatch(axes, {'audio': axes.copy()}, 4)
    loss = contrastive_loss_and_grad(batch, direction)[0]
    assert loss < np.log(4)
    assert loss == pytest.approx(np.log(1 + 3 * np.exp(-1.0)), abs=1e-6)


@pytest.mark.parametrize('direction', [O2A, A2O])
def test_largest_positive_volume_exceeds_log_u(direction):
    axes = np.eye(4)
    batch = ContrastiveBatch(axes, {'audio': spread_away_from_own_axis(4)}, 4)
    loss = contrastive_loss_and_grad(batch, direction)[0]
    assert loss > np.log(4)
    negative = np.exp(-np.sqrt(2.0 / 3.0))
    assert loss == pytest.approx(
        np.log((np.exp(-1.0) + 3 * negative) / np.exp(-1.0)), abs=1e-6)


def test_unknown_direction():
    batch = ContrastiveBatch(np.eye(2), {'audio': np.eye(2)}, 1)
    with pytest.raises(ValueError):
        batch.candidate_columns('sideways')

# end
