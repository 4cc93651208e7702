"""
Built-in verification: randomised finite-difference checks of every
hand-written gradient, and the self-test suites run by the command line.
"""

import dataclasses
import io
import logging

import numpy as np

from . import config as config_mod
from . import device as device_ops
from . import models
from . import numeric
from . import orchestrator
from . import server as server_ops
from . import volume_align
from .datasets import MultimodalDataset
from .utils import rng_stream

LOGGER = logging.getLogger(__name__)

MODEL_REL_TOL = 1e-3
VOLUME_REL_TOL = 1e-4
ABS_FLOOR = 1e-7
GEOMETRY_TOL = 1e-8


class CheckResult(object):
    """
    Outcome of one named check.
    """
    def __init__(self, name, passed, detail=''):
        self.name = name
        self.passed = bool(passed)
        self.detail = detail

    def __repr__(self):
        return 'CheckResult(%s, %s, %s)' % (
            self.name, 'pass' if self.passed else 'FAIL', self.detail)


class GradCase(object):
    """
    One finite-difference comparison: which path, the report, and whether
    every entry is within tolerance.
    """
    def __init__(self, path, report, rel_tol):
        self.path = path
        self.report = report
        diff = np.abs(report.analytic - report.numeric)
        scale = np.maximum(np.abs(report.analytic), np.abs(report.numeric))
        self.passed = bool(np.all(diff <= rel_tol * scale + ABS_FLOOR))
        significant = scale > 1e-6
        self.worst_rel = float(np.max(diff[significant] / scale[significant])) \
            if np.any(significant) else 0.0


def _check_entries(path, arr, loss_fn, analytic, rng, entries, rel_tol):
    """
    Perturb a few random entries of arr in place and compare.
    """
    idx = rng.choice(arr.size, size=min(entries, arr.size), replace=False)
    flat = arr.reshape(-1)
    original = flat[idx].copy()

    def f(values):
        flat[idx] = values
        try:
            return loss_fn()
        finally:
            flat[idx] = original

    report = numeric.grad_check(f, original, analytic.reshape(-1)[idx])
    return GradCase(path, report, rel_tol)


def tiny_model(universe, modalities, rng, width=8, depth=2, soft_tokens=2,
               vocab=6, raw=5, latent=4):
    """
    A small model whose adapters carry non-zero B, for gradient checks.
    """
    backbone = models.Backbone.build(width, depth, vocab, soft_tokens, 2, rng)
    for adapter in backbone.adapters:
        adapter.b[...] = 0.3 * rng.standard_normal(adapter.b.shape)
    return models.UnifiedModel.build(
        modalities, universe, dict((m, raw) for m in universe), 6, latent, 7,
        backbone, rng)


def _tiny_batch(universe, rng, n=6, raw=5, classes=4):
    inputs = dict((m, rng.standard_normal((n, raw))) for m in universe)
    return inputs, rng.integers(classes, size=n)


def volume_cases(rng, count=40):
    cases = []
    while len(cases) < count:
        d = int(rng.integers(2, 7))
        k = int(rng.integers(1, d + 1))
        columns = rng.standard_normal((d, k))
        rep_set = volume_align.RepresentationSet.from_columns(columns)
        if volume_align.vector_volume(rep_set) <= 1e-6:
            continue
        analytic = np.column_stack(volume_align.volume_gradient(rep_set))

        def f(flat, d=d, k=k):
            return volume_align.vector_volume(
                volume_align.RepresentationSet.from_columns(flat.reshape(d, k)))
        report = numeric.grad_check(f, columns.ravel(), analytic.ravel())
        cases.append(GradCase('volume_gradient', report, VOLUME_REL_TOL))
    return cases


def _parameter_cases(label, model, loss_fn, grads, rng, entries=3):
    params = model.named_parameters()
    return [_check_entries('%s:%s' % (label, name), params[name][0], loss_fn,
                           grad, rng, entries, MODEL_REL_TOL)
            for name, grad in grads.items()]


def device_cases(rng):
    universe = ['vision', 'audio', 'text']
    model = tiny_model(universe, ['vision', 'text'], rng)
    inputs, labels = _tiny_batch(['vision', 'text'], rng)
    anchors = rng.standard_normal((6, model.latent_dim))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)

    def ccl_loss():
        return device_ops.ccl_step(model, inputs, labels, anchors, 4)[0]
    _, grads = device_ops.ccl_step(model, inputs, labels, anchors, 4)
    cases = _parameter_cases('ccl', model, ccl_loss, grads, rng)

    def amt_loss():
        trace = models.forward(model, inputs)
        return models.cross_entropy_and_grad(trace.logits, labels)[0]
    trace = models.forward(model, inputs)
    _, dlogits = models.cross_entropy_and_grad(trace.logits, labels)
    grads = models.backward(model, trace, dlogits, groups=device_ops.AMT_GROUPS)
    cases.extend(_parameter_cases('amt', model, amt_loss, grads, rng))
    return cases


def tiny_server(rng, universe=('vision', 'audio', 'text')):
    universe = list(universe)
    unified = tiny_model(universe, universe, rng, width=8, depth=3,
                         soft_tokens=2)
    slm = models.Backbone.build(4, 2, 6, 2, 1, rng)
    for adapter in slm.adapters:
        adapter.b[...] = 0.3 * rng.standard_normal(adapter.b.shape)
    inputs, labels = _tiny_batch(universe, rng)
    data = MultimodalDataset(np.arange(6), labels, inputs, 4)
    return server_ops.ServerState(unified, slm, data, data, rng, 6, 4)


def server_cases(rng):
    server = tiny_server(rng)
    data = server.public_train
    inputs, labels = data.inputs(), data.labels
    anchor = server_ops.draw_anchor_modality(rng, server.modalities)

    def unified_loss():
        return server_ops.unified_step(server, inputs, labels, anchor, 3,
                                       True)[0]
    _, grads = server_ops.unified_step(server, inputs, labels, anchor, 3, True)
    cases = _parameter_cases('se_unified', server.unified, unified_loss,
                             grads, rng)

    def slm_loss():
        return server_ops.slm_step(server, inputs, labels, 3, True)[0]
    _, grads = server_ops.slm_step(server, inputs, labels, 3, True)
    cases.extend(_parameter_cases('se_slm', server.slm, slm_loss, grads, rng))
    return cases


def loss_cases(rng, count=5):
    """
    Direct checks of the contrastive and pooled-KT gradients.
    """
    cases = []
    for _ in range(count):
        anchors = rng.standard_normal((5, 4))
        others = {'audio': rng.standard_normal((5, 4)),
                  'text': rng.standard_normal((5, 4))}

        def f(flat):
            batch = volume_align.ContrastiveBatch(
                flat.reshape(5, 4), others, 3)
            return volume_align.symmetric_contrastive_loss(batch)
        _, grad_anchor, _ = volume_align.symmetric_contrastive_loss_and_grad(
            volume_align.ContrastiveBatch(anchors, others, 3))
        cases.append(GradCase('contrastive', numeric.grad_check(
            f, anchors.ravel(), grad_anchor.ravel()), MODEL_REL_TOL))

        target = rng.standard_normal((2, 3, 7))
        logits = rng.standard_normal((2, 2, 7))
        _, grad = server_ops.pooled_kt_loss_and_grad(target, logits, 3)

        def g(flat):
            return server_ops.pooled_kt_loss_and_grad(
                target, flat.reshape(2, 2, 7), 3)[0]
        cases.append(GradCase('pooled_kt', numeric.grad_check(
            g, logits.ravel(), grad.ravel()), MODEL_REL_TOL))
    return cases


def gradient_suite(seed=0):
    """
    Every gradient path, at least 100 randomised cases.

    :return: list of GradCase
    """
    rng = rng_stream(seed, 'gradcheck')
    cases = volume_cases(rng)
    cases.extend(device_cases(rng))
    cases.extend(server_cases(rng))
    cases.extend(loss_cases(rng))
    failed = [case.path for case in cases if not case.passed]
    LOGGER.info('Gradient suite: %i cases, %i failed' % (len(cases),
                                                         len(failed)))
    if failed:
        LOGGER.error('Gradient checks failed for %s' % failed)
    return cases


def worst_by_path(cases):
    """
    dict path family -> worst relative error seen.
    """
    worst = {}
    for case in cases:
        family = case.path.split(':')[0]
        worst[family] = max(worst.get(family, 0.0), case.worst_rel)
    return worst


def geometry_checks():
    results = []
    e = np.eye(3)
    vol = volume_align.vector_volume(
        volume_align.RepresentationSet([e[0], e[1]]))
    results.append(CheckResult('orthonormal_volume', abs(vol - 1.0) < GEOMETRY_TOL,
                               '%.12f' % vol))
    v = np.array([0.3, -1.2, 2.0])
    vol = volume_align.vector_volume(volume_align.RepresentationSet([v, v]))
    results.append(CheckResult('degenerate_volume', abs(vol) < GEOMETRY_TOL,
                               '%.3e' % vol))
    rng = rng_stream(0, 'geometry')
    vectors = list(rng.standard_normal((3, 5)))
    base = volume_align.vector_volume(volume_align.RepresentationSet(vectors))
    scaled = volume_align.vector_volume(volume_align.RepresentationSet(
        [-2.5 * vectors[0]] + vectors[1:]))
    results.append(CheckResult('scale_property',
                               abs(scaled - 2.5 * base) < GEOMETRY_TOL * 10,
                               '%.12f vs %.12f' % (scaled, 2.5 * base)))
    permuted = volume_align.vector_volume(volume_align.RepresentationSet(
        vectors[::-1]))
    results.append(CheckResult('permutation_invariance',
                               abs(permuted - base) < GEOMETRY_TOL))
    theta = 0.7
    vol = volume_align.vector_volume(volume_align.RepresentationSet(
        [np.array([1.0, 0.0]), np.array([np.cos(theta), np.sin(theta)])]))
    results.append(CheckResult('two_vector_sine',
                               abs(vol - abs(np.sin(theta))) < GEOMETRY_TOL))
    fixture = np.array([[1, 0, 1], [0, 2, 1], [1, 0, 0], [0, 0, 1]], dtype=float)
    vol = volume_align.vector_volume(
        volume_align.RepresentationSet.from_columns(fixture))
    results.append(CheckResult('sqrt12_fixture',
                               abs(vol - np.sqrt(12.0)) < GEOMETRY_TOL,
                               '%.8f' % vol))
    return results


def contrastive_checks():
    results = []
    rng = rng_stream(0, 'contrastive')
    batch = volume_align.ContrastiveBatch(rng.standard_normal((4, 3)),
                                          {'audio': rng.standard_normal((4, 3))},
                                          1)
    loss = volume_align.symmetric_contrastive_loss(batch)
    results.append(CheckResult('single_candidate_zero', loss == 0.0,
                               '%.3e' % loss))
    anchors = np.tile(np.eye(3)[0], (4, 1))
    others = {'audio': np.tile(np.eye(3)[1], (4, 1))}
    loss = volume_align.contrastive_loss_o2a(
        volume_align.ContrastiveBatch(anchors, others, 4))
    results.append(CheckResult('uniform_volume_log_u',
                               abs(loss - np.log(4)) < 1e-10, '%.12f' % loss))
    return results


def aggregation_checks():
    results = []
    weights = server_ops.mma_weights([1, 2, 3]).weights
    results.append(CheckResult(
        'mma_weights', np.allclose(weights, [1 / 6., 1 / 3., 1 / 2.],
                                   atol=1e-15, rtol=0)))
    rng = rng_stream(0, 'aggregation')
    uploads = []
    for ident in range(3):
        adapters = [models.LoRAAdapter(rng.standard_normal((2, 6)),
                                       rng.standard_normal((6, 2)))]
        uploads.append(device_ops.LoRAUpload(ident, adapters, 3))
    picked = server_ops.mma_aggregate(
        uploads, server_ops.AggregationWeights([1.0, 0.0, 0.0]))
    results.append(CheckResult(
        'mma_selection', np.array_equal(picked[0].a, uploads[0].adapters[0].a)
        and np.array_equal(picked[0].b, uploads[0].adapters[0].b)))
    mma = server_ops.mma_aggregate(uploads, server_ops.mma_weights([3, 3, 3]))
    uniform = server_ops.mma_aggregate(uploads, server_ops.uniform_weights(3))
    results.append(CheckResult(
        'homogeneous_equals_uniform',
        np.array_equal(mma[0].a, uniform[0].a) and
        np.array_equal(mma[0].b, uniform[0].b)))
    return results


def _direct_kt(y_a, y_b, bins):
    total = 0.0
    for row_a, row_b in zip(y_a.data, y_b.data):
        p, q = [_pooled_distribution(row, bins) for row in (row_a, row_b)]
        total += float(np.sum(p * np.log(p / q)))
    return total


def _pooled_distribution(row, bins):
    ordered = np.sort(row)[::-1]
    pooled = np.array([chunk.mean() for chunk in np.array_split(ordered, bins)])
    weights = np.exp(pooled - pooled.max())
    return weights / weights.sum()


def kt_checks():
    rng = rng_stream(0, 'kt')
    y = models.LogitSequence(rng.standard_normal((3, 8)))
    other = models.LogitSequence(rng.standard_normal((5, 8)))
    zero = server_ops.pooled_kt_loss(y, y, 4)
    value = server_ops.pooled_kt_loss(y, other, 4)
    truncated = server_ops.pooled_kt_loss(
        y, models.LogitSequence(other.data[:3]), 4)
    uneven = server_ops.pooled_kt_loss(y, other, 3)
    direct = _direct_kt(y, other, 3)
    return [CheckResult('kt_identity_zero', abs(zero) < 1e-12, '%.3e' % zero),
            CheckResult('kt_nonnegative', value >= 0.0, '%.6f' % value),
            CheckResult('kt_positions_min_length', value == truncated,
                        '%.6f vs %.6f' % (value, truncated)),
            CheckResult('kt_direct_oracle',
                        abs(uneven - direct) <= 1e-10 * max(1.0, abs(direct)),
                        '%.3e' % abs(uneven - direct))]


def selftest_config():
    """
    A configuration small enough to run twice in seconds.
    """
    return config_mod.config_from_dict({
        'experiment': {'n_devices': 2, 'rounds': 2, 'seed': 3},
        'modalities': ['vision', 'audio'],
        'mer': 0.5,
        'dims': {'raw': 6, 'feature': 6, 'latent': 4, 'prompt_hidden': 8,
                 'vocab': 6, 'slm': {'width': 8, 'depth': 1, 'soft_tokens': 1},
                 'llm': {'width': 16, 'depth': 2, 'soft_tokens': 2}},
        'training': {'batch_size': 8, 'negatives': 4, 'kt_bins': 3},
        'dataset': {'synthetic': {'classes': 3, 'sample_count': 96,
                                  'latent_dim': 4}},
    })


def metrics_stream(config):
    stream = io.StringIO()
    orchestrator.run_experiment(config, metrics_stream=stream)
    return stream.getvalue()


def determinism_checks(config=None):
    config = config or selftest_config()
    parallel = dataclasses.replace(config, workers=config.n_devices)
    first = metrics_stream(parallel)
    second = metrics_stream(parallel)
    sequential = metrics_stream(dataclasses.replace(config, workers=1))
    return [CheckResult('replay_identical', first == second),
            CheckResult('schedule_independent', first == sequential)]


def selftest(seed=0):
    """
    :return: list of CheckResult
    """
    cases = gradient_suite(seed)
    results = [CheckResult('gradients', all(case.passed for case in cases),
                           '%i cases, worst %s' % (len(cases),
                                                   worst_by_path(cases)))]
    for suite in (geometry_checks, contrastive_checks, aggregation_checks,
                  kt_checks, determinism_checks):
        results.extend(suite())
    for result in results:
        LOGGER.info('%s' % result)
    return results

# end
