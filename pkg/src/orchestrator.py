"""
The round protocol end to end: build an experiment from a config, run its
rounds, account for the traffic, and summarise the results.

Modes:

- mlecs: the full protocol
- mlecs_wo_mma: uniform instead of modality-aware aggregation weights
- mlecs_wo_seccl: the server skips its contrastive/knowledge-transfer
  training and redistributes the aggregate directly
- standalone: devices only tune on their private data, nothing is exchanged
- fedavg_uniform: devices tune on their private data and the server
  averages their adapters uniformly
"""

import json
import logging
import time

import numpy as np

from . import comms
from . import datasets
from . import device as device_ops
from . import models
from . import server as server_ops
from .utils import rng_stream, threaded_device_operation

LOGGER = logging.getLogger(__name__)

MLECS = 'mlecs'
MLECS_WO_MMA = 'mlecs_wo_mma'
MLECS_WO_SECCL = 'mlecs_wo_seccl'
STANDALONE = comms.STANDALONE
FEDAVG_UNIFORM = comms.FEDAVG_UNIFORM


class RoundError(RuntimeError):
    pass


def _step(t, name, func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except Exception as exc:
        LOGGER.error('Round %i failed in step %s: %s' % (t, name, exc))
        raise RoundError('round %i, step %s: %s' % (t, name, exc)) from exc


class ExperimentState(object):
    """
    Everything one experiment owns between rounds.
    """
    def __init__(self, config, partition, devices, server):
        self.config = config
        self.partition = partition
        self.devices = devices
        self.server = server

    @property
    def mode(self):
        return self.config.mode


def load_dataset(config):
    """
    The experiment's omni-modal dataset, external or synthesised.
    """
    if config.dataset.path is not None:
        dataset = datasets.load_external_dataset(config.dataset.path)
        missing = [m for m in config.modalities if m not in dataset.features]
        if missing:
            raise datasets.ManifestError('%s has no features for %s' % (
                config.dataset.path, missing))
        dataset = dataset.restrict(config.modalities)
        for modality, width in config.raw_dims().items():
            if dataset.features[modality].shape[1] != width:
                raise datasets.ManifestError(
                    '%s: %s rows are %i wide, config says %i' % (
                        config.dataset.path, modality,
                        dataset.features[modality].shape[1], width))
        if dataset.classes > config.dims.vocab:
            raise datasets.ManifestError('%i classes exceed vocab %i' % (
                dataset.classes, config.dims.vocab))
        return dataset
    synth = config.dataset.synthetic
    spec = datasets.SyntheticTaskSpec.generate(
        config.raw_dims(), synth.latent_dim, synth.classes, synth.noise_std,
        synth.sample_count, rng_stream(config.seed, 'task'), synth.orthogonal)
    return datasets.synth_dataset(spec, rng_stream(config.seed, 'data'))


def build_experiment(config):
    """
    Data, partition, modality assignment, devices and server, every piece
    drawn from its own seeded stream.

    :param config: ExperimentConfig
    :return: ExperimentState
    """
    dims = config.dims
    universe = list(config.modalities)
    raw_dims = config.raw_dims()
    dataset = load_dataset(config)
    partition = datasets.partition_data(dataset, config.n_devices,
                                        rng_stream(config.seed, 'partition'))
    modality_sets = datasets.assign_modalities(
        config.n_devices, universe, config.mer, rng_stream(config.seed, 'mer'))
    slm = models.Backbone.build(dims.slm.width, dims.slm.depth, dims.vocab,
                                dims.slm.soft_tokens, config.lora.rank,
                                rng_stream(config.seed, 'slm'),
                                config.lora.scale)
    devices = []
    for ident, modalities in enumerate(modality_sets):
        model = models.UnifiedModel.build(
            modalities, universe, raw_dims, dims.feature, dims.latent,
            dims.prompt_hidden, slm.copy(),
            rng_stream(config.seed, 'device-model', ident))
        devices.append(device_ops.DeviceState(
            ident, modalities, model,
            partition.private_train[ident].restrict(modalities),
            partition.private_test[ident].restrict(modalities),
            partition.public_shard(modalities),
            rng_stream(config.seed, 'device', ident),
            config.training.batch_size, config.training.negatives))
        LOGGER.info('Device %i holds %s' % (ident, modalities))
    llm = models.Backbone.build(dims.llm.width, dims.llm.depth, dims.vocab,
                                dims.llm.soft_tokens, config.lora.rank,
                                rng_stream(config.seed, 'llm'),
                                config.lora.scale)
    unified = models.UnifiedModel.build(
        universe, universe, raw_dims, dims.feature, dims.latent,
        dims.prompt_hidden, llm, rng_stream(config.seed, 'server-model'))
    server = server_ops.ServerState(
        unified, slm.copy(), partition.public_train, partition.public_test,
        rng_stream(config.seed, 'server'), config.training.batch_size,
        config.training.negatives)
    return ExperimentState(config, partition, devices, server)


class RoundReport(object):
    """
    What happened in one round.
    """
    def __init__(self, t, mode):
        self.t = t
        self.mode = mode
        self.devices = []
        self.server = {}
        self.weights = []
        self.uplink_params = []
        self.downlink_params = []
        self.adapter_params = 0
        self.total_device_params = 0
        self.wall_time = 0.0

    @property
    def uplink_total(self):
        return int(sum(self.uplink_params))

    @property
    def downlink_total(self):
        return int(sum(self.downlink_params))

    @property
    def objective(self):
        """
        Sum of every loss reported this round.
        """
        total = 0.0
        for entry in self.devices:
            total += sum(entry[key] for key in ('ccl_loss', 'amt_loss')
                         if entry[key] is not None)
        total += sum(self.server[key] for key in ('llm_loss', 'slm_loss')
                     if self.server.get(key) is not None)
        return total

    def device_f1(self):
        return [entry['f1'] for entry in self.devices]

    def to_record(self):
        """
        The deterministic part of the report, for the metrics stream.
        """
        return {
            'round': self.t,
            'mode': self.mode,
            'devices': self.devices,
            'server': self.server,
            'weights': self.weights,
            'objective': self.objective,
            'comm': {
                'adapter_params': self.adapter_params,
                'uplink_params': self.uplink_params,
                'downlink_params': self.downlink_params,
                'uplink_total': self.uplink_total,
                'downlink_total': self.downlink_total,
                'uplink_bytes': comms.to_bytes(self.uplink_total),
                'downlink_bytes': comms.to_bytes(self.downlink_total),
                'ratio': comms.comm_ratio(self.uplink_total,
                                          self.total_device_params),
            },
        }

    def __repr__(self):
        return 'RoundReport(t=%i, mode=%s, avg_f1=%.4f)' % (
            self.t, self.mode, aggregate_metrics(self.device_f1())[0])


def _device_phase(device, anchors, training, exchange, run_contrastive):
    ccl_loss = None
    if run_contrastive:
        ccl_loss = device_ops.run_ccl(device, anchors, training.ccl_epochs,
                                      training.lr)
    amt_loss = device_ops.run_amt(device, training.amt_epochs, training.lr)
    upload = device_ops.make_upload(device) if exchange else None
    return ccl_loss, amt_loss, upload


def _apply_phase(device, adapters):
    device_ops.apply_server_adapters(device, adapters)


def _evaluate_phase(device):
    return device_ops.evaluate(device)


def expected_adapter_params(config):
    slm = config.dims.slm
    return comms.adapter_parameter_count(
        [(slm.width, slm.width, config.lora.rank)] * slm.depth)


def run_round(t, state):
    """
    One round. In the ML-ECS modes: fused anchors, device CCL then AMT and
    upload, aggregation onto the server's small model, server training,
    redistribution. Then every party is evaluated.

    :param t: round index
    :param state: ExperimentState
    :return: RoundReport
    """
    stime = time.time()
    config = state.config
    mode = config.mode
    training = config.training
    server = state.server
    devices = state.devices
    workers = config.workers
    mlecs_family = mode in comms.MLECS_MODES
    exchange = mode != STANDALONE
    report = RoundReport(t, mode)

    anchors = None
    if mlecs_family:
        anchors = _step(t, 'generate_fused_public',
                        server_ops.generate_fused_public, server)
    results = _step(t, 'device_training', threaded_device_operation,
                    devices, None,
                    (_device_phase, (anchors, training, exchange,
                                     mlecs_family)), workers)

    adapter_params = 0
    if exchange:
        uploads = [results[dev.ident][2] for dev in devices]
        adapter_params = uploads[0].parameter_count()
        expected = expected_adapter_params(config)
        for upload in uploads:
            if upload.parameter_count() != expected:
                raise RoundError('round %i: device %s uploaded %i adapter '
                                 'parameters, topology gives %i' % (
                                     t, upload.device_id,
                                     upload.parameter_count(), expected))
        if mode == MLECS:
            weights = _step(t, 'mma_weights', server_ops.mma_weights,
                            [upload.modality_count for upload in uploads])
        else:
            weights = server_ops.uniform_weights(len(uploads))
        aggregate = _step(t, 'mma_aggregate', server_ops.mma_aggregate,
                          uploads, weights)
        _step(t, 'apply_aggregate', models.apply_lora, server.slm, aggregate)
        report.weights = weights.tolist()

    llm_loss = slm_loss = None
    if mode in (MLECS, MLECS_WO_MMA):
        llm_loss, slm_loss = _step(
            t, 'se_ccl', server_ops.se_ccl, server, training.se_epochs,
            training.lr, training.kt_bins)
    elif mode in (STANDALONE, FEDAVG_UNIFORM):
        llm_loss, _ = _step(
            t, 'server_ccl', server_ops.se_ccl, server, training.se_epochs,
            training.lr, training.kt_bins, knowledge_transfer=False)

    if exchange:
        adapters = _step(t, 'distribute_adapters',
                         server_ops.distribute_adapters, server)
        _step(t, 'apply_server_adapters', threaded_device_operation,
              devices, None, (_apply_phase, (adapters,)), workers)

    scores = _step(t, 'evaluate', threaded_device_operation, devices, None,
                   (_evaluate_phase,), workers)
    unified_f1, slm_f1 = _step(t, 'evaluate_server', server_ops.evaluate,
                               server)

    for dev in devices:
        ccl_loss, amt_loss, _ = results[dev.ident]
        report.devices.append({
            'id': dev.ident,
            'modalities': list(dev.modalities),
            'ccl_loss': None if ccl_loss is None else float(ccl_loss),
            'amt_loss': float(amt_loss),
            'f1': float(scores[dev.ident]),
        })
        report.uplink_params.append(comms.uplink_parameters(adapter_params,
                                                            mode))
        report.downlink_params.append(comms.downlink_parameters(
            adapter_params, len(dev.public_shard), config.dims.latent, mode))
        report.total_device_params += models.parameter_count(dev.model)
    report.adapter_params = adapter_params
    report.server = {
        'llm_loss': None if llm_loss is None else float(llm_loss),
        'slm_loss': None if slm_loss is None else float(slm_loss),
        'f1': float(unified_f1),
        'slm_f1': float(slm_f1),
    }
    report.wall_time = time.time() - stime
    LOGGER.info('Round %i (%s) done in %.2fs: avg device F1 %.4f, server F1 '
                '%.4f, uplink %i floats' % (
                    t, mode, report.wall_time,
                    aggregate_metrics(report.device_f1())[0], unified_f1,
                    report.uplink_total))
    return report


def aggregate_metrics(per_device):
    """
    (mean, best, worst) of per-device scores.
    """
    values = [float(val) for val in per_device]
    if len(values) == 0:
        raise ValueError('No per-device metrics to aggregate')
    return float(np.mean(values)), max(values), min(values)


def write_record(stream, record):
    stream.write(json.dumps(record, sort_keys=True) + '\n')
    stream.flush()


class ExperimentResult(object):
    def __init__(self, state, reports):
        self.state = state
        self.reports = reports
        self.summary = summarise(state, reports)


def summarise(state, reports):
    """
    The final summary: last-round device F1 with mean/best/worst, server
    F1, loss curves and cumulative traffic.
    """
    final = reports[-1]
    per_device = final.device_f1()
    avg, best, worst = aggregate_metrics(per_device)
    uplink = sum(report.uplink_total for report in reports)
    downlink = sum(report.downlink_total for report in reports)
    return {
        'mode': state.config.mode,
        'seed': state.config.seed,
        'rounds': len(reports),
        'device_f1': per_device,
        'avg_f1': avg,
        'best_f1': best,
        'worst_f1': worst,
        'server_f1': final.server['f1'],
        'server_slm_f1': final.server['slm_f1'],
        'curves': {
            'ccl_loss': [[entry['ccl_loss'] for entry in report.devices]
                         for report in reports],
            'amt_loss': [[entry['amt_loss'] for entry in report.devices]
                         for report in reports],
            'server_llm_loss': [report.server['llm_loss'] for report in reports],
            'server_slm_loss': [report.server['slm_loss'] for report in reports],
            'objective': [report.objective for report in reports],
            'avg_f1': [aggregate_metrics(report.device_f1())[0]
                       for report in reports],
        },
        'comm': {
            'uplink_params': uplink,
            'downlink_params': downlink,
            'uplink_bytes': comms.to_bytes(uplink),
            'downlink_bytes': comms.to_bytes(downlink),
        },
    }


def run_experiment(config, metrics_stream=None, state=None):
    """
    Run every round of an experiment.

    :param config: ExperimentConfig
    :param metrics_stream: optional text file object; one JSON record per
        round is appended to it
    :param state: an ExperimentState to continue instead of building one
    :return: ExperimentResult
    """
    if state is None:
        state = build_experiment(config)
    reports = []
    for t in range(config.rounds):
        report = run_round(t, state)
        reports.append(report)
        if metrics_stream is not None:
            write_record(metrics_stream, report.to_record())
    return ExperimentResult(state, reports)

# end
