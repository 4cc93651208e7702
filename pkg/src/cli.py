"""
The mlecs_sim command line: run, ablate, bench-comm, gradcheck, selftest.

Exit status is 0 on success, 1 on any error and 2 when a verification
check fails.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import MlecsLogHandlers
from . import checkpoint
from . import comms
from . import config as config_mod
from . import models
from . import orchestrator
from . import verification

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2

SUBCOMMANDS = ('run', 'gradcheck', 'bench-comm', 'ablate', 'selftest')
ABLATION_MODES = ('mlecs', 'mlecs_wo_mma', 'mlecs_wo_seccl', 'standalone',
                  'fedavg_uniform')

METRICS_FILE = 'metrics.jsonl'
SUMMARY_FILE = 'summary.json'
CHECKPOINT_FILE = 'adapters.ckpt'
CONFIG_FILE = 'config.yaml'
ABLATION_FILE = 'ablation.json'
LOG_FILE = 'mlecs.log'


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', dest='config_path', type=str,
                        default=None, help='experiment YAML file')
    common.add_argument('--set', dest='overrides', action='append',
                        default=[], metavar='KEY=VALUE',
                        help='override a dotted config key, repeatable')
    common.add_argument('--out', dest='output_dir', type=str,
                        default='mlecs_out', help='output directory')
    common.add_argument('--workers', dest='workers', type=int, default=None,
                        help='device worker threads, default one per device')
    common.add_argument('--seed', dest='seed', type=int, default=None,
                        help='master seed, overrides the config')
    common.add_argument('--loglevel', dest='log_level', type=str,
                        default=None,
                        help='log level to use, options ERROR, INFO, DEBUG; '
                             'default from $%s' % MlecsLogHandlers.LOG_LEVEL_ENV)
    parser = argparse.ArgumentParser(
        prog='mlecs_sim',
        description='Simulate multimodal edge-cloud collaborative learning.',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    subparsers = parser.add_subparsers(dest='subcommand')
    subparsers.required = True
    helps = {
        'run': 'run one experiment and write metrics, summary and checkpoint',
        'gradcheck': 'finite-difference check of every gradient path',
        'bench-comm': 'print the communication accounting tables',
        'ablate': 'run every mode on the same seed, optionally over a grid '
                  'of MER and device counts, and compare',
        'selftest': 'run all built-in verification suites',
    }
    sub = {}
    for name in SUBCOMMANDS:
        sub[name] = subparsers.add_parser(
            name, parents=[common], help=helps[name],
            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub['ablate'].add_argument(
        '--mer', dest='mers', type=float, action='append', default=None,
        help='modality existence rate to sweep, repeatable; default the '
             'configured rate')
    sub['ablate'].add_argument(
        '--devices', dest='device_counts', type=int, action='append',
        default=None, help='device count N to sweep, repeatable; default '
                           'the configured N')
    return parser


def invocation_config(args):
    """
    The config file plus --set overrides, then --seed and --workers.
    """
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append('experiment.seed=%i' % args.seed)
    if args.workers is not None:
        overrides.append('experiment.workers=%i' % args.workers)
    return config_mod.parse_config(args.config_path, overrides)


def _require_config(args):
    if args.config_path is None:
        raise config_mod.ConfigError('%s needs --config' % args.subcommand)


def _prepare_output(output_dir):
    os.makedirs(output_dir, exist_ok=True)
    return MlecsLogHandlers.configure_file_logging(
        logging.getLogger('mlecs'), LOG_FILE, output_dir)


def _write_json(path, data):
    with open(path, 'w') as fptr:
        json.dump(data, fptr, sort_keys=True, indent=2)
        fptr.write('\n')


def cmd_run(args):
    _require_config(args)
    config = invocation_config(args)
    handler = _prepare_output(args.output_dir)
    try:
        with open(os.path.join(args.output_dir, CONFIG_FILE), 'w') as fptr:
            fptr.write(config_mod.serialize_config(config))
        with open(os.path.join(args.output_dir, METRICS_FILE), 'w') as stream:
            result = orchestrator.run_experiment(config, metrics_stream=stream)
        _write_json(os.path.join(args.output_dir, SUMMARY_FILE), result.summary)
        checkpoint.write_checkpoint(
            os.path.join(args.output_dir, CHECKPOINT_FILE),
            models.extract_lora(result.state.server.slm),
            {'seed': config.seed, 'rounds': config.rounds, 'mode': config.mode})
    finally:
        logging.getLogger('mlecs').removeHandler(handler)
        handler.close()
    summary = result.summary
    print('mode %s seed %i: avg F1 %.4f (best %.4f, worst %.4f), server F1 '
          '%.4f' % (summary['mode'], summary['seed'], summary['avg_f1'],
                    summary['best_f1'], summary['worst_f1'],
                    summary['server_f1']))
    print('results in %s' % args.output_dir)
    return EXIT_OK


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    cases = verification.gradient_suite(seed)
    failed = [case for case in cases if not case.passed]
    print('%i gradient cases, %i failed' % (len(cases), len(failed)))
    for path, worst in sorted(verification.worst_by_path(cases).items()):
        print('  %-16s worst relative error %.3e' % (path, worst))
    for case in failed:
        print('  FAILED %s: %s' % (case.path, case.report))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def _table(rows):
    width = max(len(str(name)) for name, _ in rows)
    for name, value in rows:
        if isinstance(value, float):
            value = '%.6g' % value
        print('  %s  %s' % (str(name).ljust(width), value))


def cmd_bench_comm(args):
    config = invocation_config(args)
    state = orchestrator.build_experiment(config)
    expected = orchestrator.expected_adapter_params(config)
    print('configured model (mode %s, r=%i):' % (config.mode, config.lora.rank))
    for dev in state.devices:
        adapter_params = comms.adapter_parameter_count(dev.model.adapters)
        if adapter_params != expected:
            raise comms.AccountingError('Device %i holds %i adapter parameters, '
                                        'topology gives %i' % (
                                            dev.ident, adapter_params, expected))
        uplink = comms.uplink_parameters(adapter_params, config.mode)
        downlink = comms.downlink_parameters(adapter_params,
                                             len(dev.public_shard),
                                             config.dims.latent, config.mode)
        total = models.parameter_count(dev.model)
        print(' device %i %s' % (dev.ident, dev.modalities))
        _table([('adapter_params', adapter_params),
                ('uplink_params', uplink),
                ('downlink_params', downlink),
                ('uplink_bytes', comms.to_bytes(uplink)),
                ('downlink_bytes', comms.to_bytes(downlink)),
                ('total_params', total),
                ('ratio', comms.comm_ratio(uplink, total))])
    fixture = comms.LargeModelFixture()
    print('720M-parameter fixture (r=%i):' % fixture.rank)
    _table(fixture.rows())
    return EXIT_OK


def _sweep_values(values, default):
    return list(values) if values else [default]


def _mer_label(mer):
    if isinstance(mer, dict):
        return 'mixed'
    return '%.2f' % mer


def ablation_grid(config, mers=None, device_counts=None):
    """
    Every (device count, MER, mode) combination to run, in output order.

    :param config: the base ExperimentConfig
    :param mers: MER values to sweep, default the configured one
    :param device_counts: N values to sweep, default the configured one
    :return: list of ExperimentConfig
    """
    grid = []
    for n_devices in _sweep_values(device_counts, config.n_devices):
        for mer in _sweep_values(mers, config.mer):
            for mode in ABLATION_MODES:
                grid.append(dataclasses.replace(
                    config, n_devices=n_devices, mer=mer, mode=mode))
    return grid


def cmd_ablate(args):
    _require_config(args)
    config = invocation_config(args)
    grid = ablation_grid(config, args.mers, args.device_counts)
    LOGGER.info('Ablating %i runs' % len(grid))
    handler = _prepare_output(args.output_dir)
    rows = []
    try:
        for point in grid:
            summary = orchestrator.run_experiment(point).summary
            rows.append({
                'mode': point.mode,
                'seed': point.seed,
                'n_devices': point.n_devices,
                'mer': point.mer,
                'avg_f1': summary['avg_f1'],
                'best_f1': summary['best_f1'],
                'worst_f1': summary['worst_f1'],
                'server_f1': summary['server_f1'],
                'uplink_params': summary['comm']['uplink_params'],
            })
        _write_json(os.path.join(args.output_dir, ABLATION_FILE), rows)
    finally:
        logging.getLogger('mlecs').removeHandler(handler)
        handler.close()
    print('%-16s %6s %4s %6s %8s %8s %8s %9s %14s' % (
        'mode', 'seed', 'N', 'mer', 'avg_f1', 'best_f1', 'worst_f1',
        'server_f1', 'uplink_params'))
    for row in rows:
        print('%-16s %6i %4i %6s %8.4f %8.4f %8.4f %9.4f %14i' % (
            row['mode'], row['seed'], row['n_devices'], _mer_label(row['mer']),
            row['avg_f1'], row['best_f1'], row['worst_f1'], row['server_f1'],
            row['uplink_params']))
    return EXIT_OK


def cmd_selftest(args):
    results = verification.selftest(args.seed if args.seed is not None else 0)
    for result in results:
        print('%-28s %s %s' % (result.name, 'ok' if result.passed else 'FAIL',
                               result.detail))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


COMMANDS = {
    'run': cmd_run,
    'gradcheck': cmd_gradcheck,
    'bench-comm': cmd_bench_comm,
    'ablate': cmd_ablate,
    'selftest': cmd_selftest,
}


def execute(args):
    """
    Run a parsed invocation.

    :return: exit status
    """
    try:
        return COMMANDS[args.subcommand](args)
    except (ValueError, RuntimeError, OSError) as exc:
        LOGGER.error('%s failed: %s' % (args.subcommand, exc))
        sys.stderr.write('mlecs_sim %s: error: %s\n' % (args.subcommand, exc))
        return EXIT_ERROR


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.log_level:
            log_level = MlecsLogHandlers.log_level_from_name(args.log_level)
        else:
            log_level = MlecsLogHandlers.log_level_from_env()
    except ValueError as exc:
        sys.stderr.write('mlecs_sim: error: %s\n' % exc)
        return EXIT_ERROR
    MlecsLogHandlers.configure_console_logging(logging.getLogger('mlecs'),
                                               log_level=log_level)
    return execute(args)

# end
