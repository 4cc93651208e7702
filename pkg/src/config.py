"""
Experiment configuration: a nested YAML document, validated into
dataclasses, with dotted-key command-line overrides.
"""

import copy
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Union

import yaml

from .datasets import minimum_samples

LOGGER = logging.getLogger(__name__)

MODES = ('mlecs', 'mlecs_wo_mma', 'mlecs_wo_seccl', 'standalone',
         'fedavg_uniform')

# mappings whose keys are modality names rather than schema fields
FREE_FORM_KEYS = (('mer',), ('dims', 'raw'))


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super(ConfigError, self).__init__(message)
        self.key = key


def _check_int(value, key, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError('%s must be an integer, got %r' % (key, value), key)
    if minimum is not None and value < minimum:
        raise ConfigError('%s must be >= %i, got %i' % (key, minimum, value),
                          key)
    return value


def _check_float(value, key, minimum=None, maximum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError('%s must be a number, got %r' % (key, value), key)
    value = float(value)
    if minimum is not None and value < minimum:
        raise ConfigError('%s must be >= %s, got %s' % (key, minimum, value),
                          key)
    if maximum is not None and value > maximum:
        raise ConfigError('%s must be <= %s, got %s' % (key, maximum, value),
                          key)
    return value


@dataclass
class BackboneDims:
    width: int = 16
    depth: int = 2
    soft_tokens: int = 2

    def validate(self, prefix):
        _check_int(self.width, prefix + '.width', 1)
        _check_int(self.depth, prefix + '.depth', 1)
        _check_int(self.soft_tokens, prefix + '.soft_tokens', 1)


@dataclass
class ModelDims:
    raw: Union[int, Dict[str, int]] = 12
    feature: int = 8
    latent: int = 8
    prompt_hidden: int = 16
    vocab: int = 8
    slm: BackboneDims = field(default_factory=BackboneDims)
    llm: BackboneDims = field(default_factory=lambda: BackboneDims(32, 3, 3))

    def validate(self, modalities):
        if isinstance(self.raw, dict):
            missing = [m for m in modalities if m not in self.raw]
            if missing:
                raise ConfigError('dims.raw has no width for %s' % missing,
                                  'dims.raw')
            for modality, width in self.raw.items():
                _check_int(width, 'dims.raw.%s' % modality, 1)
        else:
            _check_int(self.raw, 'dims.raw', 1)
        for name in ('feature', 'latent', 'prompt_hidden', 'vocab'):
            _check_int(getattr(self, name), 'dims.' + name, 1)
        self.slm.validate('dims.slm')
        self.llm.validate('dims.llm')
        if (self.llm.soft_tokens * self.llm.width) % self.slm.width:
            raise ConfigError('dims.llm soft_tokens * width (%i) must be a '
                              'multiple of dims.slm.width (%i)' % (
                                  self.llm.soft_tokens * self.llm.width,
                                  self.slm.width), 'dims.slm.width')

    def raw_dims(self, modalities):
        if isinstance(self.raw, dict):
            return dict((m, self.raw[m]) for m in modalities)
        return dict((m, self.raw) for m in modalities)


@dataclass
class LoraConfig:
    rank: int = 2
    scale: float = 1.0


@dataclass
class TrainingConfig:
    lr: float = 1e-2
    batch_size: int = 16
    negatives: int = 16
    ccl_epochs: int = 1
    amt_epochs: int = 1
    se_epochs: int = 1
    kt_bins: int = 4

    def validate(self):
        self.lr = _check_float(self.lr, 'training.lr')
        if self.lr <= 0:
            raise ConfigError('training.lr must be > 0', 'training.lr')
        _check_int(self.batch_size, 'training.batch_size', 1)
        _check_int(self.negatives, 'training.negatives', 1)
        for name in ('ccl_epochs', 'amt_epochs', 'se_epochs'):
            _check_int(getattr(self, name), 'training.' + name, 0)
        _check_int(self.kt_bins, 'training.kt_bins', 1)


@dataclass
class SyntheticConfig:
    latent_dim: int = 8
    classes: int = 4
    noise_std: float = 0.5
    sample_count: int = 1600
    orthogonal: bool = False


@dataclass
class DatasetConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    path: Optional[str] = None


@dataclass
class ExperimentConfig:
    n_devices: int = 3
    rounds: int = 5
    seed: int = 0
    mode: str = 'mlecs'
    workers: Optional[int] = None
    modalities: List[str] = field(
        default_factory=lambda: ['vision', 'audio', 'text'])
    mer: Union[float, Dict[str, float]] = 1.0
    dims: ModelDims = field(default_factory=ModelDims)
    lora: LoraConfig = field(default_factory=LoraConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        _check_int(self.n_devices, 'experiment.n_devices', 1)
        _check_int(self.rounds, 'experiment.rounds', 1)
        _check_int(self.seed, 'experiment.seed', 0)
        if self.mode not in MODES:
            raise ConfigError('experiment.mode must be one of %s, got %r' % (
                list(MODES), self.mode), 'experiment.mode')
        if self.workers is not None:
            _check_int(self.workers, 'experiment.workers', 1)
        if not self.modalities or \
                not all(isinstance(m, str) for m in self.modalities) or \
                len(set(self.modalities)) != len(self.modalities):
            raise ConfigError('modalities must be a non-empty list of unique '
                              'names, got %r' % (self.modalities,),
                              'modalities')
        if isinstance(self.mer, dict):
            missing = [m for m in self.modalities if m not in self.mer]
            if missing:
                raise ConfigError('mer has no rate for %s' % missing, 'mer')
            self.mer = dict((m, _check_float(rate, 'mer.%s' % m, 0.0, 1.0))
                            for m, rate in self.mer.items())
        else:
            self.mer = _check_float(self.mer, 'mer', 0.0, 1.0)
        self.dims.validate(self.modalities)
        _check_int(self.lora.rank, 'lora.rank', 1)
        self.lora.scale = _check_float(self.lora.scale, 'lora.scale')
        for name in ('slm', 'llm'):
            width = getattr(self.dims, name).width
            if 2 * self.lora.rank > width:
                raise ConfigError('lora.rank %i is too large for the %s width '
                                  '%i (r <= width/2)' % (self.lora.rank, name,
                                                         width), 'lora.rank')
        self.training.validate()
        if self.training.kt_bins > self.dims.vocab:
            raise ConfigError('training.kt_bins %i exceeds dims.vocab %i' % (
                self.training.kt_bins, self.dims.vocab), 'training.kt_bins')
        synth = self.dataset.synthetic
        _check_int(synth.latent_dim, 'dataset.synthetic.latent_dim', 1)
        _check_int(synth.classes, 'dataset.synthetic.classes', 2)
        _check_int(synth.sample_count, 'dataset.synthetic.sample_count', 0)
        synth.noise_std = _check_float(synth.noise_std,
                                       'dataset.synthetic.noise_std', 0.0)
        if not isinstance(synth.orthogonal, bool):
            raise ConfigError('dataset.synthetic.orthogonal must be true or '
                              'false', 'dataset.synthetic.orthogonal')
        if synth.classes > self.dims.vocab:
            raise ConfigError('dataset.synthetic.classes %i exceeds dims.vocab '
                              '%i' % (synth.classes, self.dims.vocab),
                              'dataset.synthetic.classes')
        required = minimum_samples(self.n_devices)
        if self.dataset.path is None and synth.sample_count < required:
            raise ConfigError('dataset.synthetic.sample_count %i is below the '
                              'minimum of %i for %i devices' % (
                                  synth.sample_count, required,
                                  self.n_devices),
                              'dataset.synthetic.sample_count')
        if self.dataset.path is not None and \
                not isinstance(self.dataset.path, str):
            raise ConfigError('dataset.path must be a string', 'dataset.path')

    def raw_dims(self):
        return self.dims.raw_dims(self.modalities)


def config_to_dict(config):
    """
    The nested YAML layout of a config.
    """
    flat = asdict(config)
    return {
        'experiment': dict((key, flat[key]) for key in
                           ('n_devices', 'rounds', 'seed', 'mode', 'workers')),
        'modalities': flat['modalities'],
        'mer': flat['mer'],
        'dims': flat['dims'],
        'lora': flat['lora'],
        'training': flat['training'],
        'dataset': flat['dataset'],
    }


DEFAULT_CONFIG = config_to_dict(ExperimentConfig())


def config_from_dict(data):
    """
    Build and validate a config from the nested layout. Keys missing from
    data take their defaults; unknown keys are rejected.
    """
    merged = copy.deepcopy(DEFAULT_CONFIG)
    _merge(merged, data or {}, ())
    exp = merged['experiment']
    dims = dict(merged['dims'])
    dims['slm'] = BackboneDims(**dims['slm'])
    dims['llm'] = BackboneDims(**dims['llm'])
    dataset = DatasetConfig(
        synthetic=SyntheticConfig(**merged['dataset']['synthetic']),
        path=merged['dataset']['path'])
    return ExperimentConfig(
        modalities=merged['modalities'], mer=merged['mer'],
        dims=ModelDims(**dims), lora=LoraConfig(**merged['lora']),
        training=TrainingConfig(**merged['training']), dataset=dataset,
        **exp)


def _merge(base, update, path):
    if not isinstance(update, dict):
        raise ConfigError('%s must be a mapping' % ('.'.join(path) or
                                                    'the document'),
                          '.'.join(path) or None)
    for key, value in update.items():
        key_path = path + (str(key),)
        dotted = '.'.join(key_path)
        if key_path in FREE_FORM_KEYS:
            base[key] = copy.deepcopy(value)
            continue
        if not isinstance(base, dict) or key not in base:
            raise ConfigError('Unknown configuration key %s' % dotted, dotted)
        if isinstance(base[key], dict):
            _merge(base[key], value, key_path)
        else:
            base[key] = value


def _key_lines(node, prefix=''):
    """
    dotted key -> 1-based line, from a composed YAML node tree.
    """
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            dotted = prefix + str(key_node.value)
            lines[dotted] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, dotted + '.'))
    return lines


def parse_override(text):
    """
    'a.b.c=value' -> (('a', 'b', 'c'), value parsed as a YAML scalar).
    """
    if '=' not in text:
        raise ConfigError('Override %r is not KEY=VALUE' % text)
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError('Override %r has an empty key' % text)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError('Override %s has an unparseable value: %s' % (
            key, exc), key)
    if isinstance(value, str):
        # YAML 1.1 reads 1e-3 as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return tuple(key.split('.')), value


def apply_overrides(data, overrides):
    """
    Apply dotted-key overrides in order; the last writer wins.
    """
    data = copy.deepcopy(data or {})
    for text in overrides or ():
        parts, value = parse_override(text)
        defaults = DEFAULT_CONFIG
        target = data
        for depth, part in enumerate(parts[:-1]):
            if parts[:depth + 1] in FREE_FORM_KEYS:
                defaults = None
            elif defaults is not None:
                if not isinstance(defaults, dict) or part not in defaults:
                    raise ConfigError('Unknown configuration key %s' %
                                      '.'.join(parts), '.'.join(parts))
                defaults = defaults[part]
            if not isinstance(target.get(part, {}), dict):
                raise ConfigError('%s is not a mapping; set it as a whole' %
                                  '.'.join(parts[:depth + 1]),
                                  '.'.join(parts))
            target = target.setdefault(part, {})
        if defaults is not None and parts not in FREE_FORM_KEYS and \
                (not isinstance(defaults, dict) or parts[-1] not in defaults):
            raise ConfigError('Unknown configuration key %s' % '.'.join(parts),
                              '.'.join(parts))
        target[parts[-1]] = value
        LOGGER.debug('Override %s = %r' % ('.'.join(parts), value))
    return data


def parse_config(path, overrides=None):
    """
    Read, override and validate an experiment configuration.

    :param path: YAML file, None for the built-in defaults
    :param overrides: list of 'dotted.key=value' strings
    :return: ExperimentConfig
    """
    lines = {}
    data = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError('Configuration file %s does not exist' % path)
        with open(path, 'r') as fptr:
            text = fptr.read()
        try:
            lines = _key_lines(yaml.compose(text))
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError('%s: %s' % (path, exc))
    try:
        return config_from_dict(apply_overrides(data, overrides))
    except ConfigError as exc:
        where = path or '<defaults>'
        if exc.key is not None and exc.key in lines:
            where = '%s:%i' % (where, lines[exc.key])
        raise ConfigError('%s: %s' % (where, exc), exc.key)
    except TypeError as exc:
        raise ConfigError('%s: %s' % (path or '<defaults>', exc))


def serialize_config(config):
    """
    YAML text that parse_config reads back to an equal config.
    """
    return yaml.safe_dump(config_to_dict(config), default_flow_style=False,
                          sort_keys=False)

# end
