"""
Parameter and byte accounting of what crosses the device-server boundary.
"""

import logging

LOGGER = logging.getLogger(__name__)

BYTES_PER_FLOAT = 4

MLECS_MODES = ('mlecs', 'mlecs_wo_mma', 'mlecs_wo_seccl')
STANDALONE = 'standalone'
FEDAVG_UNIFORM = 'fedavg_uniform'


class AccountingError(ValueError):
    pass


def adapter_parameter_count(topology):
    """
    sum over layers of r * (p + q).

    :param topology: list of LoRAAdapter, or of (p, q, r) tuples
    """
    total = 0
    for layer in topology:
        if hasattr(layer, 'parameter_count'):
            total += layer.parameter_count()
        else:
            p, q, rank = layer
            total += rank * (p + q)
    return int(total)


def uplink_parameters(adapter_params, mode):
    """
    Floats one device sends per round: its adapters plus the modality
    count in the ML-ECS modes, adapters only for uniform FedAvg, nothing
    standalone.
    """
    if mode in MLECS_MODES:
        return adapter_params + 1
    elif mode == FEDAVG_UNIFORM:
        return adapter_params
    elif mode == STANDALONE:
        return 0
    raise AccountingError('Unknown mode %s' % mode)


def downlink_parameters(adapter_params, shard_size, latent_dim, mode):
    """
    Floats one device receives per round: the server's adapters plus, in
    the ML-ECS modes, one fused d-vector per public shard sample.
    """
    if mode in MLECS_MODES:
        return adapter_params + shard_size * latent_dim
    elif mode == FEDAVG_UNIFORM:
        return adapter_params
    elif mode == STANDALONE:
        return 0
    raise AccountingError('Unknown mode %s' % mode)


def to_bytes(params):
    return int(params) * BYTES_PER_FLOAT


def comm_ratio(transmitted_params, total_params):
    """
    Transmitted / total parameter volume, as a fraction.
    """
    if total_params <= 0:
        raise AccountingError('Total parameter volume must be > 0, got %s' %
                              total_params)
    if transmitted_params < 0:
        raise AccountingError('Transmitted volume must be >= 0, got %s' %
                              transmitted_params)
    return float(transmitted_params) / float(total_params)


class LargeModelFixture(object):
    """
    A 720M-parameter device model with rank-8 LoRA on every transformer
    layer's fused QKV projection and output projection, exchanging 256-wide
    fused representations of 2,597 public training samples.
    """
    def __init__(self, layers=36, width=1280, rank=8,
                 total_params=720 * 10 ** 6, latent_dim=256,
                 public_samples=2597):
        self.layers = layers
        self.width = width
        self.rank = rank
        self.total_params = total_params
        self.latent_dim = latent_dim
        self.public_samples = public_samples

    def topology(self):
        per_layer = [(3 * self.width, self.width, self.rank),
                     (self.width, self.width, self.rank)]
        return per_layer * self.layers

    def adapter_params(self):
        return adapter_parameter_count(self.topology())

    def uplink(self):
        return uplink_parameters(self.adapter_params(), MLECS_MODES[0])

    def downlink(self):
        return downlink_parameters(self.adapter_params(), self.public_samples,
                                   self.latent_dim, MLECS_MODES[0])

    def ratio(self):
        """
        The heavier direction of one round against the full model.
        """
        return comm_ratio(max(self.uplink(), self.downlink()),
                          self.total_params)

    def rows(self):
        return [
            ('adapter_params', self.adapter_params()),
            ('uplink_params', self.uplink()),
            ('downlink_params', self.downlink()),
            ('uplink_bytes', to_bytes(self.uplink())),
            ('downlink_bytes', to_bytes(self.downlink())),
            ('total_params', self.total_params),
            ('ratio', self.ratio()),
        ]

# end
