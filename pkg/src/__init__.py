"""
simulate multimodal edge-cloud collaborative learning at desk scale.
"""

# import all the main classes that we'll use often
from .config import ExperimentConfig, parse_config, serialize_config
from .models import Backbone, DenseLayer, LoRAAdapter, LogitSequence, \
    UnifiedModel
from .volume_align import ContrastiveBatch, RepresentationSet, vector_volume
from .device import DeviceState, LoRAUpload
from .server import AggregationWeights, ServerState
from .datasets import MultimodalDataset, SyntheticTaskSpec
from .orchestrator import RoundReport, run_experiment, run_round

__version__ = '0.1.0'

name = 'mlecs'

# end
