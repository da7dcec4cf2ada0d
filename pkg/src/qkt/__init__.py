"""Query-based knowledge transfer between peer classifiers, in numpy."""
from . import baselines, config, data, harness, metrics, nn, seeding, transfer
from .config import ExperimentConfig, load as load_config
from .harness import local_pretrain, report, run_experiment
from .transfer import TransferConfig, run_protocol

__version__ = "0.1.0"
