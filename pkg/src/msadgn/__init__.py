"""Semisupervised multisource domain generalization for 1-D clutter spectra."""

from .config import ABLATIONS, Ablation, TrainConfig, load_config, save_config
from .data import DomainDataset, generate_domain, load_dataset, make_benchmark, save_dataset
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    LabelError,
    MsadgnError,
    NumericError,
    ParameterError,
)
from .evaluation import BenchmarkSpec, EvalReport, RunMatrix, ablation_sweep, evaluate, run_scenario
from .trainer import build_networks, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
