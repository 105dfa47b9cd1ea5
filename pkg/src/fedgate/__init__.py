"""fedgate: a desk-scale federated distillation simulator with energy-gated
sample-wise trust weighting, plus local/direct-averaging baselines and a
negative-transfer measurement harness."""

__version__ = "0.1.0"

from .data import DataConfig, Dataset, PartitionConfig
from .federation import ClientState, CostCounters, ExperimentResult, \
    FederationConfig, RoundReport, run_experiment, run_round
from .gating import EnergyBatch, GateConfig
from .metrics import NegativeTransferReport, negative_transfer
from .models import ModelParams, ModelSpec

__all__ = [
    "__version__",
    "ClientState", "CostCounters", "DataConfig", "Dataset", "EnergyBatch",
    "ExperimentResult", "FederationConfig", "GateConfig", "ModelParams",
    "ModelSpec", "NegativeTransferReport", "PartitionConfig", "RoundReport",
    "negative_transfer", "run_experiment", "run_round",
]
