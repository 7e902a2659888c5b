"""Layer-parallel training of residual networks with decoupled stages."""

from .data import AugmentPolicy, Dataset, gen_dataset, train_test_split
from .model import ResidualModel
from .parallel import ParallelConfig, ParallelTrainer
from .serial import SerialTrainer, SgdConfig
from .speedup import PhaseTimings, predict_speedup, speedup_upper_bound
from .tensor import SeededRng

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy", "Dataset", "ParallelConfig", "ParallelTrainer", "PhaseTimings",
    "ResidualModel", "SeededRng", "SerialTrainer", "SgdConfig", "gen_dataset",
    "predict_speedup", "speedup_upper_bound", "train_test_split",
]
