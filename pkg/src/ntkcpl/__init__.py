"""Active learning with empirical-NTK look-ahead and clustering pseudo-labels."""

__version__ = "0.1.0"

from .dataset import ALState, FeatureSet, load_features, save_features  # noqa: E402
from .errors import (ConfigError, DataError, NTKCPLError, NumericalRankError,  # noqa: E402
                     PreconditionError)
from .harness import ExperimentConfig, MetricsRecord, benchmark_config, run_experiment  # noqa: E402
from .ntk import KernelSystem, compute_gram, extend_labeled, ntk_predict  # noqa: E402
from .strategies import StrategySpec  # noqa: E402

__all__ = [
    "ALState", "ConfigError", "DataError", "ExperimentConfig", "FeatureSet", "KernelSystem", "MetricsRecord",
    "NTKCPLError", "NumericalRankError", "PreconditionError", "StrategySpec", "benchmark_config",
    "compute_gram", "extend_labeled", "load_features", "ntk_predict", "run_experiment", "save_features",
]
