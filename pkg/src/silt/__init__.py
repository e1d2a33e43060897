"""Self-supervised lighting transfer through a learnt shading decomposition."""

from .config import TrainConfig, load_config, save_config, toy_config
from .data import enumerate_pairs, generate_toy_dataset, scan_multiillum_layout, scan_vidit_layout
from .evaluation import MetricsReport, evaluate, run_ablation
from .losses import LossReport, LossWeights
from .networks import ModelBundle, count_params, estimate_gflops
from .training import infer, load_model, train_loop

__version__ = "0.1.0"

__all__ = [
    "LossReport", "LossWeights", "MetricsReport", "ModelBundle", "TrainConfig",
    "count_params", "enumerate_pairs", "estimate_gflops", "evaluate", "generate_toy_dataset",
    "infer", "load_config", "load_model", "run_ablation", "save_config",
    "scan_multiillum_layout", "scan_vidit_layout", "toy_config", "train_loop",
]
