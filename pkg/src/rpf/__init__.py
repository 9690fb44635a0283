"""Desk-scale lab for single-network open domain generalization.

The pipeline: pretrain a small MLP extractor on a pretext task, linear-probe
a head on its frozen features, then fine-tune with two optional regularizers
(a prototype anchor on the features and an entropy push on the head) and
evaluate open-set recognition on a held-out target domain.
"""

__version__ = "0.1.0"

from .data import (BenchmarkConfig, ClassSplit, build_class_split,
                   generate_benchmark, load_benchmark, save_benchmark)
from .losses import (LossSpec, PrototypeBank, TermWeights, Variant,
                     compute_prototypes, resolve_terms)
from .nn import HeadParams, MlpParams, ModelState
from .train import (TrainConfig, fine_tune, linear_probe, pretrain_f0,
                    run_ablation_suite, run_experiment, run_lambda_sweep)

__all__ = [
    "BenchmarkConfig", "ClassSplit", "HeadParams", "LossSpec", "MlpParams",
    "ModelState", "PrototypeBank", "TermWeights", "TrainConfig", "Variant",
    "build_class_split", "compute_prototypes", "fine_tune",
    "generate_benchmark", "linear_probe", "load_benchmark", "pretrain_f0",
    "resolve_terms", "run_ablation_suite", "run_experiment",
    "run_lambda_sweep", "save_benchmark", "__version__",
]
