"""Sparsegen routing with a learned sparsity factor for mixtures of LoRA experts."""

from .losses import (LossWeights, load_balance_loss, accumulate_stats, sparsity_loss,
                     total_loss)
from .model import (ModelConfig, MoLELayer, ToyModel, init_params, load_checkpoint,
                    save_checkpoint)
from .oracles import qp_oracle, run_suite
from .routers import RouterKind, ld_route, relu_route, topk_route
from .simplex import (jacobian, lambda_interval, lambda_lower, sparsegen_project, sparsemax,
                      support_and_threshold)
from .training import TrainConfig, evaluate, make_dataset, reference_config, toy_config, train

__all__ = [
    "LossWeights", "load_balance_loss", "accumulate_stats", "sparsity_loss", "total_loss",
    "ModelConfig", "MoLELayer", "ToyModel", "init_params", "load_checkpoint", "save_checkpoint",
    "qp_oracle", "run_suite", "RouterKind", "ld_route", "relu_route", "topk_route",
    "jacobian", "lambda_interval", "lambda_lower", "sparsegen_project", "sparsemax",
    "support_and_threshold", "TrainConfig", "evaluate", "make_dataset", "reference_config",
    "toy_config", "train",
]
