"""advfedkd: desk-scale federated adversarial learning with pretrained-teacher distillation."""

from .attacks import AdvBudget, AttackSpec, bim_attack, fgsm_attack, pgd_attack, project_linf, run_attack
from .config import ExperimentConfig, load_config, override
from .data import Dataset, load_idx, split, synth_gaussian_mixture, write_idx
from .distill import (
    LossBreakdown,
    LossWeights,
    akd_loss,
    alg_loss,
    kl_distill,
    total_loss,
    vkd_loss,
)
from .exceptions import AdvFedKDError
from .export import MetricsRow, compare_runs
from .federation import (
    METHODS,
    ClientShard,
    FedConfig,
    PartitionConfig,
    RoundRecord,
    aggregate,
    communication_cost,
    dirichlet_partition,
    local_update,
    run_rounds,
    train_centralized,
)
from .metrics import evaluate_clean, evaluate_robust
from .mixture import MixConfig, MixedBatch, mix
from .models import ModelParams, ModelSpec, Teacher, forward, init_params, param_count, pretrain_teacher
from .runner import run_experiment
from .tensor import Tensor, backward, finite_diff_gradient, forward_op

__version__ = "0.1.0"

__all__ = [
    "AdvBudget", "AttackSpec", "bim_attack", "fgsm_attack", "pgd_attack", "project_linf", "run_attack",
    "ExperimentConfig", "load_config", "override",
    "Dataset", "load_idx", "split", "synth_gaussian_mixture", "write_idx",
    "LossBreakdown", "LossWeights", "akd_loss", "alg_loss", "kl_distill", "total_loss", "vkd_loss",
    "AdvFedKDError",
    "MetricsRow", "compare_runs",
    "METHODS", "ClientShard", "FedConfig", "PartitionConfig", "RoundRecord", "aggregate",
    "communication_cost", "dirichlet_partition", "local_update", "run_rounds", "train_centralized",
    "evaluate_clean", "evaluate_robust",
    "MixConfig", "MixedBatch", "mix",
    "ModelParams", "ModelSpec", "Teacher", "forward", "init_params", "param_count", "pretrain_teacher",
    "run_experiment",
    "Tensor", "backward", "finite_diff_gradient", "forward_op",
]
