"""Token-level mixture of low-rank adapters on a frozen toy decoder."""

from .adapters import (
    ConfigurationError,
    LoraAdapter,
    MoLoraLayer,
    build_molora,
    lora_forward,
    lora_init,
    lora_merge,
    molora_forward,
    route,
    trainable_param_count,
)
from .analytics import RoutingTrace, task_affinity, utilization
from .checkpoint import load_checkpoint, save_checkpoint
from .model import DecoderModel, ModelConfig, build_model
from .taskgen import TASKS, VOCAB, TaskSample, generate, mixture
from .tensor import Tensor, finite_diff_check
from .train import TrainConfig, evaluate, lr_at, run_training, train_step

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "LoraAdapter", "MoLoraLayer", "build_molora",
    "lora_forward", "lora_init", "lora_merge", "molora_forward", "route",
    "trainable_param_count", "RoutingTrace", "task_affinity", "utilization",
    "load_checkpoint", "save_checkpoint", "DecoderModel", "ModelConfig",
    "build_model", "TASKS", "VOCAB", "TaskSample", "generate", "mixture",
    "Tensor", "finite_diff_check", "TrainConfig", "evaluate", "lr_at",
    "run_training", "train_step", "__version__",
]
