"""TOML configuration with key-path validation.

Defaults follow the reference hyperparameters (rank 16, alpha 32, 8 experts
with 2 active, lr 2e-4, warmup ratio 0.03, cosine schedule); example configs
override them for desk-scale runs. Unknown or mistyped keys fail with the
full key path in the message.
"""

from __future__ import annotations

from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .adapters import ConfigurationError
from .model import ModelConfig
from .taskgen import TASKS, VOCAB
from .train import TrainConfig


@dataclass
class DataConfig:
    samples_per_task: int = 500
    min_len: int = 4
    max_len: int = 8
    seed: int = 1234

    def __post_init__(self):
        if self.samples_per_task < 1:
            raise ConfigurationError("data.samples_per_task must be >= 1")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigurationError(
                f"data.min_len/max_len range ({self.min_len}, {self.max_len}) "
                "is invalid")

    def counts(self) -> dict[str, int]:
        return {t: self.samples_per_task for t in TASKS}

    def length_range(self) -> tuple[int, int]:
        return (self.min_len, self.max_len)


@dataclass
class AppConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig


_MODEL_KEYS = {
    "dim": int, "n_layers": int, "n_heads": int, "max_seq_len": int,
    "ffn_dim": int, "rope_base": float, "rmsnorm_eps": float,
    "rank": int, "alpha": float, "n_experts": int, "top_k": int,
    "a_init_std": float, "router_init_std": float,
    "renormalize_router": bool, "train_norms": bool,
}
_TRAIN_KEYS = {
    "lr": float, "warmup_ratio": float, "schedule": str, "batch_size": int,
    "epochs": int, "max_seq_len": int, "seed": int, "beta1": float,
    "beta2": float, "eps": float, "weight_decay": float, "grad_clip": float,
}
_DATA_KEYS = {
    "samples_per_task": int, "min_len": int, "max_len": int, "seed": int,
}
_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS}


def _check_section(section: str, values: dict, schema: dict) -> dict:
    out = {}
    for key, value in values.items():
        path = f"{section}.{key}"
        if key not in schema:
            raise ConfigurationError(f"unknown configuration key {path!r}")
        want = schema[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if want is not bool and isinstance(value, bool):
            raise ConfigurationError(
                f"{path}: expected {want.__name__}, got a boolean")
        if not isinstance(value, want):
            raise ConfigurationError(
                f"{path}: expected {want.__name__}, "
                f"got {type(value).__name__} ({value!r})")
        out[key] = value
    return out


def load_config(path) -> AppConfig:
    """Parse and validate a TOML config file into typed sections."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid TOML: {exc}")

    for section in raw:
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown configuration section {section!r}")

    model_kw = _check_section("model", raw.get("model", {}), _MODEL_KEYS)
    train_kw = _check_section("train", raw.get("train", {}), _TRAIN_KEYS)
    data_kw = _check_section("data", raw.get("data", {}), _DATA_KEYS)

    try:
        model = ModelConfig(vocab_size=len(VOCAB), **model_kw)
    except ConfigurationError as exc:
        raise ConfigurationError(f"model: {exc}")
    try:
        train = TrainConfig(**train_kw)
    except ConfigurationError as exc:
        raise ConfigurationError(f"train: {exc}")
    data = DataConfig(**data_kw)
    return AppConfig(model=model, train=train, data=data)
