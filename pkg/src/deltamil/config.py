"""Run configuration dataclasses and the flat ``key=value`` config format."""

from __future__ import annotations

import dataclasses
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

__all__ = [
    "ConfigError",
    "ModelConfig",
    "OptimConfig",
    "SynthConfig",
    "RunConfig",
    "parse_kv",
    "load_config",
    "dump_config",
    "REFERENCE_LR",
]

TASKS = ("classification", "survival")
MODELS = ("deltamil", "abmil", "mean", "max")
AGGREGATORS = ("attention", "mean", "max")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_dim: int = 1024
    d: int = 128
    heads: int = 4
    head_dim: int = 32
    layers: int = 1
    d_ff: int = 0  # 0 means 4 * d
    chunk_size: int = 64
    scan_method: str = "parallel"
    conv2d_size: int = 3
    conv1d_width: int = 4
    attn_dim: int = 64
    n_classes: int = 2
    n_bins: int = 4
    task: str = "classification"
    model: str = "deltamil"
    aggregator: str = "attention"
    zscore: bool = False
    local: bool = True
    gated: bool = True
    delta: bool = True
    rms_eps: float = 1e-6

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.scan_method not in ("sequential", "parallel"):
            raise ConfigError(f"scan_method must be sequential or parallel, got {self.scan_method!r}")
        for name in ("in_dim", "d", "heads", "head_dim", "chunk_size", "attn_dim", "conv1d_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.conv2d_size % 2 == 0:
            raise ConfigError("conv2d_size must be odd")
        if self.task == "classification" and self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.task == "survival" and self.n_bins < 2:
            raise ConfigError("n_bins must be >= 2")
        if self.rms_eps <= 0:
            raise ConfigError("rms_eps must be positive")


@dataclass
class OptimConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    accumulation_steps: int = 32
    dropout_rate: float = -1.0  # negative: 0.25 for survival, 0 for classification
    early_stop_patience: int = 5
    max_epochs: int = 20
    seed: int = 0

    def effective_dropout(self, task: str) -> float:
        if self.dropout_rate >= 0:
            return self.dropout_rate
        return 0.25 if task == "survival" else 0.0

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")
        if not self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1), or be negative for the task default")
        if self.early_stop_patience < 0 or self.max_epochs < 1:
            raise ConfigError("early_stop_patience must be >= 0 and max_epochs >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid Adam moments")


@dataclass
class SynthConfig:
    n_bags: int = 200
    patches_per_bag: int = 256
    feature_dim: int = 32
    witness_rate: float = 0.05
    n_classes: int = 2
    signal_scale: float = 3.0
    noise_std: float = 1.0
    grid_policy: str = "square"
    survival_mode: bool = False
    base_rate: float = 0.05
    kappa: float = 1.0
    censor_rate: float = 0.01
    survival_spread: float = 4.0  # per-bag witness-rate multiplier ~ U(0, spread)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.witness_rate < 1.0:
            raise ConfigError(f"witness_rate must lie in (0, 1), got {self.witness_rate}")
        if self.n_bags < 1 or self.patches_per_bag < 1 or self.feature_dim < 1:
            raise ConfigError("n_bags, patches_per_bag and feature_dim must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.witness_rate * self.patches_per_bag < 1:
            raise ConfigError("witness_rate * patches_per_bag must be >= 1")
        if self.noise_std <= 0 or self.signal_scale <= 0:
            raise ConfigError("noise_std and signal_scale must be positive")
        if self.grid_policy != "square":
            raise ConfigError(f"unknown grid_policy {self.grid_policy!r}")
        if self.survival_spread <= 0:
            raise ConfigError("survival_spread must be positive")
        if self.survival_mode and self.survival_spread * self.witness_rate >= 1.0:
            raise ConfigError("survival_spread * witness_rate must stay below 1")
        if self.base_rate <= 0 or self.censor_rate < 0:
            raise ConfigError("base_rate must be positive and censor_rate non-negative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    manifest: str = ""
    out: str = "runs/default"
    n_folds: int = 5
    fold: int = -1  # -1 runs every fold
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.optim.validate()
        self.synth.validate()
        if self.n_folds < 1:
            raise ConfigError("n_folds must be >= 1")
        if self.fold >= self.n_folds:
            raise ConfigError(f"fold {self.fold} out of range for {self.n_folds} folds")


# Reference learning rates per dataset and feature extractor (ResNet-50, UNI).
REFERENCE_LR = {
    "BLCA": (1e-4, 2e-4),
    "BRCA": (5e-5, 5e-5),
    "COADREAD": (1e-4, 2e-4),
    "KIRC": (1e-4, 3e-4),
    "KIRP": (2e-4, 3e-4),
    "LUAD": (6e-5, 2e-4),
    "STAD": (1e-4, 3e-4),
    "UCEC": (2e-4, 4e-4),
    "BRACS": (1e-5, 5e-5),
    "NSCLC": (5e-5, 5e-5),
}


def _owners(cfg: RunConfig) -> dict[str, list[Any]]:
    """Flat key -> every config object carrying a field of that name.

    Shared names (``seed``, ``n_classes``) are written to all owners.
    """
    owners: dict[str, list[Any]] = {}
    for obj in (cfg, cfg.model, cfg.optim, cfg.synth):
        for f in dataclasses.fields(obj):
            if obj is cfg and f.name in ("model", "optim", "synth"):
                continue
            owners.setdefault(f.name, []).append(obj)
    return owners


def _coerce(raw: str, tp) -> Any:
    if get_origin(tp) in (Union, types.UnionType):
        tp = next(a for a in get_args(tp) if a is not type(None))
    if tp is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        return tp(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {tp.__name__}") from exc


def parse_kv(text: str, cfg: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` lines onto ``cfg`` (a fresh default when None).

    Blank lines and ``#`` comments are ignored.
    """
    cfg = cfg if cfg is not None else RunConfig()
    owners = _owners(cfg)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in owners:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        for obj in owners[key]:
            setattr(obj, key, _coerce(value, get_type_hints(type(obj))[key]))
    return cfg


def load_config(path: str | Path, cfg: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_kv(p.read_text(), cfg)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{key}={getattr(objs[0], key)}" for key, objs in _owners(cfg).items()]
    return "\n".join(lines) + "\n"
