"""Experiment configuration: flat key=value files, presets, validation.

Config files hold one ``key = value`` pair per line ('#' starts a comment);
keys are exactly the ExperimentConfig field names and unknown keys are
errors. The optional ``preset`` key applies a named method-flag combination
first, so explicit keys in the same file override it.

Presets mirror the standard method rows: baseline (everything off), BSR,
BSR+LP, BSR+DA, BSR+LP+ENT, BSR+LP+DA; ``ensemble`` is orthogonal and
toggles the M-branch variant of each.

Desk-scale defaults (50 pre-training epochs, 100 episodes) keep runs in
minutes; the paper-scale protocol values (400 epochs, 600 episodes) remain
selectable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

__all__ = ["ExperimentConfig", "PRESETS", "parse_config_text", "load_config", "parse_kv_text"]

PRESETS: dict[str, dict[str, bool]] = {
    "baseline": {"bsr": False, "lp": False, "ent": False, "da": False},
    "BSR": {"bsr": True, "lp": False, "ent": False, "da": False},
    "BSR+LP": {"bsr": True, "lp": True, "ent": False, "da": False},
    "BSR+DA": {"bsr": True, "lp": False, "ent": False, "da": True},
    "BSR+LP+ENT": {"bsr": True, "lp": True, "ent": True, "da": False},
    "BSR+LP+DA": {"bsr": True, "lp": True, "ent": False, "da": True},
}

_MAX_INDEX = 0xFFFF  # branch/epoch counts must fit the stream-id layout


@dataclass
class ExperimentConfig:
    # method flags
    bsr: bool = True
    lp: bool = False
    ent: bool = False
    da: bool = False
    ensemble: bool = False
    # loss trade-offs and ensemble size
    bsr_weight: float = 0.001
    ent_weight: float = 0.1
    branches: int = 10
    # optimization
    lr_pretrain: float = 0.001
    weight_decay: float = 0.0005
    pretrain_epochs: int = 50
    lr_finetune: float = 0.01
    finetune_epochs: int = 100
    batch_size: int = 16
    # episode protocol
    n_way: int = 5
    n_shot: int = 5
    n_query: int = 15
    episodes: int = 100
    # label propagation
    knn_k: int = 10
    conf_fraction: float = 0.2
    lp_alpha: float = 0.5
    rbf_gamma_sq: float | None = None  # None = mean squared edge distance
    lp_on_ensemble: bool = False
    lp_dump: str = ""
    # backbone
    feature_dim: int = 32
    hidden_widths: tuple[int, ...] = (64,)
    conv_channels: tuple[int, ...] = (8, 16)
    # augmentation
    aug_modes: str = "S+SJHR+SR+SJ+SH"
    aug_out_size: int = 32
    da_query: bool = True
    crop_area_min: float = 0.08
    crop_area_max: float = 1.0
    crop_ratio_min: float = 0.75
    crop_ratio_max: float = 4.0 / 3.0
    # alternative-reading switches
    shared_backbone: bool = False
    freeze_backbone: bool = False
    # reproducibility and data
    seed: int = 0
    source_data: str = ""
    target_data: str = ""

    def validate(self) -> "ExperimentConfig":
        def positive(name):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

        for name in ("bsr_weight", "ent_weight", "lr_pretrain", "lr_finetune"):
            positive(name)
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("pretrain_epochs", "finetune_epochs", "batch_size", "branches",
                     "episodes", "n_way", "n_shot", "n_query", "knn_k",
                     "feature_dim", "aug_out_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.n_way < 2:
            raise ConfigError(f"n_way must be >= 2, got {self.n_way}")
        if not 0.0 < self.conf_fraction <= 1.0:
            raise ConfigError(f"conf_fraction must be in (0, 1], got {self.conf_fraction}")
        if not 0.0 <= self.lp_alpha < 1.0:
            raise ConfigError(f"lp_alpha must be in [0, 1), got {self.lp_alpha}")
        if self.rbf_gamma_sq is not None and self.rbf_gamma_sq <= 0:
            raise ConfigError(f"rbf_gamma_sq must be positive, got {self.rbf_gamma_sq}")
        if self.lp and self.knn_k >= self.n_way * self.n_query:
            raise ConfigError(
                f"knn_k ({self.knn_k}) must be smaller than the query set "
                f"({self.n_way} x {self.n_query})"
            )
        if not (0 < self.crop_area_min <= self.crop_area_max <= 1.0):
            raise ConfigError("crop area range must satisfy 0 < min <= max <= 1")
        if not (0 < self.crop_ratio_min <= self.crop_ratio_max):
            raise ConfigError("crop ratio range must satisfy 0 < min <= max")
        for name in ("branches", "pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) > _MAX_INDEX:
                raise ConfigError(f"{name} must be <= {_MAX_INDEX}")
        if self.episodes > 0xFFFFFF:
            raise ConfigError("episodes must be <= 16777215")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def config_hash(self) -> str:
        lines = [f"{k}={v!r}" for k, v in sorted(self.to_dict().items())]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_int_tuple(key: str, value: str) -> tuple[int, ...]:
    if not value.strip():
        return ()
    try:
        return tuple(int(part.strip()) for part in value.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {value!r}")


def _parse_gamma(key: str, value: str) -> float | None:
    if value.strip().lower() == "mean-edge":
        return None
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected 'mean-edge' or a number, got {value!r}")


def parse_kv_text(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    """Key=value pairs from flat config text, order preserved."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    pairs = parse_kv_text(text, source)
    cfg = ExperimentConfig()
    field_types = {f.name: f for f in fields(ExperimentConfig)}
    seen: set[str] = set()

    preset_values = [v for k, v in pairs if k == "preset"]
    if len(preset_values) > 1:
        raise ConfigError(f"{source}: duplicate preset key")
    if preset_values:
        name = preset_values[0]
        if name not in PRESETS:
            raise ConfigError(
                f"{source}: unknown preset {name!r} (known: {', '.join(PRESETS)})"
            )
        for key, value in PRESETS[name].items():
            setattr(cfg, key, value)

    for key, value in pairs:
        if key == "preset":
            continue
        if key not in field_types:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}: duplicate config key {key!r}")
        seen.add(key)
        if key == "rbf_gamma_sq":
            setattr(cfg, key, _parse_gamma(key, value))
            continue
        kind = field_types[key].type
        if kind == "bool":
            setattr(cfg, key, _parse_bool(key, value))
        elif kind == "int":
            try:
                setattr(cfg, key, int(value))
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
        elif kind == "float":
            try:
                setattr(cfg, key, float(value))
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}")
        elif kind == "tuple[int, ...]":
            setattr(cfg, key, _parse_int_tuple(key, value))
        else:
            setattr(cfg, key, value)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))
