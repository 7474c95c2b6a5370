"""Experiment configuration: one JSON document aggregating the generator,
backbone, trainer, and dataset-size settings.

Validation is strict: unknown keys anywhere in the document are hard
errors, and every run directory receives the fully resolved config echo,
so a run is reproducible from its output alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .synthdata import SynthConfig
from .trainer import NoiseConfig, OptimizerConfig, TrainerConfig

# Desk-scale geometry: eight valid conv stages with per-axis kernels chosen
# so the 25x25x13 / 15x15x9 patch pair closes to a 15x15x7 output window
# (x/y shrink by 10, z by 6; the upsampled lo path covers 15x15x9).
DESK_KERNELS = (
    (3, 3, 3),
    (3, 3, 3),
    (3, 3, 3),
    (3, 3, 1),
    (3, 3, 1),
    (1, 1, 1),
    (1, 1, 1),
    (1, 1, 1),
)
DESK_CONV_FILTERS = (4, 4, 6, 6, 6, 6, 8, 8)
DESK_FC_FILTERS = (16, 16)


@dataclass(frozen=True)
class DataConfig:
    """How many volumes the generator writes per role."""

    annotated_train: int = 4
    unannotated_train: int = 40
    annotated_test: int = 12

    def __post_init__(self):
        if self.annotated_train < 0 or self.unannotated_train < 0 or self.annotated_test < 0:
            raise ConfigError("dataset counts must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig
    backbone: BackboneConfig
    trainer: TrainerConfig
    data: DataConfig


def desk_backbone_config(init_seed: int = 0, dtype: str = "float32") -> BackboneConfig:
    """Scaled-down backbone with the default desk-scale patch geometry."""
    return BackboneConfig(
        conv_filters=DESK_CONV_FILTERS,
        fc_filters=DESK_FC_FILTERS,
        kernels=DESK_KERNELS,
        downsample_factor=3,
        num_classes=2,
        hi_patch_shape=(25, 25, 13),
        lo_patch_shape=(15, 15, 9),
        init_seed=init_seed,
        dtype=dtype,
    )


def default_config() -> ExperimentConfig:
    return ExperimentConfig(
        synth=SynthConfig(),
        backbone=desk_backbone_config(),
        trainer=TrainerConfig(),
        data=DataConfig(),
    )


_NESTED = {
    TrainerConfig: {"optimizer": OptimizerConfig, "noise": NoiseConfig},
}


def _section(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or '<root>'}: {unknown}")
    kwargs = dict(doc)
    for key, sub_cls in _NESTED.get(cls, {}).items():
        if key in kwargs:
            kwargs[key] = _section(sub_cls, kwargs[key], f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config at {path or '<root>'}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {"synth", "backbone", "trainer", "data"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys at <root>: {unknown}")
    return ExperimentConfig(
        synth=_section(SynthConfig, doc.get("synth", {}), "synth"),
        backbone=_section(BackboneConfig, doc.get("backbone", {}), "backbone"),
        trainer=_section(TrainerConfig, doc.get("trainer", {}), "trainer"),
        data=_section(DataConfig, doc.get("data", {}), "data"),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> ExperimentConfig:
    """Load a (possibly partial) config file; missing fields take the
    desk-scale defaults, unknown keys are errors."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    merged = _merge(config_to_dict(default_config()), doc, "")
    return config_from_dict(merged)


def _merge(base: dict, override, path):
    if not isinstance(override, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = dict(base)
    for key, value in override.items():
        if key in base and isinstance(base[key], dict):
            out[key] = _merge(base[key], value, f"{path}.{key}" if path else key)
        else:
            out[key] = value
    return out


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
