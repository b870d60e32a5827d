"""Run configuration: one JSON file drives every pipeline command.

The file mirrors :class:`RunConfig` with nested ``concept``, ``diffusion``,
and ``generate`` sections. Unknown keys are rejected at every level so a
typo cannot silently fall back to a default, and a canonical hash of the
resolved configuration is stamped into artifacts so outputs stay traceable
to the settings that produced them.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .concept import ConceptConfig, LossWeights, TrainingConfig
from .diffusion import SCHEDULE_MODES, DenoiserConfig
from .interactions import INTERACTION_KINDS
from .sampler import SELECTION_MODES, SPATIAL_NAMES

__all__ = [
    "CONCEPT_NAMES",
    "ConceptSettings",
    "ConfigError",
    "DiffusionSettings",
    "GenerateSettings",
    "RunConfig",
    "concept_model_config",
    "concept_training_config",
    "config_from_dict",
    "config_hash",
    "config_to_dict",
    "diffusion_model_config",
    "diffusion_training_config",
    "effective_weights",
    "load_config",
    "save_config",
]

# Every concept that can carry a weight or be disabled, prediction order.
CONCEPT_NAMES = SPATIAL_NAMES + INTERACTION_KINDS


class ConfigError(ValueError):
    """Configuration file malformed, inconsistent, or with unknown keys."""


def _require_positive(name: str, value) -> None:
    if value <= 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")


@dataclass(frozen=True)
class ConceptSettings:
    """Architecture and optimization knobs for the arm-scoring model."""

    hidden: int = 64
    arm_blocks: int = 3
    pocket_layers: int = 2
    rbf_bins: int = 16
    cutoff: float = 5.0
    rbf_width: float = 0.5
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3

    def __post_init__(self):
        for name in ("hidden", "arm_blocks", "pocket_layers", "rbf_bins",
                     "cutoff", "rbf_width", "steps", "batch_size", "learning_rate"):
            _require_positive(f"concept.{name}", getattr(self, name))


@dataclass(frozen=True)
class DiffusionSettings:
    """Architecture, schedule, and optimization knobs for the denoiser."""

    hidden: int = 64
    layers: int = 4
    time_dim: int = 8
    timesteps: int = 100
    mode: str = "vp"
    steps: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3

    def __post_init__(self):
        for name in ("hidden", "layers", "time_dim", "timesteps",
                     "steps", "batch_size", "learning_rate"):
            _require_positive(f"diffusion.{name}", getattr(self, name))
        if self.time_dim % 2:
            raise ConfigError(f"diffusion.time_dim must be even, got {self.time_dim}")
        if self.mode not in SCHEDULE_MODES:
            raise ConfigError(
                f"diffusion.mode must be one of {SCHEDULE_MODES}, got {self.mode!r}"
            )


@dataclass(frozen=True)
class GenerateSettings:
    """Arm selection and scaffold sizing used when generating molecules."""

    selection_mode: str = "argmax"
    tau: float = 1.0
    scaffold_size: int = 0  # 0 draws sizes from the training histogram

    def __post_init__(self):
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigError(
                f"generate.selection_mode must be one of {SELECTION_MODES}, "
                f"got {self.selection_mode!r}"
            )
        _require_positive("generate.tau", self.tau)
        if self.scaffold_size < 0:
            raise ConfigError(
                f"generate.scaffold_size must be >= 0, got {self.scaffold_size}"
            )


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs beyond its command-line paths."""

    data_dir: str = "data"
    library_file: str = "library.json"
    output_dir: str = "out"
    docking_executable: str = ""
    seed: int = 0
    spatial_weights: tuple[float, float] = (1.0, 1.0)
    interaction_weights: tuple[float, ...] = tuple(1.0 for _ in INTERACTION_KINDS)
    disabled_concepts: tuple[str, ...] = ()
    concept: ConceptSettings = field(default_factory=ConceptSettings)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    generate: GenerateSettings = field(default_factory=GenerateSettings)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if len(self.spatial_weights) != len(SPATIAL_NAMES):
            raise ConfigError(
                f"spatial_weights needs {len(SPATIAL_NAMES)} values, "
                f"got {len(self.spatial_weights)}"
            )
        if len(self.interaction_weights) != len(INTERACTION_KINDS):
            raise ConfigError(
                f"interaction_weights needs {len(INTERACTION_KINDS)} values, "
                f"got {len(self.interaction_weights)}"
            )
        for label, values in (
            ("spatial_weights", self.spatial_weights),
            ("interaction_weights", self.interaction_weights),
        ):
            if any(w < 0 for w in values):
                raise ConfigError(f"{label} must be non-negative, got {values}")
        unknown = sorted(set(self.disabled_concepts) - set(CONCEPT_NAMES))
        if unknown:
            raise ConfigError(f"unknown concept name(s) in disabled_concepts: {unknown}")


_SECTIONS = {
    "concept": ConceptSettings,
    "diffusion": DiffusionSettings,
    "generate": GenerateSettings,
}


def _from_mapping(cls, obj, where: str):
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{where} must be a JSON object, got {type(obj).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(map(str, obj)) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) under {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        nested = _SECTIONS.get(key) if cls is RunConfig else None
        if nested is not None:
            value = _from_mapping(nested, value, key)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value under {where}: {exc}") from exc


def config_from_dict(obj) -> RunConfig:
    """Build and validate a :class:`RunConfig`; reject unknown keys anywhere."""
    return _from_mapping(RunConfig, obj, "the configuration")


def config_to_dict(config: RunConfig) -> dict:
    """JSON-ready dict; inverse of :func:`config_from_dict`."""

    def convert(value):
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    return convert(asdict(config))


def load_config(path: str | Path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(config), indent=2) + "\n", encoding="utf-8"
    )


def config_hash(config: RunConfig) -> str:
    """Hex digest of the canonical JSON form; stable across key order."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def effective_weights(config: RunConfig) -> LossWeights:
    """Configured concept weights with the disabled channels zeroed."""
    spatial = list(config.spatial_weights)
    interaction = list(config.interaction_weights)
    for name in config.disabled_concepts:
        if name in SPATIAL_NAMES:
            spatial[SPATIAL_NAMES.index(name)] = 0.0
        else:
            interaction[INTERACTION_KINDS.index(name)] = 0.0
    try:
        return LossWeights(spatial=tuple(spatial), interaction=tuple(interaction))
    except ValueError as exc:
        raise ConfigError(f"no usable concept weights remain: {exc}") from exc


def concept_model_config(config: RunConfig) -> ConceptConfig:
    s = config.concept
    return ConceptConfig(
        hidden=s.hidden,
        arm_blocks=s.arm_blocks,
        pocket_layers=s.pocket_layers,
        rbf_bins=s.rbf_bins,
        cutoff=s.cutoff,
        rbf_width=s.rbf_width,
    )


def concept_training_config(config: RunConfig) -> TrainingConfig:
    s = config.concept
    return TrainingConfig(
        steps=s.steps,
        batch_size=s.batch_size,
        learning_rate=s.learning_rate,
        seed=config.seed,
    )


def diffusion_model_config(config: RunConfig) -> DenoiserConfig:
    s = config.diffusion
    return DenoiserConfig(hidden=s.hidden, layers=s.layers, time_dim=s.time_dim)


def diffusion_training_config(config: RunConfig) -> TrainingConfig:
    s = config.diffusion
    return TrainingConfig(
        steps=s.steps,
        batch_size=s.batch_size,
        learning_rate=s.learning_rate,
        seed=config.seed,
    )
