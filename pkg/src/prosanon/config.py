"""Pipeline configuration read from TOML.

Every section is optional and every missing key takes the default of the
module it configures.  Unknown sections or keys are errors that name the
offending key path, e.g. ``adversarial.lamda``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adversarial import DESK_SCALE, AdvConfig
from .evaluation import ClassifierConfig, EvalConfig
from .prosody import ProsodyConfig
from .synth import SynthSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    prosody: Optional[str] = None


@dataclass(frozen=True)
class MiSection:
    k_neighbors: int = 3
    noise_scale: float = 1e-10
    seed: int = 0
    targets: Tuple[str, ...] = ("attribute",)
    rule: str = "top_n"
    top_n: int = 50
    quantile: float = 65.0


@dataclass(frozen=True)
class ShuffleSection:
    mode: str = "mi_attribute"
    top_n: int = 50
    seed: int = 0
    # shuffle each split on its own (test-time anonymization) rather than jointly
    per_split: bool = True


@dataclass(frozen=True)
class EvalSection:
    resamples: int = 1000
    max_pairs: int = 5000
    seed: int = 0
    attribute_hidden: int = 8
    speaker_hidden: int = 96
    epochs: int = 300
    lr: float = 0.01
    weight_decay: float = 0.1
    system: str = "system"
    dataset: str = "dataset"

    def to_eval_config(self) -> EvalConfig:
        def clf(hidden):
            return ClassifierConfig(hidden, self.epochs, self.lr, self.weight_decay, self.seed)

        return EvalConfig(self.resamples, self.max_pairs, self.seed, clf(self.attribute_hidden),
                          clf(self.speaker_hidden))


# "preset" picks the base the explicit keys are laid over
ADV_PRESETS = {"published": {}, "desk": DESK_SCALE}


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    prosody: ProsodyConfig = field(default_factory=ProsodyConfig)
    mi: MiSection = field(default_factory=MiSection)
    shuffle: ShuffleSection = field(default_factory=ShuffleSection)
    adversarial: AdvConfig = field(default_factory=AdvConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSpec = field(default_factory=SynthSpec)


_SECTIONS = {
    "data": DataConfig,
    "prosody": ProsodyConfig,
    "mi": MiSection,
    "shuffle": ShuffleSection,
    "adversarial": AdvConfig,
    "eval": EvalSection,
    "synth": SynthSpec,
}


def _coerce(path: str, value: Any, default: Any) -> Any:
    if default is None:
        return tuple(value) if isinstance(value, list) else value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _section(name: str, raw: Dict[str, Any]):
    cls = _SECTIONS[name]
    raw = dict(raw)
    base = cls()
    if name == "adversarial":
        preset = raw.pop("preset", "published")
        if preset not in ADV_PRESETS:
            raise ConfigError(f"adversarial.preset: unknown preset {preset!r}")
        base = AdvConfig(**ADV_PRESETS[preset])
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
        if isinstance(value, dict):
            raise ConfigError(f"{name}.{key}: nested tables are not allowed")
        values[key] = _coerce(f"{name}.{key}", value, getattr(base, key))
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def config_from_dict(raw: Dict[str, Any]) -> PipelineConfig:
    sections = {}
    for name, body in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config key {name}")
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected a table")
        sections[name] = _section(name, body)
    return PipelineConfig(**sections)


def load_config(path=None) -> PipelineConfig:
    """Read a TOML file; ``None`` gives the all-defaults config."""
    if path is None:
        return PipelineConfig()
    try:
        raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)
