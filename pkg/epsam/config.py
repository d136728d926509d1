"""
Pipeline configuration: nested dataclasses, JSON/YAML loading and presets.
"""
import dataclasses
import hashlib
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import yaml

from epsam.cam import PAPER_CLASSIFIER_HYPER, AdlConfig, ClassifierHyper
from epsam.errors import ConfigurationError
from epsam.pepm import PepmConfig
from epsam.postproc import PostprocConfig
from epsam.segmenter import PAPER_DECODER_HYPER, DecoderHyper, SegmenterConfig
from epsam.selftrain import RetrainConfig
from epsam.syndata import DatasetParams

logger = logging.getLogger(__name__)

PRESETS = ("desk", "paper")
PRESET_ALIASES = {"full": "paper"}
DESK_DECODER_HYPER = DecoderHyper(lr=2e-3, epochs=40, batch_size=8)


@dataclass(frozen=True)
class CamConfig:
    adl: AdlConfig = field(default_factory=AdlConfig)
    hyper: ClassifierHyper = field(default_factory=ClassifierHyper)


@dataclass(frozen=True)
class PipelineConfig:
    preset: str = "desk"
    seed: int = 0
    workers: int = 1
    syndata: DatasetParams = field(default_factory=DatasetParams)
    cam: CamConfig = field(default_factory=CamConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    pepm: PepmConfig = field(default_factory=PepmConfig)
    segmenter: SegmenterConfig = field(default_factory=lambda: SegmenterConfig(hyper=DESK_DECODER_HYPER))
    selftrain: RetrainConfig = field(default_factory=RetrainConfig)

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset '{self.preset}', expected one of {PRESETS}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        self.syndata.generator.validate()
        self.cam.adl.validate()
        self.cam.hyper.validate()
        self.postproc.validate()
        self.pepm.validate()
        self.segmenter.validate()
        self.selftrain.validate()

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def section(self, name: str) -> Dict[str, Any]:
        return dataclasses.asdict(getattr(self, name))


def _convert(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected a mapping, got {type(value).__name__}")
        return _build(tp, value, f"{where}.")
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigurationError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_convert(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str and not isinstance(value, str):
        raise ConfigurationError(f"{where}: expected a string, got {value!r}")
    return value


def _build(cls, data: Dict[str, Any], where: str = ""):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {name: _convert(hints[name], value, f"{where}{name}") for name, value in data.items()}
    return cls(**kwargs)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def preset_config(name: str = "desk") -> PipelineConfig:
    """
    desk: CPU-sized epochs and learning rates. paper (alias full): the
    full-scale hyperparameters (classifier lr 1e-5 for 50 epochs, decoder lr
    2e-4 for 20).
    """
    name = PRESET_ALIASES.get(name, name)
    if name == "desk":
        return PipelineConfig()
    if name == "paper":
        return PipelineConfig(
            preset="paper",
            cam=CamConfig(hyper=PAPER_CLASSIFIER_HYPER),
            segmenter=SegmenterConfig(hyper=PAPER_DECODER_HYPER),
            selftrain=RetrainConfig(threshold=0.9, iterations=3),
        )
    raise ConfigurationError(f"unknown preset '{name}', expected one of {PRESETS}")


def from_dict(data: Dict[str, Any]) -> PipelineConfig:
    """Missing keys fall back to the named preset; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ConfigurationError("config file must contain a mapping at top level")
    preset = data.get("preset", "desk")
    if not isinstance(preset, str):
        raise ConfigurationError(f"preset: expected a string, got {preset!r}")
    base = preset_config(preset).to_dict()
    config = _build(PipelineConfig, _merge(base, {**data, "preset": base["preset"]}))
    config.validate()
    return config


def load_config(path: Union[str, Path]) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigurationError(f"cannot parse {path}: {e}") from e
    logger.debug("loaded config from %s", path)
    return from_dict(data)


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_config(config: PipelineConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(canonical_json(config.to_dict()).encode("utf-8")).hexdigest()
