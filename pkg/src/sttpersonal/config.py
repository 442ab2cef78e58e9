"""実行設定ファイル (TOML または JSON)。

セクションは ``model``, ``training``, ``cache``, ``synth``, ``pretrain``, ``sweep``, ``paths``。
知らないセクションやキーは :class:`~sttpersonal.errors.ConfigError` になります。
"""

import json
import tomllib
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Final

from .bench import SweepGrid
from .errors import ConfigError
from .model import ModelConfig
from .synth import SynthConfig
from .trainer import AugmentConfig, TrainingConfig


@dataclass(frozen=True)
class CacheConfig:
    root: str = "cache"
    seed: int = 0


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 5
    learning_rate: float = 1e-3
    voices: tuple[str, ...] = ("voice1", "voice2", "voice3", "voice4", "voice5", "voice6")
    augment_fraction: float = 0.4
    snr_db_min: float = 10.0
    snr_db_max: float = 30.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "voices", tuple(str(v) for v in self.voices))
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0.0:
            raise ConfigError("pretrain epochs, batch_size and learning_rate must be positive")
        AugmentConfig(self.augment_fraction, self.snr_db_min, self.snr_db_max)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.augment_fraction, self.snr_db_min, self.snr_db_max)


@dataclass(frozen=True)
class PathsConfig:
    data: str = "data"
    out: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sweep: SweepGrid = field(default_factory=SweepGrid)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            training=replace(self.training, seed=seed),
            cache=replace(self.cache, seed=seed),
            synth=replace(self.synth, seed=seed),
            pretrain=replace(self.pretrain, seed=seed),
            sweep=replace(self.sweep, seed=seed),
        )

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: _plain(getattr(self, f.name)) for f in fields(self)}
        d["training"] = self.training.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a table")
        sections = {f.name: f for f in fields(RunConfig)}
        unknown = sorted(set(d) - set(sections))
        if unknown:
            raise ConfigError(f"unknown configuration section {unknown[0]!r}")
        values: dict[str, Any] = {}
        for name, section in d.items():
            values[name] = _build(_SECTION_TYPES[name], section, name)
        return RunConfig(**values)

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            match path.suffix.lower():
                case ".toml":
                    with open(path, "rb") as f:
                        d = tomllib.load(f)
                case ".json":
                    d = json.loads(path.read_text(encoding="utf-8"))
                case _:
                    raise ConfigError(f"{path}: configuration must be .toml or .json")
        except (OSError, tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from e
        return RunConfig.from_dict(d)


_SECTION_TYPES: Final[dict[str, type]] = {
    "model": ModelConfig,
    "training": TrainingConfig,
    "cache": CacheConfig,
    "synth": SynthConfig,
    "pretrain": PretrainConfig,
    "sweep": SweepGrid,
    "paths": PathsConfig,
}


def _build(cls: type, section: Any, name: str) -> Any:
    if not isinstance(section, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown configuration key {name}.{key}")
    kwargs = {key: tuple(value) if isinstance(value, list) else value for key, value in section.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def _plain(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {k: _plain(v) for k, v in asdict(value).items()}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value
