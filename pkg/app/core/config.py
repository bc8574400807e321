import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from ..models.params import (
    CrfParams,
    FrontendParams,
    IcpParams,
    ModelParams,
    RansacParams,
    RedetectionParams,
)
from .errors import ConfigError, InputNotFound

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    PROJECT_NAME: str = "MultiMotion Tracking Service"
    CELERY_BROKER_URL: str = "redis://localhost:6379/0"
    OUTPUT_ROOT: str = "runs"
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(env_file='.env', env_file_encoding='utf-8', extra='ignore')


settings = Settings()


EstimationMode = Literal["sparse+dense", "sparse", "dense"]


class PipelineConfig(BaseSettings):
    """Every tunable of a tracking run. Defaults are the engine defaults."""

    ransac: RansacParams = Field(default_factory=RansacParams)
    icp: IcpParams = Field(default_factory=IcpParams)
    crf: CrfParams = Field(default_factory=CrfParams)
    redetect: RedetectionParams = Field(default_factory=RedetectionParams)
    frontend: FrontendParams = Field(default_factory=FrontendParams)
    modelling: ModelParams = Field(default_factory=ModelParams)
    estimation_mode: EstimationMode = "sparse+dense"
    seed: int = 0
    output_dir: str = "out"

    model_config = SettingsConfigDict(env_prefix="MMF_", env_nested_delimiter="__", extra="forbid")

    def ransac_seed(self) -> int:
        return self.ransac.seed if self.ransac.seed is not None else self.seed


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """Turns `key.sub=value` strings into a nested dict. Values are JSON when they parse as JSON."""
    nested: Dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"override '{pair}' has an empty key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cursor = nested
        parts = key.split(".")
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
            if not isinstance(cursor, dict):
                raise ConfigError(f"override '{pair}' conflicts with a scalar at '{part}'")
        cursor[parts[-1]] = value
    return nested


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_pipeline_config(
    config_file: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> PipelineConfig:
    """Defaults < MMF_* environment < TOML file < explicit overrides."""
    layered: Dict[str, Any] = {}
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise InputNotFound(path, "config file")
        try:
            layered = TomlConfigSettingsSource(PipelineConfig, toml_file=path)()
        except Exception as e:
            raise ConfigError(f"could not read config file {path}: {e}") from e
        logger.info(f"Loaded pipeline config file {path}")
    if overrides:
        layered = _deep_merge(layered, overrides)
    try:
        return PipelineConfig(**layered)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid config value for '{location}': {first['msg']}") from e
