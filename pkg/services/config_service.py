"""
Canonical run configuration as dotenv-style ``KEY=value`` text, plus the
process settings read from the environment.

Keys are the upper-cased field paths joined by ``_`` (``MODEL_DEPTHS``,
``TRAIN_LOSS_WEIGHTS_BCE``, ``DATA_SYNTH_SEED``). Lists are comma separated,
nested lists ``;`` separated. An empty file gives every default.
"""
import io
import logging
import os
import typing
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from models.deft_models import TOGGLES, ModelConfig, RunConfig
from models.errors import ConfigError, DataIOError

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
VERSION_KEY = "DEFT_CONFIG_VERSION"
THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

M = TypeVar("M", bound=BaseModel)


class RuntimeSettings(BaseModel):
    threads: int = Field(1, ge=1, description="Kernel threads; 1 keeps runs bit-reproducible")
    log_level: str = Field("INFO", description="Root logging level")

    @field_validator("log_level")
    @classmethod
    def validate_level(cls, v):
        if v not in LOG_LEVELS:
            raise ValueError(f"log level must be one of {', '.join(LOG_LEVELS)}")
        return v


def load_runtime_settings() -> RuntimeSettings:
    load_dotenv()
    try:
        return RuntimeSettings(
            threads=os.getenv("DEFT_THREADS", "1"),
            log_level=os.getenv("DEFT_LOG_LEVEL", "INFO").upper(),
        )
    except ValidationError as e:
        raise ConfigError("invalid runtime environment", {"errors": e.errors(include_url=False)})


def apply_thread_limits(threads: int):
    """Must run before numpy is first imported."""
    for name in THREAD_VARIABLES:
        os.environ[name] = str(threads)


# field shapes


def _unwrap_optional(annotation) -> Tuple[Any, bool]:
    if typing.get_origin(annotation) is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        return args[0], True
    return annotation, False


def _depth(annotation) -> int:
    """0 for scalars, 1 for lists/tuples, 2 for lists of lists."""
    if typing.get_origin(annotation) in (list, tuple):
        args = typing.get_args(annotation)
        return 1 + (_depth(args[0]) if args else 0)
    return 0


def _encode(value, depth: int) -> str:
    if value is None:
        return ""
    if depth == 2:
        return ";".join(_encode(v, 1) for v in value)
    if depth == 1:
        return ",".join(_encode(v, 0) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return str(value)


def _decode(text: Optional[str], depth: int, optional: bool):
    text = (text or "").strip()
    if not text:
        return None if optional else ([] if depth else "")
    if depth == 2:
        return [_decode(part, 1, False) for part in text.split(";")]
    if depth == 1:
        return [part.strip() for part in text.split(",")]
    return text


def _flatten(model: BaseModel, prefix: str = "") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for name, field in type(model).model_fields.items():
        value = getattr(model, name)
        key = f"{prefix}{name.upper()}"
        if isinstance(value, BaseModel):
            out.update(_flatten(value, key + "_"))
        else:
            annotation, _ = _unwrap_optional(field.annotation)
            out[key] = _encode(value, _depth(annotation))
    return out


def _nest(cls: Type[BaseModel], values: Dict[str, Optional[str]], prefix: str = "") -> Dict[str, Any]:
    """Rebuild the raw field dict of ``cls`` from flat keys, consuming the keys it uses."""
    raw: Dict[str, Any] = {}
    for name, field in cls.model_fields.items():
        key = f"{prefix}{name.upper()}"
        annotation, optional = _unwrap_optional(field.annotation)
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            nested = _nest(annotation, values, key + "_")
            if nested:
                raw[name] = nested
        elif key in values:
            raw[name] = _decode(values.pop(key), _depth(annotation), optional)
    return raw


def serialize_config(config: BaseModel, prefix: str = "") -> str:
    lines = [f"{VERSION_KEY}={CONFIG_VERSION}"]
    lines += [f"{k}={v}" for k, v in _flatten(config, prefix).items()]
    return "\n".join(lines) + "\n"


def parse_config(text: str, cls: Type[M] = RunConfig, prefix: str = "") -> M:
    values = dict(dotenv_values(stream=io.StringIO(text), interpolate=False))
    if values:
        version = values.pop(VERSION_KEY, None)
        if version is None:
            raise ConfigError(f"config must declare {VERSION_KEY}")
        if version.strip() != str(CONFIG_VERSION):
            raise ConfigError("unsupported config version", {"version": version, "supported": CONFIG_VERSION})
    raw = _nest(cls, values, prefix)
    if values:
        raise ConfigError("unknown config keys", {"keys": sorted(values)})
    try:
        return cls.model_validate(raw)
    except ValidationError as e:
        raise ConfigError("invalid configuration", {"errors": e.errors(include_url=False, include_context=False)})


def serialize_model_config(config: ModelConfig) -> str:
    return serialize_config(config, "MODEL_")


def parse_model_config(text: str) -> ModelConfig:
    return parse_config(text, ModelConfig, "MODEL_")


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataIOError("could not read config", {"path": str(path), "original_error": str(e)})
    config = parse_config(text)
    logger.info("loaded config path=%s", path)
    return config


def save_run_config(config: RunConfig, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(serialize_config(config), encoding="utf-8")
    except OSError as e:
        raise DataIOError("could not write config", {"path": str(path), "original_error": str(e)})
    return path


def parse_toggles(text: Optional[str]) -> Dict[str, bool]:
    """``use_lpb=false,use_cffn=false`` -> {"use_lpb": False, "use_cffn": False}."""
    toggles: Dict[str, bool] = {}
    for item in filter(None, (p.strip() for p in (text or "").split(","))):
        name, sep, value = item.partition("=")
        name, value = name.strip(), value.strip().lower()
        if not sep or name not in TOGGLES or value not in ("true", "false"):
            raise ConfigError("toggles must look like use_lpb=false", {"item": item, "known": list(TOGGLES)})
        toggles[name] = value == "true"
    return toggles


def apply_toggles(config: RunConfig, toggles: Dict[str, bool]) -> RunConfig:
    if not toggles:
        return config
    try:
        model = config.model.with_overrides(**toggles)
    except ValidationError as e:
        raise ConfigError("invalid toggles", {"errors": e.errors(include_url=False, include_context=False)})
    return config.model_copy(update={"model": model})
