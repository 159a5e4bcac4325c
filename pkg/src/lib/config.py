"""Run configuration loading.

The effective configuration is layered: preset defaults, then a flat ``key=value`` file,
then ``XAVT_<KEY>`` environment variables, then explicit overrides from the command line.
"""

import logging
import os
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from dotenv import dotenv_values

from src.lib.errors import ConfigError
from src.models.types import (
    CropPolicy,
    EmbedKind,
    Expert,
    ModelConfig,
    OptimConfig,
    Variant,
    ViewSpec,
    WindowShape,
)

logger = logging.getLogger(__name__)

ENV_PREFIX = "XAVT_"
THREADS_ENV = "XAVT_THREADS"


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs, expressible as one flat key=value document."""

    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    views: ViewSpec = field(default_factory=ViewSpec)
    preset: str = "desk"
    frame_rate: float = 8.0
    train_index: str | None = None
    eval_index: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")

    @property
    def seed(self) -> int:
        return self.model.seed


# Value codecs


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_int(text: str) -> int | None:
    return int(text) if text.strip() else None


def _parse_optional_str(text: str) -> str | None:
    return text.strip() or None


def _split(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _parse_windows(text: str) -> tuple[tuple[str, WindowShape], ...]:
    pairs = []
    for item in _split(text):
        name, sep, shape = item.partition(":")
        if not sep:
            raise ValueError(f"window override must be DIR:shape, got {item!r}")
        pairs.append((name.strip().upper(), WindowShape(shape.strip().lower())))
    return tuple(pairs)


def _format_windows(value: tuple[tuple[str, WindowShape], ...]) -> str:
    return ",".join(f"{name}:{shape.value}" for name, shape in value)


def _format_views(views: ViewSpec) -> str:
    return f"{views.temporal_views}x{views.spatial_crops}"


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (Variant, WindowShape, EmbedKind, Expert, CropPolicy)):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


_MODEL_PARSERS: dict[str, Callable[[str], Any]] = {
    "variant": lambda s: Variant(s.strip().upper()),
    "time_mlp_hidden": _parse_optional_int,
    "windows": _parse_windows,
    "drop_path": float,
    "ln_eps": float,
    "exchange": _parse_bool,
    "disabled_directions": lambda s: tuple(name.upper() for name in _split(s)),
    "head_paths": lambda s: tuple(Expert(name.lower()) for name in _split(s)),
    "cava_visual": lambda s: Expert(s.strip().lower()),
    "audio_embed": lambda s: EmbedKind(s.strip().lower()),
}
_MODEL_FORMATTERS: dict[str, Callable[[Any], str]] = {
    "windows": _format_windows,
    "disabled_directions": ",".join,
    "head_paths": lambda v: ",".join(p.value for p in v),
}
_OPTIM_INTS = {"warmup_epochs", "epochs", "batch_size", "update_frequency"}
_TOP_PARSERS: dict[str, Callable[[str], Any]] = {
    "preset": str.strip,
    "frame_rate": float,
    "train_index": _parse_optional_str,
    "eval_index": _parse_optional_str,
    "output_dir": _parse_optional_str,
}

MODEL_KEYS = [f.name for f in fields(ModelConfig)]
OPTIM_KEYS = [f.name for f in fields(OptimConfig)]
VIEW_KEYS = ["views", "crop_policy"]
TOP_KEYS = list(_TOP_PARSERS)
ALL_KEYS = TOP_KEYS + MODEL_KEYS + OPTIM_KEYS + VIEW_KEYS


def _parse_value(key: str, text: str) -> Any:
    if key in _TOP_PARSERS:
        return _TOP_PARSERS[key](text)
    if key in MODEL_KEYS:
        return _MODEL_PARSERS.get(key, int)(text)
    if key in OPTIM_KEYS:
        return int(text) if key in _OPTIM_INTS else float(text)
    if key == "crop_policy":
        return CropPolicy(text.strip().lower())
    return text.strip()


def _collect(source: str, values: Mapping[str, str | None], merged: dict[str, str]) -> None:
    unknown = sorted(k for k in values if k.lower() not in ALL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {', '.join(unknown)}")
    for key, value in values.items():
        merged[key.lower()] = "" if value is None else str(value)


def _env_values(environ: Mapping[str, str]) -> dict[str, str]:
    values = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or name == THREADS_ENV:
            continue
        key = name[len(ENV_PREFIX) :].lower()
        if key not in ALL_KEYS:
            logger.warning(f"Ignoring unknown environment variable {name}")
            continue
        values[key] = value
    return values


def build_run_config(values: Mapping[str, str]) -> RunConfig:
    """
    Build a RunConfig from flat string values on top of the preset defaults.

    Raises:
        ConfigError: If a value cannot be parsed or the combination is invalid
    """
    parsed: dict[str, Any] = {}
    for key, text in values.items():
        try:
            parsed[key] = _parse_value(key, text)
        except (ValueError, KeyError) as e:
            raise ConfigError(f"invalid value for {key}: {text!r} ({e})") from e

    preset = parsed.pop("preset", "desk")
    model = ModelConfig.from_preset(preset, **{k: v for k, v in parsed.items() if k in MODEL_KEYS})
    optim = OptimConfig(**{k: v for k, v in parsed.items() if k in OPTIM_KEYS})
    views = ViewSpec()
    if "views" in parsed:
        views = ViewSpec.parse(parsed["views"], parsed.get("crop_policy"))
    elif "crop_policy" in parsed:
        views = replace(views, crop_policy=parsed["crop_policy"])
    top = {k: v for k, v in parsed.items() if k in TOP_KEYS}
    return RunConfig(model=model, optim=optim, views=views, preset=preset, **top)


def load_run_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """
    Load the effective run configuration.

    Args:
        path: Optional flat key=value config file (``#`` comments allowed)
        overrides: Explicit values (e.g. CLI flags); None values are skipped
        environ: Environment to read ``XAVT_<KEY>`` variables from (default: os.environ)

    Returns:
        RunConfig with every layer applied

    Raises:
        ConfigError: On unknown keys, unparsable values or an invalid combination
    """
    merged: dict[str, str] = {}
    if path is not None:
        config_file = Path(path)
        if not config_file.is_file():
            raise ConfigError(f"Config file does not exist: {path}")
        _collect(str(config_file), dotenv_values(config_file), merged)
        logger.info(f"Loaded config file {config_file}")
    merged.update(_env_values(os.environ if environ is None else environ))
    if overrides:
        _collect("overrides", {k: _format(v) for k, v in overrides.items() if v is not None}, merged)
    return build_run_config(merged)


def config_items(config: RunConfig) -> list[tuple[str, str]]:
    """Flat (key, value) pairs of ``config`` in the canonical key order."""
    items = [(key, _format(getattr(config, key))) for key in TOP_KEYS]
    for key in MODEL_KEYS:
        value = getattr(config.model, key)
        items.append((key, _MODEL_FORMATTERS[key](value) if key in _MODEL_FORMATTERS else _format(value)))
    items.extend((key, _format(getattr(config.optim, key))) for key in OPTIM_KEYS)
    items.append(("views", _format_views(config.views)))
    items.append(("crop_policy", config.views.crop_policy.value))
    return items


def dump_run_config(config: RunConfig, path: str | Path) -> Path:
    """Write the effective configuration as key=value lines; loading the file reproduces ``config``."""
    path = Path(path)
    lines = ["# effective xavt run configuration"]
    lines.extend(f"{key}={value}" for key, value in config_items(config))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote effective config to {path}")
    return path


def worker_threads() -> int:
    """
    Worker thread cap from XAVT_THREADS (default 1).

    Raises:
        ConfigError: If the value is not a positive integer
    """
    raw = os.getenv(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads
