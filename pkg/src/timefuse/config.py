"""Flat key=value run configuration with typed schema and overrides.

A config file is a sequence of ``key = value`` lines (``#`` starts a
comment).  Every key has a typed default; unknown keys and duplicate keys
are rejected.  Command-line overrides use the same ``key=value`` form and
are applied after the file.  ``format_config`` renders the fully resolved
mapping so every run can echo exactly what it used.
"""

from __future__ import annotations

from pathlib import Path

from .data import ConfusablePair, GeneratorSpec
from .model import ModelConfig
from .preprocessing import FeatureConfig
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "SCHEMA",
    "apply_overrides",
    "default_config",
    "feature_config",
    "format_config",
    "generator_spec",
    "load_config_file",
    "model_config",
    "parse_value",
    "resolve_config",
    "train_config",
]


class ConfigError(ValueError):
    """A config file or override that cannot be parsed or validated."""


# key -> (kind, default).  Order here is the echo order.
SCHEMA: dict[str, tuple[str, object]] = {
    # synthetic data generation
    "data_seed": ("int", 0),
    "subjects": ("int", 20),
    "scenes": ("int", 2),
    "sessions_per_subject": ("int", 1),
    "actions_per_session": ("optional_int", None),
    "min_action_s": ("float", 2.0),
    "max_action_s": ("float", 8.0),
    "gap_s": ("float", 0.25),
    "consume_repeats": ("int", 3),
    "action_pool": ("optional_int_list", None),
    "confusable_pairs": ("pair_list", ()),
    "video_noise": ("float", 0.04),
    "brain_noise": ("float", 0.5),
    "video_rate_hz": ("float", 4.0),
    "brain_rate_hz": ("float", 128.0),
    "channels": ("int", 8),
    "frame_height": ("int", 8),
    "frame_width": ("int", 8),
    "subject_jitter": ("float", 0.1),
    "subject_latency_s": ("float", 0.05),
    "brain_lag_s": ("float", 0.0),
    # windowed features
    "window_s": ("float", 2.0),
    "step_s": ("float", 2.0),
    "frames_per_window": ("int", 4),
    "visual_dim": ("int", 32),
    "brain_dim": ("int", 16),
    "encoder_seed": ("int", 7),
    "band_low_hz": ("float", 0.5),
    "band_high_hz": ("float", 50.0),
    "downsample_to_hz": ("optional_float", 64.0),
    # model
    "token_dim": ("int", 16),
    "encoder_layers": ("int", 2),
    "attention_heads": ("int", 4),
    "ffn_dim": ("int", 64),
    "query_count": ("int", 4),
    "fusion": ("str", "temporal"),
    "use_embedding_layer": ("bool", True),
    "use_interval_mlp": ("bool", True),
    "use_modality_embedding": ("bool", True),
    # training
    "epochs": ("int", 50),
    "batch_size": ("int", 4),
    "learning_rate": ("float", 1e-3),
    "optimizer": ("str", "adam"),
    "beta1": ("float", 0.9),
    "beta2": ("float", 0.999),
    "epsilon": ("float", 1e-8),
    "brain_loss_weight": ("float", 1.0),
    "train_seed": ("int", 0),
    # splits and sweeps
    "split_mode": ("str", "cross_subject"),
    "test_scenes": ("optional_int_list", None),
    "seeds": ("int_list", (0, 1, 2, 3, 4)),
}

_NONE_WORDS = ("none", "auto", "")
_TRUE_WORDS = ("true", "yes", "on", "1")
_FALSE_WORDS = ("false", "no", "off", "0")


def _parse_pair(text: str) -> ConfusablePair:
    parts = text.split(":")
    if len(parts) != 4:
        raise ConfigError(
            f"confusable pair {text!r} must be action_a:action_b:visual_overlap:brain_overlap"
        )
    try:
        return ConfusablePair(
            action_a=int(parts[0]),
            action_b=int(parts[1]),
            visual_overlap=float(parts[2]),
            brain_overlap=float(parts[3]),
        )
    except ValueError as exc:
        raise ConfigError(f"bad confusable pair {text!r}: {exc}") from exc


def parse_value(key: str, text: str):
    """Parse one value according to the schema; raise ConfigError on failure."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind, _ = SCHEMA[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == "bool":
            lowered = text.lower()
            if lowered in _TRUE_WORDS:
                return True
            if lowered in _FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "optional_int":
            return None if text.lower() in _NONE_WORDS else int(text)
        if kind == "optional_float":
            return None if text.lower() in _NONE_WORDS else float(text)
        if kind in ("int_list", "optional_int_list"):
            if kind == "optional_int_list" and text.lower() in _NONE_WORDS:
                return None
            items = tuple(int(p) for p in text.split(",") if p.strip() != "")
            if not items:
                raise ValueError("empty list")
            return items
        if kind == "pair_list":
            if text.lower() in _NONE_WORDS:
                return ()
            return tuple(_parse_pair(p) for p in text.split(";") if p.strip() != "")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    raise AssertionError(f"unhandled schema kind {kind!r}")


def _format_value(key: str, value) -> str:
    kind, _ = SCHEMA[key]
    if value is None:
        return "none"
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("int_list", "optional_int_list"):
        return ",".join(str(v) for v in value)
    if kind == "pair_list":
        return ";".join(
            f"{p.action_a}:{p.action_b}:{p.visual_overlap}:{p.brain_overlap}" for p in value
        )
    return str(value)


def default_config() -> dict[str, object]:
    return {key: default for key, (_, default) in SCHEMA.items()}


def load_config_file(path) -> dict[str, object]:
    """Parse a key=value file into a typed partial mapping."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, text = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, text)
    return values


def apply_overrides(config: dict[str, object], overrides: list[str]) -> dict[str, object]:
    """Apply ``key=value`` strings on top of ``config`` (returns a new dict)."""
    out = dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, text = item.partition("=")
        out[key.strip()] = parse_value(key.strip(), text)
    return out


def resolve_config(path=None, overrides: list[str] | None = None) -> dict[str, object]:
    """Defaults, then the file (if any), then overrides; fully typed."""
    config = default_config()
    if path is not None:
        config.update(load_config_file(path))
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def format_config(config: dict[str, object]) -> str:
    """Render the resolved mapping, one ``key = value`` line per schema key."""
    return "\n".join(f"{key} = {_format_value(key, config[key])}" for key in SCHEMA)


# ---------------------------------------------------------------------------
# Typed builders. Dataclass validators run here, so a contradictory config
# fails before any work starts.
# ---------------------------------------------------------------------------


def _build(cls, config, mapping: dict[str, str], error_label: str):
    kwargs = {field: config[key] for field, key in mapping.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid {error_label}: {exc}") from exc


def generator_spec(config: dict[str, object]) -> GeneratorSpec:
    return _build(
        GeneratorSpec,
        config,
        {
            "seed": "data_seed",
            "subjects": "subjects",
            "scenes": "scenes",
            "sessions_per_subject": "sessions_per_subject",
            "actions_per_session": "actions_per_session",
            "min_action_s": "min_action_s",
            "max_action_s": "max_action_s",
            "gap_s": "gap_s",
            "consume_repeats": "consume_repeats",
            "action_pool": "action_pool",
            "confusable_pairs": "confusable_pairs",
            "video_noise": "video_noise",
            "brain_noise": "brain_noise",
            "video_rate_hz": "video_rate_hz",
            "brain_rate_hz": "brain_rate_hz",
            "channels": "channels",
            "frame_height": "frame_height",
            "frame_width": "frame_width",
            "subject_jitter": "subject_jitter",
            "subject_latency_s": "subject_latency_s",
            "brain_lag_s": "brain_lag_s",
        },
        "generator settings",
    )


def feature_config(config: dict[str, object]) -> FeatureConfig:
    return _build(
        FeatureConfig,
        config,
        {
            "window_s": "window_s",
            "step_s": "step_s",
            "frames_per_window": "frames_per_window",
            "visual_dim": "visual_dim",
            "brain_dim": "brain_dim",
            "encoder_seed": "encoder_seed",
            "band_low_hz": "band_low_hz",
            "band_high_hz": "band_high_hz",
            "downsample_to_hz": "downsample_to_hz",
        },
        "feature settings",
    )


def model_config(config: dict[str, object]) -> ModelConfig:
    return _build(
        ModelConfig,
        config,
        {
            "token_dim": "token_dim",
            "encoder_layers": "encoder_layers",
            "attention_heads": "attention_heads",
            "ffn_dim": "ffn_dim",
            "query_count": "query_count",
            "visual_feature_dim": "visual_dim",
            "brain_feature_dim": "brain_dim",
            "fusion": "fusion",
            "use_embedding_layer": "use_embedding_layer",
            "use_interval_mlp": "use_interval_mlp",
            "use_modality_embedding": "use_modality_embedding",
        },
        "model settings",
    )


def train_config(config: dict[str, object]) -> TrainConfig:
    return _build(
        TrainConfig,
        config,
        {
            "epochs": "epochs",
            "batch_size": "batch_size",
            "learning_rate": "learning_rate",
            "optimizer": "optimizer",
            "beta1": "beta1",
            "beta2": "beta2",
            "epsilon": "epsilon",
            "brain_loss_weight": "brain_loss_weight",
            "seed": "train_seed",
        },
        "training settings",
    )
