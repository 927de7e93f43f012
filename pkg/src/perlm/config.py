"""Run configuration: defaults, file loading, dotted-key overrides, presets.

Precedence is defaults < config file < explicit overrides. Unknown dotted
keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import MaskingConfig
from .errors import ConfigurationError
from .model import ModelConfig


@dataclass
class RunConfig:
    """Training-run settings; the stock defaults mirror the base recipe
    (batch 416, peak 1e-4, 10K warmup, 2M steps) and are meant to be
    overridden by the desk-scale presets."""

    seed: int = 12345
    batch_size: int = 416
    total_steps: int = 2_000_000
    warmup_steps: int = 10_000
    peak_lr: float = 1e-4
    eval_every: int = 100
    checkpoint_every: int = 500
    clip_norm: float = 0.0  # 0 disables clipping
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-6
    weight_decay_rate: float = 0.1
    max_len: int = 512
    train_instances: str = ""
    eval_instances: str = ""
    vocab_file: str = ""
    out_dir: str = "runs/default"
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps > self.total_steps:
            raise ConfigurationError(
                f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be positive")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("eval_every and checkpoint_every must be >= 1")


PRESETS: dict[str, dict] = {
    # Desk-scale presets; values chosen so the full pipeline runs in
    # minutes on one core.
    "tiny": {
        "batch_size": 16,
        "total_steps": 2000,
        "warmup_steps": 100,
        "peak_lr": 1e-3,
        "eval_every": 100,
        "checkpoint_every": 500,
        "clip_norm": 1.0,
        "max_len": 32,
        "model.layers": 2,
        "model.heads": 4,
        "model.hidden": 64,
        "model.ffn_dim": 128,
        "model.max_positions": 32,
        "model.dropout_rate": 0.0,
        "model.attention_dropout_rate": 0.0,
    },
    "small": {
        "batch_size": 32,
        "total_steps": 5000,
        "warmup_steps": 250,
        "peak_lr": 5e-4,
        "eval_every": 250,
        "checkpoint_every": 1000,
        "clip_norm": 1.0,
        "max_len": 64,
        "model.layers": 4,
        "model.heads": 4,
        "model.hidden": 128,
        "model.ffn_dim": 256,
        "model.max_positions": 64,
        "model.dropout_rate": 0.1,
        "model.attention_dropout_rate": 0.1,
    },
}


def _flatten(value, prefix="") -> dict:
    out = {}
    for f in dataclasses.fields(value):
        v = getattr(value, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, prefix=f"{key}."))
        else:
            out[key] = v
    return out


def flatten_config(config: RunConfig) -> dict:
    """Dotted-key view of every addressable field."""
    return _flatten(config)


def _coerce(raw, current):
    """Parse a string override against the current value's type."""
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(x) for x in raw.split(","))
    return raw


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Return a new RunConfig with dotted-key overrides applied."""
    flat = flatten_config(config)
    unknown = [k for k in overrides if k not in flat]
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
    merged = dict(flat)
    for key, raw in overrides.items():
        merged[key] = _coerce(raw, flat[key])
    return _build(merged)


def build_from_flat(flat: dict) -> RunConfig:
    """Reconstruct a RunConfig from a flattened dotted-key mapping."""
    return _build(flat)


def _build(flat: dict) -> RunConfig:
    masking_kwargs = {}
    model_kwargs = {}
    run_kwargs = {}
    for key, value in flat.items():
        if key.startswith("masking."):
            masking_kwargs[key[len("masking."):]] = value
        elif key.startswith("model."):
            model_kwargs[key[len("model."):]] = value
        else:
            run_kwargs[key] = value
    return RunConfig(masking=MaskingConfig(**masking_kwargs),
                     model=ModelConfig(**model_kwargs), **run_kwargs)


def load_config(path=None, preset: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Compose a RunConfig from defaults, preset, file values and overrides."""
    config = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        config = apply_overrides(config, PRESETS[preset])
    if path is not None:
        with open(path, encoding="utf-8") as handle:
            try:
                file_values = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"invalid config file {path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigurationError(f"config file {path} must hold an object")
        config = apply_overrides(config, file_values)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def save_config(config: RunConfig, path) -> None:
    flat = flatten_config(config)
    flat = {k: (list(v) if isinstance(v, tuple) else v) for k, v in flat.items()}
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(flat, handle, indent=2, sort_keys=True)
        handle.write("\n")


def parse_override_args(pairs) -> dict:
    """Parse key=value strings from the command line."""
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(
                f"override {pair!r} is not of the form key=value")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides
