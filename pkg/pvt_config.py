"""
Configuration settings for the PVT-COV19D pipeline

A run is configured by a flat key=value file (parsed with python-dotenv, the
same format as a .env file) plus command-line overrides.
Precedence: command line > file > DEFAULTS.
"""
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
from dotenv import dotenv_values


class ConfigError(ValueError):
    """A configuration key is unknown, malformed or out of range"""


# Backbone (smallest PVTv2 scale; stage 1 stride 4, later stages stride 2)
MODEL_DEFAULTS = {
    'embed_dims': (32, 64, 160, 256),
    'depths': (2, 2, 2, 2),
    'num_heads': (1, 2, 5, 8),
    'sr_ratios': (8, 4, 2, 1),
    'mlp_ratios': (8, 8, 4, 4),
    'patch_kernels': (7, 3, 3, 3),
    'patch_strides': (4, 2, 2, 2),
    'patch_paddings': (3, 1, 1, 1),
    'input_channels': 3,
    'input_resolution': 224,
    'layer_norm_eps': 1e-6,
}

# Slice preprocessing
PREPROCESS_DEFAULTS = {
    'enhancement': 'histogram-equalization',
}

# Slice sampling and voting
SAMPLER_DEFAULTS = {
    'batch_size': 8,          # slices per sampled batch (one case-round)
    'sigma_divisor': 6.0,     # sigma = L / sigma_divisor
    'vote_rounds': 10,        # final evaluation / prediction
    'val_vote_rounds': 3,     # validation during training
}

# Training: MSE to +/-1 targets, AdamW
TRAIN_DEFAULTS = {
    'epochs': 60,
    'learning_rate': 1e-4,
    'beta1': 0.9,
    'beta2': 0.999,
    'adam_eps': 1e-8,
    'weight_decay': 0.05,
    'lr_schedule': 'constant',
    'checkpoint_every': 0,    # epochs between periodic checkpoints, 0 = off
    'eval_workers': 1,
    'seed': 0,
}

# Synthetic CT-like dataset
SYNTH_DEFAULTS = {
    'synth_cases_per_class': 30,
    'synth_slices_min': 50,
    'synth_slices_max': 700,
    'synth_image_size': 64,
    'synth_blob_count': 3,
    'synth_blob_radius': 6,
    'synth_blob_intensity': 0.45,
    'synth_noise': 0.03,
    'synth_central_fraction': 0.5,
}

DEFAULTS: Dict[str, Any] = {
    **MODEL_DEFAULTS,
    **PREPROCESS_DEFAULTS,
    **SAMPLER_DEFAULTS,
    **TRAIN_DEFAULTS,
    **SYNTH_DEFAULTS,
}

CHOICES = {
    'enhancement': ('histogram-equalization', 'none'),
    'lr_schedule': ('constant', 'cosine'),
}

POSITIVE_KEYS = (
    'input_channels', 'input_resolution', 'layer_norm_eps', 'sigma_divisor',
    'vote_rounds', 'val_vote_rounds', 'epochs', 'adam_eps', 'eval_workers',
    'synth_slices_min', 'synth_slices_max', 'synth_image_size', 'synth_blob_radius',
)
NON_NEGATIVE_KEYS = (
    'learning_rate', 'weight_decay', 'checkpoint_every', 'seed', 'synth_cases_per_class',
    'synth_blob_count', 'synth_blob_intensity', 'synth_noise',
)
UNIT_INTERVAL_KEYS = ('beta1', 'beta2')

BATCH_SIZE = 8

SEED_STREAMS = ('init', 'shuffle', 'sampler', 'eval')

RESOLVED_CONFIG_NAME = 'resolved_config.env'


def _parse(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if raw is None:
        raise ConfigError(f"{key} has no value")
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, tuple):
            values = tuple(int(part) for part in text.split(','))
            if len(values) != len(default):
                raise ConfigError(f"{key} needs {len(default)} comma-separated values, got {text!r}")
            return values
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{key}={text!r} is not a valid {type(default).__name__}") from e
    return text


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """
    Fully resolved run configuration (every key of DEFAULTS, typed)
    """

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self.values: Dict[str, Any] = dict(DEFAULTS)
        if values:
            self.update(values)

    @classmethod
    def load(cls, path: Union[str, Path, None] = None,
             overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """
        Defaults, then the key=value file at path, then non-None overrides
        """
        config = cls()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise FileNotFoundError(f"config file not found: {path}")
            config.update(dotenv_values(path))
        if overrides:
            config.update({k: v for k, v in overrides.items() if v is not None})
        config.validate()
        return config

    def update(self, raw: Mapping[str, Any]):
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in raw.items():
            self.values[key] = _parse(key, value)

    def validate(self) -> bool:
        """Check every key's type and range"""
        for key in POSITIVE_KEYS:
            if not self.values[key] > 0:
                raise ConfigError(f"{key} must be positive, got {self.values[key]}")
        for key in NON_NEGATIVE_KEYS:
            if self.values[key] < 0:
                raise ConfigError(f"{key} must be non-negative, got {self.values[key]}")
        for key in UNIT_INTERVAL_KEYS:
            if not 0.0 < self.values[key] < 1.0:
                raise ConfigError(f"{key} must be in (0, 1), got {self.values[key]}")
        for key, allowed in CHOICES.items():
            if self.values[key] not in allowed:
                raise ConfigError(f"{key} must be one of {list(allowed)}, got {self.values[key]!r}")
        for key, default in MODEL_DEFAULTS.items():
            if isinstance(default, tuple) and any(v <= 0 for v in self.values[key]):
                raise ConfigError(f"{key} entries must be positive, got {self.values[key]}")
        if self.values['batch_size'] != BATCH_SIZE:
            raise ConfigError(f"batch_size is fixed at {BATCH_SIZE} slices, got {self.values['batch_size']}")
        if self.values['synth_slices_min'] > self.values['synth_slices_max']:
            raise ConfigError("synth_slices_min must not exceed synth_slices_max")
        if not 0.0 < self.values['synth_central_fraction'] <= 1.0:
            raise ConfigError("synth_central_fraction must be in (0, 1]")
        return True

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    def dumps(self) -> str:
        lines = ["# resolved run configuration"]
        lines.extend(f"{key}={_format(value)}" for key, value in self.values.items())
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        """Echo the resolved config; RunConfig.load(path) reproduces it exactly"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding='utf-8')
        return path

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def __repr__(self):
        return f"RunConfig({len(self.values)} keys, seed={self.values['seed']})"


def split_seeds(seed: int) -> Dict[str, int]:
    """Independent child seeds for each random stream, derived from one root seed"""
    children = np.random.SeedSequence(seed).spawn(len(SEED_STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(SEED_STREAMS, children)}


def resolved_config_beside(checkpoint_path: Union[str, Path]) -> Optional[Path]:
    """The resolved config a training run wrote next to its checkpoints, if any"""
    candidate = Path(checkpoint_path).parent / RESOLVED_CONFIG_NAME
    return candidate if candidate.is_file() else None
