"""Flat ``key = value`` run configuration.

Every key has a default; where the training recipe fixes a value (batch 256,
SGD momentum 0.9, weight decay 0.001, lr 0.01 halved after 3 flat epochs,
stop after 10) the default is that value. ``--set key=value`` overrides are
applied after the file.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .frontend import FeatureConfig
from .trainer import TrainConfig

DATA_ENV = "ORTHOSPOT_DATA"


@dataclass(frozen=True)
class RunConfig:
    # data
    mode: str = "synthetic"  # synthetic | gscd
    data_root: str = ""  # empty: $ORTHOSPOT_DATA
    output_dir: str = "runs/default"
    seed: int = 0
    synthetic_keywords: int = 8
    synthetic_speakers: int = 20
    synthetic_clips_per_pair: int = 10
    min_utterances: int = 11
    partition: tuple = (1959, 159, 159)
    excluded_words: tuple = ("happy", "marvin", "sheila")
    # features
    sample_rate: int = 16000
    frame_ms: float = 20.0
    stride_ms: float = 10.0
    preemphasis: float = 0.97
    n_fft: int = 512
    n_mels: int = 40
    n_ceps: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    # model
    tconv_channels: int = 64
    tconv_width: int = 5
    gru_hidden: int = 256
    gru_layers: int = 2
    dtype: str = "float64"
    # training
    batch_size: int = 256
    lr_init: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    lr_decay_factor: float = 2.0
    plateau_patience: int = 3
    stop_patience: int = 10
    max_epochs: int = 100
    lambda_orth: float = 1.0
    orth_mode: str = "frobenius"
    triplet_margin: float = 0.5
    scenario_mode: str = "four"
    monitor: str = "max"
    max_grad_norm: float = 0.0
    input_norm: str = "global"
    check_grad_coverage: bool = False
    # evaluation
    eval_max_trials: int = 0

    def __post_init__(self):
        if self.mode not in ("synthetic", "gscd"):
            raise ConfigError(f"mode must be 'synthetic' or 'gscd', got {self.mode!r}")
        if len(self.partition) != 3:
            raise ConfigError(f"partition needs three speaker counts, got {self.partition}")
        try:
            self.feature_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("tconv_channels", "tconv_width", "gru_hidden", "gru_layers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def resolved_data_root(self) -> str:
        return self.data_root or os.environ.get(DATA_ENV, "")

    def feature_config(self) -> FeatureConfig:
        keys = {f.name for f in fields(FeatureConfig)}
        return FeatureConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def model_sizes(self) -> dict:
        return {"n_features": self.n_ceps, "tconv_channels": self.tconv_channels,
                "tconv_width": self.tconv_width, "gru_hidden": self.gru_hidden, "gru_layers": self.gru_layers}

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
_TUPLE_ITEM = {"partition": int, "excluded_words": str}


def _coerce(key: str, raw: str, line: int | None):
    kind = _FIELD_TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_TUPLE_ITEM[key](s) for s in items)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind.__name__})", line) from None


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", lineno)
        values[key] = _coerce(key, raw.strip(), lineno)
    return values


def parse_overrides(pairs: Iterable[str]) -> dict:
    values = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        key = key.strip()
        if not sep or key not in _FIELD_TYPES:
            raise ConfigError(f"bad override {pair!r}; expected key=value with a known key")
        values[key] = _coerce(key, raw.strip(), None)
    return values


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text))
    values.update(parse_overrides(overrides))
    return RunConfig(**values)
