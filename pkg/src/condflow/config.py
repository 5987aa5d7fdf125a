"""Run configuration: UTF-8 key=value lines with # comments.

The key set is closed; unknown keys are rejected so typos fail loudly.
Keys not present fall back to the documented default, except the handful
marked required, which raise a ConfigError naming the missing key.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union


class ConfigError(Exception):
    """Bad or missing run configuration; message names the offending key."""


_REQUIRED = object()

# key -> (type, default); _REQUIRED means the consuming command must have it
KNOWN_KEYS: dict = {
    "task.kind": (str, _REQUIRED),
    "task.size": (int, _REQUIRED),
    "task.train_size": (int, 64),
    "task.test_size": (int, 16),
    "task.sigma": (float, 25.0),
    "task.mask_fraction": (float, 0.25),
    "model.L": (int, 2),
    "model.K": (int, 2),
    "model.n_c": (int, 8),
    "model.n_w": (int, 32),
    "model.coupling_channels": (int, 64),
    "model.feature_channels": (int, 16),
    "train.lr": (float, 2e-4),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.batch": (int, 2),
    "train.iters": (int, _REQUIRED),
    "train.seed": (int, 0),
    "train.checkpoint_interval": (int, 0),
    "predict.mode": (str, "sample-mean"),
    "predict.M": (int, 10),
    "predict.temperature": (float, 1.0),
    "predict.steps": (int, 200),
    "predict.step_size": (float, 0.1),
    "io.outdir": (str, _REQUIRED),
}


class Config:
    def __init__(self, values: dict):
        self._values = values

    def get(self, key: str):
        """Value for key, falling back to the default; raises ConfigError if
        the key is required but absent."""
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        typ, default = KNOWN_KEYS[key]
        if key in self._values:
            return self._coerce(key, self._values[key], typ)
        if default is _REQUIRED:
            raise ConfigError(f"missing config key: {key}")
        return default

    def has(self, key: str) -> bool:
        return key in self._values

    def override(self, key: str, value) -> None:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        self._values[key] = str(value)

    @staticmethod
    def _coerce(key: str, raw: str, typ):
        try:
            if typ is int:
                return int(raw)
            if typ is float:
                return float(raw)
            return raw
        except ValueError as e:
            raise ConfigError(f"bad value for config key {key}: {raw!r}") from e


def parse_config(text: str) -> Config:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key: {key}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key: {key}")
        values[key] = value
    return Config(values)


def load_config(path: Union[str, Path]) -> Config:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))
