"""Run configuration: one validated record driving every CLI mode.

Unknown keys are rejected (anti-typo contract) and the whole record is
validated before any compute or artifact write.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .harness import BANDIT_ESTIMATORS, VAE_ESTIMATORS
from .netcore import Encoding

MODES = ("bandit", "vae", "verify", "bench")


@dataclass
class RunConfig:
    mode: str = "bandit"
    estimator: str = "hnca"
    depth: int = 1
    hidden_width: int = 200
    encoding: str | None = None  # resolved per mode: bandit +-1, vae 0/1
    learning_rate: float = 1e-4
    batch_size: int = 50
    epochs: int = 100
    seed: int = 0
    baseline_discount: float = 0.99
    test_samples: int = 1
    train_limit: int | None = None
    log_every: int = 100
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    out_dir: str = "runs"
    verify_samples: int = 200000
    bench_reps: int = 400

    def resolved_encoding(self) -> Encoding:
        if self.encoding is not None:
            return Encoding(self.encoding)
        return Encoding.PLUS_MINUS_ONE if self.mode == "bandit" else Encoding.ZERO_ONE

    def digest(self) -> str:
        """8-hex digest of the resolved record; names run directories."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:8]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}

_INT_KEYS = {
    "depth", "hidden_width", "batch_size", "epochs", "seed", "test_samples",
    "train_limit", "log_every", "verify_samples", "bench_reps",
}
_FLOAT_KEYS = {"learning_rate", "baseline_discount"}
_STR_KEYS = {
    "mode", "estimator", "encoding", "train_images", "train_labels",
    "test_images", "test_labels", "out_dir",
}
_OPTIONAL_KEYS = {"encoding", "train_limit", "train_images", "train_labels",
                  "test_images", "test_labels"}


def _coerce(key: str, value):
    if value is None:
        if key in _OPTIONAL_KEYS:
            return None
        raise ConfigError(f"config key '{key}' must not be null")
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' expects an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' expects a number, got {value!r}")
        return float(value)
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' expects a string, got {value!r}")
        return value
    raise ConfigError(f"unknown config key '{key}'; allowed: {sorted(_FIELD_TYPES)}")


def validate(cfg: RunConfig) -> RunConfig:
    """Whole-record validation; raises ConfigError naming the offending key."""
    if cfg.mode not in MODES:
        raise ConfigError(f"mode '{cfg.mode}' not in {MODES}")
    if cfg.depth < 1:
        raise ConfigError("depth must be >= 1")
    if cfg.hidden_width < 1:
        raise ConfigError("hidden_width must be >= 1")
    if cfg.learning_rate <= 0:
        raise ConfigError("learning_rate must be positive")
    if cfg.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 (per-batch variance metric)")
    if cfg.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if not 0.0 < cfg.baseline_discount < 1.0:
        raise ConfigError("baseline_discount must lie in (0, 1)")
    if cfg.test_samples < 1:
        raise ConfigError("test_samples must be >= 1")
    if cfg.train_limit is not None and cfg.train_limit < cfg.batch_size:
        raise ConfigError("train_limit smaller than one batch")
    if cfg.log_every < 1:
        raise ConfigError("log_every must be >= 1")
    if cfg.encoding is not None:
        try:
            Encoding(cfg.encoding)
        except ValueError:
            raise ConfigError(
                f"encoding '{cfg.encoding}' not in {[e.value for e in Encoding]}"
            ) from None

    if cfg.mode == "bandit":
        if cfg.estimator not in BANDIT_ESTIMATORS:
            raise ConfigError(
                f"estimator '{cfg.estimator}' is not valid in bandit mode; "
                f"supported: {list(BANDIT_ESTIMATORS)}"
            )
        _require_data(cfg, labels=True)
    elif cfg.mode == "vae":
        if cfg.estimator not in VAE_ESTIMATORS:
            raise ConfigError(
                f"estimator '{cfg.estimator}' is not valid in vae mode; "
                f"supported: {list(VAE_ESTIMATORS)}"
            )
        if cfg.estimator == "fhnca-b" and cfg.depth < 2:
            raise ConfigError(
                "fhnca-b with depth 1 is undefined: a single-layer model has no mediated components"
            )
        if cfg.encoding == Encoding.PLUS_MINUS_ONE.value:
            raise ConfigError("vae mode uses zero_one units; drop the encoding override")
        _require_data(cfg, labels=False)
    return cfg


def _require_data(cfg: RunConfig, labels: bool):
    needed = ["train_images", "test_images"] + (["train_labels", "test_labels"] if labels else [])
    for key in needed:
        if getattr(cfg, key) is None:
            raise ConfigError(f"mode '{cfg.mode}' requires config key '{key}'")


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus override pairs.

    File keys are checked against the schema; overrides (CLI flags) win.
    """
    merged = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        merged.update(raw)
    if overrides:
        merged.update(overrides)
    clean = {}
    for key, value in merged.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'; allowed: {sorted(_FIELD_TYPES)}")
        clean[key] = _coerce(key, value)
    return validate(RunConfig(**clean))
