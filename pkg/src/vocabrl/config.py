"""Run configuration: one flat JSON object, strict keys, echoed to the run directory."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(TrainConfig):
    # run directory
    name: str = "run"
    runs_dir: str = "runs"
    threads: int = 1
    # data
    source_type: str = "text"          # text | features
    train_src: str | None = None
    train_tgt: str | None = None
    dev_src: str | None = None
    dev_tgt: str | None = None
    test_src: str | None = None
    test_tgt: str | None = None
    min_count: int = 1
    max_len: int = 50
    distractors: int = 0
    # generator
    d: int = 256
    layers: int = 1
    attention: bool = True
    input_feed: bool = True
    score: str = "general"
    # predictor
    d_v: int = 512
    pred_dropout: float = 0.4
    pred_epochs: int = 10
    pred_batch_size: int = 128
    pred_lr: float = 0.08
    smoothing: float = 0.1
    select_k: int = 1000
    # checkpoints and caches
    init_checkpoint: str | None = None
    mask_cache: str | None = None

    @property
    def run_dir(self) -> Path:
        return Path(self.runs_dir) / self.name

    def validate(self) -> "RunConfig":
        try:
            super().validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if self.source_type not in ("text", "features"):
            raise ConfigError("source_type must be 'text' or 'features'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.score not in ("general", "dot"):
            raise ConfigError("score must be 'general' or 'dot'")
        if self.layers not in (1, 2):
            raise ConfigError("layers must be 1 or 2")
        if min(self.d, self.d_v, self.max_len, self.pred_batch_size) < 1:
            raise ConfigError("sizes must be positive")
        if self.min_count < 1 or self.distractors < 0:
            raise ConfigError("min_count must be >= 1 and distractors >= 0")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(name: str, value, current):
    """Convert a command-line string to the type of the field's current value."""
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", "null") and current is None:
        return None
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}") from None
    return value


def make_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``; unknown keys fail."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**data)
    for key, val in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
        setattr(cfg, key, _coerce(key, val, getattr(cfg, key)))
    return cfg.validate()


def prepare_run_dir(cfg: RunConfig) -> Path:
    run = cfg.run_dir
    for sub in ("checkpoints", "logs"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    (run / "config.resolved").write_text(cfg.dumps(), encoding="utf-8")
    return run
