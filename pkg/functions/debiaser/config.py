import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, List, Optional, Union, get_args, get_origin, get_type_hints

from .data import GenConfig
from .training import Hyperparams

logger = logging.getLogger(__name__)

THREADS_ENV = "DEBIAS_THREADS"


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


@dataclass
class SweepGrid:
    lambda_min: float = 0.01
    lambda_max: float = 0.15
    lambda_step: float = 0.01
    repeats: int = 3
    epochs: int = 1

    def __post_init__(self):
        if self.lambda_min < 0 or self.lambda_max < self.lambda_min:
            raise ValueError(f"Invalid lambda range [{self.lambda_min}, {self.lambda_max}]")
        if self.lambda_step <= 0:
            raise ValueError(f"lambda_step must be positive, got {self.lambda_step}")
        if self.repeats < 1 or self.epochs < 1:
            raise ValueError("repeats and epochs must be at least 1")

    def values(self) -> List[float]:
        count = int(round((self.lambda_max - self.lambda_min) / self.lambda_step)) + 1
        return [round(self.lambda_min + i * self.lambda_step, 10) for i in range(count)]


@dataclass
class Paths:
    data_dir: str = "runs/data"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"


@dataclass
class EvalConfig:
    threshold: float = 0.5
    batch_size: int = 256
    hsic_samples: int = 1000
    min_positive_rate: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.batch_size < 1 or self.hsic_samples < 2:
            raise ValueError("batch_size must be positive and hsic_samples at least 2")


@dataclass
class PlotConfig:
    png: bool = False


@dataclass
class RunConfig:
    """Everything a run needs; serialises to a single JSON document."""

    seed: int = 0
    threads: int = 1
    gen: GenConfig = field(default_factory=GenConfig)
    pretrain: Hyperparams = field(default_factory=lambda: Hyperparams(learning_rate=0.02, epochs=10))
    debias: Hyperparams = field(default_factory=Hyperparams)
    sweep: SweepGrid = field(default_factory=SweepGrid)
    paths: Paths = field(default_factory=Paths)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    plots: PlotConfig = field(default_factory=PlotConfig)

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError(f"threads must be a positive integer, got {self.threads}")

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _check_value(key: str, hint, value):
    origin = get_origin(hint)
    if origin is Union:
        options = [h for h in get_args(hint) if h is not type(None)]
        if value is None:
            return None
        return _check_value(key, options[0], value)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}", key)
        (item,) = get_args(hint) or (Any,)
        return [_check_value(f"{key}[{i}]", item, v) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}", key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", key)
        return value
    return value


def _from_dict(cls, data: Any, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object", prefix or None)
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            dotted = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"Unknown config key {dotted!r}", dotted)

    kwargs = {}
    for name, value in data.items():
        dotted = f"{prefix}.{name}" if prefix else name
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = _from_dict(hint, value, dotted)
        else:
            kwargs[name] = _check_value(dotted, hint, value)
    try:
        return cls(**kwargs)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{prefix or 'config'}: {e}", prefix or None)


def parse_config(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    return parse_config(data)


def apply_overrides(config: RunConfig, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """`seed` replaces the run seed and every derived seed; `out` re-roots the
    data, checkpoint and report directories. DEBIAS_THREADS caps parallelism."""
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {seed}", "seed")
        config = replace(
            config,
            seed=seed,
            gen=replace(config.gen, seed=seed),
            pretrain=replace(config.pretrain, seed=seed),
            debias=replace(config.debias, seed=seed),
        )
    if out is not None:
        config = replace(
            config,
            paths=Paths(
                data_dir=os.path.join(out, "data"),
                checkpoint_dir=os.path.join(out, "checkpoints"),
                report_dir=os.path.join(out, "reports"),
            ),
        )

    threads = os.environ.get(THREADS_ENV)
    if threads is not None:
        try:
            count = int(threads)
        except ValueError:
            count = 0
        if count < 1:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {threads!r}", THREADS_ENV)
        config = replace(config, threads=count)
    return config
