"""Run configuration: strict JSON parsing with defaults filled in."""

from __future__ import annotations

import json
import types
import typing
from dataclasses import MISSING as NO_DEFAULT
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .guide import BACKGROUNDS, DEFAULT_STRENGTH, SCALE_RANGE
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or field."""


@dataclass
class TrainSection:
    hidden: tuple[int, ...] = (64, 64)
    d_z: int = 24
    split: int = 16
    critic_hidden: tuple[int, ...] = (64, 64)
    slope: float = 0.2
    lam: float = 10.0
    alpha: float = 1.0
    critic_ratio: int = 5
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    iterations: int = 5000
    batch_size: int = 64
    snapshot_every: int = 100


@dataclass
class DataSection:
    n_fg: int = 16
    n_bg: int = 8
    d_x: int = 32
    gamma: float = 0.5
    sigma: float = 0.1
    n_train: int = 20000
    n_val: int = 4000
    missing_bg_fraction: float = 0.0
    correlation: str = "unbiased"
    # foreground -> background pairing for the corr/anticorr splits; None = f mod n_bg
    pairing: dict[str, int] | None = None
    n_corr_train: int = 4000
    n_corr_val: int = 2000

    def __post_init__(self):
        if self.correlation not in ("unbiased", "corr", "anticorr"):
            raise ConfigError("data.correlation must be one of unbiased, corr, anticorr")
        for name in ("n_train", "n_val", "n_corr_train", "n_corr_val"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"data.{name} must be positive")
        if self.sigma < 0:
            raise ConfigError("data.sigma must be non-negative")
        if not 0.0 <= self.missing_bg_fraction < 1.0:
            raise ConfigError("data.missing_bg_fraction must lie in [0, 1)")


@dataclass
class ProbeSection:
    lr: float = 1e-2
    steps: int = 2000
    batch_size: int = 128
    n_anchors: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("probe.lr must be positive")
        if self.steps < 0:
            raise ConfigError("probe.steps must be non-negative")
        if self.n_anchors < 2:
            raise ConfigError("probe.n_anchors must be at least 2")


@dataclass
class ForegroundSource:
    label: str
    definition: str
    path: str | None = None


@dataclass
class BackgroundSource:
    phrase: str
    path: str | None = None


@dataclass
class GuideSection:
    strength: float = DEFAULT_STRENGTH
    scale_min: float = SCALE_RANGE[0]
    scale_max: float = SCALE_RANGE[1]
    n_guides: int = 4
    backend: str = "identity"
    retries: int = 2
    timeout: float = 60.0
    max_workers: int = 4
    foregrounds: list[ForegroundSource] = field(default_factory=list)
    backgrounds: list[BackgroundSource] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError("guide.strength must lie in [0, 1]")
        if not SCALE_RANGE[0] <= self.scale_min <= self.scale_max <= SCALE_RANGE[1]:
            raise ConfigError(f"guide.scale_min/scale_max must lie in {list(SCALE_RANGE)}")
        for bg in self.backgrounds:
            if bg.phrase not in BACKGROUNDS:
                raise ConfigError(f"guide.backgrounds: {bg.phrase!r} is not in the background set")


@dataclass
class OracleSection:
    n_pairs: int = 5
    n_points: int = 8
    dim: int = 2
    separation: float = 1.0
    steps: int = 2000
    lam: float = 10.0
    lr: float = 3e-4


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    dataset: str | None = None
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    guide: GuideSection = field(default_factory=GuideSection)
    oracle: OracleSection = field(default_factory=OracleSection)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def train_config(self, adversarial: bool = True) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(
                d_x=self.data.d_x,
                hidden=t.hidden,
                d_z=t.d_z,
                split=t.split,
                critic_hidden=t.critic_hidden,
                slope=t.slope,
                n_fg=self.data.n_fg,
                n_bg=self.data.n_bg,
                lam=t.lam,
                alpha=t.alpha,
                critic_ratio=t.critic_ratio,
                lr=t.lr,
                beta1=t.beta1,
                beta2=t.beta2,
                eps=t.eps,
                iterations=t.iterations,
                batch_size=t.batch_size,
                seed=self.seed,
                missing_bg_fraction=self.data.missing_bg_fraction,
                snapshot_every=t.snapshot_every,
                adversarial=adversarial,
            )
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _resolve(tp):
    """Strip ``Optional`` and return (origin type, args)."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _resolve(args[0])
    return origin or tp, typing.get_args(tp)


def _coerce(value, tp, where: str):
    if value is None:
        return None
    origin, args = _resolve(tp)
    if is_dataclass(origin):
        return _build(origin, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(_coerce(v, args[0], where) for v in value)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be an object")
        return {str(k): _coerce(v, args[1], f"{where}.{k}") for k, v in value.items()}
    if origin is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if origin is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if origin is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if origin is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def _build(cls, data, where: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key: {where + '.' if where else ''}{key}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{where + '.' if where else ''}{f.name}")
        elif f.default is NO_DEFAULT and f.default_factory is NO_DEFAULT:
            raise ConfigError(f"missing key: {where + '.' if where else ''}{f.name}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data)
    cfg.train_config()  # cross-field checks (split < d_z, Adam betas, ...)
    return cfg


def parse_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(data)
