"""Run configuration: one JSON document covering every pipeline stage.

Unknown keys are rejected at every level. ``apply_overrides`` takes dotted
``key=value`` strings, e.g. ``stage1.steps=200`` or ``matcher.mode="bino"``;
values are parsed as JSON and fall back to plain strings.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from nsl_lab.dataset_io import DatasetConfig
from nsl_lab.metrics import DEFAULT_THRESHOLDS
from nsl_lab.neural_matching import MODES, MatcherConfig
from nsl_lab.refinement import RefinerConfig
from nsl_lab.training import OptimConfig


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class TMConfig:
    """Single-shot template matching of the left IR image against the pattern."""

    window: int = 9
    max_disp: int = 24
    metric: str = "zncc"
    lrc_tol: float | None = None
    grad_thresh: float = 0.1     # metres; 4-neighbour depth jump for outlier removal


@dataclass(frozen=True)
class PseudoGTConfig:
    n_patterns: int = 32
    pattern_seed: int = 11
    max_disp: int = 24
    step: float = 0.25
    lrc_tol: float = 1.0
    grad_thresh: float = 0.05


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    weighting: str = "per_image_mean"

    def __post_init__(self):
        if self.weighting not in ("per_image_mean", "pixel_pooled"):
            raise ValueError("weighting must be per_image_mean or pixel_pooled")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_train: int = 512
    modes: tuple[str, ...] = MODES
    cache: str = ""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    matcher: MatcherConfig = field(default_factory=lambda: MatcherConfig(
        feature_dim=32, hidden_dim=32, encoder_width=24, iters_train=8, iters_eval=8))
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    stage1: OptimConfig = field(default_factory=OptimConfig)
    stage2: OptimConfig = field(default_factory=lambda: OptimConfig(lr=5e-4, steps=3000,
                                                                    warmup_steps=300))
    tm: TMConfig = field(default_factory=TMConfig)
    pseudo_gt: PseudoGTConfig = field(default_factory=PseudoGTConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    _SECTIONS = {"dataset": DatasetConfig, "matcher": MatcherConfig, "refiner": RefinerConfig,
                 "stage1": OptimConfig, "stage2": OptimConfig, "tm": TMConfig,
                 "pseudo_gt": PseudoGTConfig, "eval": EvalConfig}

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {MODES}")
        object.__setattr__(self, "modes", tuple(self.modes))
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1")

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "n_train": self.n_train, "modes": list(self.modes),
               "cache": self.cache}
        for name in self._SECTIONS:
            sec = getattr(self, name)
            out[name] = sec.to_dict() if hasattr(sec, "to_dict") else _plain(asdict(sec))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in cls._SECTIONS:
                kw[k] = _strict(cls._SECTIONS[k], v, k)
            elif k == "modes":
                kw[k] = tuple(v)
            else:
                kw[k] = v
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def with_mode(self, mode: str) -> MatcherConfig:
        return replace(self.matcher, mode=mode)

    def cache_root(self) -> Path:
        if self.cache:
            return Path(self.cache)
        env = os.environ.get("NSL_LAB_CACHE")
        return Path(env) if env else Path.home() / ".cache" / "nsl_lab"


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = int(seed)
    return RunConfig.from_dict(data)


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return data


def fingerprint(obj) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
