"""Training configuration and its flat ``key = value`` file format.

Nested records are written with dotted keys (``model.depth = 4``). Every
field has a default equal to the published recipe, so an empty file is the
full-scale configuration.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .augment import AugmentPolicy
from .losses import LossWeights
from .model import ModelSpec


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class TrainConfig:
    seed: int = 42
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    epochs_stage1: int = 20
    epochs_stage2: int = 20
    stage2_lr_factor: float = 0.1
    batch_size: int = 8
    resolution: int = 448
    flat_fraction: float = 0.75
    final_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    rectify_threshold: float = 4.0
    clahe_clip_limit: float = 2.0
    clahe_grid: tuple[int, int] = (8, 8)
    drop_empty_slices: bool = False
    decathlon_channel: int = 0
    balance_sources: bool = False
    dsc_level: str = "volume"
    deterministic: bool = True
    num_threads: int = 1
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def problems(self) -> list[str]:
        out = []
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.resolution < 1:
            out.append(f"resolution must be >= 1, got {self.resolution}")
        elif self.resolution % self.model.divisor:
            out.append(f"resolution {self.resolution} must be divisible by 2**model.depth = {self.model.divisor}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            out.append("epoch counts must be >= 0")
        if not self.base_lr > 0:
            out.append(f"base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.stage2_lr_factor <= 1:
            out.append(f"stage2_lr_factor must be in (0, 1], got {self.stage2_lr_factor}")
        if not 0 < self.flat_fraction < 1:
            out.append(f"flat_fraction must be in (0, 1), got {self.flat_fraction}")
        if not 0 <= self.final_lr <= self.base_lr * self.stage2_lr_factor:
            out.append("final_lr must be in [0, base_lr * stage2_lr_factor]")
        if not (0 <= self.beta1 < 1 and 0 < self.beta2 < 1):
            out.append(f"betas must be in [0, 1), got {(self.beta1, self.beta2)}")
        if self.lookahead_k < 1:
            out.append(f"lookahead_k must be >= 1, got {self.lookahead_k}")
        if not 0 <= self.lookahead_alpha <= 1:
            out.append(f"lookahead_alpha must be in [0, 1], got {self.lookahead_alpha}")
        if self.clahe_clip_limit <= 0:
            out.append(f"clahe_clip_limit must be > 0, got {self.clahe_clip_limit}")
        if len(self.clahe_grid) != 2 or min(self.clahe_grid) < 1:
            out.append(f"clahe_grid must be two positive ints, got {self.clahe_grid}")
        if self.dsc_level not in ("volume", "slice"):
            out.append(f"dsc_level must be 'volume' or 'slice', got {self.dsc_level!r}")
        if self.num_threads < 1:
            out.append(f"num_threads must be >= 1, got {self.num_threads}")
        return out

    def validate(self) -> TrainConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    # get_params/set_params let an estimator holding a TrainConfig expose
    # nested ``config__<dotted.key>`` parameters. The shallow form is the
    # constructor signature, which is what sklearn.clone rebuilds from.
    def get_params(self, deep: bool = True) -> dict:
        if deep:
            return dict(self.to_items())
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def set_params(self, **params) -> TrainConfig:
        updated = TrainConfig.from_items(params.items(), base=self)
        for f in fields(self):
            setattr(self, f.name, getattr(updated, f.name))
        return self

    def to_items(self) -> list[tuple[str, object]]:
        return list(_flatten(self))

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_items())

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.to_items()}

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def from_items(cls, items, base: TrainConfig | None = None) -> TrainConfig:
        """Build a config from ``(key, raw value)`` pairs layered over ``base``."""
        cfg = _clone(base or cls())
        problems = []
        for key, raw in items:
            try:
                _assign(cfg, key, raw)
            except (KeyError, ValueError, TypeError) as exc:
                problems.append(f"{key}: {exc}")
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls.from_items(d.items())

    @classmethod
    def from_text(cls, text: str, base: TrainConfig | None = None) -> TrainConfig:
        items = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError([f"line {n}: expected 'key = value', got {line!r}"])
            k, v = (s.strip() for s in line.split("=", 1))
            items.append((k, v))
        return cls.from_items(items, base)

    @classmethod
    def load(cls, path, base: TrainConfig | None = None) -> TrainConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def _flatten(obj, prefix=""):
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            yield from _flatten(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", v


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _coerce(current, raw):
    if isinstance(current, bool):
        return _parse_bool(raw)
    if isinstance(current, int):
        f = float(raw)
        if f != int(f):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(f)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = raw if isinstance(raw, (list, tuple)) else str(raw).replace(",", " ").split()
        return tuple(_coerce(current[0], p) for p in parts)
    return str(raw)


def _assign(cfg, key: str, raw):
    obj = cfg
    *path, last = key.split(".")
    for p in path:
        if not hasattr(obj, p) or not is_dataclass(getattr(obj, p)):
            raise KeyError(f"unknown section {p!r}")
        obj = getattr(obj, p)
    names = {f.name for f in fields(obj)}
    if last not in names:
        raise KeyError("unknown key")
    setattr(obj, last, _coerce(getattr(obj, last), raw))
    if obj is not cfg:
        obj.__post_init__()


def _clone(cfg: TrainConfig) -> TrainConfig:
    return TrainConfig(
        **{f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("model", "loss", "augment")},
        model=ModelSpec(**{f.name: getattr(cfg.model, f.name) for f in fields(cfg.model)}),
        loss=LossWeights(**{f.name: getattr(cfg.loss, f.name) for f in fields(cfg.loss)}),
        augment=AugmentPolicy(**{f.name: getattr(cfg.augment, f.name) for f in fields(cfg.augment)}),
    )
