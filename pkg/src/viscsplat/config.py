"""Training and run configuration, and the flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored.  Unknown keys are errors so a
typo in an ablation script cannot silently fall back to a default.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .core import IMAGE2D, MODES, ORTHO3D, ConfigError

BASE_OPTIMIZERS = ("plain_sgd", "adaptive_moment")
COSINE_MODES = ("disagree", "agree", "off")


@dataclass
class TrainConfig:
    mode: str = IMAGE2D
    count: int = 150
    bbox_lo: tuple = ()
    bbox_hi: tuple = ()
    seed: int = 0

    lambda_g: float = 0.8
    lambda_p: float = 0.8
    theta_p: float = 120.0
    beta: float = 0.6
    omega_s: float = 0.04
    omega_t: float = 0.04
    pdeo: bool = True

    base_optimizer: str = "adaptive_moment"
    lr_position: float = 0.002
    lr_color: float = 0.02
    lr_opacity: float = 0.05
    lr_scale: float = 0.01
    lr_rotation: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    iterations: int = 2000
    densify_interval: int = 100
    densify_start: int = -1  # -1: iterations // 4
    densify_stop: int = -1  # -1: 3 * iterations // 4
    grad_threshold: float = 2e-4
    densify_cosine_mode: str = "disagree"
    cosine_uses_blended: bool = True
    prune_opacity: float = 0.005
    max_gaussians: int = 1000

    grid_cells_per_axis: int = 64
    cull_sigma: float = 4.0
    background: str = "black"
    deterministic: bool = False

    @property
    def dim(self) -> int:
        return 2 if self.mode == IMAGE2D else 3

    @property
    def bbox(self):
        lo = self.bbox_lo or ((0.0,) * 2 if self.mode == IMAGE2D else (-0.5,) * 3)
        hi = self.bbox_hi or ((1.0,) * 2 if self.mode == IMAGE2D else (0.5,) * 3)
        return tuple(lo), tuple(hi)

    @property
    def background_rgb(self):
        return (1.0, 1.0, 1.0) if self.background == "white" else (0.0, 0.0, 0.0)

    def resolved(self) -> "TrainConfig":
        """Copy with every automatic value filled in."""
        lo, hi = self.bbox
        start = self.densify_start if self.densify_start >= 0 else self.iterations // 4
        stop = self.densify_stop if self.densify_stop >= 0 else (3 * self.iterations) // 4
        return dataclasses.replace(self, bbox_lo=lo, bbox_hi=hi, densify_start=start,
                                   densify_stop=stop)

    def validate(self) -> "TrainConfig":
        c = self.resolved()
        if c.mode not in MODES:
            raise ConfigError("mode must be one of %s" % (MODES,))
        if c.count < 1:
            raise ConfigError("count must be >= 1")
        if len(c.bbox_lo) != c.dim or len(c.bbox_hi) != c.dim:
            raise ConfigError("bbox must have %d components" % c.dim)
        if any(h <= l for l, h in zip(c.bbox_lo, c.bbox_hi)):
            raise ConfigError("bbox_hi must exceed bbox_lo")
        for name in ("lambda_g", "lambda_p"):
            if not 0.0 <= getattr(c, name) <= 1.0:
                raise ConfigError("%s must lie in [0, 1]" % name)
        if not 0.0 < c.theta_p < 180.0:
            raise ConfigError("theta_p must lie in (0, 180) degrees")
        for name in ("lr_position", "lr_color", "lr_opacity", "lr_scale", "lr_rotation"):
            if not getattr(c, name) > 0:
                raise ConfigError("%s must be positive" % name)
        if c.base_optimizer not in BASE_OPTIMIZERS:
            raise ConfigError("base_optimizer must be one of %s" % (BASE_OPTIMIZERS,))
        if c.densify_cosine_mode not in COSINE_MODES:
            raise ConfigError("densify_cosine_mode must be one of %s" % (COSINE_MODES,))
        if c.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if c.iterations > 0 and not c.densify_start < c.densify_stop <= c.iterations:
            raise ConfigError("need densify_start < densify_stop <= iterations")
        if c.densify_interval < 1:
            raise ConfigError("densify_interval must be >= 1")
        if c.grid_cells_per_axis < 1:
            raise ConfigError("grid_cells_per_axis must be >= 1")
        if c.max_gaussians < c.count:
            raise ConfigError("max_gaussians must be >= count")
        if c.background not in ("black", "white"):
            raise ConfigError("background must be black or white")
        if not (c.cull_sigma > 0 or math.isinf(c.cull_sigma)):
            raise ConfigError("cull_sigma must be positive")
        return c


@dataclass
class RunConfig:
    """Everything a CLI run needs: the training config plus target and view setup."""

    train: TrainConfig = field(default_factory=TrainConfig)
    width: int = 64
    height: int = 64
    target: str = "synthetic"
    target_seed: int = 1234
    target_count: int = 40
    views: int = 4
    holdout_views: int = 1
    checkpoint_interval: int = 500
    seeds: tuple = (0, 1, 2)

    def validate(self) -> "RunConfig":
        train = self.train.validate()
        if self.width < 1 or self.height < 1:
            raise ConfigError("width and height must be >= 1")
        if train.mode == ORTHO3D and self.views < 1:
            raise ConfigError("ortho3d runs need at least one training view")
        if self.holdout_views < 0:
            raise ConfigError("holdout_views must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        return dataclasses.replace(self, train=train)


_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "train"}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError("expected a boolean, got %r" % raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        conv = int if default and all(isinstance(x, int) for x in default) else float
        return tuple(conv(p) for p in parts)
    return raw


def set_option(cfg: RunConfig, key: str, raw: str) -> None:
    if key in _TRAIN_KEYS:
        current = getattr(cfg.train, key)
        setattr(cfg.train, key, _parse_value(raw, current))
    elif key in _RUN_KEYS:
        current = getattr(cfg, key)
        setattr(cfg, key, _parse_value(raw, current))
    else:
        raise KeyError(key)


def parse_config(text: str, source: str = "<config>", defaults: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines over ``defaults`` (a fresh RunConfig if omitted)."""
    cfg = copy.deepcopy(defaults) if defaults is not None else RunConfig()
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("%s:%d: expected 'key = value'" % (source, lineno))
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key in seen:
            raise ConfigError("%s:%d: duplicate key %r (first on line %d)"
                              % (source, lineno, key, seen[key]))
        seen[key] = lineno
        try:
            set_option(cfg, key, raw)
        except KeyError:
            raise ConfigError("%s:%d: unknown key %r" % (source, lineno, key)) from None
        except ValueError as exc:
            raise ConfigError("%s:%d: bad value for %r: %s" % (source, lineno, key, exc)) from None
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError("%s: %s" % (source, exc)) from None


def load_config(path, defaults: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("cannot read %s: %s" % (path, exc)) from None
    return parse_config(text, str(path), defaults)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Every key with its resolved value; parse_config(dump_config(c)) == c."""
    lines = ["# resolved configuration"]
    train = cfg.train.resolved()
    for f in fields(TrainConfig):
        lines.append("%s = %s" % (f.name, _format(getattr(train, f.name))))
    for name in _RUN_KEYS:
        lines.append("%s = %s" % (name, _format(getattr(cfg, name))))
    return "\n".join(lines) + "\n"
