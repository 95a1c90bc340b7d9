"""Experiment configuration as flat ``key = value`` text.

Values are parsed according to the field type and unknown keys are rejected.
Fields left as ``None`` are filled from experiment-specific defaults by
``resolve``. ``dumps(cfg)`` followed by ``loads`` reproduces ``cfg`` exactly.
"""
from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

TOY_TARGETS = ("gaussian", "mixture2", "banana")
MODELS = ("logistic_mf", "vae")
MODES = ("standard_kl", "hoffman2017", "vcd")
_MIXTURE = re.compile(r"^mixture(\d+)$")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "toy"
    target: str = "all"
    model: str = "logistic_mf"
    family: str = "diag_gaussian"
    mode: str = "vcd"
    alpha: float = 1.0
    # kernel
    t: Optional[int] = None
    leapfrog_steps: int = 5
    step_size: Optional[float] = None
    # training
    iterations: Optional[int] = None
    minibatch_size: int = 100
    lr_mean: Optional[float] = None
    lr_scale: Optional[float] = None
    lr_weights: Optional[float] = None
    lr_phi: Optional[float] = None
    decay_every: Optional[int] = None
    decay_factor: float = 0.9
    gamma: float = 0.9
    local_switch_iteration: Optional[int] = 3000
    clip: Optional[float] = 1000.0
    scale_minibatch: bool = True
    trace_every: int = 100
    # initialization
    init_mean_halfwidth: float = 0.1
    init_std: float = 1.0
    # data and model
    dataset: str = "synthetic"
    binarize_threshold: float = 0.5
    n_train: int = 700
    n_test: int = 200
    data_dim: int = 20
    true_latent_dim: int = 5
    data_seed: int = 0
    latent_dim: Optional[int] = None
    hidden: tuple = (32, 32)
    # evaluation
    eval_samples: int = 20000
    eval_hmc_total: int = 600
    eval_hmc_keep: int = 300
    eval_inflation: float = 1.2
    # contour grids
    grid_resolution: int = 200
    # run control
    output_dir: str = "runs"
    seed: int = 0
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def mixture_components(self) -> Optional[int]:
        m = _MIXTURE.match(self.family)
        return int(m.group(1)) if m else None

    @property
    def toy_targets(self):
        return TOY_TARGETS if self.target == "all" else (self.target,)


def _positive(cfg, *names):
    for n in names:
        v = getattr(cfg, n)
        if v is not None and not v > 0:
            raise ConfigError(f"{n} must be positive, got {v!r}")


def validate(cfg: ExperimentConfig):
    if cfg.experiment not in ("toy", "lvm"):
        raise ConfigError(f"experiment must be 'toy' or 'lvm', got {cfg.experiment!r}")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}")
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    if cfg.experiment == "toy":
        if cfg.target != "all" and cfg.target not in TOY_TARGETS:
            raise ConfigError(f"target must be 'all' or one of {TOY_TARGETS}, got {cfg.target!r}")
        k = cfg.mixture_components
        if cfg.family not in ("diag_gaussian", "chol_gaussian") and not (k and k >= 1):
            raise ConfigError(f"toy family must be diag_gaussian, chol_gaussian or mixture<K>, "
                              f"got {cfg.family!r}")
    else:
        if cfg.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {cfg.model!r}")
        if cfg.family != "amortized":
            raise ConfigError("lvm experiments use family = amortized")
        if cfg.dataset != "synthetic" and not Path(cfg.dataset).is_file():
            raise ConfigError(f"dataset file {cfg.dataset!r} does not exist")
        if cfg.minibatch_size > cfg.n_train:
            raise ConfigError("minibatch_size exceeds n_train")
    if cfg.t is not None and cfg.t < 0:
        raise ConfigError("t must be >= 0")
    if cfg.step_size is not None and cfg.step_size < 0:
        raise ConfigError("step_size must be >= 0")
    if cfg.local_switch_iteration is not None and cfg.local_switch_iteration < 0:
        raise ConfigError("local_switch_iteration must be >= 0")
    _positive(cfg, "leapfrog_steps", "iterations", "minibatch_size", "lr_mean", "lr_scale",
              "decay_every", "trace_every", "init_mean_halfwidth", "init_std", "n_train",
              "data_dim", "true_latent_dim", "latent_dim", "eval_samples", "eval_hmc_total",
              "eval_hmc_keep", "grid_resolution", "threads", "clip")
    for n in ("lr_weights", "lr_phi"):
        v = getattr(cfg, n)
        if v is not None and v < 0:
            raise ConfigError(f"{n} must be >= 0")
    if cfg.n_test < 0:
        raise ConfigError("n_test must be >= 0")
    if not 0.0 < cfg.decay_factor <= 1.0:
        raise ConfigError("decay_factor must lie in (0, 1]")
    if not 0.0 < cfg.gamma < 1.0:
        raise ConfigError("gamma must lie in (0, 1)")
    if not 0.0 <= cfg.binarize_threshold <= 1.0:
        raise ConfigError("binarize_threshold must lie in [0, 1]")
    if cfg.eval_hmc_keep > cfg.eval_hmc_total:
        raise ConfigError("eval_hmc_keep must not exceed eval_hmc_total")
    if not cfg.eval_inflation > 1.0:
        raise ConfigError("eval_inflation must exceed 1")
    if any(h < 1 for h in cfg.hidden):
        raise ConfigError("hidden layer sizes must be positive")


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill ``None`` fields with the defaults for the chosen experiment."""
    if cfg.experiment == "toy":
        defaults = dict(t=3, step_size=0.1,
                        iterations=50000 if cfg.mixture_components else 20000,
                        lr_mean=0.1, lr_scale=0.005, lr_weights=0.001, lr_phi=0.0,
                        decay_every=2000, latent_dim=2)
    else:
        defaults = dict(t=8, step_size=0.05, iterations=20000, lr_mean=5e-4, lr_scale=2.5e-4,
                        lr_weights=0.0, lr_phi=5e-4, decay_every=15000,
                        latent_dim=50 if cfg.model == "logistic_mf" else 10)
    return cfg.replace(**{k: v for k, v in defaults.items() if getattr(cfg, k) is None})


def _field_types():
    return typing.get_type_hints(ExperimentConfig)


def _parse_value(name, text, tp):
    text = text.strip()
    optional = typing.get_origin(tp) is typing.Union and type(None) in typing.get_args(tp)
    if optional:
        if text.lower() == "none":
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is tuple:
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {text!r} as {getattr(tp, '__name__', tp)}") from None


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def loads(text: str, **overrides) -> ExperimentConfig:
    types = _field_types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value, types[key])
    values.update(overrides)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    return loads(path.read_text(), **overrides)


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
