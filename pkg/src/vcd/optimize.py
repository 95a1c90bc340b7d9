"""RMSProp with step-decay schedules and the training loops.

``fit_variational`` fits a non-amortized family to a fixed target.
``fit_lvm`` trains an amortized encoder jointly with a model's parameters by
minibatch Monte Carlo EM.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .divergence import ControlVariateState, ObjectiveMode, cv_update, vcd_gradient
from .mcmc import HMCKernel, KernelConfig
from .targets import PosteriorTarget

logger = logging.getLogger(__name__)

RMS_DECAY = 0.9


class TrainingAborted(RuntimeError):
    pass


def lr_schedule(iteration, eta0, decay_every, factor):
    """``eta0 * factor ** floor(iteration / decay_every)``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return eta0 * factor ** (iteration // decay_every)


@dataclass
class RmsPropState:
    G: np.ndarray
    learning_rate: np.ndarray
    decay_every: int = 2000
    decay_factor: float = 0.9
    iteration: int = 0

    @classmethod
    def zeros(cls, n, learning_rate, decay_every=2000, decay_factor=0.9):
        return cls(np.zeros(n), np.broadcast_to(np.asarray(learning_rate, float), (n,)).copy(),
                   decay_every, decay_factor)

    def current_rate(self):
        return lr_schedule(self.iteration, self.learning_rate, self.decay_every, self.decay_factor)


def rmsprop_step(state: RmsPropState, params, grad):
    """Descent step ``params - eta / (1 + sqrt(G)) * g`` with ``G <- 0.9 G + 0.1 g^2``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or grad.shape != state.G.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grad {grad.shape}, G {state.G.shape}")
    g_acc = RMS_DECAY * state.G + (1.0 - RMS_DECAY) * grad * grad
    rho = state.current_rate() / (1.0 + np.sqrt(g_acc))
    return replace(state, G=g_acc, iteration=state.iteration + 1), params - rho * grad


@dataclass(frozen=True)
class LearningRates:
    mean: float = 0.1
    scale: float = 0.005
    weights: float = 0.001
    phi: float = 5e-4

    def for_groups(self, groups):
        return np.array([getattr(self, g) for g in groups])


TOY_RATES = LearningRates(0.1, 0.005, 0.001, 0.0)
LVM_RATES = LearningRates(5e-4, 2.5e-4, 5e-4, 5e-4)


@dataclass
class TrainConfig:
    mode: ObjectiveMode = field(default_factory=ObjectiveMode)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    iterations: int = 20000
    minibatch_size: int = 100
    rates: LearningRates = TOY_RATES
    decay_every: int = 2000
    decay_factor: float = 0.9
    gamma: float = 0.9
    local_switch_iteration: Optional[int] = None
    clip: Optional[float] = 1e3
    scale_minibatch: bool = True
    trace_every: int = 100
    deterministic: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be positive")


TRACE_COLUMNS = ("iteration", "mode", "objective", "acceptance",
                 "eta_mean", "eta_scale", "eta_weights", "eta_phi", "wall_ms")


@dataclass
class TrainResult:
    theta: object
    phi: object
    trace: list
    cv: ControlVariateState
    clipped: int = 0
    skipped: int = 0


class _Tracer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.rows = []
        self.t0 = time.perf_counter()
        self._obj, self._acc = [], []

    def add(self, iteration, objective, acceptance, rates):
        self._obj.append(objective)
        if acceptance is not None and np.isfinite(acceptance):
            self._acc.append(acceptance)
        if (iteration + 1) % self.config.trace_every and iteration + 1 != self.config.iterations:
            return
        wall = 0 if self.config.deterministic else int(1000 * (time.perf_counter() - self.t0))
        self.rows.append({
            "iteration": iteration + 1,
            "mode": self.config.mode.kind,
            "objective": float(np.mean(self._obj)),
            "acceptance": float(np.mean(self._acc)) if self._acc else float("nan"),
            **{f"eta_{k}": float(v) for k, v in rates.items()},
            "wall_ms": wall,
        })
        self._obj, self._acc = [], []


def _group_rates(rates: LearningRates, iteration, config: TrainConfig):
    s = config.decay_factor ** (iteration // config.decay_every)
    return {"mean": rates.mean * s, "scale": rates.scale * s, "weights": rates.weights * s,
            "phi": rates.phi * s}


class _Guard:
    """Clips gradients and tracks consecutive non-finite estimates."""

    def __init__(self, clip):
        self.clip = clip
        self.clipped = 0
        self.skipped = 0
        self.streak = 0

    def __call__(self, iteration, *grads):
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            self.streak += 1
            logger.warning("non-finite gradient at iteration %d; update skipped", iteration)
            if self.streak >= 3:
                raise TrainingAborted(f"three consecutive non-finite gradients (iteration {iteration})")
            return None
        self.streak = 0
        if self.clip is None:
            return grads
        out = []
        for g in grads:
            if np.any(np.abs(g) > self.clip):
                self.clipped += 1
                logger.debug("clipped gradient at iteration %d", iteration)
                g = np.clip(g, -self.clip, self.clip)
            out.append(g)
        return tuple(out)


def fit_variational(target, family, config: TrainConfig, rng, kernel=None) -> TrainResult:
    """Fit a non-amortized family to ``target`` by stochastic descent on ``config.mode``."""
    kernel = kernel or HMCKernel(config.kernel)
    state = RmsPropState.zeros(family.n_params, config.rates.for_groups(family.groups()),
                               config.decay_every, config.decay_factor)
    cv = ControlVariateState(config.gamma, None)
    guard = _Guard(config.clip)
    tracer = _Tracer(config)
    for it in range(config.iterations):
        est = vcd_gradient(config.mode, target, family, kernel, rng, cv=cv, iteration=it)
        checked = guard(it, est.grad)
        if checked is not None:
            state, flat = rmsprop_step(state, family.flat(), checked[0])
            family = family.with_flat(flat)
        if config.mode.kind == "vcd":
            cv = cv_update(cv, est.diagnostics["f_zt"], it)
        tracer.add(it, est.objective_value, est.diagnostics.get("acceptance"),
                   _group_rates(config.rates, it, config))
    return TrainResult(family, None, tracer.rows, cv, guard.clipped, guard.skipped)


def minibatch_indices(rng, n, size):
    if size > n:
        raise ValueError(f"minibatch size {size} exceeds dataset size {n}")
    return rng.choice(n, size=size, replace=False)


def minibatch_sum(per_point, n):
    """Unbiased estimate of a dataset sum from per-datapoint rows of a minibatch."""
    per_point = np.asarray(per_point)
    return (n / per_point.shape[0]) * per_point.sum(axis=0)


def fit_lvm(model, encoder, data, config: TrainConfig, rng, kernel=None) -> TrainResult:
    """Jointly fit encoder parameters and model parameters on binary ``data``.

    The encoder follows ``config.mode``. The model ascends
    ``sum_n E[log p(x_n | z_n)]`` at the improved samples, or at the initial
    ones for ``standard_kl``.
    """
    data = np.asarray(data)
    n = data.shape[0]
    kernel = kernel or HMCKernel(config.kernel)
    k = encoder.latent_dim
    th_state = RmsPropState.zeros(encoder.n_params, config.rates.for_groups(encoder.groups()),
                                  config.decay_every, config.decay_factor)
    ph_state = RmsPropState.zeros(model.n_params, config.rates.phi, config.decay_every,
                                  config.decay_factor)
    cv = ControlVariateState(config.gamma, config.local_switch_iteration)
    guard = _Guard(config.clip)
    tracer = _Tracer(config)
    for it in range(config.iterations):
        idx = minibatch_indices(rng, n, config.minibatch_size)
        xb = data[idx].astype(np.float64)
        scale = n / len(idx) if config.scale_minibatch else 1.0
        q, traces = encoder.forward(xb)
        target = PosteriorTarget(model, xb)
        est = vcd_gradient(config.mode, target, q, kernel, rng, cv=cv, indices=idx, iteration=it)
        rows = est.per_sample
        g_theta = scale * encoder.backward(traces, rows[:, :k], rows[:, k:])
        z_phi = est.diagnostics["z_t"] if config.mode.uses_chain else est.diagnostics["z0"]
        g_phi = -scale * model.grad_phi(xb, z_phi)
        checked = guard(it, g_theta, g_phi)
        if checked is not None:
            th_state, th = rmsprop_step(th_state, encoder.flat(), checked[0])
            ph_state, ph = rmsprop_step(ph_state, model.flat(), checked[1])
            encoder = encoder.with_flat(th)
            model = model.with_flat(ph)
        if config.mode.kind == "vcd":
            cv = cv_update(cv, est.diagnostics["f_zt"], it, idx)
        tracer.add(it, est.objective_value, est.diagnostics.get("acceptance"),
                   _group_rates(config.rates, it, config))
    return TrainResult(encoder, model, tracer.rows, cv, guard.clipped, guard.skipped)


def train(target, params, config: TrainConfig, rng, dataset=None, kernel=None) -> TrainResult:
    """Dispatch to ``fit_lvm`` when a dataset is given, else ``fit_variational``."""
    if dataset is None:
        return fit_variational(target, params, config, rng, kernel)
    return fit_lvm(target, params, dataset, config, rng, kernel)
