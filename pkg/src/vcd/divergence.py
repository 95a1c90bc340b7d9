"""The variational contrastive divergence and its gradient estimators.

Sign conventions: ``grad_elbo_*`` and ``grad_improved_term`` return gradients
of the expectations they name, ``E_q[f]`` and ``E_{q^(t)}[f]``. ``vcd_gradient``
returns the gradient of the objective being *minimized* (the divergence, or the
negative ELBO for the baselines), so it can be fed straight to a descent step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .variational import LOG_2PI, Categorical, CholGaussian, DiagGaussian, Draw

MODES = ("standard_kl", "hoffman2017", "vcd")


@dataclass(frozen=True)
class ObjectiveMode:
    kind: str = "vcd"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown objective mode {self.kind!r}; choose from {MODES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def uses_chain(self) -> bool:
        return self.kind != "standard_kl"


@dataclass
class ControlVariateState:
    """Exponentially decayed baselines for the score-function factor.

    Before ``local_switch_iteration`` a single global value is read and
    updated; from that iteration on each datapoint keeps its own value,
    seeded from the global one. ``None`` means never switch.
    """

    gamma: float = 0.9
    local_switch_iteration: Optional[int] = 3000
    global_C: float = 0.0
    local_C: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    def is_local(self, iteration) -> bool:
        return self.local_switch_iteration is not None and iteration >= self.local_switch_iteration

    def baseline(self, indices=None, iteration=0):
        if indices is None or not self.is_local(iteration):
            return self.global_C
        return np.array([self.local_C.get(int(n), self.global_C) for n in np.atleast_1d(indices)])


def cv_update(cv: ControlVariateState, f_values, iteration, indices=None) -> ControlVariateState:
    """``C <- gamma C + (1 - gamma) f`` globally (minibatch mean) or per datapoint."""
    f = np.atleast_1d(np.asarray(f_values, dtype=np.float64))
    g = cv.gamma
    if indices is None or not cv.is_local(iteration):
        return replace(cv, global_C=g * cv.global_C + (1.0 - g) * float(np.mean(f)),
                       local_C=dict(cv.local_C))
    local = dict(cv.local_C)
    for n, fn in zip(np.atleast_1d(indices), f):
        n = int(n)
        local[n] = g * local.get(n, cv.global_C) + (1.0 - g) * float(fn)
    return replace(cv, local_C=local)


@dataclass
class GradEstimate:
    grad: np.ndarray
    objective_value: float
    per_sample: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


def _estimate(rows, values, **diagnostics):
    rows = np.asarray(rows)
    flat = rows.reshape(-1, rows.shape[-1])
    return GradEstimate(flat.mean(axis=0), float(np.mean(values)), rows, diagnostics)


def _log_p_and_grad(target, z):
    fused = getattr(target, "log_density_and_grad", None)
    if fused is not None:
        return fused(z)
    return target.log_density(z), target.grad_log_density(z)


def instantaneous_elbo(target, family, z):
    """``f(z) = log p(x, z) - log q(z)``."""
    z = np.asarray(z)
    if z.dtype.kind == "f" and not np.all(np.isfinite(z)):
        raise ValueError("z contains non-finite values")
    return target.log_density(z) - family.log_q(z)


def gaussian_log_normalizer(family):
    """``-(K/2) log(2 pi) - (1/2) log|Sigma|`` of a Gaussian family."""
    if isinstance(family, DiagGaussian):
        return -0.5 * family.dim * LOG_2PI - np.sum(np.log(family.std), axis=-1)
    if isinstance(family, CholGaussian):
        return -0.5 * family.dim * LOG_2PI - np.sum(np.log(np.diag(family.chol)))
    raise TypeError("only Gaussian families have a z-independent log normalizer")


def simplified_integrand(target, family, z):
    """``g(z) = log p(x, z) + (1/2)(z - mu)^T Sigma^{-1} (z - mu)`` for Gaussian ``q``."""
    return instantaneous_elbo(target, family, z) + gaussian_log_normalizer(family)


def is_reparameterizable(family) -> bool:
    return not isinstance(family, Categorical)


def grad_elbo_reparam(target, family, draw: Draw) -> GradEstimate:
    """Pathwise estimate of ``grad E_q[f]`` from reparameterized draws.

    Gaussian families differentiate only ``E_q[log p]`` by the path and add the
    exact entropy gradient. Mixtures differentiate the full ``f`` along the path
    of the selected component and add a score-function term for the weights.
    """
    if not is_reparameterizable(family):
        raise TypeError(f"{type(family).__name__} is not reparameterizable; use grad_elbo_score")
    z = draw.z
    log_p, grad_p = _log_p_and_grad(target, z)
    f = log_p - family.log_q(z)
    ent = family.entropy_grad()
    if ent is not None:
        rows = family.reparam_vjp(draw, grad_p) + ent
    else:
        v = grad_p - family.grad_z_log_q(z)
        rows = family.reparam_vjp(draw, v) + f[..., None] * family.weight_score(z)
    return _estimate(rows, f, f=f)


def grad_elbo_score(target, family, draw: Draw) -> GradEstimate:
    """Score-function estimate of ``grad E_q[f]``, valid for any family."""
    z = draw.z
    f = instantaneous_elbo(target, family, z)
    rows = (f[..., None] - 1.0) * family.score(z)
    return _estimate(rows, f, f=f)


def grad_improved_term(target, family, z0, z_t, cv: Optional[ControlVariateState] = None,
                       indices=None, iteration=0) -> GradEstimate:
    """One-sample estimate of ``grad E_{q^(t)}[f]``.

    ``-grad log q(z_t) + (f(z_t) - C) grad log q(z0)``, with ``C`` taken from
    ``cv`` only inside the score-function factor.
    """
    f_t = instantaneous_elbo(target, family, z_t)
    c = 0.0 if cv is None else cv.baseline(indices, iteration)
    weight = f_t - c
    rows = -family.score(z_t) + weight[..., None] * family.score(z0)
    return _estimate(rows, f_t, f=f_t, baseline=c)


def estimate_vcd_samples(target, family, kernel, n_samples, rng):
    """Per-sample unbiased estimates ``f(z_t) - f(z0)`` of the divergence."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    draw = family.sample(rng, n_samples)
    chain = kernel.improve(target, draw.z, rng)
    return instantaneous_elbo(target, family, chain.z) - instantaneous_elbo(target, family, draw.z)


def estimate_vcd(target, family, kernel, n_samples, rng) -> float:
    return float(np.mean(estimate_vcd_samples(target, family, kernel, n_samples, rng)))


def vcd_gradient(mode: ObjectiveMode, target, family, kernel, rng, cv=None, n_samples=None,
                 indices=None, iteration=0) -> GradEstimate:
    """Gradient of the objective that ``mode`` minimizes, from fresh draws.

    ``standard_kl`` and ``hoffman2017`` return ``-grad E_q[f]``. ``hoffman2017``
    still runs the chain so the improved sample is available in
    ``diagnostics["z_t"]``. ``vcd`` returns ``alpha * grad E_{q^(t)}[f] - grad E_q[f]``.
    ``z0`` is drawn first and shared by both terms.
    """
    draw = family.sample(rng, n_samples)
    if is_reparameterizable(family):
        term1 = grad_elbo_reparam(target, family, draw)
    else:
        term1 = grad_elbo_score(target, family, draw)
    f0 = term1.diagnostics["f"]
    rows = -term1.per_sample
    diag = {"z0": draw.z, "f_z0": f0}
    if not mode.uses_chain:
        return _estimate(rows, -f0, **diag)

    chain = kernel.improve(target, draw.z, rng)
    diag.update(z_t=chain.z, acceptance=chain.acceptance_rate)
    term2 = grad_improved_term(target, family, draw.z, chain.z, cv, indices, iteration)
    f_t = term2.diagnostics["f"]
    diag["f_zt"] = f_t
    if mode.kind == "hoffman2017":
        return _estimate(rows, -f0, **diag)
    if mode.alpha != 0.0:
        rows = rows + mode.alpha * term2.per_sample
    return _estimate(rows, mode.alpha * f_t - f0, **diag)
