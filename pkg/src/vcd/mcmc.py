"""HMC improvement kernels and a discrete Metropolis-Hastings oracle.

Chains are vectorized: ``z`` has shape (..., K) and every leading index is an
independent chain with its own accept/reject decision.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelConfig:
    t: int = 3
    leapfrog_steps: int = 5
    step_size: float = 0.1

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("number of MCMC iterations t must be >= 0")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if not self.step_size >= 0:
            raise ValueError("step_size must be non-negative")


@dataclass
class ChainResult:
    z: np.ndarray
    accepted: np.ndarray
    proposed: int

    @property
    def acceptance_rate(self) -> float:
        if self.proposed == 0:
            return float("nan")
        return float(np.mean(self.accepted) / self.proposed)


def _sanitize(z):
    finite = np.isfinite(z)
    if finite.all():
        return z, np.zeros(z.shape[:-1], dtype=bool)
    bad = ~finite.all(axis=-1)
    return np.where(bad[..., None], 0.0, z), bad


def _integrate(z, r, step_size, steps, grad_log_p, g0, final):
    """Leapfrog core. ``g0`` is the gradient at ``z``; ``final(z)`` returns
    ``(log p, grad log p)`` at the end point, which also closes the last half step."""
    diverged = np.zeros(z.shape[:-1], dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        r = r + 0.5 * step_size * g0
        for i in range(steps):
            z = z + step_size * r
            z, bad = _sanitize(z)
            diverged |= bad
            if i < steps - 1:
                r = r + step_size * grad_log_p(z)
        logp, g = final(z)
        r = r + 0.5 * step_size * g
    finite_r = np.isfinite(r)
    if not finite_r.all():
        diverged |= ~finite_r.all(axis=-1)
    return z, r, logp, g, diverged


def leapfrog(z, r, step_size, steps, grad_log_p):
    """Leapfrog integration of ``H = -log p(z) + |r|^2 / 2``.

    Rows whose state becomes non-finite are returned as NaN so that the
    caller can reject them; they are never fed back into ``grad_log_p``.
    """
    z = np.array(z, dtype=np.float64)
    r = np.array(r, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        g0 = grad_log_p(z)
    z, r, _, _, diverged = _integrate(z, r, step_size, steps, grad_log_p, g0,
                                      lambda x: (None, grad_log_p(x)))
    if diverged.any():
        z[diverged] = np.nan
        r[diverged] = np.nan
    return z, r


def _value_and_grad(target):
    fused = getattr(target, "log_density_and_grad", None)
    if fused is not None:
        return fused
    return lambda z: (target.log_density(z), target.grad_log_density(z))


def _hmc_transition(z, logp, grad, target, config: KernelConfig, rng, value_and_grad):
    r0 = rng.standard_normal(z.shape)
    log_u = np.log(rng.random(z.shape[:-1]))
    z1, r1, logp1, g1, bad = _integrate(z, r0, config.step_size, config.leapfrog_steps,
                                        target.grad_log_density, grad, value_and_grad)
    with np.errstate(over="ignore", invalid="ignore"):
        delta = (-logp1 + 0.5 * np.sum(r1 * r1, axis=-1)) - (-logp + 0.5 * np.sum(r0 * r0, axis=-1))
        accepted = ~bad & np.isfinite(delta) & (log_u < -delta)
    if bad.any():
        logger.debug("rejected %d divergent HMC trajectories", int(bad.sum()))
    keep = accepted[..., None]
    return (np.where(keep, z1, z), np.where(accepted, logp1, logp), np.where(keep, g1, grad),
            accepted)


def hmc_step(z, target, config: KernelConfig, rng):
    """One HMC transition with full momentum refresh and identity mass.

    Returns ``(z_new, accepted)`` where ``accepted`` has the batch shape.
    """
    z = np.asarray(z, dtype=np.float64)
    vg = _value_and_grad(target)
    logp, grad = vg(z)
    z_new, _, _, accepted = _hmc_transition(z, logp, grad, target, config, rng, vg)
    return z_new, accepted


def run_chain(z0, target, config: KernelConfig, rng) -> ChainResult:
    """Apply ``config.t`` HMC transitions starting from ``z0``.

    The log density and gradient at the current state are carried between
    transitions rather than recomputed.
    """
    z = np.array(z0, dtype=np.float64)
    accepted = np.zeros(z.shape[:-1], dtype=np.int64)
    if config.t == 0:
        return ChainResult(z, accepted, 0)
    vg = _value_and_grad(target)
    logp, grad = vg(z)
    for _ in range(config.t):
        z, logp, grad, acc = _hmc_transition(z, logp, grad, target, config, rng, vg)
        accepted += acc
    return ChainResult(z, accepted, config.t)


def adapt_step_size(target, z0, config: KernelConfig, rng, n_warmup=200, target_accept=0.75):
    """Dual-averaging warm-up of the step size on a batch of chains.

    Not used during training by default: a step size that depends on the
    variational parameters would make the kernel parameter-dependent.
    """
    eps = config.step_size if config.step_size > 0 else 0.1
    mu, gamma, t0, kappa = np.log(10 * eps), 0.05, 10.0, 0.75
    h_bar, log_eps_bar = 0.0, 0.0
    z = np.array(z0, dtype=np.float64)
    for m in range(1, n_warmup + 1):
        z_prop_r = rng.standard_normal(z.shape)
        lp0 = target.log_density(z)
        z1, r1 = leapfrog(z, z_prop_r, eps, config.leapfrog_steps, target.grad_log_density)
        z1s, bad = _sanitize(z1)
        with np.errstate(over="ignore", invalid="ignore"):
            delta = (-target.log_density(z1s) + 0.5 * np.sum(np.nan_to_num(r1) ** 2, -1)
                     + lp0 - 0.5 * np.sum(z_prop_r**2, -1))
            a = np.where(bad | ~np.isfinite(delta), 0.0, np.minimum(1.0, np.exp(-delta)))
        accept = rng.random(a.shape) < a
        z = np.where(accept[..., None], z1s, z)
        h_bar = (1 - 1 / (m + t0)) * h_bar + (target_accept - float(np.mean(a))) / (m + t0)
        log_eps = mu - np.sqrt(m) / gamma * h_bar
        eta = m ** (-kappa)
        log_eps_bar = eta * log_eps + (1 - eta) * log_eps_bar
        eps = float(np.exp(log_eps))
    return replace(config, step_size=float(np.exp(log_eps_bar)))


class HMCKernel:
    """``Q^(t)`` built from ``config.t`` HMC transitions."""

    def __init__(self, config: KernelConfig):
        self.config = config

    @property
    def t(self):
        return self.config.t

    def improve(self, target, z0, rng) -> ChainResult:
        return run_chain(z0, target, self.config, rng)


class ExactSampler:
    """Replaces the chain by independent exact draws from the target (t -> infinity)."""

    t = float("inf")

    def improve(self, target, z0, rng) -> ChainResult:
        z0 = np.asarray(z0)
        shape = z0.shape[:-1] if z0.dtype.kind == "f" else z0.shape
        z = target.sample(rng, shape)
        return ChainResult(np.asarray(z), np.zeros(shape, dtype=np.int64), 0)


# ---------------------------------------------------------------------------
# Discrete oracle: finite state space where q^(t) = q T^t exactly.


class DiscreteTarget:
    """Unnormalised log-probabilities over integer states ``0..S-1``."""

    def __init__(self, log_p):
        self.log_p = np.asarray(log_p, dtype=np.float64)
        self.probs = np.exp(self.log_p - np.logaddexp.reduce(self.log_p))
        self.log_normalizer = float(np.logaddexp.reduce(self.log_p))

    @property
    def n_states(self):
        return self.log_p.shape[0]

    def log_density(self, z):
        return self.log_p[np.asarray(z)]

    def sample(self, rng, shape=()):
        return rng.choice(self.n_states, size=shape, p=self.probs)


def discrete_mh_transition_matrix(p, proposal):
    """Metropolis-Hastings transition matrix for target ``p`` and proposal rows."""
    p = np.asarray(p, dtype=np.float64)
    prop = np.asarray(proposal, dtype=np.float64)
    s = p.shape[0]
    if prop.shape != (s, s):
        raise ValueError("proposal must be S x S")
    if np.any(p <= 0):
        raise ValueError("target probabilities must be strictly positive")
    if np.any(prop < 0) or not np.allclose(prop.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("proposal rows must be probability vectors")
    num = p[None, :] * prop.T
    den = p[:, None] * prop
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(den > 0, np.minimum(1.0, num / den), 0.0)
    trans = prop * acc
    np.fill_diagonal(trans, 0.0)
    np.fill_diagonal(trans, 1.0 - trans.sum(axis=1))
    return trans


def propagate(q, trans, t):
    """Exact marginal ``q T^t`` of the t-step chain."""
    return np.asarray(q) @ np.linalg.matrix_power(trans, t)


def discrete_kl(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = a > 0
    return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))


class DiscreteMHKernel:
    """Run ``t`` transitions of a transition matrix on integer states."""

    def __init__(self, trans, t):
        self.trans = np.asarray(trans, dtype=np.float64)
        self.t = int(t)
        self._cum = np.cumsum(self.trans, axis=1)
        self._cum[:, -1] = 1.0

    def improve(self, target, z0, rng) -> ChainResult:
        z = np.array(z0, dtype=np.int64)
        moved = np.zeros(z.shape, dtype=np.int64)
        for _ in range(self.t):
            u = rng.random(z.shape)
            nxt = np.sum(self._cum[z] < u[..., None], axis=-1)
            moved += nxt != z
            z = nxt
        return ChainResult(z, moved, self.t)
