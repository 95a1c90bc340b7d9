"""Grid-quadrature divergences for 2-D densities and importance-sampled evidence."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .mcmc import KernelConfig, hmc_step
from .variational import DiagGaussian

logger = logging.getLogger(__name__)

MIN_GRID_MASS = 0.999
MIN_KL_RESOLUTION = 50


@dataclass(frozen=True)
class Grid2D:
    """Cell-centred rectangular grid; ``points()`` is ordered x-major, then y."""

    x_range: tuple = (-8.0, 8.0)
    y_range: tuple = (-8.0, 8.0)
    resolution: tuple = (400, 400)

    def __post_init__(self):
        nx, ny = self.resolution
        if nx < 1 or ny < 1:
            raise ValueError("grid resolution must be positive")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise ValueError("grid ranges must be increasing intervals")

    @property
    def spacing(self):
        return ((self.x_range[1] - self.x_range[0]) / self.resolution[0],
                (self.y_range[1] - self.y_range[0]) / self.resolution[1])

    @property
    def cell_area(self):
        hx, hy = self.spacing
        return hx * hy

    def axes(self):
        hx, hy = self.spacing
        xs = self.x_range[0] + hx * (np.arange(self.resolution[0]) + 0.5)
        ys = self.y_range[0] + hy * (np.arange(self.resolution[1]) + 0.5)
        return xs, ys

    def points(self):
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def _normalized_log_density(log_density, grid: Grid2D, name):
    lp = np.asarray(log_density(grid.points()), dtype=np.float64)
    if not np.all(np.isfinite(lp)):
        raise ValueError(f"{name} is not finite on the grid")
    log_mass = logsumexp(lp) + np.log(grid.cell_area)
    if np.exp(log_mass) < MIN_GRID_MASS:
        raise ValueError(f"{name} has grid mass {np.exp(log_mass):.5f} < {MIN_GRID_MASS}; widen the grid")
    return lp - log_mass


def grid_kl(log_p, log_q, grid: Grid2D):
    """Quadrature ``(KL(p||q), KL(q||p), symmetrized)`` of two 2-D log-densities.

    Both densities are renormalized over the grid before integrating.
    """
    if min(grid.resolution) < MIN_KL_RESOLUTION:
        raise ValueError(f"grid resolution must be >= {MIN_KL_RESOLUTION} per axis for quadrature")
    lp = _normalized_log_density(log_p, grid, "p")
    lq = _normalized_log_density(log_q, grid, "q")
    a = grid.cell_area
    kl_pq = float(np.sum(np.exp(lp) * (lp - lq)) * a)
    kl_qp = float(np.sum(np.exp(lq) * (lq - lp)) * a)
    return kl_pq, kl_qp, kl_pq + kl_qp


PROPOSAL_KINDS = ("overdispersed_q", "hmc_mean", "hmc_mean_empirical_std")


@dataclass(frozen=True)
class ProposalSpec:
    inflation: float = 1.2
    hmc_total: int = 600
    hmc_keep: int = 300

    def __post_init__(self):
        if not self.inflation > 1.0:
            raise ValueError("inflation must exceed 1")
        if not 0 < self.hmc_keep <= self.hmc_total:
            raise ValueError("need 0 < hmc_keep <= hmc_total")


def marginal_llh_is(model, x, proposal, n_samples, rng, chunk=None):
    """``log (1/S) sum_s p(x, z_s) / r(z_s)`` with ``z_s ~ r``, computed in log space.

    ``x`` may be a single datapoint (D,) or a batch (B, D), matched row-wise
    with a batched proposal.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return marginal_llh_is(model, x[None], _batched(proposal), n_samples, rng, chunk)[0]
    b = x.shape[0]
    chunk = chunk or max(1, int(4_000_000 // max(1, n_samples * x.shape[1])))
    out = np.empty(b)
    for lo in range(0, b, chunk):
        hi = min(b, lo + chunk)
        prop = DiagGaussian(proposal.mean[lo:hi], proposal.std[lo:hi])
        z = prop.sample(rng, n_samples).z
        log_w = model.log_joint(x[lo:hi], z) - prop.log_q(z)
        log_w = np.where(np.isnan(log_w), -np.inf, log_w)
        if np.any(np.all(log_w == -np.inf, axis=0)):
            raise ValueError("all importance weights are zero for some datapoint")
        out[lo:hi] = logsumexp(log_w, axis=0) - np.log(n_samples)
    return out


def _batched(q: DiagGaussian) -> DiagGaussian:
    return DiagGaussian(np.atleast_2d(q.mean), np.atleast_2d(q.std))


def make_proposals(model, x, q: DiagGaussian, kernel: KernelConfig, rng, spec=ProposalSpec()):
    """The three Gaussian importance proposals built around ``q(z | x)``.

    1. ``q`` with standard deviations inflated by ``spec.inflation``.
    2. Mean of the last ``hmc_keep`` of ``hmc_total`` HMC samples started at
       ``q``, with the inflated ``q`` standard deviations.
    3. Same mean, with the inflated empirical standard deviation of those samples.

    Rows whose chain diverged or never moved fall back to proposal 1.
    """
    from .targets import PosteriorTarget

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q = _batched(q)
    over = DiagGaussian(q.mean, spec.inflation * q.std)
    target = PosteriorTarget(model, x)
    z = q.sample(rng).z
    one = KernelConfig(1, kernel.leapfrog_steps, kernel.step_size)
    total = np.zeros_like(z)
    total_sq = np.zeros_like(z)
    for i in range(spec.hmc_total):
        z, _ = hmc_step(z, target, one, rng)
        if i >= spec.hmc_total - spec.hmc_keep:
            total += z
            total_sq += z * z
    mean = total / spec.hmc_keep
    var = np.maximum(total_sq / spec.hmc_keep - mean**2, 0.0) * spec.hmc_keep / max(1, spec.hmc_keep - 1)
    emp_std = np.sqrt(var)
    bad = ~np.all(np.isfinite(mean), axis=-1) | np.any(emp_std <= 0, axis=-1)
    if np.any(bad):
        logger.warning("HMC evaluation chain degenerate for %d datapoints; using proposal 1", int(bad.sum()))
        mean = np.where(bad[:, None], q.mean, mean)
        emp_std = np.where(bad[:, None], q.std, emp_std)
    return [over, DiagGaussian(mean, spec.inflation * q.std), DiagGaussian(mean, spec.inflation * emp_std)]


@dataclass
class MarginalLLH:
    best: np.ndarray
    per_proposal: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.best))


def evaluate_marginal_llh(model, encoder, x, kernel: KernelConfig, rng, n_samples=20000,
                          spec=ProposalSpec()) -> MarginalLLH:
    """Per-datapoint evidence estimate: the largest over the three proposals."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q = encoder(x) if callable(encoder) else encoder
    proposals = make_proposals(model, x, q, kernel, rng, spec)
    est = np.stack([marginal_llh_is(model, x, r, n_samples, rng) for r in proposals])
    return MarginalLLH(est.max(axis=0), est)
