"""Target densities: 2-D toy distributions and binary latent variable models.

Every target here exposes ``log_density(z)`` and ``grad_log_density(z)``
that act row-wise on arrays whose last axis is the latent dimension, which
is the contract the HMC kernel and the estimators rely on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit, logsumexp

from .variational import DenseNet

LOG_2PI = np.log(2.0 * np.pi)


def _check_finite(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("latent point contains non-finite values")
    return z


def log_sigmoid(logits: np.ndarray) -> np.ndarray:
    """Stable ``log(sigmoid(l))`` that never overflows for large ``|l|``."""
    return -np.logaddexp(0.0, -logits)


def bernoulli_log_lik(x: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Sum over the last axis of ``log Bernoulli(x | sigmoid(logits))``.

    Uses ``x l - log(1 + e^l)``, valid for binary ``x``.
    """
    return np.sum(x * logits - np.logaddexp(0.0, logits), axis=-1)


def std_normal_logpdf(z: np.ndarray) -> np.ndarray:
    return -0.5 * z.shape[-1] * LOG_2PI - 0.5 * np.einsum("...i,...i->...", z, z)


class _Gaussian:
    """Dense multivariate normal with cached factorisation."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        k = self.mean.shape[0]
        if self.cov.shape != (k, k):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean size {k}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as err:
            raise ValueError("covariance must be positive definite") from err
        self.precision = cho_solve((self.chol, True), np.eye(k))
        self.log_norm = -0.5 * k * LOG_2PI - np.sum(np.log(np.diag(self.chol)))

    def logpdf(self, z):
        d = z - self.mean
        return self.log_norm - 0.5 * np.einsum("...i,ij,...j->...", d, self.precision, d)

    def grad(self, z):
        return -(z - self.mean) @ self.precision

    def sample(self, rng, shape):
        eps = rng.standard_normal(tuple(shape) + self.mean.shape)
        return self.mean + eps @ self.chol.T


TOY_KINDS = ("gaussian", "mixture2", "banana")


@dataclass
class ToyTarget:
    """A 2-D synthetic target.

    ``gaussian`` uses the first mean/covariance, ``mixture2`` all of them with
    ``weights``, and ``banana`` evaluates the first Gaussian at the sheared point
    ``(z1, z2 + z1**2 + 1)``.
    """

    kind: str
    means: Sequence[np.ndarray]
    covariances: Sequence[np.ndarray]
    weights: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        if self.kind not in TOY_KINDS:
            raise ValueError(f"unknown toy target kind {self.kind!r}")
        if len(self.means) != len(self.covariances):
            raise ValueError("need one covariance per mean")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kind == "mixture2":
            if self.weights.shape != (len(self.means),):
                raise ValueError("need one weight per mixture component")
            if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
                raise ValueError("mixture weights must be non-negative and sum to 1")
        self._components = [_Gaussian(m, c) for m, c in zip(self.means, self.covariances)]
        for comp in self._components:
            if comp.mean.shape != (2,):
                raise ValueError("toy targets are two-dimensional")
        self._log_w = np.log(self.weights) if self.kind == "mixture2" else None

    dim = 2

    @staticmethod
    def _shear(z):
        return np.stack([z[..., 0], z[..., 1] + z[..., 0] ** 2 + 1.0], axis=-1)

    def component_log_densities(self, z):
        return np.stack([c.logpdf(z) for c in self._components], axis=-1)

    def log_density(self, z):
        z = _check_finite(z)
        if self.kind == "gaussian":
            return self._components[0].logpdf(z)
        if self.kind == "banana":
            return self._components[0].logpdf(self._shear(z))
        return logsumexp(self.component_log_densities(z) + self._log_w, axis=-1)

    def responsibilities(self, z):
        a = self.component_log_densities(z) + self._log_w
        return np.exp(a - logsumexp(a, axis=-1, keepdims=True))

    def grad_log_density(self, z):
        z = _check_finite(z)
        if self.kind == "gaussian":
            return self._components[0].grad(z)
        if self.kind == "banana":
            gy = self._components[0].grad(self._shear(z))
            g = gy.copy()
            g[..., 0] = gy[..., 0] + 2.0 * z[..., 0] * gy[..., 1]
            return g
        resp = self.responsibilities(z)
        grads = np.stack([c.grad(z) for c in self._components], axis=-2)
        return np.einsum("...k,...kd->...d", resp, grads)

    def sample(self, rng, shape=()):
        """Exact draws from the target (used as an infinite-chain surrogate)."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        if self.kind == "gaussian":
            return self._components[0].sample(rng, shape)
        if self.kind == "banana":
            y = self._components[0].sample(rng, shape)
            return np.stack([y[..., 0], y[..., 1] - y[..., 0] ** 2 - 1.0], axis=-1)
        comp = rng.choice(len(self.weights), size=shape, p=self.weights)
        draws = np.stack([c.sample(rng, shape) for c in self._components], axis=-2)
        return np.take_along_axis(draws, comp[..., None, None], axis=-2)[..., 0, :]


def gaussian_target(rho: float = 0.95) -> ToyTarget:
    return ToyTarget("gaussian", [np.zeros(2)], [np.array([[1.0, rho], [rho, 1.0]])])


def mixture_target() -> ToyTarget:
    return ToyTarget(
        "mixture2",
        [np.array([0.8, 0.8]), np.array([-2.0, -2.0])],
        [np.array([[1.0, 0.8], [0.8, 1.0]]), np.array([[1.0, -0.6], [-0.6, 1.0]])],
        np.array([0.3, 0.7]),
    )


def banana_target(rho: float = 0.9) -> ToyTarget:
    return ToyTarget("banana", [np.zeros(2)], [np.array([[1.0, rho], [rho, 1.0]])])


def toy_target(name: str) -> ToyTarget:
    builders = {"gaussian": gaussian_target, "mixture2": mixture_target, "banana": banana_target}
    try:
        return builders[name]()
    except KeyError:
        raise ValueError(f"unknown toy target {name!r}; choose from {sorted(builders)}") from None


def eval_toy_log_density(target: ToyTarget, z) -> np.ndarray:
    return target.log_density(z)


def grad_toy_log_density(target: ToyTarget, z) -> np.ndarray:
    return target.grad_log_density(z)


# ---------------------------------------------------------------------------
# Latent variable models with Bernoulli likelihoods and N(0, I) priors.


class LvmModel:
    """Base class. Subclasses provide ``logits`` and the two backward passes."""

    latent_dim: int
    data_dim: int

    def _check(self, x, z):
        x = np.asarray(x, dtype=np.float64)
        z = _check_finite(z)
        if x.shape[-1] != self.data_dim:
            raise ValueError(f"data dimension {x.shape[-1]} != model dimension {self.data_dim}")
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dimension {z.shape[-1]} != model dimension {self.latent_dim}")
        return x, z

    def log_likelihood(self, x, z):
        x, z = self._check(x, z)
        return bernoulli_log_lik(x, self.logits(z))

    def log_joint(self, x, z):
        x, z = self._check(x, z)
        return bernoulli_log_lik(x, self.logits(z)) + std_normal_logpdf(z)

    def log_joint_and_grad_z(self, x, z):
        x, z = self._check(x, z)
        logits, cache = self._forward(z)
        resid = x - expit(logits)
        value = bernoulli_log_lik(x, logits) + std_normal_logpdf(z)
        return value, self._backward_z(cache, resid) - z

    def grad_z(self, x, z):
        x, z = self._check(x, z)
        logits, cache = self._forward(z)
        return self._backward_z(cache, x - expit(logits)) - z

    def grad_phi(self, x, z):
        """Gradient of ``sum log p_phi(x|z)`` over all leading axes, flattened."""
        x, z = self._check(x, z)
        logits, cache = self._forward(z)
        return self._backward_phi(cache, x - expit(logits))

    def logits(self, z):
        return self._forward(z)[0]

    def posterior(self, x) -> "PosteriorTarget":
        return PosteriorTarget(self, x)


class LogisticMF(LvmModel):
    """Bernoulli likelihood with parameter ``sigmoid(z . w_d + b_d)`` per dimension."""

    def __init__(self, weights, intercepts):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.intercepts = np.asarray(intercepts, dtype=np.float64)
        self.data_dim, self.latent_dim = self.weights.shape
        if self.intercepts.shape != (self.data_dim,):
            raise ValueError("need one intercept per observed dimension")

    kind = "logistic_mf"

    @classmethod
    def init(cls, data_dim, latent_dim, rng, scale=0.1):
        return cls(rng.uniform(-scale, scale, size=(data_dim, latent_dim)), np.zeros(data_dim))

    def _forward(self, z):
        return z @ self.weights.T + self.intercepts, z

    def _backward_z(self, z, resid):
        return resid @ self.weights

    def _backward_phi(self, z, resid):
        r2 = resid.reshape(-1, self.data_dim)
        z2 = z.reshape(-1, self.latent_dim)
        return np.concatenate([(r2.T @ z2).ravel(), r2.sum(axis=0)])

    @property
    def n_params(self):
        return self.weights.size + self.intercepts.size

    def flat(self):
        return np.concatenate([self.weights.ravel(), self.intercepts])

    def with_flat(self, vec):
        n = self.weights.size
        return LogisticMF(vec[:n].reshape(self.weights.shape), vec[n:].copy())


class VAEDecoder(LvmModel):
    """Dense network decoder mapping ``z`` to Bernoulli logits."""

    kind = "vae"

    def __init__(self, net: DenseNet):
        self.net = net
        self.latent_dim = net.in_dim
        self.data_dim = net.out_dim

    @classmethod
    def init(cls, data_dim, latent_dim, rng, hidden=(32, 32)):
        sizes = [latent_dim, *hidden, data_dim]
        acts = ["relu"] * len(hidden) + ["identity"]
        return cls(DenseNet.init(sizes, acts, rng))

    def _forward(self, z):
        lead = z.shape[:-1]
        out, trace = self.net.forward(z.reshape(-1, self.latent_dim))
        return out.reshape(lead + (self.data_dim,)), (lead, trace)

    def _backward_z(self, cache, resid):
        lead, trace = cache
        _, gx = self.net.backward(trace, resid.reshape(-1, self.data_dim))
        return gx.reshape(lead + (self.latent_dim,))

    def _backward_phi(self, cache, resid):
        lead, trace = cache
        grads, _ = self.net.backward(trace, resid.reshape(-1, self.data_dim))
        return self.net.flatten_grads(grads)

    @property
    def n_params(self):
        return self.net.n_params

    def flat(self):
        return self.net.flat()

    def with_flat(self, vec):
        return VAEDecoder(self.net.with_flat(vec))


def lvm_log_joint(model: LvmModel, x, z):
    return model.log_joint(x, z)


def lvm_grad_z(model: LvmModel, x, z):
    return model.grad_z(x, z)


def lvm_grad_phi(model: LvmModel, x, z):
    return model.grad_phi(x, z)


class PosteriorTarget:
    """Unnormalised posterior ``p(x, z)`` as a function of ``z`` for fixed ``x``.

    With ``x`` of shape (B, D) and ``z`` of shape (B, K), row ``b`` of ``z`` is
    scored against row ``b`` of ``x``, so one object drives B independent chains.
    """

    def __init__(self, model, x):
        self.model = model
        self.x = np.asarray(x, dtype=np.float64)
        self.dim = model.latent_dim

    def log_density(self, z):
        return self.model.log_joint(self.x, z)

    def grad_log_density(self, z):
        return self.model.grad_z(self.x, z)

    def log_density_and_grad(self, z):
        return self.model.log_joint_and_grad_z(self.x, z)


class ConjugateGaussianModel:
    """Linear-Gaussian reference model: ``z ~ N(0, I)``, ``x | z ~ N(A z, s^2 I)``.

    Posterior and evidence are available in closed form, which makes it the
    oracle for zero-at-posterior and importance-sampling checks.
    """

    def __init__(self, loading, noise_std):
        self.loading = np.asarray(loading, dtype=np.float64)
        self.noise_std = float(noise_std)
        self.data_dim, self.latent_dim = self.loading.shape
        a, s2 = self.loading, self.noise_std**2
        self.post_precision = np.eye(self.latent_dim) + a.T @ a / s2
        self.post_cov = np.linalg.inv(self.post_precision)
        self._marg = _Gaussian(np.zeros(self.data_dim), a @ a.T + s2 * np.eye(self.data_dim))

    def log_likelihood(self, x, z):
        r = np.asarray(x) - z @ self.loading.T
        return (-0.5 * self.data_dim * LOG_2PI - self.data_dim * np.log(self.noise_std)
                - 0.5 * np.sum(r * r, axis=-1) / self.noise_std**2)

    def log_joint(self, x, z):
        z = _check_finite(z)
        return self.log_likelihood(x, z) + std_normal_logpdf(z)

    def grad_z(self, x, z):
        r = np.asarray(x) - z @ self.loading.T
        return r @ self.loading / self.noise_std**2 - z

    def log_joint_and_grad_z(self, x, z):
        return self.log_joint(x, z), self.grad_z(x, z)

    def posterior_mean(self, x):
        return np.asarray(x) @ self.loading @ self.post_cov / self.noise_std**2

    def log_marginal(self, x):
        return self._marg.logpdf(np.asarray(x, dtype=np.float64))

    def posterior(self, x) -> "GaussianPosterior":
        return GaussianPosterior(self, x)


class GaussianPosterior(PosteriorTarget):
    """Posterior of a conjugate model; also supports exact sampling."""

    def __init__(self, model: ConjugateGaussianModel, x):
        super().__init__(model, x)
        self.mean = model.posterior_mean(self.x)
        self.chol = np.linalg.cholesky(model.post_cov)
        self.log_evidence = model.log_marginal(self.x)

    def sample(self, rng, shape=()):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        if not shape:
            shape = self.mean.shape[:-1]
        eps = rng.standard_normal(shape + (self.dim,))
        return self.mean + eps @ self.chol.T
