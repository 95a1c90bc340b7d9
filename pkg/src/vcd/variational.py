"""Explicit variational families and the small dense networks used for amortization.

All families share one calling convention. ``z`` carries samples along its
leading axes, and every gradient helper (``score``, ``reparam_vjp``,
``entropy_grad``) returns rows laid out like ``flat()``. A ``DiagGaussian``
whose mean has shape (B, K) is a batch of B local distributions, one per
datapoint, and its gradients come back per row.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, logsumexp, softmax

LOG_2PI = np.log(2.0 * np.pi)
SOFTPLUS_SHIFT = 1e-4
STD_FLOOR = 1e-8


def modified_softplus(x):
    """``log(exp(1e-4) + exp(x))``; bounded below by 1e-4."""
    return np.logaddexp(SOFTPLUS_SHIFT, x)


def modified_softplus_grad(x):
    return expit(x - SOFTPLUS_SHIFT)


def inverse_modified_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= SOFTPLUS_SHIFT):
        raise ValueError("modified softplus outputs are > 1e-4")
    return y + np.log1p(-np.exp(SOFTPLUS_SHIFT - y))


@dataclass
class Draw:
    """A reparameterized sample: ``z = h(eps)`` through ``component`` (mixtures only)."""

    z: np.ndarray
    eps: Optional[np.ndarray] = None
    component: Optional[np.ndarray] = None


def _solve_lower(chol, b):
    """Solve ``chol @ u = b`` for the last axis of ``b``."""
    flat = b.reshape(-1, b.shape[-1]).T
    return solve_triangular(chol, flat, lower=True).T.reshape(b.shape)


def _solve_upper_t(chol, b):
    """Solve ``chol.T @ u = b`` for the last axis of ``b``."""
    flat = b.reshape(-1, b.shape[-1]).T
    return solve_triangular(chol, flat, lower=True, trans="T").T.reshape(b.shape)


class DiagGaussian:
    """Factorized Gaussian parameterized by mean and standard deviation."""

    family = "diag_gaussian"

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean shape {self.mean.shape} != std shape {self.std.shape}")
        if np.any(self.std <= 0):
            raise ValueError("standard deviations must be positive")

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def n_params(self):
        return 2 * self.dim

    def reparam(self, eps):
        return self.mean + self.std * eps

    def sample(self, rng, n=None):
        shape = self.mean.shape if n is None else (n,) + self.mean.shape
        eps = rng.standard_normal(shape)
        return Draw(self.reparam(eps), eps)

    def log_q(self, z):
        d = (z - self.mean) / self.std
        return -0.5 * self.dim * LOG_2PI - np.sum(np.log(self.std), axis=-1) - 0.5 * np.sum(d * d, axis=-1)

    def grad_z_log_q(self, z):
        return -(z - self.mean) / self.std**2

    def score_parts(self, z):
        d = z - self.mean
        return d / self.std**2, -1.0 / self.std + d * d / self.std**3

    def score(self, z):
        return np.concatenate(self.score_parts(z), axis=-1)

    def reparam_vjp(self, draw: Draw, v):
        return np.concatenate([v, v * draw.eps], axis=-1)

    def entropy_grad(self):
        return np.concatenate([np.zeros_like(self.mean), 1.0 / self.std], axis=-1)

    def flat(self):
        return np.concatenate([self.mean, self.std], axis=-1)

    def with_flat(self, vec):
        k = self.dim
        return DiagGaussian(vec[..., :k], np.maximum(vec[..., k:], STD_FLOOR))

    def groups(self):
        return ["mean"] * self.dim + ["scale"] * self.dim

    def covariance(self):
        return np.diag(self.std**2)


class CholGaussian:
    """Full-covariance Gaussian ``N(mean, L L^T)`` with lower-triangular ``L``."""

    family = "chol_gaussian"

    def __init__(self, mean, chol):
        self.mean = np.asarray(mean, dtype=np.float64)
        chol = np.asarray(chol, dtype=np.float64)
        k = self.mean.shape[0]
        if self.mean.ndim != 1 or chol.shape != (k, k):
            raise ValueError("CholGaussian needs a mean vector and a matching square factor")
        if np.any(np.diag(chol) <= 0):
            raise ValueError("Cholesky diagonal must be strictly positive")
        self.chol = np.tril(chol)
        self._tril = np.tril_indices(k)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def n_params(self):
        k = self.dim
        return k + k * (k + 1) // 2

    def reparam(self, eps):
        return self.mean + eps @ self.chol.T

    def sample(self, rng, n=None):
        shape = (self.dim,) if n is None else (n, self.dim)
        eps = rng.standard_normal(shape)
        return Draw(self.reparam(eps), eps)

    def log_q(self, z):
        u = _solve_lower(self.chol, z - self.mean)
        return (-0.5 * self.dim * LOG_2PI - np.sum(np.log(np.diag(self.chol)))
                - 0.5 * np.sum(u * u, axis=-1))

    def grad_z_log_q(self, z):
        return -_solve_upper_t(self.chol, _solve_lower(self.chol, z - self.mean))

    def score_matrix(self, z):
        """Return ``(d/d mean, d/d L)`` of ``log q(z)``; the L part is masked lower."""
        u = _solve_lower(self.chol, z - self.mean)
        a = _solve_upper_t(self.chol, u)
        g_l = np.tril(a[..., :, None] * u[..., None, :])
        return a, g_l - np.diag(1.0 / np.diag(self.chol))

    def score(self, z):
        a, g_l = self.score_matrix(z)
        return np.concatenate([a, g_l[..., self._tril[0], self._tril[1]]], axis=-1)

    def reparam_vjp(self, draw: Draw, v):
        g_l = v[..., :, None] * draw.eps[..., None, :]
        return np.concatenate([v, g_l[..., self._tril[0], self._tril[1]]], axis=-1)

    def entropy_grad(self):
        g_l = np.diag(1.0 / np.diag(self.chol))
        return np.concatenate([np.zeros(self.dim), g_l[self._tril]])

    def flat(self):
        return np.concatenate([self.mean, self.chol[self._tril]])

    def with_flat(self, vec):
        k = self.dim
        chol = np.zeros((k, k))
        chol[self._tril] = vec[k:]
        idx = np.arange(k)
        chol[idx, idx] = np.maximum(chol[idx, idx], STD_FLOOR)
        return CholGaussian(vec[:k].copy(), chol)

    def groups(self):
        return ["mean"] * self.dim + ["scale"] * (self.n_params - self.dim)

    def covariance(self):
        return self.chol @ self.chol.T


class MixtureGaussian:
    """Mixture of Gaussian components with softmax-parameterized weights."""

    family = "mixture"

    def __init__(self, components: Sequence, logits):
        self.components = list(components)
        self.logits = np.asarray(logits, dtype=np.float64)
        if len(self.components) != self.logits.shape[0]:
            raise ValueError("need one logit per component")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError("mixture components must share a dimension")
        self.weights = softmax(self.logits)

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def n_params(self):
        return sum(c.n_params for c in self.components) + len(self.components)

    def sample(self, rng, n=None):
        size = 1 if n is None else n
        comp = rng.choice(len(self.components), size=size, p=self.weights)
        eps = rng.standard_normal((size, self.dim))
        z = self.reparam(eps, comp)
        if n is None:
            return Draw(z[0], eps[0], comp[0])
        return Draw(z, eps, comp)

    def reparam(self, eps, component):
        eps = np.asarray(eps, dtype=np.float64)
        component = np.asarray(component)
        if eps.ndim == 1:
            return self.components[int(component)].reparam(eps)
        z = np.empty(eps.shape)
        for k, c in enumerate(self.components):
            sel = component == k
            z[sel] = c.reparam(eps[sel])
        return z

    def component_log_q(self, z):
        return np.stack([c.log_q(z) for c in self.components], axis=-1)

    def log_q(self, z):
        return logsumexp(self.component_log_q(z) + np.log(self.weights), axis=-1)

    def responsibilities(self, z):
        a = self.component_log_q(z) + np.log(self.weights)
        return np.exp(a - logsumexp(a, axis=-1, keepdims=True))

    def grad_z_log_q(self, z):
        resp = self.responsibilities(z)
        grads = np.stack([c.grad_z_log_q(z) for c in self.components], axis=-2)
        return np.einsum("...k,...kd->...d", resp, grads)

    def score(self, z):
        resp = self.responsibilities(z)
        blocks = [resp[..., k, None] * c.score(z) for k, c in enumerate(self.components)]
        blocks.append(resp - self.weights)
        return np.concatenate(blocks, axis=-1)

    def weight_score(self, z):
        """Rows of ``d log q / d logits``, zero on the component parameters."""
        resp = self.responsibilities(z)
        lead = resp.shape[:-1]
        zeros = np.zeros(lead + (self.n_params - len(self.components),))
        return np.concatenate([zeros, resp - self.weights], axis=-1)

    def reparam_vjp(self, draw: Draw, v):
        comp = np.asarray(draw.component)
        blocks = []
        for k, c in enumerate(self.components):
            mask = (comp == k).astype(np.float64)[..., None]
            blocks.append(mask * c.reparam_vjp(draw, v))
        blocks.append(np.zeros(v.shape[:-1] + (len(self.components),)))
        return np.concatenate(blocks, axis=-1)

    def entropy_grad(self):
        return None

    def flat(self):
        return np.concatenate([c.flat() for c in self.components] + [self.logits])

    def with_flat(self, vec):
        comps, start = [], 0
        for c in self.components:
            comps.append(c.with_flat(vec[start:start + c.n_params]))
            start += c.n_params
        return MixtureGaussian(comps, vec[start:].copy())

    def groups(self):
        out = []
        for c in self.components:
            out += c.groups()
        return out + ["weights"] * len(self.components)


class Categorical:
    """Softmax distribution over ``n_states`` integers (discrete oracle family)."""

    family = "categorical"

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.probs = softmax(self.logits)

    @property
    def n_params(self):
        return self.logits.shape[0]

    def sample(self, rng, n=None):
        z = rng.choice(self.n_params, size=n, p=self.probs)
        return Draw(np.asarray(z))

    def log_q(self, z):
        return np.log(self.probs)[z]

    def score(self, z):
        onehot = np.eye(self.n_params)[np.asarray(z)]
        return onehot - self.probs

    def reparam_vjp(self, draw, v):
        raise TypeError("categorical family is not reparameterizable; use grad_elbo_score")

    def entropy_grad(self):
        return None

    def flat(self):
        return self.logits.copy()

    def with_flat(self, vec):
        return Categorical(vec)

    def groups(self):
        return ["weights"] * self.n_params


# ---------------------------------------------------------------------------
# Function-style API.


def sample_reparam(params, eps, component=None):
    """Map standard-normal noise to a sample; deterministic given its inputs."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != params.dim:
        raise ValueError(f"noise dimension {eps.shape[-1]} != family dimension {params.dim}")
    if isinstance(params, MixtureGaussian):
        if component is None:
            raise ValueError("mixture sampling needs a component index")
        return params.reparam(eps, component)
    return params.reparam(eps)


def log_q(params, z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("z contains non-finite values")
    return params.log_q(z)


def score_grad_gaussian(params, z):
    """``(d log q / d mean, d log q / d scale)`` for a single Gaussian."""
    if isinstance(params, CholGaussian):
        return params.score_matrix(np.asarray(z, dtype=np.float64))
    if isinstance(params, DiagGaussian):
        return params.score_parts(np.asarray(z, dtype=np.float64))
    raise TypeError(f"expected a Gaussian family, got {type(params).__name__}")


def mixture_responsibilities(params: MixtureGaussian, z):
    return params.responsibilities(np.asarray(z, dtype=np.float64))


def mixture_grad_z_logq(params: MixtureGaussian, z):
    return params.grad_z_log_q(np.asarray(z, dtype=np.float64))


def mixture_weight_score(params: MixtureGaussian, z, f_value, space="logits"):
    """Score-function contribution ``f * d log q(z)`` w.r.t. the mixture weights.

    ``space="simplex"`` returns ``f * q_k(z) / q(z)``, whose mean under ``q`` is
    ``E_{q_k}[f]``; ``space="logits"`` maps it through the softmax Jacobian,
    which gives ``f * (resp_k(z) - w_k)``.
    """
    resp = params.responsibilities(np.asarray(z, dtype=np.float64))
    f = np.asarray(f_value, dtype=np.float64)[..., None]
    if space == "simplex":
        return f * resp / params.weights
    if space == "logits":
        return f * (resp - params.weights)
    raise ValueError(f"unknown space {space!r}")


# ---------------------------------------------------------------------------
# Dense networks.

ACTIVATIONS = ("relu", "identity", "modified_softplus", "sigmoid")


def _activate(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "identity":
        return a
    if name == "modified_softplus":
        return modified_softplus(a)
    return expit(a)


def _activation_grad(name, a):
    if name == "relu":
        return (a > 0).astype(np.float64)
    if name == "identity":
        return np.ones_like(a)
    if name == "modified_softplus":
        return modified_softplus_grad(a)
    s = expit(a)
    return s * (1.0 - s)


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError("bias size must match layer output size")


@dataclass
class ForwardTrace:
    """Inputs and pre-activations of every layer, recorded by ``DenseNet.forward``."""

    inputs: list
    preacts: list


class DenseNet:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ValueError("consecutive layer sizes do not match")

    @classmethod
    def init(cls, sizes, activations, rng):
        """Uniform(+-1/sqrt(fan_in)) weights and zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append(Layer(rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[1]

    @property
    def n_params(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dimension {x.shape[-1]} != network input {self.in_dim}")
        inputs, preacts = [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            a = h @ layer.weight + layer.bias
            preacts.append(a)
            h = _activate(layer.activation, a)
        return h, ForwardTrace(inputs, preacts)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, trace: ForwardTrace, upstream):
        """Vector-Jacobian product of the network output with ``upstream``.

        Returns per-layer ``(dW, db)`` summed over the batch, and the gradient
        with respect to the network input.
        """
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != trace.preacts[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {trace.preacts[-1].shape}")
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = g * _activation_grad(layer.activation, trace.preacts[i])
            h = trace.inputs[i]
            grads[i] = (h.reshape(-1, h.shape[-1]).T @ g.reshape(-1, g.shape[-1]),
                        g.reshape(-1, g.shape[-1]).sum(axis=0))
            g = g @ layer.weight.T
        return grads, g

    def flat(self):
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    @staticmethod
    def flatten_grads(grads):
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    def with_flat(self, vec):
        layers, start = [], 0
        for l in self.layers:
            nw = l.weight.size
            w = vec[start:start + nw].reshape(l.weight.shape)
            b = vec[start + nw:start + nw + l.bias.size]
            layers.append(Layer(w.copy(), b.copy(), l.activation))
            start += nw + l.bias.size
        return DenseNet(layers)


def net_backward(net: DenseNet, trace: ForwardTrace, upstream):
    return net.backward(trace, upstream)


class AmortizedGaussian:
    """Encoder producing a diagonal Gaussian ``q(z | x)`` from two separate networks."""

    family = "amortized"

    def __init__(self, mean_net: DenseNet, std_net: DenseNet):
        if mean_net.layers[-1].activation != "identity":
            raise ValueError("mean network must have an identity output layer")
        if std_net.layers[-1].activation != "modified_softplus":
            raise ValueError("std network must end in the modified softplus")
        self.mean_net = mean_net
        self.std_net = std_net

    @classmethod
    def init(cls, data_dim, latent_dim, rng, hidden=(32, 32), init_std=1.0):
        sizes = [data_dim, *hidden, latent_dim]
        hid = ["relu"] * len(hidden)
        mean_net = DenseNet.init(sizes, hid + ["identity"], rng)
        std_net = DenseNet.init(sizes, hid + ["modified_softplus"], rng)
        std_net.layers[-1].bias[:] = inverse_modified_softplus(init_std)
        return cls(mean_net, std_net)

    @property
    def latent_dim(self):
        return self.mean_net.out_dim

    def forward(self, x):
        mean, tm = self.mean_net.forward(x)
        std, ts = self.std_net.forward(x)
        return DiagGaussian(mean, std), (tm, ts)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, traces, g_mean, g_std):
        gm, _ = self.mean_net.backward(traces[0], g_mean)
        gs, _ = self.std_net.backward(traces[1], g_std)
        return np.concatenate([DenseNet.flatten_grads(gm), DenseNet.flatten_grads(gs)])

    @property
    def n_params(self):
        return self.mean_net.n_params + self.std_net.n_params

    def flat(self):
        return np.concatenate([self.mean_net.flat(), self.std_net.flat()])

    def with_flat(self, vec):
        n = self.mean_net.n_params
        return AmortizedGaussian(self.mean_net.with_flat(vec[:n]), self.std_net.with_flat(vec[n:]))

    def groups(self):
        return ["mean"] * self.mean_net.n_params + ["scale"] * self.std_net.n_params


def encoder_forward(enc: AmortizedGaussian, x) -> DiagGaussian:
    return enc(x)
