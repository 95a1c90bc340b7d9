import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, rel_err, within_se
from oracles import DiscreteHarness, conjugate_elbo, conjugate_elbo_grad, gaussian_kl
from vcd.divergence import (ControlVariateState, ObjectiveMode, cv_update, estimate_vcd,
                            estimate_vcd_samples, gaussian_log_normalizer, grad_elbo_reparam,
                            grad_elbo_score, grad_improved_term, instantaneous_elbo,
                            simplified_integrand, vcd_gradient)
from vcd.mcmc import (DiscreteMHKernel, DiscreteTarget, ExactSampler, HMCKernel, KernelConfig,
                      discrete_kl, propagate)
from vcd.targets import ConjugateGaussianModel, gaussian_target, mixture_target
from vcd.variational import Categorical, CholGaussian, DiagGaussian, MixtureGaussian


@pytest.fixture
def conjugate():
    rng = np.random.default_rng(21)
    a = rng.normal(size=(4, 2))
    model = ConjugateGaussianModel(a, 0.8)
    x = rng.normal(size=4)
    return a, 0.8, x, model.posterior(x)


# --- instantaneous ELBO ------------------------------------------------------------


def test_f_constant_at_exact_posterior(conjugate):
    _, _, _, post = conjugate
    q = CholGaussian(post.mean, post.chol)
    z = np.random.default_rng(0).normal(size=(10, 2)) * 3
    f = instantaneous_elbo(post, q, z)
    assert np.ptp(f) < 1e-10
    assert f[0] == pytest.approx(post.log_evidence, abs=1e-10)


@pytest.mark.parametrize("family", [DiagGaussian(np.array([0.2, -0.1]), np.array([0.7, 1.3])),
                                    CholGaussian(np.array([0.3, 0.0]), np.array([[0.9, 0.0], [0.4, 0.5]]))])
def test_f_and_simplified_integrand_differ_by_log_normalizer(family):
    target = gaussian_target()
    z = np.random.default_rng(1).normal(size=(10, 2))
    diff = simplified_integrand(target, family, z) - instantaneous_elbo(target, family, z)
    cov = family.covariance()
    expected = -np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(cov)[1]
    np.testing.assert_allclose(diff, expected, atol=1e-12)
    assert gaussian_log_normalizer(family) == pytest.approx(expected, abs=1e-12)


def test_f_matches_recomputation(rng):
    from scipy.stats import multivariate_normal
    q = CholGaussian(np.array([0.5, -0.3]), np.array([[1.1, 0.0], [-0.2, 0.6]]))
    z = rng.normal(size=(20, 2))
    expected = (multivariate_normal(np.zeros(2), [[1, 0.95], [0.95, 1]]).logpdf(z)
                - multivariate_normal(q.mean, q.covariance()).logpdf(z))
    np.testing.assert_allclose(instantaneous_elbo(gaussian_target(), q, z), expected, atol=1e-12)


def test_f_rejects_nonfinite():
    with pytest.raises(ValueError):
        instantaneous_elbo(gaussian_target(), DiagGaussian(np.zeros(2), np.ones(2)), np.array([np.nan, 1.0]))


# --- divergence estimate ---------------------------------------------------------


@pytest.mark.parametrize("t", [1, 3])
def test_vcd_zero_at_exact_posterior(conjugate, t):
    _, _, _, post = conjugate
    q = CholGaussian(post.mean, post.chol)
    est = estimate_vcd_samples(post, q, HMCKernel(KernelConfig(t, 5, 0.2)), 10_000, np.random.default_rng(t))
    assert within_se(est, 0.0, 3)[0]


def test_vcd_with_exact_sampler_is_symmetrized_kl():
    target = gaussian_target()
    q = DiagGaussian(np.zeros(2), np.full(2, 0.5))
    est = estimate_vcd_samples(target, q, ExactSampler(), 100_000, np.random.default_rng(2))
    sigma = np.array([[1, 0.95], [0.95, 1]])
    sym = gaussian_kl(q.mean, q.covariance(), np.zeros(2), sigma) + gaussian_kl(np.zeros(2), sigma, q.mean, q.covariance())
    assert within_se(est, sym, 3)[0]


def test_vcd_non_negative_on_mixture_target():
    rng = np.random.default_rng(3)
    for _ in range(5):
        q = DiagGaussian(rng.uniform(-2, 2, 2), rng.uniform(0.3, 2.0, 2))
        est = estimate_vcd_samples(mixture_target(), q, HMCKernel(KernelConfig(5, 5, 0.1)), 4000, rng)
        mean, se = est.mean(), est.std(ddof=1) / np.sqrt(len(est))
        assert mean >= -3 * se


def test_estimate_vcd_requires_samples():
    with pytest.raises(ValueError):
        estimate_vcd(gaussian_target(), DiagGaussian(np.zeros(2), np.ones(2)), ExactSampler(), 0,
                     np.random.default_rng(0))


@pytest.mark.parametrize("seed", [0, 1])
def test_vcd_expectation_matches_kl_decomposition(seed):
    h = DiscreteHarness(seed)
    t = 3
    q = h.probs(h.logits)
    qt = propagate(q, h.trans, t)
    exact = discrete_kl(q, h.p) - discrete_kl(qt, h.p) + discrete_kl(qt, q)
    assert h.e_qt_f(h.logits, t) - h.e_q_f(h.logits) == pytest.approx(exact, abs=1e-12)
    est = estimate_vcd_samples(DiscreteTarget(h.log_p_tilde), Categorical(h.logits),
                               DiscreteMHKernel(h.trans, t), 100_000, np.random.default_rng(seed))
    assert within_se(est, exact, 4)[0]


# --- first-term gradient ----------------------------------------------------------


def test_closed_form_conjugate_gradient_matches_finite_differences(conjugate):
    a, s, x, _ = conjugate
    mean = np.array([0.3, -0.5])
    chol = np.array([[0.8, 0.0], [0.3, 1.1]])
    g_mean, g_chol = conjugate_elbo_grad(a, s, x, mean, chol)
    fd_mean = central_diff(lambda m: conjugate_elbo(a, s, x, m, chol), mean, h=1e-6)
    tril = np.tril_indices(2)

    def from_tril(v):
        c = np.zeros((2, 2))
        c[tril] = v
        return conjugate_elbo(a, s, x, mean, c)

    fd_chol = central_diff(from_tril, chol[tril], h=1e-6)
    assert rel_err(g_mean, fd_mean) < 1e-6
    assert rel_err(g_chol[tril], fd_chol) < 1e-6


@pytest.mark.parametrize("kind", ["diag", "chol"])
def test_reparam_gradient_unbiased_on_conjugate_model(conjugate, kind):
    a, s, x, post = conjugate
    mean = np.array([0.3, -0.5])
    if kind == "diag":
        q = DiagGaussian(mean, np.array([0.8, 1.1]))
        chol = np.diag(q.std)
    else:
        chol = np.array([[0.8, 0.0], [0.3, 1.1]])
        q = CholGaussian(mean, chol)
    g_mean, g_chol = conjugate_elbo_grad(a, s, x, mean, chol)
    exact = np.concatenate([g_mean, np.diag(g_chol) if kind == "diag" else g_chol[np.tril_indices(2)]])
    est = grad_elbo_reparam(post, q, q.sample(np.random.default_rng(4), 100_000))
    assert within_se(est.per_sample, exact, 4)[0]


def test_reparam_gradient_zero_at_exact_posterior(conjugate):
    _, _, _, post = conjugate
    q = CholGaussian(post.mean, post.chol)
    est = grad_elbo_reparam(post, q, q.sample(np.random.default_rng(5), 100_000))
    assert within_se(est.per_sample, 0.0, 3)[0]


def test_reparam_gradient_ignores_constants_in_log_density(rng):
    class Shifted:
        def __init__(self, base, c):
            self.base, self.c = base, c

        def log_density(self, z):
            return self.base.log_density(z) + self.c

        def grad_log_density(self, z):
            return self.base.grad_log_density(z)

    q = DiagGaussian(np.array([0.1, 0.2]), np.array([0.5, 0.9]))
    draw = q.sample(rng, 100)
    base = grad_elbo_reparam(gaussian_target(), q, draw).per_sample
    shifted = grad_elbo_reparam(Shifted(gaussian_target(), 123.4), q, draw).per_sample
    np.testing.assert_array_equal(base, shifted)


def test_mixture_reparam_gradient_unbiased():
    """Mixture pathwise + weight-score estimator against a quadrature ELBO."""
    target = gaussian_target()
    q = MixtureGaussian([DiagGaussian(np.array([-0.6, -0.4]), np.array([0.6, 0.5])),
                         DiagGaussian(np.array([0.7, 0.5]), np.array([0.5, 0.7]))], np.array([0.3, -0.1]))
    xs = np.linspace(-7, 7, 401)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], -1)
    lp = target.log_density(pts)
    area = (xs[1] - xs[0]) ** 2

    def elbo(v):
        lq = q.with_flat(v).log_q(pts)
        return float(np.sum(np.exp(lq) * (lp - lq)) * area)

    exact = central_diff(elbo, q.flat(), h=1e-5)
    est = grad_elbo_reparam(target, q, q.sample(np.random.default_rng(6), 100_000))
    assert within_se(est.per_sample, exact, 4)[0]


def test_reparam_rejects_discrete_family():
    with pytest.raises(TypeError, match="grad_elbo_score"):
        grad_elbo_reparam(DiscreteTarget(np.zeros(3)), Categorical(np.zeros(3)), None)


# --- improved-term gradient -------------------------------------------------------


@pytest.mark.parametrize("t", [1, 3])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_discrete_gradients_unbiased(t, seed):
    h = DiscreteHarness(seed)
    target, q = DiscreteTarget(h.log_p_tilde), Categorical(h.logits)
    rng = np.random.default_rng(100 + seed)
    z0 = q.sample(rng, 100_000)
    zt = DiscreteMHKernel(h.trans, t).improve(target, z0.z, rng).z
    term2 = grad_improved_term(target, q, z0.z, zt)
    assert within_se(term2.per_sample, h.grad(lambda l: h.e_qt_f(l, t)), 4)[0]
    term1 = grad_elbo_score(target, q, z0)
    assert within_se(term1.per_sample, h.grad(h.e_q_f), 4)[0]


def test_improved_term_with_exact_sampler(rng):
    target = gaussian_target()
    q = DiagGaussian(np.array([0.3, -0.2]), np.array([0.6, 0.8]))
    draw = q.sample(rng, 200_000)
    zt = target.sample(rng, 200_000)
    rows = grad_improved_term(target, q, draw.z, zt).per_sample
    score_factor = instantaneous_elbo(target, q, zt)[:, None] * q.score(draw.z)
    assert within_se(score_factor, 0.0, 4)[0]
    mu, s = q.mean, q.std
    exact_score = np.concatenate([(0 - mu) / s**2, -1 / s + (1 + mu**2) / s**3])
    assert within_se(rows, -exact_score, 4)[0]


@pytest.mark.parametrize("c", [-5.0, 3.0, 40.0])
def test_constant_baseline_keeps_mean(c):
    target = gaussian_target()
    q = DiagGaussian(np.array([0.3, -0.2]), np.array([0.6, 0.8]))
    rng = np.random.default_rng(7)
    draw = q.sample(rng, 50_000)
    zt = HMCKernel(KernelConfig(3, 5, 0.1)).improve(target, draw.z, rng).z
    base = grad_improved_term(target, q, draw.z, zt).per_sample
    with_c = grad_improved_term(target, q, draw.z, zt, ControlVariateState(local_switch_iteration=None, global_C=c)).per_sample
    assert within_se(with_c - base, 0.0, 4)[0]


# --- mode composition --------------------------------------------------------------


def _grad(mode, seed, family=None, kernel=None, cv=None):
    family = family or DiagGaussian(np.array([0.3, -0.2]), np.array([0.6, 0.8]))
    kernel = kernel or HMCKernel(KernelConfig(3, 5, 0.1))
    return vcd_gradient(mode, gaussian_target(), family, kernel, np.random.default_rng(seed), cv=cv, n_samples=64)


@pytest.mark.parametrize("seed", range(3))
def test_alpha_zero_bit_identical_to_standard_kl(seed):
    a = _grad(ObjectiveMode("vcd", 0.0), seed)
    b = _grad(ObjectiveMode("standard_kl"), seed)
    np.testing.assert_array_equal(a.grad, b.grad)
    assert a.grad.tobytes() == b.grad.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_alpha_one_is_term2_minus_term1(seed):
    family = DiagGaussian(np.array([0.3, -0.2]), np.array([0.6, 0.8]))
    kernel = HMCKernel(KernelConfig(3, 5, 0.1))
    cv = ControlVariateState(local_switch_iteration=None, global_C=1.5)
    got = _grad(ObjectiveMode("vcd", 1.0), seed, family, kernel, cv)
    rng = np.random.default_rng(seed)
    draw = family.sample(rng, 64)
    t1 = grad_elbo_reparam(gaussian_target(), family, draw)
    zt = kernel.improve(gaussian_target(), draw.z, rng).z
    t2 = grad_improved_term(gaussian_target(), family, draw.z, zt, cv)
    np.testing.assert_allclose(got.grad, t2.grad - t1.grad, atol=1e-12)
    np.testing.assert_allclose(got.per_sample, t2.per_sample - t1.per_sample, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_hoffman_theta_gradient_equals_standard_kl(seed):
    a = _grad(ObjectiveMode("hoffman2017"), seed)
    b = _grad(ObjectiveMode("standard_kl"), seed)
    np.testing.assert_array_equal(a.grad, b.grad)
    assert "z_t" in a.diagnostics and "z_t" not in b.diagnostics


def test_alpha_objective_identity_on_discrete_oracle():
    h = DiscreteHarness(3)
    t, alpha = 2, 0.4
    q = h.probs(h.logits)
    qt = propagate(q, h.trans, t)
    kl_form = discrete_kl(q, h.p) + alpha * (discrete_kl(qt, q) - discrete_kl(qt, h.p))
    objective = lambda l: -h.e_q_f(l) + alpha * h.e_qt_f(l, t)
    assert objective(h.logits) + (1 - alpha) * h.log_z == pytest.approx(kl_form, abs=1e-12)
    est = vcd_gradient(ObjectiveMode("vcd", alpha), DiscreteTarget(h.log_p_tilde), Categorical(h.logits),
                       DiscreteMHKernel(h.trans, t), np.random.default_rng(0), n_samples=200_000)
    assert within_se(est.per_sample, h.grad(objective), 4)[0]
    vals = alpha * est.diagnostics["f_zt"] - est.diagnostics["f_z0"]
    assert est.objective_value == pytest.approx(vals.mean())
    assert within_se(vals, objective(h.logits), 4)[0]


def test_mode_validation():
    with pytest.raises(ValueError):
        ObjectiveMode("vcd", 1.5)
    with pytest.raises(ValueError):
        ObjectiveMode("reverse_kl")


# --- control variates -------------------------------------------------------------


def test_cv_update_formula():
    cv = cv_update(ControlVariateState(), 2.0, iteration=0)
    assert cv.global_C == pytest.approx(0.2)
    assert ControlVariateState().gamma == 0.9
    assert ControlVariateState().local_switch_iteration == 3000


def test_cv_global_then_local_phase():
    cv = ControlVariateState(gamma=0.5, local_switch_iteration=2)
    cv = cv_update(cv, np.array([1.0, 3.0]), 0, indices=[0, 1])
    assert cv.global_C == 1.0 and cv.local_C == {}
    cv = cv_update(cv, np.array([5.0]), 1, indices=[4])
    assert cv.global_C == 3.0
    cv = cv_update(cv, np.array([7.0, -1.0]), 2, indices=[4, 9])
    assert cv.global_C == 3.0
    assert cv.local_C == {4: 5.0, 9: 1.0}
    np.testing.assert_array_equal(cv.baseline([4, 9, 11], 2), [5.0, 1.0, 3.0])
    assert cv.baseline([4], 1) == 3.0


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(0.01, 0.99))
def test_cv_stays_within_range_of_inputs(values, gamma):
    cv = ControlVariateState(gamma=gamma, local_switch_iteration=None)
    for i, v in enumerate(values):
        cv = cv_update(cv, v, i)
    lo, hi = min(0.0, *values), max(0.0, *values)
    assert lo - 1e-6 <= cv.global_C <= hi + 1e-6


def test_cv_validation():
    with pytest.raises(ValueError):
        ControlVariateState(gamma=1.0)


def test_control_variate_effective_on_unnormalized_posterior():
    """Where f sits far from zero (an LVM posterior), a constant baseline pays off."""
    from vcd.targets import LogisticMF, PosteriorTarget

    rng = np.random.default_rng(13)
    model = LogisticMF.init(20, 3, rng, scale=0.5)
    x = np.repeat((rng.random((1, 20)) < 0.5).astype(float), 20_000, axis=0)
    q = DiagGaussian(np.full((20_000, 3), 0.1), np.full((20_000, 3), 0.7))
    target = PosteriorTarget(model, x)
    kernel = HMCKernel(KernelConfig(3, 5, 0.1))
    pilot = q.sample(rng)
    c = instantaneous_elbo(target, q, kernel.improve(target, pilot.z, rng).z).mean()
    draw = q.sample(rng)
    z_t = kernel.improve(target, draw.z, rng).z
    plain = grad_improved_term(target, q, draw.z, z_t).per_sample
    with_cv = grad_improved_term(target, q, draw.z, z_t,
                                 ControlVariateState(local_switch_iteration=None, global_C=c)).per_sample
    assert c < -5
    assert with_cv.var(0).sum() < 0.5 * plain.var(0).sum()
    assert within_se(with_cv - plain, 0.0, 4)[0]
