import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from conftest import within_se
from vcd.evaluate import (Grid2D, ProposalSpec, evaluate_marginal_llh, grid_kl, make_proposals,
                          marginal_llh_is)
from vcd.mcmc import KernelConfig
from vcd.targets import ConjugateGaussianModel, gaussian_target
from vcd.variational import DiagGaussian


def _normal_2d(mx, sx, my=0.0, sy=1.0):
    return lambda p: norm.logpdf(p[:, 0], mx, sx) + norm.logpdf(p[:, 1], my, sy)


WIDE_X = Grid2D((-14.0, 14.0), (-7.0, 7.0), (2800, 50))


def test_grid_kl_zero_for_identical_densities():
    lp = gaussian_target().log_density
    assert np.allclose(grid_kl(lp, lp, Grid2D((-6, 6), (-6, 6), (200, 200))), 0.0, atol=1e-6)


def test_grid_kl_one_dimensional_closed_forms():
    kl_pq, kl_qp, sym = grid_kl(_normal_2d(0, 1), _normal_2d(0, 2), WIDE_X)
    assert kl_pq == pytest.approx(np.log(2) + 1 / 8 - 1 / 2, abs=1e-5)
    assert kl_pq == pytest.approx(0.318147, abs=1e-5)
    assert kl_qp == pytest.approx(0.806853, abs=1e-5)
    assert sym == pytest.approx(1.125, abs=1e-5)


def test_grid_kl_renormalizes():
    shifted = lambda p: _normal_2d(0, 2)(p) + 3.0
    np.testing.assert_allclose(grid_kl(_normal_2d(0, 1), shifted, WIDE_X),
                               grid_kl(_normal_2d(0, 1), _normal_2d(0, 2), WIDE_X), atol=1e-10)


def test_grid_kl_rejects_narrow_grid():
    with pytest.raises(ValueError, match="widen"):
        grid_kl(_normal_2d(0, 1), _normal_2d(0, 2), Grid2D((-3, 3), (-6, 6), (100, 100)))


def test_grid_kl_rejects_coarse_grid():
    with pytest.raises(ValueError, match="resolution"):
        grid_kl(_normal_2d(0, 1), _normal_2d(0, 1), Grid2D((-6, 6), (-6, 6), (10, 10)))


def test_grid_kl_rejects_nonfinite_density():
    with pytest.raises(ValueError, match="finite"):
        grid_kl(lambda p: np.full(len(p), np.nan), _normal_2d(0, 1), Grid2D((-6, 6), (-6, 6), (60, 60)))


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(0.6, 1.5), st.floats(-1, 1), st.floats(0.6, 1.5))
def test_grid_kl_non_negative(m1, s1, m2, s2):
    grid = Grid2D((-10, 10), (-10, 10), (120, 120))
    kl_pq, kl_qp, sym = grid_kl(_normal_2d(m1, s1, m2, s2), _normal_2d(m2, s2, m1, s1), grid)
    assert kl_pq >= -1e-9 and kl_qp >= -1e-9
    assert sym == pytest.approx(kl_pq + kl_qp)


def test_grid_points_order_and_area():
    grid = Grid2D((0, 2), (0, 4), (2, 2))
    np.testing.assert_array_equal(grid.points(), [[0.5, 1], [0.5, 3], [1.5, 1], [1.5, 3]])
    assert grid.cell_area == 2.0
    with pytest.raises(ValueError):
        Grid2D((1, 0), (0, 1), (5, 5))


@pytest.fixture
def diagonal_conjugate():
    """Orthogonal loading columns give a diagonal posterior covariance."""
    rng = np.random.default_rng(9)
    basis, _ = np.linalg.qr(rng.normal(size=(6, 3)))
    model = ConjugateGaussianModel(basis * np.array([1.5, 0.7, 2.0]), 0.6)
    x = rng.normal(size=(4, 6))
    exact_q = DiagGaussian(model.posterior_mean(x), np.broadcast_to(np.sqrt(np.diag(model.post_cov)), (4, 3)))
    return model, x, exact_q


def test_is_exact_with_posterior_proposal(diagonal_conjugate):
    model, x, q = diagonal_conjugate
    for s in (1, 7, 500):
        est = marginal_llh_is(model, x, q, s, np.random.default_rng(s))
        np.testing.assert_allclose(est, model.log_marginal(x), atol=1e-10)


def test_is_single_datapoint(diagonal_conjugate):
    model, x, q = diagonal_conjugate
    single = DiagGaussian(q.mean[0], q.std[0])
    assert marginal_llh_is(model, x[0], single, 5, np.random.default_rng(0)) == pytest.approx(
        model.log_marginal(x[0]), abs=1e-10)


def test_is_constant_likelihood_with_prior_proposal():
    class Constant:
        def log_joint(self, x, z):
            return np.log(0.37) + np.sum(norm.logpdf(z), axis=-1)

    prior = DiagGaussian(np.zeros((2, 3)), np.ones((2, 3)))
    est = marginal_llh_is(Constant(), np.zeros((2, 4)), prior, 50, np.random.default_rng(0))
    np.testing.assert_allclose(est, np.log(0.37), atol=1e-12)


def test_is_improves_with_more_samples(diagonal_conjugate):
    model, x, q = diagonal_conjugate
    off = DiagGaussian(q.mean[:1] + 0.8, q.std[:1] * 1.7)
    rng = np.random.default_rng(3)
    small = np.mean([marginal_llh_is(model, x[:1], off, 10, rng)[0] for _ in range(100)])
    large = np.mean([marginal_llh_is(model, x[:1], off, 1000, rng)[0] for _ in range(100)])
    assert small <= large <= model.log_marginal(x[0]) + 0.01


def test_is_rejects_zero_weights():
    class Impossible:
        def log_joint(self, x, z):
            return np.full(z.shape[:-1], -np.inf)

    with pytest.raises(ValueError, match="zero"):
        marginal_llh_is(Impossible(), np.zeros(3), DiagGaussian(np.zeros(2), np.ones(2)), 10,
                        np.random.default_rng(0))
    with pytest.raises(ValueError):
        marginal_llh_is(Impossible(), np.zeros(3), DiagGaussian(np.zeros(2), np.ones(2)), 0,
                        np.random.default_rng(0))


def test_proposals_with_exact_posterior_recover_marginal(diagonal_conjugate):
    model, x, q = diagonal_conjugate
    kernel = KernelConfig(1, 5, 0.3)
    proposals = make_proposals(model, x, q, kernel, np.random.default_rng(4))
    assert len(proposals) == 3
    np.testing.assert_allclose(proposals[0].std, 1.2 * q.std)
    np.testing.assert_allclose(proposals[1].std, 1.2 * q.std)
    np.testing.assert_allclose(proposals[1].mean, proposals[2].mean)
    assert np.max(np.abs(proposals[1].mean - q.mean) / q.std) < 0.5
    rng = np.random.default_rng(5)
    for r in proposals:
        reps = np.stack([marginal_llh_is(model, x, r, 2000, rng) for _ in range(20)])
        assert within_se(reps, model.log_marginal(x), 3)[0]


def test_proposal_defaults():
    spec = ProposalSpec()
    assert (spec.inflation, spec.hmc_total, spec.hmc_keep) == (1.2, 600, 300)
    with pytest.raises(ValueError):
        ProposalSpec(inflation=1.0)
    with pytest.raises(ValueError):
        ProposalSpec(hmc_total=10, hmc_keep=20)


def test_max_over_proposals(diagonal_conjugate):
    model, x, q = diagonal_conjugate
    off = DiagGaussian(q.mean + 0.5, q.std * 0.8)
    res = evaluate_marginal_llh(model, lambda rows: off, x, KernelConfig(1, 5, 0.3),
                                np.random.default_rng(6), 200, ProposalSpec(hmc_total=60, hmc_keep=30))
    assert res.per_proposal.shape == (3, 4)
    np.testing.assert_array_equal(res.best, res.per_proposal.max(axis=0))
    assert np.all(res.best >= res.per_proposal)
    assert res.mean == pytest.approx(res.best.mean())


def test_degenerate_chain_falls_back_to_first_proposal(diagonal_conjugate, caplog):
    model, x, q = diagonal_conjugate
    proposals = make_proposals(model, x, q, KernelConfig(1, 5, 0.0), np.random.default_rng(0),
                               ProposalSpec(hmc_total=10, hmc_keep=5))
    assert "degenerate" in caplog.text
    np.testing.assert_allclose(proposals[2].std, proposals[0].std)
