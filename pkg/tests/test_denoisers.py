import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from mpforge.denoisers import (ChannelSpec, PriorSpec, denoise_output, denoise_prior, finite_difference_divergence,
                               joint_lmmse_denoise, lmmse_denoise, output_posterior, prior_posterior)
from mpforge.ensembles import MatrixFactorization, SingularValueLaw, identity_factorization, sample_rri_matrix
from mpforge.errors import InvalidConfig, InvalidDimension, InvalidParameter

PRIORS = [PriorSpec.gaussian(1.0), PriorSpec.bernoulli_gaussian(0.1), PriorSpec.bernoulli_gaussian(0.5, 2.0),
          PriorSpec.grid(lambda x: 0.5 * stats.laplace.pdf(x) + 0.5 * stats.norm.pdf(x, 1.0, 0.5))]
CHANNELS = [ChannelSpec.awgn(0.5), ChannelSpec.probit(0.1), ChannelSpec.probit(1.0)]


def posterior_by_quadrature(r, gamma, prior):
    """Posterior mean and variance of X given X + N(0, 1/gamma) = r by scipy quadrature."""
    lik = lambda x: stats.norm.pdf(r, x, 1 / np.sqrt(gamma))
    slab = lambda x: stats.norm.pdf(x, 0, np.sqrt(prior.tau_x))
    w = prior.rho
    z = (1 - w) * lik(0.0) + w * integrate.quad(lambda x: slab(x) * lik(x), -30, 30, epsabs=1e-14)[0]
    m1 = w * integrate.quad(lambda x: x * slab(x) * lik(x), -30, 30, epsabs=1e-14)[0] / z
    m2 = w * integrate.quad(lambda x: x * x * slab(x) * lik(x), -30, 30, epsabs=1e-14)[0] / z
    return m1, m2 - m1 * m1


def test_gaussian_prior_example():
    out = denoise_prior(np.array([2.0]), 1.0, PriorSpec.gaussian(1.0))
    assert out.value[0] == pytest.approx(1.0, abs=1e-15)
    assert out.divergence == pytest.approx(0.5, abs=1e-15)


def test_gaussian_prior_large_precision_keeps_input():
    r = np.array([0.3, -1.2])
    out = denoise_prior(r, 1e8, PriorSpec.gaussian(1.0))
    assert np.allclose(out.value, r, rtol=1.0 / (1e8 + 1) * 1.01)


def test_bernoulli_gaussian_at_origin_matches_quadrature():
    prior = PriorSpec.bernoulli_gaussian(0.1, 1.0)
    out = denoise_prior(np.array([0.0]), 4.0, prior)
    mean, var = posterior_by_quadrature(0.0, 4.0, prior)
    assert out.value[0] == 0.0
    assert out.divergence == pytest.approx(4.0 * var, abs=1e-8)
    assert mean == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("r", [-3.0, -0.4, 0.7, 2.5])
def test_bernoulli_gaussian_mean_matches_quadrature(r):
    prior = PriorSpec.bernoulli_gaussian(0.2, 1.5)
    val, der = prior_posterior(np.array([r]), 2.0, prior)
    mean, var = posterior_by_quadrature(r, 2.0, prior)
    assert val[0] == pytest.approx(mean, abs=1e-9)
    assert der[0] == pytest.approx(2.0 * var, abs=1e-8)


def test_grid_prior_reproduces_gaussian():
    grid = PriorSpec.grid(lambda x: stats.norm.pdf(x))
    r = np.linspace(-3, 3, 11)
    g_val, g_der = prior_posterior(r, 2.0, grid)
    e_val, e_der = prior_posterior(r, 2.0, PriorSpec.gaussian())
    assert np.max(np.abs(g_val - e_val)) < 1e-6
    assert np.max(np.abs(g_der - e_der)) < 1e-6


def test_grid_density_must_integrate_to_one():
    with pytest.raises(InvalidConfig):
        PriorSpec.grid(lambda x: 2 * stats.norm.pdf(x), normalize=False)


@pytest.mark.parametrize("kwargs", [dict(kind="gaussian", tau_x=0.0), dict(kind="bernoulli-gaussian", rho=0.0),
                                    dict(kind="bernoulli-gaussian", rho=1.5), dict(kind="laplace")])
def test_prior_validation(kwargs):
    with pytest.raises(InvalidConfig):
        PriorSpec(**kwargs)


def test_channel_validation():
    with pytest.raises(InvalidConfig):
        ChannelSpec.awgn(0.0)
    with pytest.raises(InvalidConfig):
        ChannelSpec("logit", 1.0)


def test_nonpositive_precision_rejected():
    with pytest.raises(InvalidParameter):
        denoise_prior(np.ones(3), 0.0, PriorSpec.gaussian())
    with pytest.raises(InvalidParameter):
        denoise_output(np.ones(3), -1.0, np.ones(3), ChannelSpec.awgn(1.0))


def test_awgn_output_example():
    out = denoise_output(np.array([0.0]), 1.0, np.array([2.0]), ChannelSpec.awgn(1.0))
    assert out.value[0] == pytest.approx(1.0, abs=1e-15)
    assert out.divergence == pytest.approx(0.5, abs=1e-15)


def test_awgn_agreeing_sources():
    p = np.array([0.3, -2.0, 5.0])
    out = denoise_output(p, 3.0, p, ChannelSpec.awgn(0.2))
    assert np.allclose(out.value, p, atol=1e-14)


@pytest.mark.parametrize("p,y,tau1,tau_w", [(0.0, 1.0, 1.0, 1.0), (1.3, -1.0, 2.0, 0.1), (-8.0, 1.0, 1.0, 0.01)])
def test_probit_matches_quadrature(p, y, tau1, tau_w):
    sd = 1 / np.sqrt(tau1)
    lik = lambda z: stats.norm.cdf(y * z / np.sqrt(tau_w)) * stats.norm.pdf(z, p, sd)
    lo, hi = p - 12 * sd, p + 12 * sd
    z0 = integrate.quad(lik, lo, hi, epsabs=0, epsrel=1e-13, limit=200)[0]
    m1 = integrate.quad(lambda z: z * lik(z), lo, hi, epsabs=0, epsrel=1e-13, limit=200)[0] / z0
    m2 = integrate.quad(lambda z: z * z * lik(z), lo, hi, epsabs=0, epsrel=1e-13, limit=200)[0] / z0
    out = denoise_output(np.array([p]), tau1, np.array([y]), ChannelSpec.probit(tau_w))
    assert out.value[0] == pytest.approx(m1, abs=1e-8)
    assert out.divergence == pytest.approx(tau1 * (m2 - m1 * m1), abs=1e-7)
    assert 0 < out.divergence < 1


def test_probit_extreme_arguments_are_finite():
    p = np.array([-40.0, 40.0, -1e3])
    val, der = output_posterior(p, 1.0, np.ones(3), ChannelSpec.probit(0.01))
    assert np.all(np.isfinite(val)) and np.all(np.isfinite(der))
    assert np.all((der >= 0) & (der <= 1))


def test_output_dimension_mismatch():
    with pytest.raises(InvalidDimension):
        denoise_output(np.zeros(3), 1.0, np.ones(2), ChannelSpec.awgn(1.0))


# -- analytic divergence against finite differences --------------------------------


@pytest.mark.parametrize("prior", PRIORS, ids=["gauss", "bg01", "bg05", "grid"])
def test_prior_divergence_matches_finite_difference(prior, rng):
    r = rng.standard_normal(100) * 2.0
    out = denoise_prior(r, 1.7, prior)
    fd = finite_difference_divergence(lambda x: denoise_prior(x, 1.7, prior).value, r, 1e-5, separable=True)
    assert abs(out.divergence - fd) < 1e-5


@pytest.mark.parametrize("channel", CHANNELS, ids=["awgn", "probit01", "probit1"])
def test_output_divergence_matches_finite_difference(channel, rng):
    p = rng.standard_normal(100) * 2.0
    z = rng.standard_normal(100) * 2.0
    y = channel.observe(z, channel.sample_noise(100, rng))
    out = denoise_output(p, 0.8, y, channel)
    fd = finite_difference_divergence(lambda x: denoise_output(x, 0.8, y, channel).value, p, 1e-5, separable=True)
    assert abs(out.divergence - fd) < 1e-5


def test_finite_difference_of_linear_map(rng):
    x = rng.standard_normal(10)
    for h in (1e-2, 1e-5, 1.0):
        assert abs(finite_difference_divergence(lambda v: 0.37 * v, x, h) - 0.37) < 1e-12


def test_finite_difference_gaussian_self_consistency(rng):
    x = rng.standard_normal(50)
    prior = PriorSpec.gaussian(2.0)
    fd = finite_difference_divergence(lambda v: denoise_prior(v, 0.5, prior).value, x, 1e-5)
    assert abs(fd - denoise_prior(x, 0.5, prior).divergence) < 1e-6


def test_lmmse_divergence_matches_finite_difference(rng):
    fac = sample_rri_matrix(12, 20, rng=rng)
    y = rng.standard_normal(12)
    r = rng.standard_normal(20)
    out = lmmse_denoise(r, 0.7, fac, y, 3.0)
    fd = finite_difference_divergence(lambda v: lmmse_denoise(v, 0.7, fac, y, 3.0).value, r, 1e-5)
    assert abs(out.divergence - fd) < 1e-5


def test_joint_lmmse_divergences_match_finite_difference(rng):
    fac = sample_rri_matrix(12, 20, rng=rng)
    r, p = rng.standard_normal(20), rng.standard_normal(12)
    out = joint_lmmse_denoise(r, p, 0.9, 2.5, fac)
    fd_x = finite_difference_divergence(lambda v: joint_lmmse_denoise(v, p, 0.9, 2.5, fac).x_hat, r, 1e-5)
    fd_z = finite_difference_divergence(lambda v: joint_lmmse_denoise(r, v, 0.9, 2.5, fac).z_hat, p, 1e-5)
    assert abs(out.alpha2 - fd_x) < 1e-5
    assert abs(out.beta2 - fd_z) < 1e-5


# -- linear denoisers --------------------------------------------------------------


def test_lmmse_scalar_example():
    out = lmmse_denoise(np.array([1.0]), 1.0, identity_factorization(1), np.array([2.0]), 1.0)
    assert out.value[0] == pytest.approx(1.5, abs=1e-15)
    assert out.divergence == pytest.approx(0.5, abs=1e-15)


def test_lmmse_prior_dominates_at_large_precision(rng):
    fac = sample_rri_matrix(5, 8, rng=rng)
    r = rng.standard_normal(8)
    out = lmmse_denoise(r, 1e8, fac, rng.standard_normal(5) * 100, 1.0)
    assert np.max(np.abs(out.value - r)) < 1e-3


@pytest.mark.parametrize("shape", [(8, 16), (32, 64), (20, 20)])
def test_lmmse_matches_dense_solve(shape, rng):
    m, n = shape
    fac = sample_rri_matrix(m, n, rng=rng)
    a = fac.dense()
    r, y = rng.standard_normal(n), rng.standard_normal(m)
    gw, g2 = 4.0, 0.6
    h = gw * a.T @ a + g2 * np.eye(n)
    x = np.linalg.solve(h, gw * a.T @ y + g2 * r)
    out = lmmse_denoise(r, g2, fac, y, gw)
    assert np.max(np.abs(out.value - x)) < 1e-10
    assert out.divergence == pytest.approx(g2 * np.trace(np.linalg.inv(h)) / n, abs=1e-12)


def test_lmmse_thin_equals_full(rng):
    full = sample_rri_matrix(6, 15, rng=np.random.default_rng(3))
    thin = MatrixFactorization(full.u, full.s, full.v[:, :6])
    r, y = rng.standard_normal(15), rng.standard_normal(6)
    a, b = lmmse_denoise(r, 1.1, full, y, 2.0), lmmse_denoise(r, 1.1, thin, y, 2.0)
    assert np.max(np.abs(a.value - b.value)) < 1e-12 and a.divergence == pytest.approx(b.divergence, abs=1e-15)


def test_joint_scalar_example():
    fac = MatrixFactorization(np.eye(1), np.ones(1), np.eye(1))
    out = joint_lmmse_denoise(np.array([0.0]), np.array([2.0]), 1.0, 1.0, fac)
    assert out.x_hat[0] == pytest.approx(1.0, abs=1e-15)
    assert out.alpha2 == pytest.approx(0.5) and out.beta2 == pytest.approx(0.5)


def test_joint_zero_singular_values(rng):
    fac = sample_rri_matrix(4, 9, SingularValueLaw.constant(0.0, s_max=1.0), rng=rng)
    r = rng.standard_normal(9)
    out = joint_lmmse_denoise(r, rng.standard_normal(4), 2.0, 3.0, fac)
    assert np.array_equal(out.x_hat, r) or np.max(np.abs(out.x_hat - r)) == 0.0
    assert out.beta2 == 0.0


@pytest.mark.parametrize("shape", [(8, 16), (32, 64)])
def test_joint_matches_dense(shape, rng):
    m, n = shape
    fac = sample_rri_matrix(m, n, rng=rng)
    a = fac.dense()
    r, p = rng.standard_normal(n), rng.standard_normal(m)
    g2, t2 = 0.8, 3.0
    h = t2 * a.T @ a + g2 * np.eye(n)
    x = np.linalg.solve(h, t2 * a.T @ p + g2 * r)
    out = joint_lmmse_denoise(r, p, g2, t2, fac)
    assert np.max(np.abs(out.x_hat - x)) < 1e-10
    assert np.max(np.abs(out.z_hat - a @ x)) < 1e-10
    assert out.alpha2 * n + out.beta2 * m == pytest.approx(n, abs=1e-10)


# -- structural properties ---------------------------------------------------------


@given(seed=st.integers(0, 2**32), which=st.integers(0, len(PRIORS) - 1))
def test_prior_denoiser_is_separable(seed, which):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(17) * 3
    perm = rng.permutation(17)
    prior = PRIORS[which]
    assert np.array_equal(denoise_prior(r, 1.3, prior).value[perm], denoise_prior(r[perm], 1.3, prior).value)


@given(seed=st.integers(0, 2**32), which=st.integers(0, len(CHANNELS) - 1))
def test_output_denoiser_is_separable(seed, which):
    rng = np.random.default_rng(seed)
    ch = CHANNELS[which]
    p = rng.standard_normal(13)
    y = ch.observe(rng.standard_normal(13), ch.sample_noise(13, rng))
    perm = rng.permutation(13)
    a = denoise_output(p, 0.9, y, ch).value[perm]
    b = denoise_output(p[perm], 0.9, y[perm], ch).value
    assert np.array_equal(a, b)


@given(seed=st.integers(0, 2**32))
def test_log_concave_denoisers_are_non_expansive(seed):
    rng = np.random.default_rng(seed)
    r, r2 = rng.standard_normal(30) * 3, rng.standard_normal(30) * 3
    g = lambda x: denoise_prior(x, 2.0, PriorSpec.gaussian(1.5)).value
    assert np.linalg.norm(g(r) - g(r2)) <= np.linalg.norm(r - r2) + 1e-12
    y = np.sign(rng.standard_normal(30))
    h = lambda x: denoise_output(x, 1.0, y, ChannelSpec.probit(0.3)).value
    assert np.linalg.norm(h(r) - h(r2)) <= np.linalg.norm(r - r2) + 1e-12


def test_prior_sampling_moments():
    rng = np.random.default_rng(0)
    x = PriorSpec.bernoulli_gaussian(0.2, 2.0).sample(200_000, rng)
    assert abs(np.mean(x != 0) - 0.2) < 0.005
    assert abs(np.mean(x * x) - 0.4) < 0.01
    assert PriorSpec.bernoulli_gaussian(0.2, 2.0).second_moment == pytest.approx(0.4)


def test_probit_observation_maps_zero_to_plus_one():
    y = ChannelSpec.probit(1.0).observe(np.array([0.0, -1.0, 2.0]), np.zeros(3))
    assert np.array_equal(y, [1.0, -1.0, 1.0])
