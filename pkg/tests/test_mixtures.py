import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from conftest import conditional_expectation_1d, control_terms_1d, mixture_pdf_1d, quad, tilt_oracle_1d
from diffblend.mixtures import (GaussianMixture, TiltDivergenceError, control_approx, control_exact,
                                exact_finetuned_drift, marginal_at, posterior_mean, posterior_x0_given_xt,
                                pretrained_drift, score, tilt, tilt_linear, tilt_quadratic)
from diffblend.rewards import RewardSpec
from diffblend.sde import DomainError, RandomSource, SampleBatch, TimeGrid, euler_maruyama_reverse, forward_perturb


def t_for(schedule, abar):
    return schedule.time_for_alpha_bar(abar)


def random_mixture(gen, K, d):
    w = gen.dirichlet(np.ones(K))
    mu = gen.normal(0, 2, size=(K, d))
    covs = []
    for _ in range(K):
        B = gen.normal(size=(d, d))
        covs.append(B @ B.T + 0.3 * np.eye(d))
    return GaussianMixture(w, mu, np.array(covs))


# -- construction -------------------------------------------------------------

def test_invalid_mixtures_rejected():
    with pytest.raises(ValueError):
        GaussianMixture([0.6, 0.6], [[0.0], [1.0]], [1.0, 1.0])
    with pytest.raises(ValueError):
        GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]])
    with pytest.raises(ValueError):
        GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 0.5], [0.0, 1.0]]])


def test_json_round_trip(rng):
    m = random_mixture(rng, 3, 2)
    assert GaussianMixture.from_json(m.to_json()).allclose(m, atol=0.0)


# -- marginals ------------------------------------------------------------------

def test_marginal_at_zero_is_prior(schedule, bimodal):
    assert marginal_at(bimodal, schedule, 0.0).allclose(bimodal)


def test_standard_normal_is_stationary(schedule, std_normal):
    for t in (0.1, 0.5, 1.0):
        m = marginal_at(std_normal, schedule, t)
        assert m.means[0, 0] == pytest.approx(0.0, abs=1e-15)
        assert m.covariances[0, 0, 0] == pytest.approx(1.0, abs=1e-14)


def test_marginal_shift_example_against_forward_noising(schedule, rng):
    prior = GaussianMixture.gaussian([2.0], [[1.0]])
    t = t_for(schedule, 0.25)
    m = marginal_at(prior, schedule, t)
    assert m.means[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert m.covariances[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    n = 100_000
    x = forward_perturb(SampleBatch(rng.normal(2.0, 1.0, size=(n, 1))), t, schedule, RandomSource(4)).samples[:, 0]
    assert abs(x.mean() - 1.0) < 3 / math.sqrt(n)
    assert abs(x.var(ddof=1) - 1.0) < 3 * math.sqrt(2 / (n - 1))


# -- scores -------------------------------------------------------------------

def test_gaussian_scores(rng):
    x = rng.normal(size=(20, 3))
    assert np.allclose(score(GaussianMixture.gaussian(np.zeros(3), np.eye(3)), x), -x, atol=1e-14)
    mu = np.array([1.0, -2.0, 0.5])
    B = rng.normal(size=(3, 3))
    S = B @ B.T + np.eye(3)
    expect = -np.linalg.solve(S, (x - mu).T).T
    assert np.allclose(score(GaussianMixture.gaussian(mu, S), x), expect, atol=1e-12)


def test_score_far_in_one_basin():
    m = GaussianMixture([0.5, 0.5], [[-3.0], [3.0]], [0.5, 1.0])
    x = np.array([[-9.0]])
    assert abs(score(m, x)[0, 0] - (-(x[0, 0] + 3.0) / 0.5)) < 1e-6
    # finite-difference check at the same point
    h = 1e-5
    fd = (m.logpdf([[-9.0 + h]])[0] - m.logpdf([[-9.0 - h]])[0]) / (2 * h)
    assert abs(score(m, x)[0, 0] - fd) < 1e-5


@pytest.mark.parametrize("K,d,seed", [(1, 1, 0), (2, 1, 1), (3, 2, 2), (4, 3, 3), (4, 2, 4)])
def test_score_matches_finite_differences(K, d, seed):
    gen = np.random.default_rng(seed)
    m = random_mixture(gen, K, d)
    x = gen.normal(0, 3, size=(100, d))
    s = score(m, x)
    h = 1e-5
    fd = np.empty_like(x)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fd[:, j] = (m.logpdf(x + e) - m.logpdf(x - e)) / (2 * h)
    rel = np.abs(s - fd) / np.maximum(1.0, np.abs(fd))
    assert rel.max() < 1e-5


def test_logpdf_is_stable_far_out():
    m = GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [1.0, 1.0])
    assert np.isfinite(m.logpdf([[1e4]])).all()
    assert np.isfinite(m.score([[1e4]])).all()


# -- tilting ------------------------------------------------------------------

def test_tilt_standard_normal_by_identity(std_normal):
    res = tilt_linear(std_normal, [1.0], 0.0, 1.0)
    assert res.tilted.means[0, 0] == pytest.approx(1.0, abs=1e-14)
    assert res.tilted.covariances[0, 0, 0] == pytest.approx(1.0, abs=1e-14)
    assert res.log_normalizer == pytest.approx(0.5, abs=1e-14)
    _, logZ = tilt_oracle_1d(norm.pdf, lambda x: x, 1.0)
    assert res.log_normalizer == pytest.approx(logZ, abs=1e-10)


def test_zero_direction_tilt_only_shifts_log_z(bimodal):
    res = tilt_linear(bimodal, [0.0], 0.7, 2.0)
    assert res.tilted.allclose(bimodal)
    assert res.log_normalizer == pytest.approx(0.35, abs=1e-15)


def test_bimodal_tilt_example(bimodal):
    res = tilt_linear(bimodal, [1.0], 0.0, 1.0)
    means = res.tilted.means[:, 0]
    assert np.allclose(means, [-1.0, 3.0], atol=1e-14)
    w = res.tilted.weights
    assert w[1] / w[0] == pytest.approx(math.exp(4.0), rel=1e-12)


@pytest.mark.parametrize("reward,alpha", [
    (RewardSpec.linear([1.0], 0.3), 1.0),
    (RewardSpec.linear([-0.5]), 0.5),
    (RewardSpec.quadratic([[-0.4]], [0.7], 0.1), 1.0),
    (RewardSpec.quadratic([[0.2]], [0.0]), 2.0),
])
def test_tilt_matches_quadrature_pointwise_1d(reward, alpha):
    weights, means, sds = [0.3, 0.7], [-1.5, 1.0], [0.8, 1.2]
    prior = GaussianMixture(weights, [[m] for m in means], [s**2 for s in sds])
    p0 = mixture_pdf_1d(weights, means, sds)
    r = lambda x: float(reward(np.array([[x]]))[0])
    dens, logZ = tilt_oracle_1d(p0, r, alpha)
    res = tilt(prior, reward, alpha)
    assert res.log_normalizer == pytest.approx(logZ, abs=1e-9)
    xs = np.linspace(-6, 6, 41)
    got = res.tilted.pdf(xs[:, None])
    want = np.array([dens(x) for x in xs])
    assert np.max(np.abs(got - want) / want) < 1e-6


def test_tilt_matches_quadrature_2d():
    prior = GaussianMixture([0.4, 0.6], [[-1.0, 0.5], [1.0, -0.5]],
                            [[[1.0, 0.3], [0.3, 0.8]], [[0.6, -0.2], [-0.2, 1.1]]])
    reward = RewardSpec.quadratic([[-0.3, 0.1], [0.1, -0.2]], [0.5, -0.4], 0.2)
    alpha = 1.0
    f = lambda y, x: float(prior.pdf([[x, y]])[0] * math.exp(reward([[x, y]])[0] / alpha))
    Z = integrate.dblquad(f, -12, 12, -12, 12, epsabs=1e-12, epsrel=1e-10)[0]
    res = tilt(prior, reward, alpha)
    assert res.log_normalizer == pytest.approx(math.log(Z), abs=1e-7)
    for pt in ([0.0, 0.0], [1.2, -0.7], [-2.0, 1.5]):
        want = prior.pdf([pt])[0] * math.exp(reward([pt])[0] / alpha) / Z
        assert abs(res.tilted.pdf([pt])[0] / want - 1) < 1e-6


def test_quadratic_tilt_examples(std_normal):
    lin = tilt_linear(std_normal, [0.4], 0.0, 1.0)
    q0 = tilt_quadratic(std_normal, [[0.0]], [0.4], 1.0)
    assert q0.tilted.allclose(lin.tilted) and q0.log_normalizer == pytest.approx(lin.log_normalizer)
    q = tilt_quadratic(std_normal, [[-1.0]], [0.0], 1.0)
    assert q.tilted.covariances[0, 0, 0] == pytest.approx(1 / 3, abs=1e-14)
    assert q.tilted.means[0, 0] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(TiltDivergenceError, match="component 0"):
        tilt_quadratic(std_normal, [[1.0]], [0.0], 1.0)


def test_tilt_rejects_nonpositive_alpha(std_normal):
    for alpha in (0.0, -1.0):
        with pytest.raises(DomainError):
            tilt_linear(std_normal, [1.0], 0.0, alpha)


def test_tilt_handles_extreme_reweighting():
    prior = GaussianMixture([0.5, 0.5], [[-200.0], [200.0]], [1.0, 1.0])
    res = tilt_linear(prior, [1.0], 0.0, 0.5)
    assert np.all(np.isfinite(res.tilted.weights)) and res.tilted.weights[1] == pytest.approx(1.0)
    assert math.isfinite(res.log_normalizer)


# -- tilted process marginal -------------------------------------------------------

def test_tilted_marginal_is_weighted_pretrained_marginal(schedule, bimodal):
    """Noised tilt = p_t(x) E[exp(r/alpha) | x_t = x] / Z, checked by quadrature."""
    reward, alpha = RewardSpec.linear([0.8]), 1.0
    t = t_for(schedule, 0.4)
    abar = 0.4
    p0 = mixture_pdf_1d([0.5, 0.5], [-2.0, 2.0], [1.0, 1.0])
    _, logZ = tilt_oracle_1d(p0, lambda y: 0.8 * y, alpha)
    tilted_t = marginal_at(tilt(bimodal, reward, alpha).tilted, schedule, t)
    pre_t = marginal_at(bimodal, schedule, t)
    for x in (-3.0, -1.0, 0.0, 0.5, 2.5):
        cond = conditional_expectation_1d(p0, lambda y: math.exp(0.8 * y / alpha), x, abar)
        want = pre_t.pdf([[x]])[0] * cond / math.exp(logZ)
        assert abs(tilted_t.pdf([[x]])[0] / want - 1) < 1e-5


# -- posterior ----------------------------------------------------------------

def test_posterior_conjugate_gaussian(schedule, std_normal):
    t = t_for(schedule, 0.5)
    post = posterior_x0_given_xt(std_normal, schedule, t, [0.0])
    # 1-D conjugacy: var = 1 / (1 + abar / (1 - abar)) = 1 - abar, mean = sqrt(abar) x
    assert post.covariances[0, 0, 0] == pytest.approx(0.5, abs=1e-14)
    assert post.means[0, 0] == pytest.approx(0.0, abs=1e-15)
    post = posterior_x0_given_xt(std_normal, schedule, t, [1.3])
    p0 = norm.pdf
    m = conditional_expectation_1d(p0, lambda y: y, 1.3, 0.5)
    v = conditional_expectation_1d(p0, lambda y: y * y, 1.3, 0.5) - m * m
    assert post.means[0, 0] == pytest.approx(m, abs=1e-10)
    assert post.covariances[0, 0, 0] == pytest.approx(v, abs=1e-10)
    assert np.allclose(post.weights, 1.0)


def test_posterior_mixture_matches_bayes_quadrature(schedule, bimodal):
    abar = 0.3
    t = t_for(schedule, abar)
    p0 = mixture_pdf_1d([0.5, 0.5], [-2.0, 2.0], [1.0, 1.0])
    for x in (-1.0, 0.2, 2.0):
        post = posterior_x0_given_xt(bimodal, schedule, t, [x])
        mean = float(post.mean()[0])
        var = float(post.covariance()[0, 0])
        m = conditional_expectation_1d(p0, lambda y: y, x, abar)
        v = conditional_expectation_1d(p0, lambda y: y * y, x, abar) - m * m
        assert mean == pytest.approx(m, abs=1e-9)
        assert var == pytest.approx(v, abs=1e-9)


def test_posterior_rejects_t_zero(schedule, std_normal):
    with pytest.raises(DomainError):
        posterior_x0_given_xt(std_normal, schedule, 0.0, [0.0])


def test_tower_property(schedule, bimodal, rng):
    t, n = 0.3, 50_000
    x0 = bimodal.sample(n, rng)
    xt = forward_perturb(SampleBatch(x0), t, schedule, RandomSource(9)).samples
    pm = posterior_mean(bimodal, schedule, t, xt)[:, 0]
    assert abs(pm.mean() - 0.0) < 3 * pm.std() / math.sqrt(n)


@pytest.mark.parametrize("t", [0.05, 0.3, 0.8])
def test_tweedie_formula(schedule, t, rng):
    m = random_mixture(rng, 3, 2)
    x = rng.normal(size=(50, 2))
    ab = schedule.alpha_bar(t)
    tweedie = (x + (1 - ab) * marginal_at(m, schedule, t).score(x)) / math.sqrt(ab)
    assert np.allclose(posterior_mean(m, schedule, t, x), tweedie, atol=1e-8)


# -- drifts and controls ------------------------------------------------------------

def test_constant_reward_gives_pretrained_drift(schedule, bimodal, rng):
    ft = exact_finetuned_drift(bimodal, RewardSpec.constant(3.0, 1), 1.0, schedule)
    pre = pretrained_drift(bimodal, schedule)
    for t in (0.01, 0.4, 1.0):
        x = rng.normal(size=(30, 1))
        assert np.allclose(ft(x, t), pre(x, t), atol=1e-12)


def test_finetuned_drift_against_quadrature_score(schedule, std_normal):
    """Tilted N(1,1) noised at abar=0.5 is N(sqrt(0.5), 1); FD of a quadrature density."""
    t = t_for(schedule, 0.5)
    p0 = norm.pdf

    def tilted_t_pdf(x):
        return quad(lambda y: p0(y) * math.exp(y) * norm.pdf(x, math.sqrt(0.5) * y, math.sqrt(0.5)))

    h = 1e-4
    s = (math.log(tilted_t_pdf(h)) - math.log(tilted_t_pdf(-h))) / (2 * h)
    b = schedule.beta(t)
    want = -0.5 * b * 0.0 - b * s
    got = exact_finetuned_drift(std_normal, RewardSpec.linear([1.0]), 1.0, schedule)([[0.0]], t)[0, 0]
    assert got == pytest.approx(want, abs=1e-6)
    assert s == pytest.approx(math.sqrt(0.5), abs=1e-7)


def test_finetuned_sampling_reproduces_tilt_moments(schedule, bimodal):
    reward, alpha = RewardSpec.linear([0.5]), 1.0
    target = tilt(bimodal, reward, alpha).tilted
    n = 20_000
    x = euler_maruyama_reverse(exact_finetuned_drift(bimodal, reward, alpha, schedule), schedule,
                               TimeGrid.uniform(1000), RandomSource(21), n, 1).samples[:, 0]
    mu, var = float(target.mean()[0]), float(target.covariance()[0, 0])
    assert abs(x.mean() - mu) < 3 * math.sqrt(var / n)
    # stderr of a sample variance: sqrt((m4 - var^2) / n); m4 estimated from the samples
    m4 = np.mean((x - x.mean()) ** 4)
    assert abs(x.var() - var) < 3 * math.sqrt((m4 - var**2) / n)


def test_control_identity_against_drift_difference(schedule, bimodal, rng):
    reward, alpha = RewardSpec.linear([0.8]), 0.7
    u = control_exact(bimodal, reward, alpha, schedule)
    ft = exact_finetuned_drift(bimodal, reward, alpha, schedule)
    pre = pretrained_drift(bimodal, schedule)
    for t in (0.02, 0.2, 0.6, 1.0):
        x = rng.normal(0, 3, size=(40, 1))
        want = (ft(x, t) - pre(x, t)) / -schedule.beta(t)
        assert np.allclose(u(x, t), want, atol=1e-8)


def test_control_identity_2d(schedule, rng):
    prior = random_mixture(rng, 3, 2)
    reward, alpha = RewardSpec.linear([0.5, -1.0]), 1.5
    u = control_exact(prior, reward, alpha, schedule)
    ft, pre = exact_finetuned_drift(prior, reward, alpha, schedule), pretrained_drift(prior, schedule)
    x = rng.normal(size=(40, 2))
    assert np.allclose(u(x, 0.3), (ft(x, 0.3) - pre(x, 0.3)) / -schedule.beta(0.3), atol=1e-8)


def test_gaussian_prior_control_is_constant_in_x(schedule):
    prior = GaussianMixture.gaussian([0.5], [[2.0]])
    u = control_exact(prior, RewardSpec.linear([1.0]), 1.0, schedule)
    vals = u(np.linspace(-5, 5, 11)[:, None], 0.4)
    assert np.ptp(vals) < 1e-12


def test_zero_reward_controls_vanish(schedule, bimodal, rng):
    x = rng.normal(size=(10, 1))
    zero = RewardSpec.constant(0.0, 1)
    assert np.allclose(control_exact(bimodal, zero, 1.0, schedule)(x, 0.3), 0.0, atol=1e-15)
    assert np.allclose(control_approx(bimodal, zero, 1.0, schedule)(x, 0.3), 0.0, atol=1e-15)


def test_gaussian_prior_approx_equals_exact(schedule, rng):
    prior = GaussianMixture.gaussian([-1.0], [[0.5]])
    reward = RewardSpec.linear([2.0])
    x = rng.normal(size=(20, 1))
    for t in (0.05, 0.5):
        assert np.allclose(control_approx(prior, reward, 1.0, schedule)(x, t),
                           control_exact(prior, reward, 1.0, schedule)(x, t), atol=1e-12)


def test_controls_match_quadrature_definitions(schedule, bimodal):
    abar = 0.5
    t = t_for(schedule, abar)
    p0 = mixture_pdf_1d([0.5, 0.5], [-2.0, 2.0], [1.0, 1.0])
    reward = RewardSpec.linear([1.0])
    u_fn, ub_fn = control_exact(bimodal, reward, 1.0, schedule), control_approx(bimodal, reward, 1.0, schedule)
    for x in (-1.5, 0.0, 0.7):
        u, ub = control_terms_1d(p0, lambda y: y, 1.0, x, abar)
        assert u_fn([[x]], t)[0, 0] == pytest.approx(u, abs=1e-7)
        assert ub_fn([[x]], t)[0, 0] == pytest.approx(ub, abs=1e-7)
    assert abs(u_fn([[0.0]], t)[0, 0] - ub_fn([[0.0]], t)[0, 0]) > 1e-3


def test_quadratic_approx_control_matches_quadrature(schedule, bimodal):
    abar = 0.4
    t = t_for(schedule, abar)
    p0 = mixture_pdf_1d([0.5, 0.5], [-2.0, 2.0], [1.0, 1.0])
    reward = RewardSpec.quadratic([[-0.3]], [0.5])
    r = lambda y: -0.3 * y * y + 0.5 * y
    ub_fn = control_approx(bimodal, reward, 2.0, schedule)
    u_fn = control_exact(bimodal, reward, 2.0, schedule)
    for x in (-1.0, 0.4):
        u, ub = control_terms_1d(p0, r, 2.0, x, abar)
        assert ub_fn([[x]], t)[0, 0] == pytest.approx(ub, abs=1e-7)
        assert u_fn([[x]], t)[0, 0] == pytest.approx(u, abs=1e-7)


def test_blackbox_controls_agree_with_analytic(schedule, bimodal):
    lin = RewardSpec.linear([1.0])
    bb = RewardSpec.blackbox(lambda x: x[:, 0], 1)
    x = np.array([[-1.0], [0.3]])
    t = 0.2
    ue = control_exact(bimodal, lin, 1.0, schedule)(x, t)
    ua = control_approx(bimodal, lin, 1.0, schedule)(x, t)
    ube = control_exact(bimodal, bb, 1.0, schedule, num_draws=20_000)(x, t)
    uba = control_approx(bimodal, bb, 1.0, schedule, num_draws=20_000)(x, t)
    # common random numbers make the FD derivative smooth; residual is Monte Carlo error
    assert np.allclose(ube, ue, atol=0.05)
    assert np.allclose(uba, ua, atol=0.05)


def test_controls_reject_t_zero(schedule, bimodal):
    with pytest.raises(DomainError):
        control_exact(bimodal, RewardSpec.linear([1.0]), 1.0, schedule)([[0.0]], 0.0)
