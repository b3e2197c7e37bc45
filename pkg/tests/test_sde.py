import math

import numpy as np
import pytest
from scipy import integrate

from diffblend.blend import DriftModel
from diffblend.mixtures import GaussianMixture, pretrained_drift
from diffblend.sde import (ConfigurationError, DomainError, IntegrationError, NoiseSchedule, RandomSource,
                           SampleBatch, TimeGrid, alpha_bar, beta_at, euler_maruyama_reverse, forward_perturb)


def test_beta_endpoints_and_midpoint(schedule):
    assert beta_at(schedule, 0.0) == pytest.approx(0.1, abs=1e-15)
    assert beta_at(schedule, 1.0) == pytest.approx(20.0, abs=1e-15)
    assert beta_at(schedule, 0.5) == pytest.approx(10.05, abs=1e-12)


@pytest.mark.parametrize("t", [-0.1, 1.1, float("nan")])
def test_beta_rejects_times_outside_horizon(schedule, t):
    with pytest.raises(DomainError):
        beta_at(schedule, t)


def test_schedule_rejects_bad_parameters():
    with pytest.raises(ConfigurationError):
        NoiseSchedule(beta_min=0.0)
    with pytest.raises(ConfigurationError):
        NoiseSchedule(beta_min=2.0, beta_max=1.0)
    with pytest.raises(ConfigurationError):
        NoiseSchedule(T=0.0)


def test_alpha_bar_values(schedule):
    assert alpha_bar(schedule, 0.0) == 1.0
    assert alpha_bar(schedule, 1.0) == pytest.approx(math.exp(-10.05), rel=1e-12)
    assert alpha_bar(schedule, 0.3) > alpha_bar(schedule, 0.7)


def test_alpha_bar_matches_quadrature_of_beta(schedule):
    for t in np.linspace(0.0, 1.0, 100):
        ref = math.exp(-integrate.quad(schedule.beta, 0.0, t)[0])
        assert abs(alpha_bar(schedule, t) - ref) < 1e-10


def test_time_for_alpha_bar_inverts(schedule):
    for t in (0.0, 0.01, 0.3, 0.9, 1.0):
        assert schedule.time_for_alpha_bar(schedule.alpha_bar(t)) == pytest.approx(t, abs=1e-12)
    with pytest.raises(DomainError):
        schedule.time_for_alpha_bar(1e-9)


def test_time_grid_validation():
    g = TimeGrid.uniform(10)
    assert g.num_steps == 10 and g.knots[0] == 0.0 and g.T == 1.0
    with pytest.raises(ConfigurationError):
        TimeGrid.uniform(0)
    with pytest.raises(ConfigurationError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ConfigurationError):
        TimeGrid(np.array([0.1, 1.0]))
    geo = TimeGrid.geometric(20)
    assert geo.num_steps == 20 and np.all(np.diff(geo.knots) > 0) and geo.T == 1.0
    assert g.step_index(0.3) == 3 and g.step_index(1.0) == 10


def test_random_source_is_deterministic_and_streams_differ():
    a = RandomSource(7).step_noise(3, (1000,))
    b = RandomSource(7).step_noise(3, (1000,))
    c = RandomSource(7, stream=1).step_noise(3, (1000,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # independent streams: sample correlation consistent with zero
    assert abs(np.corrcoef(a, c)[0, 1]) < 4 / math.sqrt(1000)
    # draws are addressed by key, not by call order
    r = RandomSource(7)
    first = r.step_noise(5, (4,))
    r.step_noise(2, (4,))
    assert np.array_equal(first, RandomSource(7).step_noise(5, (4,)))


def test_sample_batch_validation():
    assert SampleBatch(np.zeros(5)).dimension == 1
    with pytest.raises(ValueError):
        SampleBatch(np.array([[0.0], [np.inf]]))


def test_forward_perturb_at_zero_is_identity(schedule):
    x0 = SampleBatch(np.arange(6.0).reshape(3, 2))
    out = forward_perturb(x0, 0.0, schedule, RandomSource(0))
    assert np.array_equal(out.samples, x0.samples)


def test_forward_perturb_variance_from_zero(schedule):
    n, t = 50_000, 0.2
    out = forward_perturb(SampleBatch(np.zeros((n, 1))), t, schedule, RandomSource(1)).samples[:, 0]
    target = 1.0 - schedule.alpha_bar(t)
    # stderr of the sample variance of a normal is var * sqrt(2 / (n - 1))
    assert abs(out.var(ddof=1) - target) < 3 * target * math.sqrt(2 / (n - 1))


def test_forward_perturb_mean_scaling(schedule, rng):
    n, t, mu, sd = 50_000, 0.1, 2.0, 0.5
    x0 = SampleBatch(rng.normal(mu, sd, size=(n, 1)))
    out = forward_perturb(x0, t, schedule, RandomSource(2)).samples[:, 0]
    ab = schedule.alpha_bar(t)
    se = math.sqrt(ab * sd**2 + 1 - ab) / math.sqrt(n)
    assert abs(out.mean() - math.sqrt(ab) * mu) < 3 * se


def test_reverse_sampler_preserves_standard_normal(schedule, std_normal):
    drift = pretrained_drift(std_normal, schedule)
    x = euler_maruyama_reverse(drift, schedule, TimeGrid.uniform(1000), RandomSource(0), 50_000, 1).samples[:, 0]
    assert abs(x.mean()) < 0.02
    assert 0.97 <= x.var() <= 1.03


def test_reverse_sampler_recovers_shifted_prior(schedule):
    prior = GaussianMixture.gaussian([3.0], [[1.0]])
    n = 20_000
    x = euler_maruyama_reverse(pretrained_drift(prior, schedule), schedule, TimeGrid.uniform(1000),
                               RandomSource(3), n, 1).samples[:, 0]
    assert abs(x.mean() - 3.0) < 3 * x.std() / math.sqrt(n)


def test_reverse_sampler_rejects_mismatched_grid(schedule, std_normal):
    with pytest.raises(ConfigurationError):
        euler_maruyama_reverse(pretrained_drift(std_normal, schedule), schedule, TimeGrid.uniform(10, T=2.0),
                               RandomSource(0), 10, 1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_drift_names_location(schedule):
    def bad(x, t):
        out = -0.5 * x
        if t < 0.5:
            out = out / 0.0
        return out

    with pytest.raises(IntegrationError, match=r"t=0\.4"):
        euler_maruyama_reverse(DriftModel(bad, schedule, 1), schedule, TimeGrid.uniform(10), RandomSource(0), 4, 1)


def test_rerun_is_bit_identical(schedule, bimodal):
    drift = pretrained_drift(bimodal, schedule)
    a = euler_maruyama_reverse(drift, schedule, TimeGrid.uniform(50), RandomSource(11), 500, 1).samples
    b = euler_maruyama_reverse(drift, schedule, TimeGrid.uniform(50), RandomSource(11), 500, 1).samples
    assert a.tobytes() == b.tobytes()


def test_refinement_does_not_increase_w1(schedule):
    """Terminal W1 to the exact law shrinks (or holds) as the step count doubles."""
    from scipy.stats import norm

    prior = GaussianMixture.gaussian([2.0], [[0.25]])
    drift = pretrained_drift(prior, schedule)
    n = 40_000
    q = norm.ppf((np.arange(n) + 0.5) / n, loc=2.0, scale=0.5)
    dists = []
    for steps in (10, 20, 40, 80):
        x = np.sort(euler_maruyama_reverse(drift, schedule, TimeGrid.uniform(steps), RandomSource(5), n, 1).samples[:, 0])
        dists.append(float(np.mean(np.abs(x - q))))
    assert all(b <= a for a, b in zip(dists, dists[1:])), dists
