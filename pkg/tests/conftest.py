"""Shared fixtures and independent numerical oracles.

The oracles here use only scipy quadrature, finite differences and plain
Monte Carlo; none of them calls the closed-form code paths under test.
"""

import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from diffblend.mixtures import GaussianMixture
from diffblend.sde import NoiseSchedule

ACCEPTANCE_LINES: list = []


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def std_normal():
    return GaussianMixture.gaussian([0.0], [[1.0]])


@pytest.fixture
def bimodal():
    """Means +-2, unit variances, equal weights."""
    return GaussianMixture.isotropic([0.5, 0.5], [[-2.0], [2.0]], [1.0, 1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- 1-D oracles --------------------------------------------------------------

def mixture_pdf_1d(weights, means, sds):
    """Plain-python density of a 1-D Gaussian mixture."""
    def f(x):
        return sum(w * norm.pdf(x, m, s) for w, m, s in zip(weights, means, sds))
    return f


def quad(f, lo=-40.0, hi=40.0):
    return integrate.quad(f, lo, hi, limit=400, epsabs=1e-13, epsrel=1e-12)[0]


def tilt_oracle_1d(p0, r, alpha):
    """``x -> p0(x) exp(r(x)/alpha) / Z`` and ``log Z`` by quadrature."""
    Z = quad(lambda x: p0(x) * math.exp(r(x) / alpha))
    return (lambda x: p0(x) * math.exp(r(x) / alpha) / Z), math.log(Z)


def noisy_kernel(x, x0, abar):
    return norm.pdf(x, math.sqrt(abar) * x0, math.sqrt(1.0 - abar))


def conditional_expectation_1d(p0, h, x, abar):
    """``E[h(x_0) | x_t = x]`` by Bayes-rule quadrature."""
    num = quad(lambda y: p0(y) * noisy_kernel(x, y, abar) * h(y))
    den = quad(lambda y: p0(y) * noisy_kernel(x, y, abar))
    return num / den


def control_terms_1d(p0, r, alpha, x, abar):
    """``(u, u_bar)`` at a point by quadrature of the defining integrals.

    u = d/dx log E[exp(r/alpha) | x], u_bar = d/dx E[r/alpha | x].
    """
    s2 = 1.0 - abar
    dk = lambda y: -(x - math.sqrt(abar) * y) / s2  # d/dx log kernel
    P = quad(lambda y: p0(y) * noisy_kernel(x, y, abar))
    dP = quad(lambda y: p0(y) * noisy_kernel(x, y, abar) * dk(y))
    F = quad(lambda y: p0(y) * noisy_kernel(x, y, abar) * math.exp(r(y) / alpha))
    dF = quad(lambda y: p0(y) * noisy_kernel(x, y, abar) * math.exp(r(y) / alpha) * dk(y))
    G = quad(lambda y: p0(y) * noisy_kernel(x, y, abar) * r(y) / alpha)
    dG = quad(lambda y: p0(y) * noisy_kernel(x, y, abar) * r(y) / alpha * dk(y))
    u = dF / F - dP / P
    ubar = dG / P - G * dP / P**2
    return u, ubar


def record_acceptance(number: int, passed: bool, detail: str):
    line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
