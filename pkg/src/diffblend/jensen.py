"""Jensen-gap error of the interchanged control term and its three-term bound.

With ``R = r(x_0) / alpha`` and the posterior of ``x_0`` given ``x_t = x``:

* ``delta = grad log E[exp R] - grad E[R]``
* ``L1 = sqrt(E ||grad_x eta||^2)`` where ``eta = R - E[R | x_t]``
* ``L2 = sd(exp R) / E[exp R]``
* ``L3 = (1 + 1/alpha) sup_r |d_x log p(r|x) + c d_r log p(r|x)|``

and the bound checked numerically is ``|delta| <= L1 L2 + L3``.

The coupling behind ``grad_x eta`` draws a posterior component ``k`` and
``x_0 = m_k(x) + chol(S_k) z`` with ``(k, z)`` held fixed; the discrete
component draw contributes a score-function term, so ``E[grad_x eta] = 0``.

``c`` in ``L3`` is the responsibility-weighted slope ``d E[R | component, x] / dx``.
A conditional law that only translates with ``x`` at rate ``c`` gives
``L3 = 0``; with ``c = 1`` this is the unit-shift family.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, ndtri

from .mixtures import GaussianMixture, control_approx, control_exact, posterior_parts
from .rewards import RewardSpec
from .sde import DomainError, NoiseSchedule, RandomSource

MIN_DRAWS = 16
L3_COVERAGE = 0.9999


class NotComputed(Exception):
    """Quantity unsupported for this reward/prior combination."""


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float

    def __iter__(self):
        return iter((self.value, self.stderr))


@dataclass(frozen=True)
class GapReport:
    t: float
    x: tuple
    delta_norm: float
    L1: float
    L1_stderr: float
    L2: float
    L2_stderr: float
    L3: Optional[float]
    slack: float = 0.0

    @property
    def computed(self) -> bool:
        return self.L3 is not None

    @property
    def bound(self) -> float:
        l1 = self.L1 + self.slack * self.L1_stderr
        l2 = self.L2 + self.slack * self.L2_stderr
        return l1 * l2 + (self.L3 if self.L3 is not None else 0.0)

    @property
    def satisfied(self) -> bool:
        return self.computed and self.delta_norm <= self.bound + 1e-9

    @property
    def status(self) -> str:
        return "ok" if self.computed else "not computed"


def _as_points(x, d):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return x.reshape(-1, d), x.ndim == 1 and x.size == d


def gap_delta(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule, x, t: float,
              **mc) -> np.ndarray:
    """``u - u_bar``: exact control term minus its interchanged approximation."""
    pts, single = _as_points(x, prior.dim)
    out = control_exact(prior, reward, alpha, schedule, **mc)(pts, t) - control_approx(prior, reward, alpha, schedule, **mc)(pts, t)
    return out[0] if single else out


def _posterior_draws(prior, schedule, t, x, num_draws, rng: RandomSource):
    """Component labels (M,) and draws (M, d) from the posterior at a single point ``x``."""
    p = posterior_parts(prior, schedule, t, x[None, :])
    gen = rng.generator(RandomSource.AUX)
    comp = gen.choice(prior.n_components, size=num_draws, p=p.resp[0] / p.resp[0].sum())
    z = gen.standard_normal((num_draws, prior.dim))
    L = np.linalg.cholesky(p.covs)
    x0 = p.means[0, comp] + np.einsum("mij,mj->mi", L[comp], z)
    return p, comp, x0


def _check_draws(num_draws):
    if num_draws < MIN_DRAWS:
        raise ValueError(f"need at least {MIN_DRAWS} posterior draws, got {num_draws}")


def estimate_L1(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule, x, t: float,
                num_draws: int = 4096, rng: Optional[RandomSource] = None) -> Estimate:
    """Root-mean-square pathwise sensitivity of the reward residual ``eta``."""
    _check_draws(num_draws)
    rng = rng or RandomSource(0)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if reward.is_constant:
        return Estimate(0.0, 0.0)
    p, comp, x0 = _posterior_draws(prior, schedule, t, x, num_draws, rng)
    R = reward(x0) / alpha
    r_tilde = float(np.sum(p.resp[0] * _component_mean_reward(p, reward))) / alpha
    ubar = control_approx(prior, reward, alpha, schedule)(x[None, :], t)[0]
    pathwise = np.einsum("mij,mj->mi", p.jac[comp], reward.grad(x0)) / alpha
    score_term = (R - r_tilde)[:, None] * p.grad_log_resp[0, comp]
    grad_eta = pathwise + score_term - ubar
    q = np.sum(grad_eta**2, axis=1)
    val = math.sqrt(q.mean())
    se = 0.0 if val == 0 else q.std(ddof=1) / math.sqrt(num_draws) / (2 * val)
    return Estimate(val, se)


def _component_mean_reward(p, reward: RewardSpec) -> np.ndarray:
    """``E[r(x_0) | component k, x]`` for each component (single point)."""
    m = p.means[0]
    if reward.kind == "linear":
        return m @ reward.a + reward.b
    if reward.kind == "quadratic":
        return np.einsum("ki,ij,kj->k", m, reward.A, m) + np.einsum("ij,kji->k", reward.A, p.covs) + m @ reward.a + reward.b
    raise NotComputed("component mean reward needs a linear or quadratic reward")


def estimate_L2(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule, x, t: float,
                num_draws: int = 4096, rng: Optional[RandomSource] = None) -> Estimate:
    """Monte Carlo coefficient of variation of ``exp(R)`` given ``x_t = x``."""
    _check_draws(num_draws)
    rng = rng or RandomSource(0)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _, _, x0 = _posterior_draws(prior, schedule, t, x, num_draws, rng)
    R = reward(x0) / alpha
    y = np.exp(R - R.max())
    m1, m2 = y.mean(), (y**2).mean()
    cv2 = max(m2 / m1**2 - 1.0, 0.0)
    val = math.sqrt(cv2)
    if val == 0:
        return Estimate(0.0, 0.0)
    cov = np.cov(np.vstack([y, y**2])) / num_draws
    g = np.array([-2 * m2 / m1**3, 1 / m1**2])
    se_cv2 = math.sqrt(max(g @ cov @ g, 0.0))
    return Estimate(val, se_cv2 / (2 * val))


def L2_closed_form(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule, x, t: float) -> float:
    """Exact ``L2`` for a linear reward via the posterior moment generating function."""
    if reward.kind != "linear":
        raise NotComputed("closed-form L2 needs a linear reward")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = posterior_parts(prior, schedule, t, x[None, :])
    a = reward.a / alpha
    M = p.means[0] @ a
    V = np.einsum("i,kij,j->k", a, p.covs, a)
    logw = p.log_resp[0]
    log_m1 = logsumexp(logw + M + V / 2)
    log_m2 = logsumexp(logw + 2 * M + 2 * V)
    return math.sqrt(max(math.expm1(log_m2 - 2 * log_m1), 0.0))


def conditional_reward_law(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule, x, t: float):
    """Scalar mixture law of ``R | x_t = x`` for a linear reward.

    Returns ``(log_weights, means, variances, d log_weights/dx, d means/dx)``, each of shape (K,)
    (derivatives have shape (K, d)).
    """
    if reward.kind != "linear":
        raise NotComputed("conditional law of R is closed form only for linear rewards")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = posterior_parts(prior, schedule, t, x[None, :])
    a = reward.a / alpha
    M = p.means[0] @ a + reward.b / alpha
    V = np.einsum("i,kij,j->k", a, p.covs, a)
    dM = p.jac @ a
    return p.log_resp[0], M, V, p.grad_log_resp[0], dM


def default_r_grid(log_w, M, V, coverage: float = L3_COVERAGE, n: int = 2001) -> np.ndarray:
    """Grid spanning the central ``coverage`` mass of the scalar mixture plus margin."""
    tail = (1.0 - coverage) / 4
    sd = np.sqrt(V)
    live = log_w > math.log(tail)
    k = float(-ndtri(tail))
    lo = float(np.min((M - k * sd)[live]))
    hi = float(np.max((M + k * sd)[live]))
    return np.linspace(lo, hi, n)


def _mixture_mass(log_w, M, V, lo, hi):
    from scipy.special import ndtr

    sd = np.sqrt(V)
    return float(np.sum(np.exp(log_w) * (ndtr((hi - M) / sd) - ndtr((lo - M) / sd))))


def estimate_L3(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule, x, t: float,
                r_grid: Optional[np.ndarray] = None) -> float:
    """Deviation of ``R | x_t`` from a location family, as a supremum over an ``r`` grid.

    Raises :class:`NotComputed` for priors/rewards without a closed-form scalar law
    (anything but a 1-D linear reward) and ``DomainError`` if the grid misses more
    than ``1 - L3_COVERAGE`` of the conditional mass.
    """
    if reward.kind != "linear" or prior.dim != 1:
        raise NotComputed("L3 is computed for 1-D linear rewards only")
    if reward.is_constant:
        return 0.0
    log_w, M, V, dlogw, dM = conditional_reward_law(prior, reward, alpha, schedule, x, t)
    if r_grid is None:
        r_grid = default_r_grid(log_w, M, V)
    r_grid = np.asarray(r_grid, dtype=float)
    mass = _mixture_mass(log_w, M, V, r_grid.min(), r_grid.max())
    if mass < L3_COVERAGE:
        raise DomainError(f"r grid covers only {mass:.6f} of the conditional mass of R (< {L3_COVERAGE})")
    dlogw, dM = dlogw[:, 0], dM[:, 0]
    resp = np.exp(log_w)
    c = float(resp @ dM)
    z = (r_grid[:, None] - M[None]) / V[None]
    logc = log_w[None] - 0.5 * (r_grid[:, None] - M[None]) ** 2 / V[None] - 0.5 * np.log(2 * np.pi * V[None])
    rho = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    D = np.sum(rho * (dlogw[None] + z * (dM[None] - c)), axis=1)
    return (1.0 + 1.0 / alpha) * float(np.max(np.abs(D)))


def verify_bound(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule,
                 points: Iterable[tuple], num_draws: int = 4096, rng: Optional[RandomSource] = None,
                 slack: float = 3.0) -> list[GapReport]:
    """Evaluate ``delta`` and the three bound terms at each ``(x, t)`` point.

    ``slack`` inflates ``L1`` and ``L2`` by that many Monte Carlo standard errors.
    """
    rng = rng or RandomSource(0)
    reports = []
    for i, (x, t) in enumerate(points):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        delta = gap_delta(prior, reward, alpha, schedule, x, t)
        sub = rng.child(i)
        l1 = estimate_L1(prior, reward, alpha, schedule, x, t, num_draws, sub.child(1))
        l2 = estimate_L2(prior, reward, alpha, schedule, x, t, num_draws, sub.child(2))
        try:
            l3 = estimate_L3(prior, reward, alpha, schedule, x, t)
        except NotComputed:
            l3 = None
        reports.append(GapReport(float(t), tuple(x.tolist()), float(np.linalg.norm(delta)),
                                 l1.value, l1.stderr, l2.value, l2.stderr, l3, slack))
    return reports


def fraction_satisfied(reports: Sequence[GapReport]) -> float:
    if not reports:
        return float("nan")
    return sum(r.satisfied for r in reports) / len(reports)


GAP_COLUMNS = ["t", "x", "delta", "L1", "L1_stderr", "L2", "L2_stderr", "L3", "bound", "satisfied"]


def reports_to_csv(reports: Sequence[GapReport], dim: int = 1) -> str:
    """CSV with columns t, x..., delta, L1, L1_stderr, L2, L2_stderr, L3, bound, satisfied."""
    buf = io.StringIO()
    xcols = ["x"] if dim == 1 else [f"x{i + 1}" for i in range(dim)]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *xcols, "delta", "L1", "L1_stderr", "L2", "L2_stderr", "L3", "bound", "satisfied"])
    for r in reports:
        l3 = "not computed" if r.L3 is None else f"{r.L3:.10g}"
        bound = f"{r.bound:.10g}" if r.computed else "not computed"
        w.writerow([f"{r.t:.10g}", *(f"{v:.10g}" for v in r.x), f"{r.delta_norm:.10g}",
                    f"{r.L1:.10g}", f"{r.L1_stderr:.10g}", f"{r.L2:.10g}", f"{r.L2_stderr:.10g}",
                    l3, bound, str(r.satisfied).lower() if r.computed else "not computed"])
    return buf.getvalue()
