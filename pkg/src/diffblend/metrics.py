"""Distances, reward statistics, alignment-objective values and Pareto fronts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_banded
from scipy.stats import wasserstein_distance

from .mixtures import GaussianMixture
from .rewards import RewardSpec
from .sde import DomainError, NoiseSchedule, SampleBatch, TimeGrid

KL_FLOOR = -1e-9


def _as_1d(s) -> np.ndarray:
    arr = s.samples if isinstance(s, SampleBatch) else np.asarray(s, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"expected 1-D samples, got dimension {arr.shape[1]}")
        arr = arr[:, 0]
    if arr.size == 0:
        raise ValueError("empty sample batch")
    return arr


def wasserstein1_1d(a, b) -> float:
    """W1 between two empirical 1-D laws.

    Equal sizes use matched order statistics; otherwise the exact
    ``int |F - G|`` of the empirical CDFs.
    """
    x, y = _as_1d(a), _as_1d(b)
    if x.size == y.size:
        return float(np.mean(np.abs(np.sort(x) - np.sort(y))))
    return float(wasserstein_distance(x, y))


# -- quadrature -------------------------------------------------------------

def _gl_panels(lo: float, hi: float, panels: int, order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    pts = (mid[:, None] + half[:, None] * nodes[None]).ravel()
    wts = (half[:, None] * weights[None]).ravel()
    return pts, wts


def covering_box(*models: GaussianMixture, width: float = 12.0):
    """Per-axis bounds covering every component of every model by ``width`` standard deviations."""
    lo, hi = [], []
    for m in models:
        sd = np.sqrt(np.diagonal(m.covariances, axis1=1, axis2=2))
        lo.append((m.means - width * sd).min(axis=0))
        hi.append((m.means + width * sd).max(axis=0))
    return np.min(lo, axis=0), np.max(hi, axis=0)


def quadrature_rule(lo, hi, panels: Optional[int] = None, order: int = 16):
    """Composite Gauss-Legendre rule on a 1-D or 2-D box: ``(points (n, d), weights (n,))``."""
    lo, hi = np.atleast_1d(lo), np.atleast_1d(hi)
    d = lo.size
    if d == 1:
        x, w = _gl_panels(lo[0], hi[0], panels or 200, order)
        return x[:, None], w
    if d == 2:
        x, wx = _gl_panels(lo[0], hi[0], panels or 48, order)
        y, wy = _gl_panels(lo[1], hi[1], panels or 48, order)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()]), np.outer(wx, wy).ravel()
    raise DomainError(f"quadrature supports d <= 2, got d={d}")


def _clamp_kl(v: float) -> float:
    if v < KL_FLOOR:
        raise FloatingPointError(f"KL estimate {v:.3e} is negative beyond the numerical floor")
    return max(v, 0.0)


def kl_estimate(p: GaussianMixture, q: GaussianMixture, method: str = "quadrature",
                num_draws: int = 200_000, gen: Optional[np.random.Generator] = None) -> float:
    """``KL(p || q)`` by Gauss-Legendre quadrature (d <= 2) or Monte Carlo with exact log ratios."""
    if p.dim != q.dim:
        raise ValueError("KL between mixtures of different dimension")
    if method == "quadrature":
        pts, wts = quadrature_rule(*covering_box(p, q))
        lp, lq = p.logpdf(pts), q.logpdf(pts)
        dens = np.exp(lp)
        return _clamp_kl(float(np.sum(wts * dens * (lp - lq))))
    if method == "monte_carlo":
        gen = gen or np.random.default_rng(0)
        x = p.sample(num_draws, gen)
        return _clamp_kl(float(np.mean(p.logpdf(x) - q.logpdf(x))))
    raise ValueError(f"unknown KL method {method!r}")


@dataclass(frozen=True)
class GridDensity:
    """A 1-D density tabulated on a uniform grid (e.g. a Fokker-Planck solution)."""

    xs: np.ndarray
    p: np.ndarray

    @property
    def dx(self) -> float:
        return float(self.xs[1] - self.xs[0])

    def mass(self) -> float:
        return float(np.sum(self.p) * self.dx)

    def expect(self, fn) -> float:
        return float(np.sum(fn(self.xs[:, None]) * self.p) * self.dx)

    def kl_to(self, q: GaussianMixture) -> float:
        live = self.p > 1e-300
        lq = q.logpdf(self.xs[live, None])
        return _clamp_kl(float(np.sum(self.p[live] * (np.log(self.p[live]) - lq)) * self.dx))


def fokker_planck_density(drift, schedule: NoiseSchedule, grid: TimeGrid, xs: Optional[np.ndarray] = None) -> GridDensity:
    """Terminal density of a 1-D reverse process, started at ``N(0, 1)`` at ``t = T``.

    Crank-Nicolson on ``dp/ds = d_x(f p) + 0.5 beta d_xx p`` in reverse time
    ``s = T - t`` with central differences; one sub-step per grid interval.
    """
    xs = np.linspace(-14.0, 14.0, 1401) if xs is None else np.asarray(xs, dtype=float)
    n = xs.size
    dx = xs[1] - xs[0]
    p = np.exp(-0.5 * xs**2) / math.sqrt(2 * math.pi)

    def operator(t):
        f = np.asarray(drift(xs[:, None], t))[:, 0]
        D = 0.5 * schedule.beta(t) / dx**2
        upper = np.zeros(n)
        lower = np.zeros(n)
        upper[1:] = f[1:] / (2 * dx) + D
        lower[:-1] = -f[:-1] / (2 * dx) + D
        return upper, np.full(n, -2 * D), lower

    def apply(op, v):
        upper, diag, lower = op
        out = diag * v
        out[:-1] += upper[1:] * v[1:]
        out[1:] += lower[:-1] * v[:-1]
        return out

    knots = grid.knots
    op_hi = operator(float(knots[-1]))
    for k in range(grid.num_steps, 0, -1):
        ds = knots[k] - knots[k - 1]
        op_lo = operator(float(knots[k - 1]))
        rhs = p + 0.5 * ds * apply(op_hi, p)
        banded = np.vstack([-0.5 * ds * op_lo[0], 1 - 0.5 * ds * op_lo[1], -0.5 * ds * op_lo[2]])
        p = solve_banded((1, 1), banded, rhs)
        op_hi = op_lo
    return GridDensity(xs, np.maximum(p, 0.0))


class StepwiseKL:
    """Per-trajectory sum of Gaussian transition KLs against a reference drift.

    Pass an instance as ``on_step`` to the sampler. Each step contributes
    ``||f - f_ref||^2 dt / (2 beta)``; the total upper-bounds the terminal KL.
    """

    def __init__(self, reference, schedule: NoiseSchedule, grid: TimeGrid):
        self.reference = reference
        self.schedule = schedule
        self.grid = grid
        self.total: Optional[np.ndarray] = None

    def __call__(self, k, x, f):
        t = float(self.grid.knots[k])
        dt = t - float(self.grid.knots[k - 1])
        diff = f - self.reference(x, t)
        step = np.sum(diff**2, axis=1) * dt / (2 * self.schedule.beta(t))
        self.total = step if self.total is None else self.total + step

    def mean(self) -> float:
        return float("nan") if self.total is None else float(self.total.mean())


# -- reward statistics and objective ----------------------------------------

@dataclass(frozen=True)
class MeanSE:
    mean: float
    stderr: float

    def __iter__(self):
        return iter((self.mean, self.stderr))


def expected_reward(samples, r: RewardSpec) -> MeanSE:
    x = samples.samples if isinstance(samples, SampleBatch) else np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty sample batch")
    v = r(x)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return MeanSE(float(v.mean()), se)


ModelLaw = Union[GaussianMixture, GridDensity, str]


def model_kl(p_model: ModelLaw, p_pre: GaussianMixture, kl: Optional[float] = None) -> float:
    if isinstance(p_model, GaussianMixture):
        return kl_estimate(p_model, p_pre, "quadrature" if p_model.dim <= 2 else "monte_carlo")
    if isinstance(p_model, GridDensity):
        return p_model.kl_to(p_pre)
    if p_model == "empirical":
        if kl is None:
            raise ValueError("empirical model law needs an externally estimated KL")
        return float(kl)
    raise TypeError(f"unsupported model law {p_model!r}")


def alignment_objective(samples, r: RewardSpec, alpha: float, p_model: ModelLaw, p_pre: GaussianMixture,
                        kl: Optional[float] = None) -> MeanSE:
    """``E[r] - alpha KL(p_model || p_pre)``; the stderr is that of the reward mean."""
    if not alpha > 0:
        raise DomainError(f"the KL-regularized objective requires alpha > 0, got alpha={alpha}")
    er = expected_reward(samples, r)
    return MeanSE(er.mean - alpha * model_kl(p_model, p_pre, kl), er.stderr)


# -- Pareto fronts ------------------------------------------------------------

@dataclass(frozen=True)
class ParetoPoint:
    method: str
    w: float
    means: tuple
    stderrs: tuple
    objective: float = float("nan")
    kl: float = float("nan")
    seed: int = 0
    n_samples: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if any(s < 0 for s in self.stderrs):
            raise ValueError("standard errors must be nonnegative")
        if len(self.means) != len(self.stderrs):
            raise ValueError("means and stderrs differ in length")


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated subset under componentwise >= on reward means, in input order."""
    points = list(points)
    arity = {len(p.means) for p in points}
    if len(arity) > 1:
        raise ValueError(f"points have inconsistent reward arity {sorted(arity)}")
    return [p for p in points if not any(dominates(q.means, p.means) for q in points if q is not p)]
