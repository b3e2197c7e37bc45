"""Variance-preserving forward process and the reverse-time Euler-Maruyama sampler.

The forward SDE is ``dx = -0.5 beta(t) x dt + sqrt(beta(t)) dw`` with a linear
``beta`` schedule, so that ``x_t = sqrt(abar(t)) x_0 + sqrt(1 - abar(t)) eps``.
Reverse sampling consumes a drift ``f(x, t) = -0.5 beta(t) x - beta(t) s(x, t)``
and steps backwards along a :class:`TimeGrid`::

    x_{k-1} = x_k - f(x_k, t_k) dt_k + sqrt(beta(t_k) dt_k) z
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """Invalid sampler or experiment configuration."""


class IntegrationError(FloatingPointError):
    """A drift produced non-finite values during reverse integration."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear VP schedule ``beta(t) = beta_min + (t / T) (beta_max - beta_min)``."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta_min <= self.beta_max):
            raise ConfigurationError(
                f"need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}"
            )
        if not self.T > 0:
            raise ConfigurationError(f"horizon T must be positive, got {self.T}")

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.T) or not np.all(np.isfinite(t)):
            raise DomainError(f"time {t} outside [0, {self.T}]")
        return t

    def beta(self, t):
        t = self._check(t)
        out = self.beta_min + (t / self.T) * (self.beta_max - self.beta_min)
        return float(out) if out.ndim == 0 else out

    def integrated_beta(self, t):
        """Closed-form ``int_0^t beta(s) ds``."""
        t = self._check(t)
        out = self.beta_min * t + (self.beta_max - self.beta_min) * t**2 / (2 * self.T)
        return float(out) if out.ndim == 0 else out

    def alpha_bar(self, t):
        out = np.exp(-np.asarray(self.integrated_beta(t)))
        return float(out) if out.ndim == 0 else out

    def time_for_alpha_bar(self, abar: float) -> float:
        """Invert ``alpha_bar``: the time at which the retention factor equals ``abar``."""
        if not (self.alpha_bar(self.T) <= abar <= 1.0):
            raise DomainError(f"alpha_bar={abar} not attained on [0, {self.T}]")
        target = -math.log(abar)
        c = (self.beta_max - self.beta_min) / (2 * self.T)
        if c == 0:
            return target / self.beta_min
        return (-self.beta_min + math.sqrt(self.beta_min**2 + 4 * c * target)) / (2 * c)


def beta_at(schedule: NoiseSchedule, t: float) -> float:
    return schedule.beta(t)


def alpha_bar(schedule: NoiseSchedule, t: float) -> float:
    return schedule.alpha_bar(t)


@dataclass(frozen=True)
class TimeGrid:
    """Knots ``0 = t_0 < t_1 < ... < t_N = T`` used by the reverse sampler."""

    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise ConfigurationError("time grid needs at least one step")
        if knots[0] != 0.0:
            raise ConfigurationError("time grid must start at t_0 = 0")
        if np.any(np.diff(knots) <= 0):
            raise ConfigurationError("time grid knots must be strictly increasing")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @classmethod
    def uniform(cls, num_steps: int, T: float = 1.0) -> "TimeGrid":
        if num_steps < 1:
            raise ConfigurationError(f"num_steps must be >= 1, got {num_steps}")
        return cls(np.linspace(0.0, T, num_steps + 1))

    @classmethod
    def geometric(cls, num_steps: int, T: float = 1.0, t_min: float = 1e-3) -> "TimeGrid":
        """Geometrically spaced knots; denser near t = 0 where late reverse steps land."""
        if num_steps < 1:
            raise ConfigurationError(f"num_steps must be >= 1, got {num_steps}")
        if num_steps == 1:
            return cls(np.array([0.0, T]))
        inner = np.geomspace(t_min, T, num_steps)
        return cls(np.concatenate([[0.0], inner]))

    @property
    def num_steps(self) -> int:
        return self.knots.size - 1

    @property
    def T(self) -> float:
        return float(self.knots[-1])

    def step_index(self, t: float) -> int:
        """Knot index ``k`` with ``t_k == t`` (nearest knot)."""
        k = int(np.searchsorted(self.knots, t))
        if k > 0 and (k == self.knots.size or abs(self.knots[k - 1] - t) <= abs(self.knots[k] - t)):
            k -= 1
        return k


@dataclass(frozen=True)
class RandomSource:
    """Counter-based deterministic randomness.

    Every draw is addressed by a key path appended to ``(stream,)`` and backed
    by its own Philox generator, so results never depend on call order.
    """

    seed: int
    stream: int = 0
    path: tuple = field(default_factory=tuple)

    def child(self, *key: int) -> "RandomSource":
        return RandomSource(self.seed, self.stream, self.path + tuple(int(k) for k in key))

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & (2**64 - 1),
            spawn_key=(int(self.stream),) + self.path + tuple(int(k) for k in key),
        )
        return np.random.Generator(np.random.Philox(ss))

    # key namespaces used by the sampler
    INIT = 0
    STEP = 1
    AUX = 2

    def initial_noise(self, shape) -> np.ndarray:
        return self.generator(self.INIT).standard_normal(shape)

    def step_noise(self, k: int, shape, particle: int = 0) -> np.ndarray:
        return self.generator(self.STEP, k, particle).standard_normal(shape)


@dataclass
class SampleBatch:
    """Samples of dimension ``d`` at time label ``t``."""

    samples: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2:
            raise ValueError(f"samples must be (n, d), got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples contain non-finite entries")
        self.samples = s

    @property
    def dimension(self) -> int:
        return self.samples.shape[1]

    def __len__(self) -> int:
        return self.samples.shape[0]


def forward_perturb(x0: SampleBatch, t: float, schedule: NoiseSchedule, rng: RandomSource) -> SampleBatch:
    abar = schedule.alpha_bar(t)
    if abar == 1.0:
        return SampleBatch(x0.samples.copy(), t)
    eps = rng.generator(RandomSource.AUX).standard_normal(x0.samples.shape)
    return SampleBatch(math.sqrt(abar) * x0.samples + math.sqrt(1.0 - abar) * eps, t)


Drift = Callable[[np.ndarray, float], np.ndarray]
StepHook = Callable[[int, np.ndarray, np.ndarray], None]


def reverse_steps(
    drift: Drift,
    x: np.ndarray,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    rng: RandomSource,
    k_from: int,
    k_to: int,
    particle: int = 0,
    on_step: Optional[StepHook] = None,
) -> np.ndarray:
    """Integrate from knot ``k_from`` down to knot ``k_to`` (``k_from > k_to``).

    ``on_step(k, x_k, f_k)`` is invoked with the state and drift before each update.
    """
    knots = grid.knots
    for k in range(k_from, k_to, -1):
        t_k = float(knots[k])
        dt = t_k - float(knots[k - 1])
        f = np.asarray(drift(x, t_k), dtype=float)
        if not np.all(np.isfinite(f)):
            bad = np.argwhere(~np.isfinite(f))[0][0]
            raise IntegrationError(f"non-finite drift at x={x[bad]}, t={t_k}")
        if on_step is not None:
            on_step(k, x, f)
        z = rng.step_noise(k, x.shape, particle)
        x = x - f * dt + math.sqrt(schedule.beta(t_k) * dt) * z
    return x


def euler_maruyama_reverse(
    drift: Drift,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    rng: RandomSource,
    batch_size: int,
    dimension: int,
    on_step: Optional[StepHook] = None,
) -> SampleBatch:
    """Sample ``batch_size`` trajectories from ``N(0, I)`` at ``t = T`` down to ``t = 0``."""
    if grid.num_steps < 1:
        raise ConfigurationError("zero integration steps requested")
    if abs(grid.T - schedule.T) > 1e-12:
        raise ConfigurationError(f"grid horizon {grid.T} != schedule horizon {schedule.T}")
    if batch_size < 1 or dimension < 1:
        raise ConfigurationError("batch_size and dimension must be positive")
    x = rng.initial_noise((batch_size, dimension))
    x = reverse_steps(drift, x, schedule, grid, rng, grid.num_steps, 0, on_step=on_step)
    return SampleBatch(x, 0.0)
