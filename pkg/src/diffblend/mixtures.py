"""Closed-form Gaussian-mixture diffusion models.

Gaussian mixtures stay Gaussian mixtures under every operation the blending
analysis needs: VP forward marginals, exponential tilting by linear or
quadratic rewards, and the posterior of ``x_0`` given ``x_t``.  That makes
them exact stand-ins for pre-trained and fine-tuned diffusion models.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from .blend import DriftModel
from .rewards import RewardSpec
from .sde import DomainError, NoiseSchedule

LOG2PI = math.log(2 * math.pi)


class TiltDivergenceError(DomainError):
    """Quadratic tilt has no normalizable result for some component."""


class GaussianMixture:
    """Mixture ``sum_k w_k N(mu_k, Sigma_k)`` in ``d`` dimensions (immutable)."""

    def __init__(self, weights, means, covariances):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        mu = np.asarray(means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None] if w.size > 1 or mu.size == 1 else mu[None, :]
        cov = np.asarray(covariances, dtype=float)
        K, d = mu.shape
        if cov.ndim == 1 and d == 1:
            cov = cov[:, None, None]
        elif cov.ndim == 2 and K == 1 and cov.shape == (d, d):
            cov = cov[None]
        if w.shape != (K,) or cov.shape != (K, d, d):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covariances {cov.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights {w} are not a probability vector")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValueError("mixture parameters must be finite")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=1e-10, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        self.weights, self.means, self.covariances, self.chol = w, mu, cov, chol
        self.precisions = np.linalg.inv(cov)
        self.logdets = 2 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        with np.errstate(divide="ignore"):
            self._logw = np.log(w)
        for arr in (w, mu, cov, chol, self.precisions, self.logdets):
            arr.setflags(write=False)

    # -- constructors ---------------------------------------------------
    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        return cls([1.0], mean[None, :], cov[None])

    @classmethod
    def isotropic(cls, weights, means, variances) -> "GaussianMixture":
        means = np.asarray(means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        K, d = means.shape
        var = np.broadcast_to(np.asarray(variances, dtype=float), (K,))
        return cls(weights, means, var[:, None, None] * np.eye(d)[None])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def __repr__(self):
        return f"GaussianMixture(K={self.n_components}, d={self.dim})"

    # -- densities --------------------------------------------------------
    def _check_x(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"x has dimension {x.shape[1]}, mixture has {self.dim}")
        return x

    def _diffs(self, x):
        """Per-component ``x - mu_k`` and ``P_k (x - mu_k)``, each ``(n, K, d)``."""
        x = self._check_x(x)
        diff = x[:, None, :] - self.means[None]
        sol = np.einsum("kij,nkj->nki", self.precisions, diff)
        return diff, sol

    def _maha_sol(self, x):
        # component loop keeps the hot path on BLAS-free vector ops; K is small
        x = self._check_x(x)
        n, K = x.shape[0], self.n_components
        maha = np.empty((n, K))
        sols = []
        for k in range(K):
            dk = x - self.means[k]
            if self.dim == 1:
                sk = dk * self.precisions[k, 0, 0]
                maha[:, k] = dk[:, 0] * sk[:, 0]
            else:
                sk = dk @ self.precisions[k]
                maha[:, k] = np.sum(dk * sk, axis=1)
            sols.append(sk)
        return maha, sols

    def component_logpdf(self, x) -> np.ndarray:
        """``log w_k + log N(x; mu_k, Sigma_k)`` with shape ``(n, K)``."""
        maha, _ = self._maha_sol(x)
        return self._logw - 0.5 * (maha + self.logdets + self.dim * LOG2PI)

    def logpdf(self, x) -> np.ndarray:
        return logsumexp(self.component_logpdf(x), axis=1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def responsibilities(self, x) -> np.ndarray:
        return softmax(self.component_logpdf(x), axis=1)

    def score(self, x) -> np.ndarray:
        """``grad_x log p(x)`` via log-space responsibilities."""
        maha, sols = self._maha_sol(x)
        if self.n_components == 1:
            return -sols[0]
        # per-column arithmetic: reductions over a short trailing axis are slow in numpy
        logits = [self._logw[k] - 0.5 * (maha[:, k] + self.logdets[k]) for k in range(self.n_components)]
        top = logits[0]
        for lk in logits[1:]:
            top = np.maximum(top, lk)
        unnorm = [np.exp(lk - top) for lk in logits]
        total = unnorm[0]
        for uk in unnorm[1:]:
            total = total + uk
        out = (unnorm[0] / total)[:, None] * sols[0]
        for uk, sk in zip(unnorm[1:], sols[1:]):
            out += (uk / total)[:, None] * sk
        return -out

    # -- moments and sampling ---------------------------------------------
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        second = np.einsum("k,kij->ij", self.weights, self.covariances + np.einsum("ki,kj->kij", self.means, self.means))
        return second - np.outer(m, m)

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        comp = gen.choice(self.n_components, size=n, p=self.weights)
        z = gen.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self.chol[comp], z)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        means = np.asarray(d["means"], dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        covs = d.get("covariances")
        if covs is None:
            return cls.isotropic(d["weights"], means, d.get("variances", 1.0))
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 1:
            covs = covs[:, None, None] * np.eye(means.shape[1])[None]
        return cls(d["weights"], means, covs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(s))

    def allclose(self, other: "GaussianMixture", atol: float = 1e-12) -> bool:
        return (
            self.weights.shape == other.weights.shape
            and self.means.shape == other.means.shape
            and np.allclose(self.weights, other.weights, atol=atol, rtol=0)
            and np.allclose(self.means, other.means, atol=atol, rtol=0)
            and np.allclose(self.covariances, other.covariances, atol=atol, rtol=0)
        )


def score(model: GaussianMixture, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = model.score(x)
    return out[0] if x.ndim == 1 else out


def marginal_at(prior: GaussianMixture, schedule: NoiseSchedule, t: float) -> GaussianMixture:
    """Law of ``x_t`` when ``x_0 ~ prior``."""
    abar = schedule.alpha_bar(t)
    if abar == 1.0:
        return prior
    eye = np.eye(prior.dim)[None]
    return GaussianMixture(
        prior.weights,
        math.sqrt(abar) * prior.means,
        abar * prior.covariances + (1.0 - abar) * eye,
    )


@dataclass(frozen=True)
class TiltResult:
    tilted: GaussianMixture
    log_normalizer: float


def _reweight(prior: GaussianMixture, log_factors: np.ndarray, b: float, alpha: float):
    logw = prior._logw + log_factors
    logZ = float(logsumexp(logw))
    return np.exp(logw - logZ), logZ + b / alpha


def tilt_linear(prior: GaussianMixture, a, b: float, alpha: float) -> TiltResult:
    """Tilt ``prior(x) exp((a.x + b) / alpha) / Z``; returns the mixture and ``log Z``."""
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    shift = np.einsum("kij,j->ki", prior.covariances, a) / alpha
    quad = np.einsum("i,kij,j->k", a, prior.covariances, a)
    log_factors = prior.means @ a / alpha + quad / (2 * alpha**2)
    weights, logZ = _reweight(prior, log_factors, b, alpha)
    return TiltResult(GaussianMixture(weights, prior.means + shift, prior.covariances), logZ)


def tilt_quadratic(prior: GaussianMixture, A, a, alpha: float, b: float = 0.0) -> TiltResult:
    """Tilt by ``r(x) = x'Ax + a.x + b``; needs ``Sigma_k^{-1} - 2A/alpha`` PD for every k."""
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    d = prior.dim
    A = np.atleast_2d(np.asarray(A, dtype=float))
    a = np.zeros(d) if a is None else np.atleast_1d(np.asarray(a, dtype=float))
    if not np.any(A):
        return tilt_linear(prior, a, b, alpha)
    new_prec = prior.precisions - 2.0 * A[None] / alpha
    means, covs, log_factors = [], [], []
    for k in range(prior.n_components):
        try:
            L = np.linalg.cholesky(new_prec[k])
        except np.linalg.LinAlgError:
            raise TiltDivergenceError(
                f"tilt diverges: component {k} precision minus 2A/alpha is not positive definite "
                f"(alpha={alpha} too small for this quadratic reward)"
            ) from None
        cov = np.linalg.inv(new_prec[k])
        cov = 0.5 * (cov + cov.T)
        eta = prior.precisions[k] @ prior.means[k] + a / alpha
        mu = cov @ eta
        logdet_new = -2 * np.log(np.diag(L)).sum()
        lf = 0.5 * (logdet_new - prior.logdets[k]) - 0.5 * prior.means[k] @ prior.precisions[k] @ prior.means[k] + 0.5 * eta @ mu
        means.append(mu)
        covs.append(cov)
        log_factors.append(lf)
    weights, logZ = _reweight(prior, np.array(log_factors), b, alpha)
    return TiltResult(GaussianMixture(weights, np.array(means), np.array(covs)), logZ)


def tilt(prior: GaussianMixture, reward: RewardSpec, alpha: float) -> TiltResult:
    if reward.kind == "linear":
        return tilt_linear(prior, reward.a, reward.b, alpha)
    if reward.kind == "quadratic":
        return tilt_quadratic(prior, reward.A, reward.a, alpha, reward.b)
    raise TypeError("closed-form tilting needs a linear or quadratic reward")


# -- posterior of x_0 given x_t -------------------------------------------

@dataclass(frozen=True)
class PosteriorParts:
    """Vectorized posterior of ``x_0 | x_t = x`` for a batch of ``x``.

    resp: (n, K) responsibilities; means: (n, K, d); covs: (K, d, d);
    jac: (K, d, d) Jacobian of each component mean in ``x`` (symmetric);
    grad_log_resp: (n, K, d).
    """

    resp: np.ndarray
    log_resp: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    jac: np.ndarray
    grad_log_resp: np.ndarray


def posterior_parts(prior: GaussianMixture, schedule: NoiseSchedule, t: float, x) -> PosteriorParts:
    if t <= 0:
        raise DomainError("posterior at t = 0 is a point mass; need t > 0")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    abar = schedule.alpha_bar(t)
    s2 = 1.0 - abar
    c = math.sqrt(abar) / s2
    eye = np.eye(prior.dim)
    covs = np.linalg.inv(prior.precisions + (abar / s2) * eye[None])
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    jac = c * covs
    eta0 = np.einsum("kij,kj->ki", prior.precisions, prior.means)
    means = np.einsum("kij,nkj->nki", covs, eta0[None] + c * x[:, None, :])
    marg = marginal_at(prior, schedule, t)
    clp = marg.component_logpdf(x)
    log_resp = clp - logsumexp(clp, axis=1, keepdims=True)
    resp = np.exp(log_resp)
    _, sol = marg._diffs(x)
    comp_scores = -sol
    mix_score = np.einsum("nk,nki->ni", resp, comp_scores)
    return PosteriorParts(resp, log_resp, means, covs, jac, comp_scores - mix_score[:, None, :])


def posterior_x0_given_xt(prior: GaussianMixture, schedule: NoiseSchedule, t: float, x_t) -> GaussianMixture:
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
    p = posterior_parts(prior, schedule, t, x_t[None, :])
    resp = p.resp[0]
    return GaussianMixture(resp / resp.sum(), p.means[0], p.covs)


# -- drifts and control terms ------------------------------------------------

def pretrained_drift(prior: GaussianMixture, schedule: NoiseSchedule) -> DriftModel:
    def fn(x, t):
        b = schedule.beta(t)
        return -0.5 * b * x - b * marginal_at(prior, schedule, t).score(x)

    return DriftModel(fn, schedule, prior.dim, ("pretrained",))


def exact_finetuned_drift(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule) -> DriftModel:
    """Drift of the reverse process whose data law is the tilt of ``prior`` by ``exp(r / alpha)``."""
    tilted = tilt(prior, reward, alpha).tilted

    def fn(x, t):
        b = schedule.beta(t)
        return -0.5 * b * x - b * marginal_at(tilted, schedule, t).score(x)

    tag = ("exact_tilted", reward.name or reward.kind, float(alpha))
    return DriftModel(fn, schedule, prior.dim, tag)


ControlFn = Callable[[np.ndarray, float], np.ndarray]


def _mc_posterior_expectation(prior, schedule, t, x, h, z):
    """``sum_k resp_k E_z[h(m_k(x) + L_k z)]`` with common random numbers ``z`` (M, d)."""
    p = posterior_parts(prior, schedule, t, x)
    L = np.linalg.cholesky(p.covs)
    n, K, d = p.means.shape
    out = np.zeros(n)
    for k in range(K):
        pts = p.means[:, k, None, :] + (z @ L[k].T)[None]
        vals = h(pts.reshape(-1, d)).reshape(n, -1)
        out += p.resp[:, k] * vals.mean(axis=1)
    return out


def _central_grad(fun, x, rel_step):
    g = np.empty_like(x)
    for j in range(x.shape[1]):
        step = rel_step * np.maximum(1.0, np.abs(x[:, j]))
        xp, xm = x.copy(), x.copy()
        xp[:, j] += step
        xm[:, j] -= step
        g[:, j] = (fun(xp) - fun(xm)) / (2 * step)
    return g


def _check_t(t):
    if t <= 0:
        raise DomainError("control terms are defined for t in (0, T]")


def _zero_control(x, t):
    _check_t(t)
    return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))


def control_exact(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule,
                  num_draws: int = 4096, fd_step: float = 1e-4, seed: int = 0) -> ControlFn:
    """``u(x, t) = grad_x log E[exp(r(x_0) / alpha) | x_t = x]``.

    Linear rewards use the posterior moment generating function in closed
    form; quadratic rewards use the difference of tilted and prior marginal
    scores; black-box rewards use Monte Carlo with central differences.
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    if reward.is_constant:
        return _zero_control
    if reward.kind == "linear":
        a = reward.a

        def u(x, t):
            _check_t(t)
            p = posterior_parts(prior, schedule, t, x)
            quad = np.einsum("i,kij,j->k", a, p.covs, a)
            g = p.log_resp + p.means @ a / alpha + quad / (2 * alpha**2)
            sm = softmax(g, axis=1)
            grad_g = p.grad_log_resp + (p.jac @ a / alpha)[None]
            return np.einsum("nk,nki->ni", sm, grad_g)

        return u
    if reward.kind == "quadratic":
        tilted = tilt(prior, reward, alpha).tilted

        def u(x, t):
            _check_t(t)
            return marginal_at(tilted, schedule, t).score(x) - marginal_at(prior, schedule, t).score(x)

        return u
    z = np.random.default_rng(seed).standard_normal((num_draws, prior.dim))

    def u(x, t):
        _check_t(t)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        # shift by the value at a reference point for overflow safety; cancels in the log-derivative
        ref = float(np.max(reward(x))) / alpha

        def logF(xx):
            return np.log(_mc_posterior_expectation(prior, schedule, t, xx, lambda y: np.exp(reward(y) / alpha - ref), z))

        return _central_grad(logF, x, fd_step)

    return u


def control_approx(prior: GaussianMixture, reward: RewardSpec, alpha: float, schedule: NoiseSchedule,
                   num_draws: int = 4096, fd_step: float = 1e-4, seed: int = 0) -> ControlFn:
    """``u_bar(x, t) = grad_x E[r(x_0) / alpha | x_t = x]`` (expectation moved outside the exp)."""
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    if reward.is_constant:
        return _zero_control
    if reward.kind in ("linear", "quadratic"):
        a = reward.a
        A = reward.A if reward.kind == "quadratic" else None

        def ubar(x, t):
            _check_t(t)
            p = posterior_parts(prior, schedule, t, x)
            h = p.means @ a
            lin = a[None, None, :]
            if A is not None:
                h = h + np.einsum("nki,ij,nkj->nk", p.means, A, p.means) + np.einsum("ij,kji->k", A, p.covs)[None]
                lin = lin + 2.0 * np.einsum("ij,nkj->nki", A, p.means)
            grad_h = np.einsum("kij,nkj->nki", p.jac, np.broadcast_to(lin, p.means.shape))
            out = np.einsum("nk,nki->ni", p.resp, p.grad_log_resp * h[..., None] + grad_h)
            return out / alpha

        return ubar
    z = np.random.default_rng(seed).standard_normal((num_draws, prior.dim))

    def ubar(x, t):
        _check_t(t)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _central_grad(lambda xx: _mc_posterior_expectation(prior, schedule, t, xx, reward, z), x, fd_step) / alpha

    return ubar


def posterior_mean(prior: GaussianMixture, schedule: NoiseSchedule, t: float, x) -> np.ndarray:
    p = posterior_parts(prior, schedule, t, x)
    return np.einsum("nk,nki->ni", p.resp, p.means)
