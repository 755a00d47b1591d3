"""Separable MMSE denoisers and the SVD-based linear estimators.

Input side: the posterior mean of ``x0`` given ``r = x0 + N(0, 1/gamma)``
for Gaussian, Bernoulli-Gaussian and tabulated (grid) priors.

Output side: the posterior mean of ``z`` given the pseudo-prior
``z ~ N(p, 1/tau)`` and an observation ``y`` from an AWGN or probit channel.

Linear side: the LMMSE estimator for AWGN observations and the joint
estimator of ``(x, z = A x)`` used by GVAMP, both evaluated in the singular
basis in ``O(MN)`` time.

Every denoiser reports an analytic divergence, i.e. the average of its
per-coordinate derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erfcx, expit

from .ensembles import MatrixFactorization
from .errors import InvalidConfig, InvalidDimension, InvalidParameter

__all__ = [
    "PriorSpec",
    "ChannelSpec",
    "DenoiserOutput",
    "JointLmmseOutput",
    "GRID_POINTS",
    "prior_posterior",
    "output_posterior",
    "denoise_prior",
    "denoise_output",
    "lmmse_denoise",
    "joint_lmmse_denoise",
    "finite_difference_divergence",
]

GRID_POINTS = 2001
_GRID_HALF_WIDTH = 10.0
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _trapezoid_weights(x: np.ndarray) -> np.ndarray:
    h = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


@dataclass(frozen=True)
class PriorSpec:
    """I.i.d. prior on the entries of ``x0``.

    Use the constructors :meth:`gaussian`, :meth:`bernoulli_gaussian` and
    :meth:`grid`. For a grid prior ``density`` holds the density values on the
    fixed grid of :data:`GRID_POINTS` points spanning ``+-10 sqrt(tau_x)``.
    """

    kind: str = "gaussian"
    tau_x: float = 1.0
    rho: float = 1.0
    density: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli-gaussian", "grid"):
            raise InvalidConfig(f"unsupported prior {self.kind!r}", field="model.prior.kind")
        if not (np.isfinite(self.tau_x) and self.tau_x > 0):
            raise InvalidConfig("tau_x must be positive", field="model.prior.tau_x")
        if self.kind == "bernoulli-gaussian" and not (0 < self.rho <= 1):
            raise InvalidConfig("rho must lie in (0, 1]", field="model.prior.rho")
        if self.kind == "grid":
            if self.density is None or len(self.density) != GRID_POINTS:
                raise InvalidConfig(f"grid density needs {GRID_POINTS} values", field="model.prior.density")
            d = np.asarray(self.density, dtype=float)
            if np.any(d < 0) or not np.all(np.isfinite(d)):
                raise InvalidConfig("grid density must be non-negative", field="model.prior.density")
            mass = float(np.dot(_trapezoid_weights(self.grid_points), d))
            if abs(mass - 1.0) > 1e-8:
                raise InvalidConfig(f"grid density integrates to {mass}, not 1", field="model.prior.density")

    @classmethod
    def gaussian(cls, tau_x: float = 1.0) -> "PriorSpec":
        return cls("gaussian", tau_x=tau_x)

    @classmethod
    def bernoulli_gaussian(cls, rho: float, tau_x: float = 1.0) -> "PriorSpec":
        return cls("bernoulli-gaussian", tau_x=tau_x, rho=rho)

    @classmethod
    def grid(cls, density: Callable[[np.ndarray], np.ndarray] | np.ndarray, tau_x: float = 1.0,
             normalize: bool = True) -> "PriorSpec":
        """Tabulated prior. ``density`` is a callable or values on the fixed grid."""
        x = _grid(tau_x)
        d = np.asarray(density(x) if callable(density) else density, dtype=float)
        if normalize:
            d = d / np.dot(_trapezoid_weights(x), d)
        return cls("grid", tau_x=tau_x, density=tuple(d.tolist()))

    @property
    def grid_points(self) -> np.ndarray:
        return _grid(self.tau_x)

    @property
    def second_moment(self) -> float:
        if self.kind == "grid":
            x = self.grid_points
            return float(np.dot(_trapezoid_weights(x) * np.asarray(self.density), x * x))
        return self.tau_x * (self.rho if self.kind == "bernoulli-gaussian" else 1.0)

    def components(self) -> list[tuple[float, float]]:
        """Zero-mean Gaussian mixture components ``(weight, variance)``."""
        if self.kind == "gaussian":
            return [(1.0, self.tau_x)]
        if self.kind == "bernoulli-gaussian":
            comps = [(self.rho, self.tau_x)]
            if self.rho < 1:
                comps.append((1.0 - self.rho, 0.0))
            return comps
        raise InvalidConfig("grid priors are not Gaussian mixtures")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "gaussian":
            return np.sqrt(self.tau_x) * rng.standard_normal(n)
        if self.kind == "bernoulli-gaussian":
            support = rng.random(n) < self.rho
            return np.where(support, np.sqrt(self.tau_x) * rng.standard_normal(n), 0.0)
        x = self.grid_points
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(x) * (np.asarray(self.density)[1:] + np.asarray(self.density)[:-1]))])
        cdf /= cdf[-1]
        return np.interp(rng.random(n), cdf, x)


def _grid(tau_x: float) -> np.ndarray:
    h = _GRID_HALF_WIDTH * np.sqrt(tau_x)
    return np.linspace(-h, h, GRID_POINTS)


@dataclass(frozen=True)
class ChannelSpec:
    """Output channel ``y = h(z, w)`` with ``w ~ N(0, tau_w)``."""

    kind: str = "awgn"
    tau_w: float = 0.01

    def __post_init__(self):
        if self.kind not in ("awgn", "probit"):
            raise InvalidConfig(f"unsupported channel {self.kind!r}", field="model.channel.kind")
        if not (np.isfinite(self.tau_w) and self.tau_w > 0):
            raise InvalidConfig("tau_w must be positive", field="model.channel.tau_w")

    @classmethod
    def awgn(cls, tau_w: float) -> "ChannelSpec":
        return cls("awgn", tau_w)

    @classmethod
    def probit(cls, tau_w: float) -> "ChannelSpec":
        return cls("probit", tau_w)

    @property
    def gamma_w(self) -> float:
        return 1.0 / self.tau_w

    def observe(self, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        """The map ``h(z, w)``."""
        t = np.asarray(z) + np.asarray(w)
        if self.kind == "awgn":
            return t
        return np.where(t >= 0, 1.0, -1.0)

    def sample_noise(self, m: int, rng: np.random.Generator) -> np.ndarray:
        return np.sqrt(self.tau_w) * rng.standard_normal(m)


# A denoiser is specified by either a prior or a channel.
DenoiserSpec = PriorSpec | ChannelSpec


class DenoiserOutput(NamedTuple):
    value: np.ndarray
    divergence: float


class JointLmmseOutput(NamedTuple):
    x_hat: np.ndarray
    z_hat: np.ndarray
    alpha2: float
    beta2: float


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not (value > 0 and np.isfinite(value)):
        raise InvalidParameter(f"{name} must be positive and finite, got {value}")
    return value


def prior_posterior(r, gamma: float, prior: PriorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise posterior mean of ``x0`` given ``r`` and its derivative in ``r``."""
    r = np.asarray(r, dtype=float)
    gamma = _positive("gamma1", gamma)
    v = 1.0 / gamma
    tx = prior.tau_x
    if prior.kind == "gaussian":
        c = tx / (tx + v)
        return c * r, np.full_like(r, c)
    if prior.kind == "bernoulli-gaussian":
        c = tx / (tx + v)
        if prior.rho >= 1.0:
            return c * r, np.full_like(r, c)
        prec_gap = 1.0 / v - 1.0 / (tx + v)
        llr = (np.log(prior.rho / (1.0 - prior.rho)) + 0.5 * np.log(v / (tx + v))
               + 0.5 * r * r * prec_gap)
        pi = expit(llr)
        value = pi * c * r
        deriv = c * (pi + r * r * pi * (1.0 - pi) * prec_gap)
        return value, deriv
    return _grid_posterior(r, gamma, prior)


def _grid_posterior(r: np.ndarray, gamma: float, prior: PriorSpec, chunk: int = 1024):
    x = prior.grid_points
    with np.errstate(divide="ignore"):
        logp = np.log(_trapezoid_weights(x) * np.asarray(prior.density))
    flat = r.ravel()
    mean = np.empty_like(flat)
    var = np.empty_like(flat)
    for lo in range(0, flat.size, chunk):
        rr = flat[lo : lo + chunk, None]
        logw = logp - 0.5 * gamma * (rr - x) ** 2
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        # row-wise reductions rather than BLAS so each output depends only on its own input
        m1 = np.sum(w * x, axis=1)
        mean[lo : lo + chunk] = m1
        var[lo : lo + chunk] = np.maximum(np.sum(w * (x * x), axis=1) - m1 * m1, 0.0)
    # Tweedie: d/dr E[x|r] = gamma * Var[x|r]
    return mean.reshape(r.shape), (gamma * var).reshape(r.shape)


def output_posterior(p, tau: float, y, channel: ChannelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise posterior mean of ``z`` given ``z ~ N(p, 1/tau)`` and ``y``.

    Returns the mean and its derivative with respect to ``p``.
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise InvalidDimension(f"p and y shapes differ: {p.shape} vs {y.shape}")
    tau = _positive("tau1", tau)
    if channel.kind == "awgn":
        gw = channel.gamma_w
        return (tau * p + gw * y) / (tau + gw), np.full_like(p, tau / (tau + gw))
    v = 1.0 / tau
    s2 = v + channel.tau_w
    s = np.sqrt(s2)
    c = y * p / s
    # inverse Mills ratio phi(c)/Phi(c), stable for large |c|
    lam = _SQRT_2_OVER_PI / erfcx(-c / np.sqrt(2.0))
    value = p + y * v * lam / s
    deriv = 1.0 - (v / s2) * lam * (c + lam)
    return value, deriv


def denoise_prior(r, gamma1: float, prior: PriorSpec) -> DenoiserOutput:
    """MMSE estimate of ``x0`` from ``r = x0 + N(0, 1/gamma1)``."""
    value, deriv = prior_posterior(r, gamma1, prior)
    return DenoiserOutput(value, float(np.mean(deriv)))


def denoise_output(p, tau1: float, y, channel: ChannelSpec) -> DenoiserOutput:
    """MMSE estimate of ``z`` from pseudo-prior ``N(p, 1/tau1)`` and channel output ``y``."""
    value, deriv = output_posterior(p, tau1, y, channel)
    return DenoiserOutput(value, float(np.mean(deriv)))


def _check_len(name: str, a: np.ndarray, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (n,):
        raise InvalidDimension(f"{name} must have length {n}, got shape {a.shape}")
    return a


def lmmse_denoise(r2, gamma2: float, fac: MatrixFactorization, y, gamma_w: float) -> DenoiserOutput:
    """``(gw A^T A + g2 I)^{-1} (gw A^T y + g2 r2)`` evaluated in the singular basis.

    Directions of ``V`` beyond the first ``M`` see no measurement, so the
    estimate keeps ``r2`` there; this is what lets a thin ``V`` suffice.
    """
    r2 = _check_len("r2", r2, fac.n)
    y = _check_len("y", y, fac.m)
    gamma2 = _positive("gamma2", gamma2)
    gamma_w = _positive("gamma_w", gamma_w)
    s = fac.s
    vm = fac.v_m
    a = vm.T @ r2
    d = 1.0 / (gamma_w * s * s + gamma2)
    coef = d * (gamma_w * s * fac._ut_mul(y) + gamma2 * a)
    value = r2 + vm @ (coef - a)
    div = (gamma2 * d.sum() + (fac.n - fac.m)) / fac.n
    return DenoiserOutput(value, float(div))


def joint_lmmse_denoise(r2, p2, gamma2: float, tau2: float, fac: MatrixFactorization) -> JointLmmseOutput:
    """Joint estimate of ``x`` and ``z = A x`` from ``x ~ N(r2, 1/gamma2)`` and ``z ~ N(p2, 1/tau2)``.

    Returns the two estimates and their divergences, averaged over ``N`` and
    ``M`` coordinates respectively.
    """
    r2 = _check_len("r2", r2, fac.n)
    p2 = _check_len("p2", p2, fac.m)
    gamma2 = _positive("gamma2", gamma2)
    tau2 = _positive("tau2", tau2)
    s = fac.s
    vm = fac.v_m
    a = vm.T @ r2
    d = 1.0 / (tau2 * s * s + gamma2)
    coef = d * (tau2 * s * fac._ut_mul(p2) + gamma2 * a)
    x_hat = r2 + vm @ (coef - a)
    z_hat = fac._u_mul(s * coef)
    alpha2 = (gamma2 * d.sum() + (fac.n - fac.m)) / fac.n
    beta2 = float(np.mean(tau2 * s * s * d))
    return JointLmmseOutput(x_hat, z_hat, float(alpha2), beta2)


def finite_difference_divergence(fn: Callable, x, h: float = 1e-5, *, separable: bool = False) -> float:
    """Central-difference estimate of ``(1/N) sum_i d fn(x)_i / d x_i``.

    ``fn`` may return an array or a :class:`DenoiserOutput`. With
    ``separable=True`` all coordinates are perturbed at once, which is exact
    for coordinatewise maps and needs two evaluations instead of ``2N``.
    """
    if not h > 0:
        raise InvalidParameter("h must be positive")
    x = np.asarray(x, dtype=float)

    def value(z):
        out = fn(z)
        return np.asarray(out.value if isinstance(out, DenoiserOutput) else out, dtype=float)

    if separable:
        return float(np.mean((value(x + h) - value(x - h)) / (2 * h)))
    total = 0.0
    e = np.zeros_like(x)
    for i in range(x.size):
        e.flat[i] = h
        total += (value(x + e).flat[i] - value(x - e).flat[i]) / (2 * h)
        e.flat[i] = 0.0
    return total / x.size
