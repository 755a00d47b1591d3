"""Scalar state evolution for AMP, VAMP and GVAMP.

Every denoiser input is modelled in the large-system limit as

    R = mu * X0 + N(0, w)        (input side)
    P = mu * Z0 + N(0, w)        (output side, Z0 ~ N(0, E[S^2] E[X0^2]))

The classical recursion keeps ``mu = 1`` and tracks only the error variance
``sigma^2 = E[(R - X0)^2]``. Two situations need more than that:

* a random start ``r10 = V r_init`` is independent of the truth (``mu = 0``);
* the extrinsic messages leaving an MMSE denoiser are correlated with the
  truth, and under a non-Gaussian output channel that correlation survives
  the joint linear stage.

With ``track_signal=True`` (the default) the engine propagates ``(mu, w)``
through every stage using second moments, which covers both cases. With
``track_signal=False`` each message is collapsed back to ``mu = 1`` with the
same total error variance, which is the textbook recursion. The two agree
whenever the correlations vanish (for example Gaussian prior with AWGN).

Expectations over the prior and channel use Gauss-Hermite quadrature whose
node count is doubled until the result is stable; expectations over the
singular value law use the law's own quadrature nodes.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .denoisers import ChannelSpec, PriorSpec, output_posterior, prior_posterior
from .ensembles import SingularValueLaw
from .errors import InvalidConfig, NumericError, NumericWarning
from .solvers import SolverConfig

__all__ = [
    "SEInit",
    "SETrajectory",
    "InputMoments",
    "OutputMoments",
    "input_moments",
    "output_moments",
    "sensitivity_input",
    "error_input",
    "sensitivity_output",
    "error_output",
    "trace_limit_sensitivities",
    "error_linear",
    "se_init_from_config",
    "run_se_gvamp",
    "run_se_vamp",
    "run_se_amp",
    "gaussian_closed_form",
]

_REL_TOL = 1e-10
_WARN_TOL = 1e-6


@lru_cache(maxsize=32)
def _rule(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights for ``Z ~ N(0, 1)`` at refinement ``level``.

    Levels 0-2 are Gauss-Hermite rules with 64, 128 and 256 nodes. Higher
    levels switch to composite 16-point Gauss-Legendre on ``[-12, 12]`` with
    ``2**(level + 2)`` panels, which copes with integrands that have sharp
    transitions (sparse priors, low-noise probit).
    """
    if level <= 2:
        z, w = np.polynomial.hermite_e.hermegauss(64 * 2**level)
        return z, w / w.sum()
    panels = 2 ** (level + 2)
    x, wl = np.polynomial.legendre.leggauss(16)
    edges = np.linspace(-12.0, 12.0, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    z = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    w = (half[:, None] * wl[None, :]).ravel() * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    return z, w / w.sum()


_MAX_LEVEL = 10


def _adaptive(fn, what: str, max_level: int = _MAX_LEVEL) -> np.ndarray:
    """Evaluate ``fn(nodes, weights)`` on successively finer rules until stable."""
    prev = np.asarray(fn(*_rule(0)), dtype=float)
    for level in range(1, max_level + 1):
        cur = np.asarray(fn(*_rule(level)), dtype=float)
        scale = np.maximum(np.abs(cur), 1e-300)
        change = float(np.max(np.abs(cur - prev) / scale))
        if change < _REL_TOL:
            return cur
        prev = cur
    if change > _WARN_TOL:
        warnings.warn(f"{what}: quadrature did not settle (relative change {change:.2e})", NumericWarning,
                      stacklevel=3)
    return cur


# ---------------------------------------------------------------------------
# Nonlinear stages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InputMoments:
    """Moments of ``g = g_x1(R, gamma)`` with ``R = mu X0 + N(0, w)``."""

    deriv: float  # E[g'(R)]
    second: float  # E[g^2]
    cross: float  # E[g X0]
    x_second: float  # E[X0^2]
    mu: float
    w: float

    @property
    def mse(self) -> float:
        return max(self.second - 2.0 * self.cross + self.x_second, 0.0)


def input_moments(gamma: float, prior: PriorSpec, mu: float, w: float) -> InputMoments:
    m2 = prior.second_moment
    if prior.kind == "grid":
        vals = _grid_input(gamma, prior, mu, w)
    else:
        def integrand(z, wt):
            acc = np.zeros(3)
            for pc, vc in prior.components():
                vr = mu * mu * vc + w
                r = np.sqrt(vr) * z
                g, dg = prior_posterior(r, gamma, prior)
                slope = mu * vc / vr if vr > 0 else 0.0
                acc += pc * np.array([wt @ dg, wt @ (g * g), wt @ (g * slope * r)])
            return acc

        vals = _adaptive(integrand, "input moments")
    return InputMoments(float(vals[0]), float(vals[1]), float(vals[2]), m2, mu, w)


def _grid_input(gamma: float, prior: PriorSpec, mu: float, w: float) -> np.ndarray:
    x = prior.grid_points
    dens = np.asarray(prior.density)
    h = np.diff(x)
    wt_x = np.zeros_like(x)
    wt_x[:-1] += 0.5 * h
    wt_x[1:] += 0.5 * h
    pw = wt_x * dens
    keep = pw > 1e-16 * pw.max()
    xs, pw = x[keep], pw[keep] / pw[keep].sum()

    def integrand(z, wz):
        r = mu * xs[:, None] + np.sqrt(w) * z[None, :]
        g, dg = prior_posterior(r, gamma, prior)
        joint = pw[:, None] * wz[None, :]
        return np.array([np.sum(joint * dg), np.sum(joint * g * g), np.sum(joint * g * xs[:, None])])

    return _adaptive(integrand, "grid input moments", max_level=6)


@dataclass(frozen=True)
class OutputMoments:
    """Moments of ``g = g_z1(P, tau, Y)`` with ``P = mu Z0 + N(0, w)``."""

    deriv: float
    second: float
    cross: float  # E[g Z0]
    z_second: float
    mu: float
    w: float

    @property
    def mse(self) -> float:
        return max(self.second - 2.0 * self.cross + self.z_second, 0.0)


def output_moments(tau: float, channel: ChannelSpec, z_var: float, mu: float, w: float) -> OutputMoments:
    if channel.kind == "awgn":
        gw = channel.gamma_w
        den = tau + gw
        deriv = tau / den
        cross = (tau * mu * z_var + gw * z_var) / den
        second = (tau**2 * (mu * mu * z_var + w) + 2 * tau * gw * mu * z_var + gw**2 * (z_var + channel.tau_w)) / den**2
        return OutputMoments(deriv, second, cross, z_var, mu, w)

    vp = mu * mu * z_var + w
    if vp > 0:
        slope, s2 = mu * z_var / vp, z_var * w / vp
    else:
        slope, s2 = 0.0, z_var
    t = np.sqrt(channel.tau_w + s2)

    def integrand(z, wt):
        p = np.sqrt(vp) * z
        m = slope * p
        acc = np.zeros(3)
        for y in (1.0, -1.0):
            u = y * m / t
            prob = ndtr(u)
            zmean = prob * m + y * s2 * np.exp(-0.5 * u * u) / np.sqrt(2 * np.pi) / t
            g, dg = output_posterior(p, tau, np.full_like(p, y), channel)
            acc += np.array([wt @ (prob * dg), wt @ (prob * g * g), wt @ (g * zmean)])
        return acc

    vals = _adaptive(integrand, "output moments")
    return OutputMoments(float(vals[0]), float(vals[1]), float(vals[2]), z_var, mu, w)


def sensitivity_input(gamma1: float, sigma1_sq: float, prior: PriorSpec) -> float:
    """``E[g_x1'(R)]`` for ``R = X0 + N(0, sigma1_sq)``."""
    return input_moments(gamma1, prior, 1.0, sigma1_sq).deriv


def error_input(gamma1: float, sigma1_sq: float, prior: PriorSpec) -> float:
    """``E[(g_x1(R) - X0)^2]`` for ``R = X0 + N(0, sigma1_sq)``."""
    return input_moments(gamma1, prior, 1.0, sigma1_sq).mse


def sensitivity_output(tau1: float, rho1_sq: float, channel: ChannelSpec, z_var: float) -> float:
    """``E[g_z1'(P)]`` for ``P = Z0 + N(0, rho1_sq)``, ``Z0 ~ N(0, z_var)``."""
    return output_moments(tau1, channel, z_var, 1.0, rho1_sq).deriv


def error_output(tau1: float, rho1_sq: float, channel: ChannelSpec, z_var: float) -> float:
    """``E[(g_z1(P) - Z0)^2]`` for ``P = Z0 + N(0, rho1_sq)``."""
    return output_moments(tau1, channel, z_var, 1.0, rho1_sq).mse


# ---------------------------------------------------------------------------
# Linear stage
# ---------------------------------------------------------------------------


def _mix(law: SingularValueLaw, delta: float, fn) -> float:
    """Expectation under ``delta * law + (1 - delta) * point mass at 0``."""
    return delta * law.expect(fn) + (1.0 - delta) * float(fn(np.zeros(1))[0])


def trace_limit_sensitivities(gamma2: float, tau2: float, law: SingularValueLaw, delta: float) -> tuple[float, float]:
    """Large-system divergences ``(A_x2, A_z2)`` of the joint LMMSE estimator."""
    a_x = _mix(law, delta, lambda s: gamma2 / (tau2 * s * s + gamma2))
    a_z = law.expect(lambda s: tau2 * s * s / (tau2 * s * s + gamma2))
    return a_x, a_z


def error_linear(gamma2: float, tau2: float, sigma2_sq: float, rho2_sq: float, law: SingularValueLaw,
                 delta: float) -> tuple[float, float]:
    """Large-system errors ``(E_x2, E_z2)`` for independent Gaussian input errors.

    ``E_x2`` is averaged over the ``N`` signal coordinates and ``E_z2`` over
    the ``M`` measurement coordinates.
    """

    def num(s):
        return (tau2**2 * s * s * rho2_sq + gamma2**2 * sigma2_sq) / (tau2 * s * s + gamma2) ** 2

    return _mix(law, delta, num), law.expect(lambda s: s * s * num(s))


@dataclass(frozen=True)
class _Linear:
    alpha: float
    beta: float
    mse_x: float
    mu_r: float
    w_r: float
    mu_p: float
    w_p: float


def _linear_stage(gamma, tau, a, b, mu_r, w_r, mu_p, w_p, m2, law, delta) -> _Linear:
    """Propagate ``(mu, w)`` through the joint LMMSE stage and its extrinsic step.

    ``a`` and ``b`` are the (clipped) divergences used in the extrinsic
    combination; the returned ``alpha``/``beta`` are the raw limits.
    """
    alpha, beta = trace_limit_sensitivities(gamma, tau, law, delta)

    def d(s):
        return 1.0 / (tau * s * s + gamma)

    def kappa(s):
        return d(s) * (tau * mu_p * s * s + gamma * mu_r)

    mse_x = _mix(law, delta, lambda s: (kappa(s) - 1.0) ** 2 * m2 + d(s) ** 2 * (tau**2 * s * s * w_p + gamma**2 * w_r))

    # r1' = (x2 - a r2) / (1 - a), written coordinatewise in the V basis
    kx = lambda s: kappa(s) - a * mu_r
    mu_r1 = _mix(law, delta, kx) / (1.0 - a)
    e_r1 = _mix(law, delta, lambda s: kx(s) ** 2 * m2 + d(s) ** 2 * tau**2 * s * s * w_p
                + (gamma * d(s) - a) ** 2 * w_r) / (1.0 - a) ** 2
    w_r1 = e_r1 - mu_r1**2 * m2

    # p1' = (z2 - b p2) / (1 - b), written coordinatewise in the U basis
    es2 = law.expect(lambda s: s * s)
    lz = lambda s: s * kappa(s) - b * mu_p * s
    mu_p1 = law.expect(lambda s: lz(s) * s) / ((1.0 - b) * es2) if es2 > 0 else 0.0
    e_p1 = law.expect(lambda s: lz(s) ** 2 * m2 + (tau * s * s * d(s) - b) ** 2 * w_p
                      + s * s * d(s) ** 2 * gamma**2 * w_r) / (1.0 - b) ** 2
    w_p1 = e_p1 - mu_p1**2 * es2 * m2
    return _Linear(alpha, beta, mse_x, mu_r1, w_r1, mu_p1, w_p1)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SEInit:
    """Initial precisions and error variances.

    ``mode="centered"`` means ``R10 = X0 + N(0, sigma1_sq)``.
    ``mode="independent"`` means ``R10`` is independent of ``X0``, so its own
    variance is ``sigma1_sq - E[X0^2]`` (likewise for ``P10``).
    """

    gamma1: float = 1.0
    tau1: float = 1.0
    sigma1_sq: float = 2.0
    rho1_sq: float = 2.0
    mode: str = "independent"

    def __post_init__(self):
        if self.mode not in ("independent", "centered"):
            raise InvalidConfig("SE init mode must be independent or centered", field="se.init_mode")
        for name in ("gamma1", "tau1"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive", field=f"se.{name}")
        for name in ("sigma1_sq", "rho1_sq"):
            if not getattr(self, name) >= 0:
                raise InvalidConfig(f"{name} must be non-negative", field=f"se.{name}")


def se_init_from_config(cfg: SolverConfig, prior: PriorSpec, law: SingularValueLaw) -> SEInit:
    """The SE starting point that matches a solver configuration."""
    m2 = prior.second_moment
    vz = law.expect(lambda s: s * s) * m2
    if cfg.init_mode == "centered":
        return SEInit(cfg.gamma10, cfg.tau10, cfg.init_var, cfg.init_var, "centered")
    var = cfg.init_var if cfg.init_mode == "random" else 0.0
    return SEInit(cfg.gamma10, cfg.tau10, var + m2, var + vz, "independent")


_FIELDS = ("alpha1", "alpha2", "beta1", "beta2", "gamma1", "gamma2", "tau1", "tau2",
           "sigma1_sq", "sigma2_sq", "rho1_sq", "rho2_sq", "mse_pred", "mse2_pred",
           "cross_pred", "second_pred", "mu_r1", "mu_r2", "mu_p1", "mu_p2")


@dataclass
class SETrajectory:
    """Per-iteration limiting quantities, one entry per iteration ``k = 0..K``.

    ``mse_pred[k]`` predicts the mean squared error of ``x1_hat[k]``;
    ``cross_pred`` and ``second_pred`` predict ``<x1_hat, x0>/N`` and
    ``||x1_hat||^2/N``. ``mu_*`` are the signal coefficients described in the
    module docstring.
    """

    algorithm: str
    data: dict[str, list[float]] = field(default_factory=lambda: {f: [] for f in _FIELDS})
    clip_events: dict[str, int] = field(default_factory=dict)
    x_second: float = 0.0
    z_second: float = 0.0

    def __getattr__(self, name):
        data = self.__dict__.get("data")
        if data is not None and name in data:
            return np.asarray(data[name], dtype=float)
        raise AttributeError(name)

    def __len__(self) -> int:
        return len(self.data["mse_pred"])

    def append(self, **values) -> None:
        for f in _FIELDS:
            self.data[f].append(float(values.get(f, np.nan)))

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm, "clip_events": self.clip_events, "x_second": self.x_second,
                "z_second": self.z_second, **{k: list(v) for k, v in self.data.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SETrajectory":
        out = cls(d["algorithm"], {f: list(d.get(f, [])) for f in _FIELDS}, dict(d.get("clip_events", {})),
                  d.get("x_second", 0.0), d.get("z_second", 0.0))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(("k",) + _FIELDS)
        for k in range(len(self)):
            writer.writerow([k] + [repr(self.data[f][k]) for f in _FIELDS])
        return buf.getvalue()


class _Clipper:
    def __init__(self, cfg: SolverConfig, traj: SETrajectory):
        self.cfg, self.traj = cfg, traj

    def _note(self, name, raw, val):
        if val != raw:
            self.traj.clip_events[name] = self.traj.clip_events.get(name, 0) + 1
        return val

    def alpha(self, name, raw):
        return self._note(name, raw, self.cfg.clip_alpha(raw))

    def gamma(self, name, raw):
        return self._note(name, raw, self.cfg.clip_gamma(raw))

    def tau(self, name, raw):
        return self._note(name, raw, self.cfg.clip_tau(raw))


def _nonneg(value: float, scale: float, what: str, k: int) -> float:
    if not np.isfinite(value):
        raise NumericError(f"{what} is not finite", iteration=k)
    if value < -1e-10 * max(scale, 1.0):
        raise NumericError(f"{what} became negative ({value:.3e})", iteration=k)
    return max(value, 0.0)


def _extrinsic_in(mom: InputMoments, a: float, m2: float, k: int, name: str):
    """``(mu, w)`` of ``(g - a R) / (1 - a)`` given the moments of ``g``."""
    mu, w = mom.mu, mom.w
    mu2 = (mom.cross - a * mu * m2) / ((1.0 - a) * m2)
    e2 = (mom.second - 2 * a * (mu * mom.cross + w * mom.deriv) + a * a * (mu * mu * m2 + w)) / (1.0 - a) ** 2
    return mu2, _nonneg(e2 - mu2 * mu2 * m2, e2, name, k)


def _collapse(mu: float, w: float, m2: float) -> tuple[float, float]:
    return 1.0, (mu - 1.0) ** 2 * m2 + w


def _state_from_init(init: SEInit, m2: float, vz: float, k: int = 0):
    if init.mode == "centered":
        return (1.0, init.sigma1_sq), (1.0, init.rho1_sq)
    w_r = init.sigma1_sq - m2
    w_p = init.rho1_sq - vz
    if w_r < -1e-12 or w_p < -1e-12:
        raise InvalidConfig("independent init needs sigma1_sq >= E[X0^2] and rho1_sq >= E[Z0^2]", field="se.init")
    return (0.0, max(w_r, 0.0)), (0.0, max(w_p, 0.0))


def run_se_gvamp(prior: PriorSpec, channel: ChannelSpec, law: SingularValueLaw, delta: float,
                 init: SEInit = SEInit(), K: int = 30, cfg: SolverConfig = SolverConfig(), *,
                 track_signal: bool = True) -> SETrajectory:
    """GVAMP state evolution for iterations ``k = 0..K``."""
    if not 0 < delta <= 1:
        raise InvalidConfig("delta must lie in (0, 1]", field="model.delta")
    m2 = prior.second_moment
    vz = law.expect(lambda s: s * s) * m2
    traj = SETrajectory("gvamp", x_second=m2, z_second=vz)
    clip = _Clipper(cfg, traj)
    (mu_r1, w_r1), (mu_p1, w_p1) = _state_from_init(init, m2, vz)
    g1, t1 = cfg.clip_gamma(init.gamma1), cfg.clip_tau(init.tau1)
    for k in range(K + 1):
        mi = input_moments(g1, prior, mu_r1, w_r1)
        a1 = clip.alpha("alpha1", mi.deriv)
        g2 = clip.gamma("gamma2", g1 * (1.0 / a1 - 1.0))
        mu_r2, w_r2 = _extrinsic_in(mi, a1, m2, k, "sigma2_sq")

        mo = output_moments(t1, channel, vz, mu_p1, w_p1)
        b1 = clip.alpha("beta1", mo.deriv)
        t2 = clip.tau("tau2", t1 * (1.0 / b1 - 1.0))
        mu_p2, w_p2 = _extrinsic_in(mo, b1, vz, k, "rho2_sq") if vz > 0 else (0.0, 0.0)

        if not track_signal:
            mu_r2, w_r2 = _collapse(mu_r2, w_r2, m2)
            mu_p2, w_p2 = _collapse(mu_p2, w_p2, vz)
        a2_raw, b2_raw = trace_limit_sensitivities(g2, t2, law, delta)
        a2, b2 = clip.alpha("alpha2", a2_raw), clip.alpha("beta2", b2_raw)
        lin = _linear_stage(g2, t2, a2, b2, mu_r2, w_r2, mu_p2, w_p2, m2, law, delta)
        traj.append(alpha1=a1, alpha2=a2, beta1=b1, beta2=b2, gamma1=g1, gamma2=g2, tau1=t1, tau2=t2,
                    sigma1_sq=(mu_r1 - 1) ** 2 * m2 + w_r1, sigma2_sq=(mu_r2 - 1) ** 2 * m2 + w_r2,
                    rho1_sq=(mu_p1 - 1) ** 2 * vz + w_p1, rho2_sq=(mu_p2 - 1) ** 2 * vz + w_p2,
                    mse_pred=mi.mse, mse2_pred=lin.mse_x, cross_pred=mi.cross, second_pred=mi.second,
                    mu_r1=mu_r1, mu_r2=mu_r2, mu_p1=mu_p1, mu_p2=mu_p2)
        g1 = clip.gamma("gamma1", g2 * (1.0 / a2 - 1.0))
        t1 = clip.tau("tau1", t2 * (1.0 / b2 - 1.0))
        mu_r1, w_r1 = lin.mu_r, _nonneg(lin.w_r, m2, "sigma1_sq", k + 1)
        mu_p1, w_p1 = lin.mu_p, _nonneg(lin.w_p, vz, "rho1_sq", k + 1)
        if not track_signal:
            mu_r1, w_r1 = _collapse(mu_r1, w_r1, m2)
            mu_p1, w_p1 = _collapse(mu_p1, w_p1, vz)
    return traj


def run_se_vamp(prior: PriorSpec, tau_w: float, law: SingularValueLaw, delta: float,
                init: SEInit = SEInit(), K: int = 30, cfg: SolverConfig = SolverConfig(), *,
                track_signal: bool = True) -> SETrajectory:
    """VAMP state evolution: the input half of GVAMP with the LMMSE stage fed by ``y``.

    Only ``gamma1``, ``sigma1_sq`` and ``init.mode`` are read from ``init``.
    """
    if not 0 < delta <= 1:
        raise InvalidConfig("delta must lie in (0, 1]", field="model.delta")
    if not tau_w > 0:
        raise InvalidConfig("tau_w must be positive", field="model.channel.tau_w")
    m2 = prior.second_moment
    traj = SETrajectory("vamp", x_second=m2, z_second=law.expect(lambda s: s * s) * m2)
    clip = _Clipper(cfg, traj)
    (mu_r1, w_r1), _ = _state_from_init(SEInit(init.gamma1, 1.0, init.sigma1_sq, traj.z_second, init.mode),
                                        m2, traj.z_second)
    g1 = cfg.clip_gamma(init.gamma1)
    gw = 1.0 / tau_w
    for k in range(K + 1):
        mi = input_moments(g1, prior, mu_r1, w_r1)
        a1 = clip.alpha("alpha1", mi.deriv)
        g2 = clip.gamma("gamma2", g1 / a1 - g1)
        mu_r2, w_r2 = _extrinsic_in(mi, a1, m2, k, "sigma2_sq")
        if not track_signal:
            mu_r2, w_r2 = _collapse(mu_r2, w_r2, m2)
        a2 = clip.alpha("alpha2", trace_limit_sensitivities(g2, gw, law, delta)[0])
        lin = _linear_stage(g2, gw, a2, 0.5, mu_r2, w_r2, 1.0, tau_w, m2, law, delta)
        traj.append(alpha1=a1, alpha2=a2, gamma1=g1, gamma2=g2, tau2=gw, rho2_sq=tau_w,
                    sigma1_sq=(mu_r1 - 1) ** 2 * m2 + w_r1, sigma2_sq=(mu_r2 - 1) ** 2 * m2 + w_r2,
                    mse_pred=mi.mse, mse2_pred=lin.mse_x, cross_pred=mi.cross, second_pred=mi.second,
                    mu_r1=mu_r1, mu_r2=mu_r2, mu_p2=1.0)
        g1 = clip.gamma("gamma1", g2 / a2 - g2)
        mu_r1, w_r1 = lin.mu_r, _nonneg(lin.w_r, m2, "sigma1_sq", k + 1)
        if not track_signal:
            mu_r1, w_r1 = _collapse(mu_r1, w_r1, m2)
    return traj


def run_se_amp(prior: PriorSpec, delta: float, tau_w: float, K: int = 30) -> SETrajectory:
    """AMP state evolution for i.i.d. Gaussian designs with ``N(0, 1/M)`` entries.

    ``tau_k`` (stored as ``1/gamma1``) is the effective noise variance of
    ``r_k``; ``tau_0 = tau_w + E[X0^2]/delta`` for the zero start.
    """
    if not 0 < delta <= 1:
        raise InvalidConfig("delta must lie in (0, 1]", field="model.delta")
    m2 = prior.second_moment
    traj = SETrajectory("amp", x_second=m2)
    tau = tau_w + m2 / delta
    for _ in range(K + 1):
        mi = input_moments(1.0 / tau, prior, 1.0, tau)
        traj.append(gamma1=1.0 / tau, sigma1_sq=tau, alpha1=mi.deriv, mse_pred=mi.mse, cross_pred=mi.cross,
                    second_pred=mi.second, mu_r1=1.0)
        tau = tau_w + mi.mse / delta
    return traj


def gaussian_closed_form(tau_x: float, tau_w: float, s_value: float, delta: float, K: int,
                         gamma10: float = 1.0, sigma10_sq: float | None = None,
                         cfg: SolverConfig = SolverConfig()) -> dict[str, np.ndarray]:
    """Hand-derived VAMP recursion for a Gaussian prior and constant singular values.

    With ``g_x1(r) = c r`` and ``c = gamma1 tau_x / (gamma1 tau_x + 1)`` the
    first stage has ``alpha1 = c`` and sends ``r2 = 0``, so ``gamma2 = 1/tau_x``
    and ``sigma2_sq = tau_x`` for every ``k``. The LMMSE stage then sees a
    two-point spectrum. ``sigma10_sq`` defaults to the random-start value
    ``1 + tau_x`` and only affects ``k = 0`` through ``mse_pred``.
    """
    sigma10_sq = 1.0 + tau_x if sigma10_sq is None else sigma10_sq
    gw = 1.0 / tau_w
    s2 = s_value**2
    out = {k: np.zeros(K + 1) for k in ("gamma1", "alpha1", "gamma2", "alpha2", "mse_pred", "mse2_pred")}
    g1 = gamma10
    for k in range(K + 1):
        c = cfg.clip_alpha(g1 * tau_x / (g1 * tau_x + 1.0))
        if k == 0:
            var_r = sigma10_sq - tau_x  # independent random start
            mse = c * c * var_r + tau_x
        else:
            mse = (1 - c) ** 2 * tau_x + c * c / g1
        g2 = 1.0 / tau_x
        d_on, d_off = 1.0 / (gw * s2 + g2), 1.0 / g2
        a2 = cfg.clip_alpha(delta * g2 * d_on + (1 - delta) * g2 * d_off)
        mse2 = delta * d_on**2 * (gw * s2 + g2**2 * tau_x) + (1 - delta) * tau_x
        out["gamma1"][k], out["alpha1"][k], out["gamma2"][k] = g1, c, g2
        out["alpha2"][k], out["mse_pred"][k], out["mse2_pred"][k] = a2, mse, mse2
        g1 = cfg.clip_gamma(g2 / a2 - g2)
    return out
