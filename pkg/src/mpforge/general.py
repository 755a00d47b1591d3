"""General two-chain recursion, its GVAMP translation, and its state evolution.

The recursion alternates between a "p" half, where separable functions act
coordinatewise on ``p = V u`` (input chain) and ``U u`` (output chain), and a
"q" half acting on ``q = V^T v`` and ``U^T v``. Iterates are ``n x d``
arrays with ``d`` in {1, 2}.

Two GVAMP layouts are provided:

``"pinned"`` (``d = 2``)
    Column 1 carries the algorithm iterate and column 2 pins the truth, so
    that the recursion regenerates GVAMP exactly at finite ``N``.
``"error"`` (``d = 1``)
    Every iterate is the error ``r - x0`` (or ``p - z0``). This is also an
    exact finite-``N`` identity and is the form in which the large-system
    quantities are Gaussian and independent of the disturbances, so the
    scalar state evolution and the Gaussian-process tracker use it.

Separable functions receive row-aligned arrays. When ``M < N`` the output
chain rows are zero-padded for input-side functions and input-chain rows are
truncated for output-side functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .denoisers import ChannelSpec, PriorSpec, output_posterior, prior_posterior
from .ensembles import SingularValueLaw
from .errors import InternalError, InvalidConfig, InvalidDimension, NumericError, UnsupportedModel
from .solvers import ProblemInstance, SolverConfig, initial_inputs, run_gvamp
from .state_evolution import SEInit, SETrajectory

__all__ = [
    "GeneralInputs",
    "GeneralState",
    "TranslationBundle",
    "GeneralModel",
    "GaussianProcessModel",
    "TranslationReport",
    "run_general_gvamp",
    "run_general_vamp",
    "translate_gvamp",
    "translate_vamp",
    "VampTranslation",
    "gvamp_general_model",
    "run_se_general",
    "track_gaussian_process",
    "check_translation_equivalence",
]

# f(x_own, x_other, w, gamma_out, gamma_in) -> (value, derivative wrt x_own)
SeparableFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
GammaFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _identity_clip(alpha: np.ndarray) -> np.ndarray:
    return alpha


@dataclass
class GeneralInputs:
    """Everything the two-chain recursion consumes.

    The input-side functions are called as ``f(x_in, x_out_padded, w_in, g_out, g_in)``
    and the output-side ones as ``f(x_in_truncated, x_out, w_out, g_out, g_in)``;
    each returns the ``n x d`` value and the derivative of column ``j`` with
    respect to its own-chain column ``j``.
    """

    V: np.ndarray
    U: np.ndarray
    f_p_in: SeparableFn
    f_p_out: SeparableFn
    f_q_in: SeparableFn
    f_q_out: SeparableFn
    gamma_p_in: GammaFn
    gamma_p_out: GammaFn
    gamma_q_in: GammaFn
    gamma_q_out: GammaFn
    w_p_in: np.ndarray
    w_p_out: np.ndarray
    w_q_in: np.ndarray
    w_q_out: np.ndarray
    u0_in: np.ndarray
    u0_out: np.ndarray
    gamma_p0_in: np.ndarray
    gamma_p0_out: np.ndarray
    clip_alpha_in: Callable[[np.ndarray], np.ndarray] = _identity_clip
    clip_alpha_out: Callable[[np.ndarray], np.ndarray] = _identity_clip

    def __post_init__(self):
        n, m = self.V.shape[0], self.U.shape[0]
        if self.V.shape != (n, n) or self.U.shape != (m, m) or m > n:
            raise InvalidDimension("V must be N x N and U M x M with M <= N")
        self.u0_in = np.atleast_2d(np.asarray(self.u0_in, dtype=float).T).T
        self.u0_out = np.atleast_2d(np.asarray(self.u0_out, dtype=float).T).T
        if self.u0_in.shape[0] != n or self.u0_out.shape[0] != m or self.u0_in.shape[1] != self.u0_out.shape[1]:
            raise InvalidDimension("initial iterates do not match (N, M, d)")
        if self.d not in (1, 2):
            raise InvalidDimension("d must be 1 or 2")

    @property
    def d(self) -> int:
        return self.u0_in.shape[1]


@dataclass
class GeneralState:
    """Iterates and scalars of one pass of the two-chain recursion."""

    k: int
    p_in: np.ndarray
    p_out: np.ndarray
    v_in: np.ndarray
    v_out: np.ndarray
    q_in: np.ndarray
    q_out: np.ndarray
    u_in: np.ndarray
    u_out: np.ndarray
    alpha_p_in: np.ndarray
    alpha_p_out: np.ndarray
    alpha_q_in: np.ndarray
    alpha_q_out: np.ndarray
    gamma_p_in: np.ndarray
    gamma_p_out: np.ndarray
    gamma_q_in: np.ndarray
    gamma_q_out: np.ndarray


def _pad(x: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + x.shape[1:])
    out[: x.shape[0]] = x
    return out


def _onsager(value, deriv, x, clip, what: str):
    alpha = clip(np.mean(deriv, axis=0))
    if np.any(1.0 - alpha < 1e-12):
        raise InternalError(f"{what}: divergence component within 1e-12 of 1")
    return (value - alpha * x) / (1.0 - alpha), alpha


def run_general_gvamp(inp: GeneralInputs, K: int) -> list[GeneralState]:
    """Run the two-chain recursion for ``k = 0..K``.

    The ``u_in`` update uses the input-chain divergence ``alpha_q_in`` (the
    display it is based on writes ``alpha_q_out`` there, which does not match
    the GVAMP iterates).
    """
    V, U = inp.V, inp.U
    n, m = V.shape[0], U.shape[0]
    u_in, u_out = inp.u0_in.copy(), inp.u0_out.copy()
    g_in, g_out = np.asarray(inp.gamma_p0_in, float), np.asarray(inp.gamma_p0_out, float)
    states = []
    for k in range(K + 1):
        p_in, p_out = V @ u_in, U @ u_out
        val, der = inp.f_p_in(p_in, _pad(p_out, n), inp.w_p_in, g_out, g_in)
        v_in, a_p_in = _onsager(val, der, p_in, inp.clip_alpha_in, "alpha_p_in")
        val, der = inp.f_p_out(p_in[:m], p_out, inp.w_p_out, g_out, g_in)
        v_out, a_p_out = _onsager(val, der, p_out, inp.clip_alpha_out, "alpha_p_out")
        gq_in, gq_out = inp.gamma_q_in(g_in, a_p_in), inp.gamma_q_out(g_out, a_p_out)
        q_in, q_out = V.T @ v_in, U.T @ v_out
        val, der = inp.f_q_in(q_in, _pad(q_out, n), inp.w_q_in, gq_out, gq_in)
        u_in_next, a_q_in = _onsager(val, der, q_in, inp.clip_alpha_in, "alpha_q_in")
        val, der = inp.f_q_out(q_in[:m], q_out, inp.w_q_out, gq_out, gq_in)
        u_out_next, a_q_out = _onsager(val, der, q_out, inp.clip_alpha_out, "alpha_q_out")
        states.append(GeneralState(k, p_in, p_out, v_in, v_out, q_in, q_out, u_in, u_out,
                                   a_p_in, a_p_out, a_q_in, a_q_out, g_in, g_out, gq_in, gq_out))
        g_in, g_out = inp.gamma_p_in(gq_in, a_q_in), inp.gamma_p_out(gq_out, a_q_out)
        u_in, u_out = u_in_next, u_out_next
    return states


def run_general_vamp(V: np.ndarray, f_p: Callable, f_q: Callable, w_p: np.ndarray, w_q: np.ndarray,
                     u0: np.ndarray, gamma0, K: int, *, C1: Callable = None, C2: Callable = None,
                     Gamma1: Callable = None, Gamma2: Callable = None,
                     clip_alpha: Callable = _identity_clip) -> list[dict]:
    """Single-chain recursion: ``f_p(p, w, gamma)`` and ``f_q(q, w, gamma)``.

    ``C1``/``C2`` default to ``1 / (1 - alpha)`` and ``Gamma1``/``Gamma2`` to
    ``gamma (1 - alpha) / alpha``.
    """
    C1 = C1 or (lambda a: 1.0 / (1.0 - a))
    C2 = C2 or (lambda a: 1.0 / (1.0 - a))
    Gamma1 = Gamma1 or (lambda g, a: g * (1.0 - a) / a)
    Gamma2 = Gamma2 or (lambda g, a: g * (1.0 - a) / a)
    u = np.atleast_2d(np.asarray(u0, dtype=float).T).T.copy()
    g1 = np.asarray(gamma0, dtype=float)
    out = []
    for k in range(K + 1):
        p = V @ u
        val, der = f_p(p, w_p, g1)
        a1 = clip_alpha(np.mean(der, axis=0))
        if np.any(1.0 - a1 < 1e-12):
            raise InternalError("alpha1 within 1e-12 of 1")
        v = C1(a1) * (val - a1 * p)
        g2 = Gamma1(g1, a1)
        q = V.T @ v
        val, der = f_q(q, w_q, g2)
        a2 = clip_alpha(np.mean(der, axis=0))
        if np.any(1.0 - a2 < 1e-12):
            raise InternalError("alpha2 within 1e-12 of 1")
        u_next = C2(a2) * (val - a2 * q)
        out.append({"k": k, "p": p, "v": v, "q": q, "u": u, "alpha1": a1, "alpha2": a2, "gamma1": g1, "gamma2": g2})
        g1, u = Gamma2(g2, a2), u_next
    return out


# ---------------------------------------------------------------------------
# GVAMP translation
# ---------------------------------------------------------------------------


def _clip_first(cfg: SolverConfig, kind: str):
    lo, hi = (cfg.gamma_min, cfg.gamma_max) if kind == "gamma" else (cfg.tau_min, cfg.tau_max)

    def gamma_fn(g, a):
        out = np.array(g, dtype=float, copy=True)
        out[0] = min(max(g[0] * (1.0 - a[0]) / a[0], lo), hi)
        if out.size > 1:
            out[1:] = 1.0
        return out

    return gamma_fn


def _alpha_clip_first(cfg: SolverConfig):
    def clip(a):
        a = np.array(a, dtype=float, copy=True)
        a[0] = cfg.clip_alpha(a[0])
        return a

    return clip


class _GvampFunctions:
    """The four separable maps of the GVAMP translation, for either layout."""

    def __init__(self, prior: PriorSpec, channel: ChannelSpec, layout: str):
        if channel.kind not in ("awgn", "probit"):
            raise UnsupportedModel(f"channel {channel.kind} has no h-representation")
        self.prior, self.channel, self.layout = prior, channel, layout

    def f_p_in(self, p_in, p_out, w, g_out, g_in):
        if self.layout == "pinned":
            val, der = prior_posterior(p_in[:, 0], g_in[0], self.prior)
            return np.column_stack([val, w[:, 0]]), np.column_stack([der, np.zeros_like(der)])
        x0 = w[:, 0]
        val, der = prior_posterior(x0 + p_in[:, 0], g_in[0], self.prior)
        return (val - x0)[:, None], der[:, None]

    def f_p_out(self, p_in, p_out, w, g_out, g_in):
        if self.layout == "pinned":
            y = self.channel.observe(p_out[:, 1], w[:, 0])
            val, der = output_posterior(p_out[:, 0], g_out[0], y, self.channel)
            return np.column_stack([val, np.zeros_like(val)]), np.column_stack([der, np.zeros_like(der)])
        z0, noise = w[:, 0], w[:, 1]
        y = self.channel.observe(z0, noise)
        val, der = output_posterior(z0 + p_out[:, 0], g_out[0], y, self.channel)
        return (val - z0)[:, None], der[:, None]

    @staticmethod
    def _lin(q_in, q_out, s, tau, gamma):
        den = tau * s * s + gamma
        return (tau * s * q_out + gamma * q_in) / den, den

    def f_q_in(self, q_in, q_out, w, g_out, g_in):
        s = w[:, 0]
        val, den = self._lin(q_in[:, 0], q_out[:, 0], s, g_out[0], g_in[0])
        der = g_in[0] / den
        if self.layout == "pinned":
            z = np.zeros_like(val)
            return np.column_stack([val, z]), np.column_stack([der, z])
        return val[:, None], der[:, None]

    def f_q_out(self, q_in, q_out, w, g_out, g_in):
        s = w[:, 0]
        val, den = self._lin(q_in[:, 0], q_out[:, 0], s, g_out[0], g_in[0])
        der = g_out[0] * s * s / den
        if self.layout == "pinned":
            return np.column_stack([s * val, s * q_in[:, 1]]), np.column_stack([der, np.zeros_like(der)])
        return (s * val)[:, None], der[:, None]


@dataclass
class TranslationBundle:
    """General-recursion inputs that reproduce one GVAMP run."""

    inputs: GeneralInputs
    layout: str
    r10: np.ndarray
    p10: np.ndarray

    @property
    def d(self) -> int:
        return self.inputs.d


def translate_gvamp(inst: ProblemInstance, prior: PriorSpec, channel: ChannelSpec | None = None,
                    cfg: SolverConfig = SolverConfig(), *, rng: np.random.Generator | None = None,
                    r10: np.ndarray | None = None, p10: np.ndarray | None = None,
                    layout: str = "pinned") -> TranslationBundle:
    """Map a GVAMP problem to the two-chain recursion.

    Needs the full ``N x N`` right factor. ``r10``/``p10`` default to the
    solver's initialization drawn from ``rng``.
    """
    channel = inst.channel if channel is None else channel
    fac = inst.fac
    if fac is None or fac.thin:
        raise InvalidDimension("the translation needs full singular vector matrices")
    if layout not in ("pinned", "error"):
        raise InvalidConfig("layout must be 'pinned' or 'error'", field="layout")
    if r10 is None or p10 is None:
        r_def, p_def = initial_inputs(inst, cfg, rng)
        r10 = r_def if r10 is None else r10
        p10 = p_def if p10 is None else p10
    V, U = fac.v, fac.u
    fn = _GvampFunctions(prior, channel, layout)
    if layout == "pinned":
        u0_in = np.column_stack([V.T @ r10, np.zeros(fac.n)])
        u0_out = np.column_stack([U.T @ p10, U.T @ inst.z0])
        w_p_in = inst.x0[:, None]
        w_p_out = inst.w[:, None]
        w_q_in = np.column_stack([fac.s_padded, u0_in])
        w_q_out = np.column_stack([fac.s, u0_out])
        g0_in, g0_out = np.array([cfg.clip_gamma(cfg.gamma10), 1.0]), np.array([cfg.clip_tau(cfg.tau10), 1.0])
    else:
        u0_in = (V.T @ (r10 - inst.x0))[:, None]
        u0_out = (U.T @ (p10 - inst.z0))[:, None]
        w_p_in = inst.x0[:, None]
        w_p_out = np.column_stack([inst.z0, inst.w])
        w_q_in = fac.s_padded[:, None]
        w_q_out = fac.s[:, None]
        g0_in, g0_out = np.array([cfg.clip_gamma(cfg.gamma10)]), np.array([cfg.clip_tau(cfg.tau10)])
    inputs = GeneralInputs(
        V=V, U=U, f_p_in=fn.f_p_in, f_p_out=fn.f_p_out, f_q_in=fn.f_q_in, f_q_out=fn.f_q_out,
        gamma_p_in=_clip_first(cfg, "gamma"), gamma_p_out=_clip_first(cfg, "tau"),
        gamma_q_in=_clip_first(cfg, "gamma"), gamma_q_out=_clip_first(cfg, "tau"),
        w_p_in=w_p_in, w_p_out=w_p_out, w_q_in=w_q_in, w_q_out=w_q_out, u0_in=u0_in, u0_out=u0_out,
        gamma_p0_in=g0_in, gamma_p0_out=g0_out,
        clip_alpha_in=_alpha_clip_first(cfg), clip_alpha_out=_alpha_clip_first(cfg))
    return TranslationBundle(inputs, layout, np.asarray(r10, float), np.asarray(p10, float))


@dataclass
class VampTranslation:
    """Single-chain recursion inputs that reproduce one VAMP run in error form.

    ``p_k = r1_k - x0`` and ``v_k = r2_k - x0``; the second half sees the
    singular values and the rotated noise ``U^T w`` (zero-padded to ``N``).
    """

    V: np.ndarray
    f_p: Callable
    f_q: Callable
    w_p: np.ndarray
    w_q: np.ndarray
    u0: np.ndarray
    gamma0: np.ndarray
    clip_alpha: Callable
    Gamma1: Callable
    Gamma2: Callable

    def run(self, K: int) -> list[dict]:
        return run_general_vamp(self.V, self.f_p, self.f_q, self.w_p, self.w_q, self.u0, self.gamma0, K,
                                Gamma1=self.Gamma1, Gamma2=self.Gamma2, clip_alpha=self.clip_alpha)


def translate_vamp(inst: ProblemInstance, prior: PriorSpec, cfg: SolverConfig = SolverConfig(), *,
                   rng: np.random.Generator | None = None, r10: np.ndarray | None = None) -> VampTranslation:
    """Map a VAMP problem (AWGN channel) to :func:`run_general_vamp`."""
    fac = inst.fac
    if fac is None or fac.thin:
        raise InvalidDimension("the translation needs full singular vector matrices")
    if inst.channel.kind != "awgn":
        raise UnsupportedModel("VAMP needs an AWGN channel")
    if r10 is None:
        r10 = initial_inputs(inst, cfg, rng)[0]
    gw = inst.channel.gamma_w
    s = fac.s_padded
    xi = _pad(fac.u.T @ inst.w, fac.n)

    def f_p(p, w, g):
        val, der = prior_posterior(w[:, 0] + p[:, 0], g[0], prior)
        return (val - w[:, 0])[:, None], der[:, None]

    def f_q(q, w, g):
        s_, xi_ = w[:, 0], w[:, 1]
        den = gw * s_ * s_ + g[0]
        return ((gw * s_ * xi_ + g[0] * q[:, 0]) / den)[:, None], (g[0] / den)[:, None]

    def clip(a):
        return np.array([cfg.clip_alpha(a[0])])

    def gamma_update(g, a):
        return np.array([cfg.clip_gamma(g[0] * (1.0 - a[0]) / a[0])])

    return VampTranslation(fac.v, f_p, f_q, inst.x0[:, None], np.column_stack([s, xi]),
                           (fac.v.T @ (r10 - inst.x0))[:, None], np.array([cfg.clip_gamma(cfg.gamma10)]),
                           clip, gamma_update, gamma_update)


@dataclass
class TranslationReport:
    """Per-iteration relative discrepancies between GVAMP and the recursion."""

    K: int
    layout: str
    table: list[dict] = field(default_factory=list)
    tolerance: float = 1e-8

    @property
    def max_discrepancy(self) -> float:
        return max((v for row in self.table for key, v in row.items() if key != "k"), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.max_discrepancy < self.tolerance)

    def to_dict(self) -> dict:
        return {"K": self.K, "layout": self.layout, "tolerance": self.tolerance,
                "max_discrepancy": self.max_discrepancy, "pass": self.passed, "table": self.table}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _rel(a, b, floor: float = 0.0) -> float:
    """``||a - b|| / max(||b||, floor)``.

    Iterates use the signal norm as ``floor``: with a Gaussian prior ``r2`` is
    identically zero in exact arithmetic and both runs return rounding noise.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    diff = np.linalg.norm(a - b)
    return float(diff / max(np.linalg.norm(b), floor, 1e-300)) if diff > 0 else 0.0


def check_translation_equivalence(inst: ProblemInstance, prior: PriorSpec, channel: ChannelSpec | None = None,
                                  cfg: SolverConfig = SolverConfig(), K: int = 10, *,
                                  rng: np.random.Generator | None = None, layout: str = "pinned") -> TranslationReport:
    """Run GVAMP and its translated recursion from the same start and compare.

    Stopping rules are disabled so that both runs cover ``k = 0..K``.
    """
    channel = inst.channel if channel is None else channel
    cfg = cfg.with_(max_iters=K, stop_change_eps=0.0, stop_eps1=0.0, stop_eps2=0.0)
    r10, p10 = initial_inputs(inst, cfg, rng)
    trace = run_gvamp(inst, prior, channel, cfg, r10=r10, p10=p10, keep_inputs=True)
    bundle = translate_gvamp(inst, prior, channel, cfg, r10=r10, p10=p10, layout=layout)
    states = run_general_gvamp(bundle.inputs, K)
    report = TranslationReport(K, layout)
    shift_x = inst.x0 if layout == "error" else 0.0
    shift_z = inst.z0 if layout == "error" else 0.0
    sx, sz = np.linalg.norm(inst.x0), np.linalg.norm(inst.z0)
    for st, rec in zip(states, trace.records):
        k = st.k
        ins = {name: trace.inputs[name][k] for name in ("r1", "r2", "p1", "p2")}
        x_hat = trace.x_hat[k] if cfg.record_x_hat == "every" else None
        row = {
            "k": k,
            "r1": _rel(st.p_in[:, 0] + shift_x, ins["r1"], sx),
            "p1": _rel(st.p_out[:, 0] + shift_z, ins["p1"], sz),
            "r2": _rel(st.v_in[:, 0] + shift_x, ins["r2"], sx),
            "p2": _rel(st.v_out[:, 0] + shift_z, ins["p2"], sz),
            "alpha1": _rel(st.alpha_p_in[0], rec["alpha1"]),
            "beta1": _rel(st.alpha_p_out[0], rec["beta1"]),
            "alpha2": _rel(st.alpha_q_in[0], rec["alpha2"]),
            "beta2": _rel(st.alpha_q_out[0], rec["beta2"]),
            "gamma1": _rel(st.gamma_p_in[0], rec["gamma1"]),
            "tau1": _rel(st.gamma_p_out[0], rec["tau1"]),
            "gamma2": _rel(st.gamma_q_in[0], rec["gamma2"]),
            "tau2": _rel(st.gamma_q_out[0], rec["tau2"]),
        }
        if x_hat is not None:
            xr = prior_posterior(st.p_in[:, 0] + shift_x, st.gamma_p_in[0], prior)[0]
            row["x1_hat"] = _rel(xr, x_hat, sx)
        if layout == "pinned":
            row["pinned_x0"] = _rel(st.v_in[:, 1], inst.x0)
            row["pinned_z0"] = _rel(st.p_out[:, 1], inst.z0)
        report.table.append(row)
    return report


# ---------------------------------------------------------------------------
# General state evolution (Monte Carlo)
# ---------------------------------------------------------------------------


@dataclass
class GeneralModel:
    """Limiting description of a ``d = 1`` two-chain recursion.

    The samplers return disturbance rows: ``sample_wp(n, rng) -> (W_in, W_out)``
    and ``sample_wq(n, rng) -> (W_in, W_out)``. Input-side and output-side
    rows are drawn independently, as the limiting theory prescribes.
    """

    f_p_in: SeparableFn
    f_p_out: SeparableFn
    f_q_in: SeparableFn
    f_q_out: SeparableFn
    gamma_p_in: GammaFn
    gamma_p_out: GammaFn
    gamma_q_in: GammaFn
    gamma_q_out: GammaFn
    sample_wp: Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]
    sample_wq: Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]
    clip_alpha: Callable[[float], float] = lambda a: a
    has_output: bool = True


def gvamp_general_model(prior: PriorSpec, channel: ChannelSpec, law: SingularValueLaw, delta: float,
                        cfg: SolverConfig = SolverConfig()) -> GeneralModel:
    """The error-layout translation of GVAMP in the large-system limit."""
    fn = _GvampFunctions(prior, channel, "error")
    z_var = law.expect(lambda s: s * s) * prior.second_moment

    def sample_wp(n, rng):
        x0 = prior.sample(n, rng)
        z0 = np.sqrt(z_var) * rng.standard_normal(n)
        w = channel.sample_noise(n, rng)
        return x0[:, None], np.column_stack([z0, w])

    def sample_wq(n, rng):
        s_in = law.sample(n, rng) * (rng.random(n) < delta)
        s_out = law.sample(n, rng)
        return s_in[:, None], s_out[:, None]

    return GeneralModel(fn.f_p_in, fn.f_p_out, fn.f_q_in, fn.f_q_out,
                        _clip_first(cfg, "gamma"), _clip_first(cfg, "tau"),
                        _clip_first(cfg, "gamma"), _clip_first(cfg, "tau"),
                        sample_wp, sample_wq, cfg.clip_alpha)


_GENERAL_MAP = {
    "alpha_p_in": "alpha1", "alpha_p_out": "beta1", "tau_q_in": "sigma2_sq", "tau_q_out": "rho2_sq",
    "gamma_q_in": "gamma2", "gamma_q_out": "tau2", "alpha_q_in": "alpha2", "alpha_q_out": "beta2",
    "tau_p_in": "sigma1_sq", "tau_p_out": "rho1_sq", "gamma_p_in": "gamma1", "gamma_p_out": "tau1",
    "mse": "mse_pred",
}


def _general_once(model: GeneralModel, init: SEInit, K: int, n: int, rng: np.random.Generator) -> dict:
    out = {key: [] for key in _GENERAL_MAP}
    tp_in, tp_out = init.sigma1_sq, init.rho1_sq
    g_in, g_out = np.array([init.gamma1]), np.array([init.tau1])
    clips: dict[str, int] = {}

    def clip(key, raw):
        val = model.clip_alpha(raw)
        if val != raw:
            name = _GENERAL_MAP[key]
            clips[name] = clips.get(name, 0) + 1
        return val

    for _ in range(K + 1):
        w_in, w_out = model.sample_wp(n, rng)
        P_in = np.sqrt(max(tp_in, 0.0)) * rng.standard_normal((n, 1))
        P_out = np.sqrt(max(tp_out, 0.0)) * rng.standard_normal((n, 1))
        f, df = model.f_p_in(P_in, P_out, w_in, g_out, g_in)
        a_p_in = clip("alpha_p_in", float(np.mean(df)))
        tq_in = (np.mean(f * f) - a_p_in**2 * tp_in) / (1.0 - a_p_in) ** 2
        mse = float(np.mean(f * f))
        f, df = model.f_p_out(P_in, P_out, w_out, g_out, g_in)
        a_p_out = clip("alpha_p_out", float(np.mean(df)))
        tq_out = (np.mean(f * f) - a_p_out**2 * tp_out) / (1.0 - a_p_out) ** 2
        gq_in = model.gamma_q_in(g_in, np.array([a_p_in]))
        gq_out = model.gamma_q_out(g_out, np.array([a_p_out]))

        s_in, s_out = model.sample_wq(n, rng)
        Q_in = np.sqrt(max(tq_in, 0.0)) * rng.standard_normal((n, 1))
        Q_out = np.sqrt(max(tq_out, 0.0)) * rng.standard_normal((n, 1))
        f, df = model.f_q_in(Q_in, Q_out, s_in, gq_out, gq_in)
        a_q_in = clip("alpha_q_in", float(np.mean(df)))
        tp_in_next = (np.mean(f * f) - a_q_in**2 * tq_in) / (1.0 - a_q_in) ** 2
        f, df = model.f_q_out(Q_in, Q_out, s_out, gq_out, gq_in)
        a_q_out = clip("alpha_q_out", float(np.mean(df)))
        tp_out_next = (np.mean(f * f) - a_q_out**2 * tq_out) / (1.0 - a_q_out) ** 2

        for key, val in (("alpha_p_in", a_p_in), ("alpha_p_out", a_p_out), ("tau_q_in", tq_in),
                         ("tau_q_out", tq_out), ("gamma_q_in", gq_in[0]), ("gamma_q_out", gq_out[0]),
                         ("alpha_q_in", a_q_in), ("alpha_q_out", a_q_out), ("tau_p_in", tp_in),
                         ("tau_p_out", tp_out), ("gamma_p_in", g_in[0]), ("gamma_p_out", g_out[0]), ("mse", mse)):
            out[key].append(float(val))
        g_in = model.gamma_p_in(gq_in, np.array([a_q_in]))
        g_out = model.gamma_p_out(gq_out, np.array([a_q_out]))
        tp_in, tp_out = tp_in_next, tp_out_next
    out["_clips"] = clips
    return out


def run_se_general(model: GeneralModel, init: SEInit, K: int = 10, *, mc_samples: int = 200_000,
                   replicates: int = 40, rng: np.random.Generator | None = None) -> SETrajectory:
    """Monte Carlo evaluation of the general state evolution.

    ``init`` must be centered (``P_0`` independent of the disturbances). The
    point estimate comes from one recursion driven by ``mc_samples`` draws
    per expectation. Its standard error, stored in
    ``trajectory.stderr[name]``, is the spread of ``replicates`` independent
    recursions of ``mc_samples / replicates`` draws each, divided by
    ``sqrt(replicates)``; this accounts for Monte Carlo error propagating
    across iterations. Using the full-size run for the estimate keeps the
    plug-in bias of the nonlinear updates well below the standard error.
    Field names follow :class:`SETrajectory` (``alpha1`` is the input-chain
    ``alpha_p``, ``sigma2_sq`` the input-chain ``tau_q`` and so on).
    """
    if init.mode != "centered":
        raise InvalidConfig("the general state evolution needs a centered initialization", field="se.init")
    if replicates < 2:
        raise InvalidConfig("at least two replicates are needed for standard errors", field="se.replicates")
    rng = np.random.default_rng() if rng is None else rng
    full = _general_once(model, init, K, mc_samples, rng)
    n = max(mc_samples // replicates, 2)
    runs = [_general_once(model, init, K, n, rng) for _ in range(replicates)]
    traj = SETrajectory("general")
    stderr = {}
    for key, name in _GENERAL_MAP.items():
        arr = np.array([r[key] for r in runs])
        traj.data[name] = list(full[key])
        stderr[name] = arr.std(axis=0, ddof=1) / np.sqrt(replicates)
    for f in traj.data:
        if not traj.data[f]:
            traj.data[f] = [np.nan] * (K + 1)
    traj.stderr = stderr
    traj.clip_events = dict(full["_clips"])
    for name in ("sigma1_sq", "sigma2_sq", "rho1_sq", "rho2_sq"):
        bad = np.where(np.asarray(traj.data[name]) < 0)[0]
        if bad.size:
            raise NumericError(f"{name} became negative", iteration=int(bad[0]))
    return traj


# ---------------------------------------------------------------------------
# Limiting Gaussian process
# ---------------------------------------------------------------------------


@dataclass
class _Chain:
    sigma_u: np.ndarray | None = None
    sigma_v: np.ndarray | None = None
    beta_p: list = field(default_factory=list)
    beta_q: list = field(default_factory=list)
    rho_p: list = field(default_factory=list)
    rho_q: list = field(default_factory=list)
    p_second: list = field(default_factory=list)
    p_second_se: list = field(default_factory=list)
    q_second: list = field(default_factory=list)
    q_second_se: list = field(default_factory=list)
    sigma_u_se: np.ndarray | None = None


@dataclass
class GaussianProcessModel:
    """Covariances, regression vectors and innovation variances for both chains.

    ``chains["in"].sigma_u[j, k]`` estimates ``E[U_j U_k] = E[P_j P_k]``.
    ``p_second[k]`` is the Monte Carlo estimate of ``E[P_k^2]`` with standard
    error ``p_second_se[k]``, to be compared with the state evolution.
    """

    chains: dict[str, _Chain]
    K: int
    mc_samples: int

    def to_dict(self) -> dict:
        def conv(x):
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, list):
                return [conv(v) for v in x]
            return x

        return {"K": self.K, "mc_samples": self.mc_samples,
                "chains": {name: {k: conv(v) for k, v in vars(ch).items()} for name, ch in self.chains.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _regress(sigma: np.ndarray, b: np.ndarray, var: float, k: int, what: str) -> tuple[np.ndarray, float]:
    """Solve ``sigma beta = b`` and return ``(beta, var - b^T beta)``.

    A rank-deficient ``sigma`` is accepted as long as ``b`` lies in its range
    (this happens for linear models, where successive messages coincide).
    """
    if not (np.all(np.isfinite(sigma)) and np.all(np.isfinite(b))):
        raise NumericError(f"{what}: non-finite covariance", iteration=k)
    if b.size == 0:
        return b, var
    scale = max(np.max(np.abs(np.diag(sigma))), 1e-300)
    beta = np.linalg.pinv(sigma, rcond=1e-10, hermitian=True) @ b
    resid = np.linalg.norm(sigma @ beta - b)
    if resid > 1e-6 * max(np.linalg.norm(b), scale):
        raise NumericError(f"{what}: singular covariance block is inconsistent", iteration=k)
    return beta, var - float(b @ beta)


def track_gaussian_process(se: SETrajectory, model: GeneralModel, K: int | None = None, *,
                           mc_samples: int = 200_000, replicates: int = 20,
                           rng: np.random.Generator | None = None) -> GaussianProcessModel:
    """Build the limiting Gaussian processes ``P_k`` and ``Q_k`` by Monte Carlo.

    The scalars ``alpha`` and ``gamma`` are taken from ``se`` (which must use
    the same field names as :func:`run_se_general`). ``P_0`` has variance
    ``se.sigma1_sq[0]`` (input chain) or ``se.rho1_sq[0]`` (output chain).

    Reported covariances and second moments come from one construction
    with ``mc_samples`` draws. The ``*_se`` entries are the spread of
    ``replicates`` independent constructions of ``mc_samples / replicates``
    draws, divided by ``sqrt(replicates)``, so they include the Monte Carlo
    error that propagates through the covariance blocks.
    """
    if replicates < 2:
        raise InvalidConfig("at least two replicates are needed for standard errors", field="se.replicates")
    rng = np.random.default_rng() if rng is None else rng
    K = len(se) - 1 if K is None else K
    out = _track_once(se, model, K, mc_samples, rng)
    n = max(mc_samples // replicates, 2)
    runs = [_track_once(se, model, K, n, rng) for _ in range(replicates)]
    for c in ("in", "out"):
        for name in ("p_second", "q_second"):
            vals = np.array([getattr(r[c], name) for r in runs])
            setattr(out[c], name + "_se", list(vals.std(axis=0, ddof=1) / np.sqrt(replicates)))
        out[c].sigma_u_se = np.std([r[c].sigma_u for r in runs], axis=0, ddof=1) / np.sqrt(replicates)
    return GaussianProcessModel(out, K, mc_samples)


def _track_once(se: SETrajectory, model: GeneralModel, K: int, n: int, rng: np.random.Generator) -> dict:
    chains = {"in": _Chain(), "out": _Chain()}
    w_in, w_out = model.sample_wp(n, rng)
    s_in, s_out = model.sample_wq(n, rng)
    a_p = {"in": se.alpha1, "out": se.beta1}
    a_q = {"in": se.alpha2, "out": se.beta2}
    g_p = {"in": se.gamma1, "out": se.tau1}
    g_q = {"in": se.gamma2, "out": se.tau2}
    tau0 = {"in": float(se.sigma1_sq[0]), "out": float(se.rho1_sq[0])}
    P = {c: [np.sqrt(tau0[c]) * rng.standard_normal(n)] for c in chains}
    U = {c: [np.sqrt(tau0[c]) * rng.standard_normal(n)] for c in chains}  # U_0, independent of the rest
    Vs = {c: [] for c in chains}
    Q = {c: [] for c in chains}
    for c in chains:
        chains[c].beta_p.append(np.zeros(0))
        chains[c].rho_p.append(tau0[c])
    f_p = {"in": (model.f_p_in, w_in), "out": (model.f_p_out, w_out)}
    f_q = {"in": (model.f_q_in, s_in), "out": (model.f_q_out, s_out)}

    def second(x):
        x2 = x * x
        return float(np.mean(x2)), float(np.std(x2) / np.sqrt(x2.size))

    for k in range(K + 1):
        gin, gout = np.array([g_p["in"][k]]), np.array([g_p["out"][k]])
        for c in chains:
            fn, w = f_p[c]
            val, _ = fn(P["in"][k][:, None], P["out"][k][:, None], w, gout, gin)
            a = a_p[c][k]
            Vs[c].append((val[:, 0] - a * P[c][k]) / (1.0 - a))
            m, se_ = second(P[c][k])
            chains[c].p_second.append(m)
            chains[c].p_second_se.append(se_)
            Vm = np.array(Vs[c])
            sig = Vm @ Vm.T / n
            beta, rho = _regress(sig[:k, :k], sig[:k, k], sig[k, k], k, f"Sigma_v ({c})")
            chains[c].sigma_v = sig
            chains[c].beta_q.append(beta)
            chains[c].rho_q.append(rho)
            qk = sum(b * q for b, q in zip(beta, Q[c])) + np.sqrt(max(rho, 0.0)) * rng.standard_normal(n)
            Q[c].append(qk)
            m, se_ = second(qk)
            chains[c].q_second.append(m)
            chains[c].q_second_se.append(se_)
        gin, gout = np.array([g_q["in"][k]]), np.array([g_q["out"][k]])
        for c in chains:
            fn, w = f_q[c]
            val, _ = fn(Q["in"][k][:, None], Q["out"][k][:, None], w, gout, gin)
            a = a_q[c][k]
            U[c].append((val[:, 0] - a * Q[c][k]) / (1.0 - a))
            Um = np.array(U[c])
            sig = Um @ Um.T / n
            j = k + 1
            chains[c].sigma_u = sig
            if j <= K:
                beta, rho = _regress(sig[:j, :j], sig[:j, j], sig[j, j], j, f"Sigma_u ({c})")
                chains[c].beta_p.append(beta)
                chains[c].rho_p.append(rho)
                P[c].append(sum(b * p for b, p in zip(beta, P[c])) + np.sqrt(max(rho, 0.0)) * rng.standard_normal(n))
    for c in chains:
        chains[c].sigma_u = chains[c].sigma_u[: K + 1, : K + 1]
    return chains
