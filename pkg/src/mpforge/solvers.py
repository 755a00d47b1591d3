"""AMP, VAMP and GVAMP iterations.

All loops are indexed from ``k = 0``. Record ``k`` holds the estimate
``x1_hat[k]`` produced from the ``k``-th input pair, so a run with
``max_iters = K`` returns ``K + 1`` records unless a stopping rule fires
first.
"""

from __future__ import annotations

import io
import json
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Mapping

import numpy as np

from .denoisers import (
    ChannelSpec,
    PriorSpec,
    denoise_output,
    denoise_prior,
    joint_lmmse_denoise,
    lmmse_denoise,
)
from .ensembles import MatrixFactorization
from .errors import InternalError, InvalidConfig, InvalidDimension, InvalidObservation, UnsupportedModel

__all__ = [
    "SolverConfig",
    "ProblemInstance",
    "SolverTrace",
    "make_instance",
    "initial_inputs",
    "run_amp",
    "run_vamp",
    "run_gvamp",
]

Functional = Callable[[np.ndarray, np.ndarray], float]

INIT_MODES = ("random", "zero", "centered")


@dataclass(frozen=True)
class SolverConfig:
    """Iteration budget, clipping intervals, stopping rules and initialization.

    ``init_mode`` selects how ``r10`` and ``p10`` are drawn. ``"random"`` uses
    i.i.d. ``N(0, init_var)`` vectors, which in distribution equals rotating
    an i.i.d. vector by the Haar factor. ``"centered"`` adds such a vector to
    the truth (``r10 = x0 + V r_init``); it is an oracle start used to validate
    the limiting Gaussian-process model. ``"zero"`` starts from the origin.

    ``stop_eps1``/``stop_eps2`` stop the loop once ``1/gamma`` falls below
    them; zero disables the rule. ``stop_change_eps`` is compared with the
    mean squared change of ``x1_hat``; zero disables it.
    """

    max_iters: int = 30
    t_min: float = 1e-3
    t_max: float = 1.0 - 1e-3
    gamma_min: float = 1e-8
    gamma_max: float = 1e8
    tau_min: float = 1e-8
    tau_max: float = 1e8
    stop_eps1: float = 0.0
    stop_eps2: float = 0.0
    stop_change_eps: float = 1e-8
    gamma10: float = 1.0
    tau10: float = 1.0
    init_mode: str = "random"
    init_var: float = 1.0
    record_x_hat: str = "every"
    amp_init: str = "zero"
    amp_tau: str = "empirical"

    def __post_init__(self):
        def bad(name, msg):
            raise InvalidConfig(msg, field=f"solver.{name}")

        if not isinstance(self.max_iters, (int, np.integer)) or self.max_iters < 0:
            bad("max_iters", "max_iters must be a non-negative integer")
        if not (0 < self.t_min < self.t_max < 1):
            bad("t_min", "need 0 < t_min < t_max < 1")
        if not (0 < self.gamma_min < self.gamma_max < np.inf):
            bad("gamma_min", "need 0 < gamma_min < gamma_max < inf")
        if not (0 < self.tau_min < self.tau_max < np.inf):
            bad("tau_min", "need 0 < tau_min < tau_max < inf")
        for name in ("stop_eps1", "stop_eps2", "stop_change_eps"):
            if not getattr(self, name) >= 0:
                bad(name, f"{name} must be non-negative")
        if not (self.gamma10 > 0 and np.isfinite(self.gamma10)):
            bad("gamma10", "gamma10 must be positive")
        if not (self.tau10 > 0 and np.isfinite(self.tau10)):
            bad("tau10", "tau10 must be positive")
        if self.init_mode not in INIT_MODES:
            bad("init_mode", f"init_mode must be one of {INIT_MODES}")
        if not self.init_var >= 0:
            bad("init_var", "init_var must be non-negative")
        if self.record_x_hat not in ("every", "final", "none"):
            bad("record_x_hat", "record_x_hat must be every, final or none")
        if self.amp_init not in ("zero", "ones"):
            bad("amp_init", "amp_init must be zero or ones")
        if self.amp_tau not in ("empirical", "se"):
            bad("amp_tau", "amp_tau must be empirical or se")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_(self, **changes) -> "SolverConfig":
        return replace(self, **changes)

    def clip_alpha(self, a: float) -> float:
        return float(min(max(a, self.t_min), self.t_max))

    def clip_gamma(self, g: float) -> float:
        return float(min(max(g, self.gamma_min), self.gamma_max))

    def clip_tau(self, t: float) -> float:
        return float(min(max(t, self.tau_min), self.tau_max))


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """A measurement problem ``y = h(A x0, w)``.

    ``dense`` optionally carries an explicit matrix; AMP uses it when present
    so that i.i.d. Gaussian designs can be tested without an SVD.
    """

    fac: MatrixFactorization | None
    x0: np.ndarray
    w: np.ndarray
    y: np.ndarray
    z0: np.ndarray
    channel: ChannelSpec
    dense: np.ndarray | None = None

    def __post_init__(self):
        if self.fac is None and self.dense is None:
            raise InvalidDimension("an instance needs factors or a dense matrix")
        m, n = self.shape
        if self.x0.shape != (n,) or self.w.shape != (m,) or self.y.shape != (m,) or self.z0.shape != (m,):
            raise InvalidDimension("instance vectors do not match the matrix shape")
        if self.channel.kind == "probit" and not np.all(np.abs(self.y) == 1):
            raise InvalidObservation("probit observations must lie in {-1, +1}")

    @property
    def shape(self) -> tuple[int, int]:
        if self.fac is not None:
            return self.fac.m, self.fac.n
        return self.dense.shape

    @property
    def m(self) -> int:
        return self.shape[0]

    @property
    def n(self) -> int:
        return self.shape[1]

    def A(self, x: np.ndarray) -> np.ndarray:
        return self.dense @ x if self.dense is not None else self.fac.apply(x)

    def At(self, y: np.ndarray) -> np.ndarray:
        return self.dense.T @ y if self.dense is not None else self.fac.apply_transpose(y)


def make_instance(fac: MatrixFactorization | np.ndarray, prior: PriorSpec, channel: ChannelSpec,
                  rng: np.random.Generator, noise_rng: np.random.Generator | None = None) -> ProblemInstance:
    """Draw ``x0`` from ``prior`` and ``w`` from ``channel`` and form ``y``.

    ``fac`` may be a factorization or a dense ``M x N`` array.
    """
    dense = None
    if isinstance(fac, np.ndarray):
        dense, fac = np.asarray(fac, dtype=float), None
    m, n = (fac.m, fac.n) if fac is not None else dense.shape
    x0 = prior.sample(n, rng)
    w = channel.sample_noise(m, rng if noise_rng is None else noise_rng)
    z0 = fac.apply(x0) if fac is not None else dense @ x0
    return ProblemInstance(fac, x0, w, channel.observe(z0, w), z0, channel, dense)


def initial_inputs(inst: ProblemInstance, cfg: SolverConfig, rng: np.random.Generator | None):
    """Return ``(r10, p10)`` in signal space according to ``cfg.init_mode``."""
    if cfg.init_mode == "zero":
        return np.zeros(inst.n), np.zeros(inst.m)
    if rng is None:
        raise InvalidConfig("an init rng is required for random initialization", field="solver.init_mode")
    sd = np.sqrt(cfg.init_var)
    r = sd * rng.standard_normal(inst.n)
    p = sd * rng.standard_normal(inst.m)
    if cfg.init_mode == "centered":
        return inst.x0 + r, inst.z0 + p
    return r, p


@dataclass
class SolverTrace:
    """Per-iteration history of a run.

    ``records[k]`` is a flat dict of scalars (``k``, ``mse``, precisions,
    divergences) plus a ``functionals`` sub-dict. ``x_hat`` holds the
    estimates kept according to the config. ``inputs`` is filled only when a
    run is asked to keep its denoiser inputs.
    """

    algorithm: str
    records: list[dict] = field(default_factory=list)
    x_hat: list[np.ndarray] = field(default_factory=list)
    inputs: dict[str, list[np.ndarray]] = field(default_factory=dict)
    termination: str = "max_iters"
    alpha_warnings: int = 0
    clip_events: Counter = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([rec[name] for rec in self.records], dtype=float)

    @property
    def mse(self) -> np.ndarray:
        return self.column("mse")

    def functional(self, name: str) -> np.ndarray:
        return np.array([rec["functionals"][name] for rec in self.records], dtype=float)

    def to_jsonl(self, extra: Mapping | None = None) -> str:
        lines = []
        for rec in self.records:
            out = {"algorithm": self.algorithm, **rec}
            if extra:
                out.update(extra)
            lines.append(json.dumps(out, sort_keys=True, allow_nan=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def to_bytes(self) -> bytes:
        """Compact binary form (a numpy ``.npz`` archive)."""
        names = sorted({k for rec in self.records for k in rec if k != "functionals"})
        fnames = sorted({k for rec in self.records for k in rec.get("functionals", {})})
        arrays = {
            "scalars": np.array([[rec.get(n, np.nan) for n in names] for rec in self.records], dtype=float),
            "functionals": np.array([[rec["functionals"].get(n, np.nan) for n in fnames] for rec in self.records], dtype=float),
            "meta": np.frombuffer(json.dumps({
                "algorithm": self.algorithm, "names": names, "fnames": fnames,
                "termination": self.termination, "alpha_warnings": self.alpha_warnings,
                "clip_events": dict(self.clip_events)}).encode(), dtype=np.uint8),
        }
        if self.x_hat:
            arrays["x_hat"] = np.stack(self.x_hat)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SolverTrace":
        with np.load(io.BytesIO(data)) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            scal, func = z["scalars"], z["functionals"]
            xh = list(z["x_hat"]) if "x_hat" in z.files else []
        records = []
        for i in range(scal.shape[0]):
            rec = {n: float(v) for n, v in zip(meta["names"], scal[i])}
            rec["k"] = int(rec["k"])
            rec["functionals"] = {n: float(v) for n, v in zip(meta["fnames"], func[i])} if func.size else {}
            records.append(rec)
        return cls(meta["algorithm"], records, xh, {}, meta["termination"], meta["alpha_warnings"],
                   Counter(meta["clip_events"]))


class _Recorder:
    """Shared bookkeeping: clipping with event counts, records, stopping."""

    def __init__(self, algorithm, inst, cfg, functionals, keep_inputs):
        self.trace = SolverTrace(algorithm)
        self.inst = inst
        self.cfg = cfg
        self.functionals = dict(functionals or {})
        self.keep_inputs = keep_inputs
        self.prev_x = None

    def alpha(self, name: str, raw: float) -> float:
        if not (0.0 < raw < 1.0):
            self.trace.alpha_warnings += 1
        val = self.cfg.clip_alpha(raw)
        if val != raw:
            self.trace.clip_events[name] += 1
        return val

    def precision(self, name: str, raw: float, kind: str = "gamma") -> float:
        val = self.cfg.clip_gamma(raw) if kind == "gamma" else self.cfg.clip_tau(raw)
        if val != raw:
            self.trace.clip_events[name] += 1
        return val

    def keep(self, **vectors):
        if self.keep_inputs:
            for k, v in vectors.items():
                self.trace.inputs.setdefault(k, []).append(np.array(v, copy=True))

    def record(self, k: int, x_hat: np.ndarray, scalars: dict) -> bool:
        """Store record ``k``; return True when a stopping rule fires."""
        x0 = self.inst.x0
        rec = {"k": k, "mse": float(np.mean((x_hat - x0) ** 2)), **scalars}
        rec["functionals"] = {name: float(fn(x_hat, x0)) for name, fn in self.functionals.items()}
        self.trace.records.append(rec)
        mode = self.cfg.record_x_hat
        if mode == "every":
            self.trace.x_hat.append(x_hat.copy())
        elif mode == "final":
            self.trace.x_hat[:] = [x_hat.copy()]
        cfg = self.cfg
        stop = None
        if self.prev_x is not None and cfg.stop_change_eps > 0:
            if np.mean((x_hat - self.prev_x) ** 2) < cfg.stop_change_eps:
                stop = "change_eps"
        g1, g2 = scalars.get("gamma1"), scalars.get("gamma2")
        if g1 is not None and cfg.stop_eps1 > 0 and 1.0 / g1 < cfg.stop_eps1:
            stop = "gamma_eps"
        if g2 is not None and cfg.stop_eps2 > 0 and 1.0 / g2 < cfg.stop_eps2:
            stop = "gamma_eps"
        self.prev_x = x_hat
        if stop:
            self.trace.termination = stop
            return True
        return False


def _require_awgn(inst: ProblemInstance, what: str) -> None:
    if inst.channel.kind != "awgn":
        raise UnsupportedModel(f"{what} requires an AWGN channel, got {inst.channel.kind}")


def run_amp(inst: ProblemInstance, prior: PriorSpec, cfg: SolverConfig = SolverConfig(), *,
            functionals: Mapping[str, Functional] | None = None, se_tau: np.ndarray | None = None) -> SolverTrace:
    """Approximate message passing with an MMSE denoiser.

    The denoiser noise level at step ``k`` is ``||v_{k-1}||^2 / M`` unless
    ``cfg.amp_tau == "se"``, in which case ``se_tau[k]`` is used.
    """
    _require_awgn(inst, "AMP")
    rec = _Recorder("amp", inst, cfg, functionals, False)
    m, n = inst.shape
    if cfg.amp_init == "ones":
        x_prev, v_prev = np.ones(n), np.ones(m)
    else:
        x_prev, v_prev = np.zeros(n), inst.y.copy()
    if cfg.amp_tau == "se" and (se_tau is None or len(se_tau) < cfg.max_iters + 1):
        raise InvalidConfig("amp_tau='se' needs se_tau for every iteration", field="solver.amp_tau")
    for k in range(cfg.max_iters + 1):
        r = x_prev + inst.At(v_prev)
        tau = float(se_tau[k]) if cfg.amp_tau == "se" else float(v_prev @ v_prev) / m
        gamma = rec.precision("gamma1", 1.0 / max(tau, 1.0 / cfg.gamma_max))
        out = denoise_prior(r, gamma, prior)
        v = inst.y - inst.A(out.value) + (n / m) * out.divergence * v_prev
        if rec.record(k, out.value, {"gamma1": gamma, "tau": tau, "alpha1": out.divergence}):
            break
        x_prev, v_prev = out.value, v
    return rec.trace


def run_vamp(inst: ProblemInstance, prior: PriorSpec, cfg: SolverConfig = SolverConfig(), *,
             rng: np.random.Generator | None = None, r10: np.ndarray | None = None,
             functionals: Mapping[str, Functional] | None = None, keep_inputs: bool = False) -> SolverTrace:
    """VAMP with an MMSE input denoiser and the LMMSE linear stage.

    ``r10`` overrides the configured initialization; otherwise it is drawn
    from ``rng`` per ``cfg.init_mode``.
    """
    _require_awgn(inst, "VAMP")
    if inst.fac is None:
        raise UnsupportedModel("VAMP needs an SVD-factored matrix")
    if r10 is None:
        r10, _ = initial_inputs(inst, cfg, rng)
    rec = _Recorder("vamp", inst, cfg, functionals, keep_inputs)
    gw = inst.channel.gamma_w
    r1, g1 = np.asarray(r10, dtype=float), cfg.clip_gamma(cfg.gamma10)
    for k in range(cfg.max_iters + 1):
        x1, a1 = denoise_prior(r1, g1, prior)
        a1 = rec.alpha("alpha1", a1)
        eta1 = g1 / a1
        g2 = rec.precision("gamma2", eta1 - g1)
        r2 = (eta1 * x1 - g1 * r1) / g2
        x2, a2 = lmmse_denoise(r2, g2, inst.fac, inst.y, gw)
        a2 = rec.alpha("alpha2", a2)
        eta2 = g2 / a2
        g1n = rec.precision("gamma1", eta2 - g2)
        rec.keep(r1=r1, r2=r2)
        scal = {"gamma1": g1, "alpha1": a1, "eta1": eta1, "gamma2": g2, "alpha2": a2, "eta2": eta2,
                "mse2": float(np.mean((x2 - inst.x0) ** 2))}
        if rec.record(k, x1, scal):
            break
        r1 = (eta2 * x2 - g2 * r2) / g1n
        g1 = g1n
    return rec.trace


def _extrinsic(est: np.ndarray, alpha: float, inp: np.ndarray) -> np.ndarray:
    if 1.0 - alpha < 1e-12:
        raise InternalError("1 - alpha below 1e-12 after clipping")
    return (est - alpha * inp) / (1.0 - alpha)


def run_gvamp(inst: ProblemInstance, prior: PriorSpec, channel: ChannelSpec | None = None,
              cfg: SolverConfig = SolverConfig(), *, rng: np.random.Generator | None = None,
              r10: np.ndarray | None = None, p10: np.ndarray | None = None,
              functionals: Mapping[str, Functional] | None = None, keep_inputs: bool = False) -> SolverTrace:
    """Generalized VAMP for ``y = h(A x0, w)`` with AWGN or probit output."""
    channel = inst.channel if channel is None else channel
    if channel.kind not in ("awgn", "probit"):
        raise UnsupportedModel(f"unsupported channel {channel.kind}")
    if channel.kind == "probit" and not np.all(np.abs(inst.y) == 1):
        raise InvalidObservation("probit observations must lie in {-1, +1}")
    if inst.fac is None:
        raise UnsupportedModel("GVAMP needs an SVD-factored matrix")
    if r10 is None or p10 is None:
        r_def, p_def = initial_inputs(inst, cfg, rng)
        r10 = r_def if r10 is None else r10
        p10 = p_def if p10 is None else p10
    rec = _Recorder("gvamp", inst, cfg, functionals, keep_inputs)
    y, fac = inst.y, inst.fac
    r1, p1 = np.asarray(r10, dtype=float), np.asarray(p10, dtype=float)
    g1, t1 = cfg.clip_gamma(cfg.gamma10), cfg.clip_tau(cfg.tau10)
    for k in range(cfg.max_iters + 1):
        x1, a1 = denoise_prior(r1, g1, prior)
        a1 = rec.alpha("alpha1", a1)
        r2 = _extrinsic(x1, a1, r1)
        g2 = rec.precision("gamma2", g1 * (1.0 / a1 - 1.0))
        z1, b1 = denoise_output(p1, t1, y, channel)
        b1 = rec.alpha("beta1", b1)
        p2 = _extrinsic(z1, b1, p1)
        t2 = rec.precision("tau2", t1 * (1.0 / b1 - 1.0), "tau")
        x2, z2, a2, b2 = joint_lmmse_denoise(r2, p2, g2, t2, fac)
        a2 = rec.alpha("alpha2", a2)
        b2 = rec.alpha("beta2", b2)
        rec.keep(r1=r1, p1=p1, r2=r2, p2=p2)
        scal = {"gamma1": g1, "tau1": t1, "alpha1": a1, "beta1": b1, "gamma2": g2, "tau2": t2,
                "alpha2": a2, "beta2": b2, "mse2": float(np.mean((x2 - inst.x0) ** 2))}
        if rec.record(k, x1, scal):
            break
        r1 = _extrinsic(x2, a2, r2)
        p1 = _extrinsic(z2, b2, p2)
        g1 = rec.precision("gamma1", g2 * (1.0 / a2 - 1.0))
        t1 = rec.precision("tau1", t2 * (1.0 / b2 - 1.0), "tau")
    return rec.trace
