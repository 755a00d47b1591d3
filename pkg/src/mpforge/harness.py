"""Concentration experiments: empirical PL(2) averages against their limits.

A trial draws a fresh instance, runs a solver for ``K`` iterations
(``k = 0..K-1``) and evaluates every functional at every iteration. The
deviation from the state-evolution prediction is then summarized per
``(N, k, functional)``: quantiles, tail frequencies and the slope of
``log median deviation`` against ``log N``.

All randomness comes from named streams of one top-level seed
(``"size/<N>/trial/<t>/<role>"``), so records do not depend on the number of
worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .denoisers import ChannelSpec, PriorSpec
from .ensembles import SingularValueLaw, sample_rri_matrix
from .errors import InvalidConfig, MPForgeError
from .general import GaussianProcessModel, gvamp_general_model, track_gaussian_process
from .rng import derive_seed, stream
from .solvers import SolverConfig, make_instance, run_amp, run_gvamp, run_vamp
from .state_evolution import (SETrajectory, run_se_amp, run_se_gvamp, run_se_vamp,
                              se_init_from_config)

__all__ = [
    "Pl2Functional",
    "builtin_functionals",
    "ModelConfig",
    "TrialRecord",
    "DeviationSummary",
    "TailEstimate",
    "run_trials",
    "summarize",
    "tail_estimate",
    "records_to_jsonl",
    "records_from_jsonl",
    "DEFAULT_EPSILONS",
]

DEFAULT_EPSILONS = (0.01, 0.02, 0.05, 0.1)


@dataclass(frozen=True)
class Pl2Functional:
    """An elementwise ``phi(a, b)`` averaged over coordinates.

    ``arity="estimate"`` feeds ``(x1_hat_k, x0)``; ``arity="iterates"`` feeds
    the input errors ``(r1_k - x0, r1_{k-1} - x0)`` (``k = 0`` pairs the
    first error with itself). ``prediction`` names the limit: a
    :class:`SETrajectory` field for estimates, or ``"sigma_u"`` for the
    Gaussian-process covariance of consecutive iterates.
    """

    name: str
    phi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    prediction: str
    arity: str = "estimate"

    def __call__(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.mean(self.phi(a, b)))

    def predict(self, se: SETrajectory, gp: GaussianProcessModel | None, k: int) -> float:
        if self.prediction == "sigma_u":
            if gp is None:
                raise InvalidConfig(f"{self.name} needs the Gaussian-process limit", field="harness.functionals")
            return float(gp.chains["in"].sigma_u[k, max(k - 1, 0)])
        return float(np.asarray(se.data[self.prediction])[k])

    def lipschitz_estimate(self, rng: np.random.Generator, triples: int = 200, scale: float = 3.0) -> float:
        """Largest observed ratio ``|phi(v) - phi(v')| / (|v - v'| (1 + |v| + |v'|))``."""
        v = scale * rng.standard_normal((triples, 2))
        w = v + rng.standard_normal((triples, 2)) * rng.choice([1e-3, 1e-1, 1.0], size=(triples, 1))
        num = np.abs(self.phi(v[:, 0], v[:, 1]) - self.phi(w[:, 0], w[:, 1]))
        den = np.linalg.norm(v - w, axis=1) * (1 + np.linalg.norm(v, axis=1) + np.linalg.norm(w, axis=1))
        return float(np.max(num / den))


def _squared_error(a, b):
    return (a - b) ** 2


def _product(a, b):
    return a * b


def _second_moment(a, b):
    return a * a


def builtin_functionals() -> list[Pl2Functional]:
    """Squared error, product with the truth, second moment and iterate overlap."""
    return [
        Pl2Functional("squared_error", _squared_error, "mse_pred"),
        Pl2Functional("product", _product, "cross_pred"),
        Pl2Functional("second_moment", _second_moment, "second_pred"),
        Pl2Functional("iterate_overlap", _product, "sigma_u", arity="iterates"),
    ]


_BUILTIN = {f.name: f for f in builtin_functionals()}


def _resolve(functionals) -> list[Pl2Functional]:
    if functionals is None:
        return [f for f in builtin_functionals() if f.arity == "estimate"]
    out = []
    for f in functionals:
        if isinstance(f, str):
            if f not in _BUILTIN:
                raise InvalidConfig(f"unknown functional {f!r}", field="harness.functionals")
            f = _BUILTIN[f]
        out.append(f)
    if len({f.name for f in out}) != len(out):
        raise InvalidConfig("functional names must be unique", field="harness.functionals")
    return out


@dataclass(frozen=True)
class ModelConfig:
    """Everything that defines one random problem family and its solver."""

    algorithm: str = "vamp"
    prior: PriorSpec = PriorSpec.gaussian(1.0)
    channel: ChannelSpec = ChannelSpec.awgn(0.01)
    law: SingularValueLaw = SingularValueLaw.constant(1.0)
    delta: float = 0.5
    mode: str = "orthogonal"
    solver: SolverConfig = SolverConfig()
    track_signal: bool = True

    def __post_init__(self):
        if self.algorithm not in ("amp", "vamp", "gvamp"):
            raise InvalidConfig(f"unsupported harness algorithm {self.algorithm!r}", field="algorithm")
        if not 0 < self.delta <= 1:
            raise InvalidConfig("delta must lie in (0, 1]", field="model.delta")
        if self.mode not in ("orthogonal", "right"):
            raise InvalidConfig("mode must be orthogonal or right", field="model.mode")
        if self.algorithm in ("amp", "vamp") and self.channel.kind != "awgn":
            raise InvalidConfig(f"{self.algorithm} needs an AWGN channel", field="model.channel.kind")

    def state_evolution(self, K: int) -> SETrajectory:
        """Limits for ``k = 0..K``."""
        cfg = self.solver
        if self.algorithm == "amp":
            return run_se_amp(self.prior, self.delta, self.channel.tau_w, K)
        init = se_init_from_config(cfg, self.prior, self.law)
        if self.algorithm == "vamp":
            return run_se_vamp(self.prior, self.channel.tau_w, self.law, self.delta, init, K, cfg,
                               track_signal=self.track_signal)
        return run_se_gvamp(self.prior, self.channel, self.law, self.delta, init, K, cfg,
                            track_signal=self.track_signal)

    def gaussian_process(self, se: SETrajectory, K: int, seed: int, mc_samples: int = 200_000) -> GaussianProcessModel:
        if self.algorithm != "gvamp" or self.solver.init_mode != "centered":
            raise InvalidConfig("iterate functionals need gvamp with a centered start", field="harness.functionals")
        model = gvamp_general_model(self.prior, self.channel, self.law, self.delta, self.solver)
        return track_gaussian_process(se, model, K, mc_samples=mc_samples, rng=stream(seed, "harness/gp"))

    def instance(self, n: int, name: str, seed: int):
        m = max(int(round(self.delta * n)), 1)
        mat_rng = stream(seed, f"{name}/matrix")
        if self.algorithm == "amp":
            a = mat_rng.standard_normal((m, n)) / math.sqrt(m)
            return make_instance(a, self.prior, self.channel, stream(seed, f"{name}/signal"),
                                 stream(seed, f"{name}/noise"))
        fac = sample_rri_matrix(m, n, self.law, self.mode, mat_rng, thin=True)
        return make_instance(fac, self.prior, self.channel, stream(seed, f"{name}/signal"),
                             stream(seed, f"{name}/noise"))

    def solve(self, inst, cfg: SolverConfig, name: str, seed: int, keep_inputs: bool):
        rng = stream(seed, f"{name}/init")
        if self.algorithm == "amp":
            return run_amp(inst, self.prior, cfg)
        if self.algorithm == "vamp":
            return run_vamp(inst, self.prior, cfg, rng=rng, keep_inputs=keep_inputs)
        return run_gvamp(inst, self.prior, self.channel, cfg, rng=rng, keep_inputs=keep_inputs)


@dataclass(frozen=True)
class TrialRecord:
    """One functional at one iteration of one trial."""

    seed: int
    N: int
    trial: int
    k: int
    functional: str
    empirical: float
    prediction: float

    @property
    def deviation(self) -> float:
        return abs(self.empirical - self.prediction)

    @property
    def relative_deviation(self) -> float:
        return self.deviation / abs(self.prediction) if self.prediction != 0 else math.inf

    def to_dict(self) -> dict:
        return {**asdict(self), "deviation": self.deviation}


def _trial(model: ModelConfig, n: int, t: int, K: int, funcs: list[Pl2Functional], seed: int,
           se: SETrajectory, gp: GaussianProcessModel | None) -> list[TrialRecord]:
    name = f"size/{n}/trial/{t}"
    cfg = model.solver.with_(max_iters=K - 1, stop_change_eps=0.0, stop_eps1=0.0, stop_eps2=0.0,
                             record_x_hat="every")
    needs_inputs = any(f.arity == "iterates" for f in funcs)
    inst = model.instance(n, name, seed)
    trace = model.solve(inst, cfg, name, seed, needs_inputs)
    out = []
    errs = None
    if needs_inputs:
        errs = [r1 - inst.x0 for r1 in trace.inputs["r1"]]
    for k, x_hat in enumerate(trace.x_hat):
        for f in funcs:
            if f.arity == "estimate":
                value = f(x_hat, inst.x0)
            else:
                value = f(errs[k], errs[max(k - 1, 0)])
            out.append(TrialRecord(seed, n, t, k, f.name, value, f.predict(se, gp, k)))
    return out


def _trial_star(args):
    return _trial(*args)


def run_trials(model: ModelConfig, sizes: Sequence[int], trials: int, K: int,
               functionals: Iterable[Pl2Functional | str] | None = None, seed: int = 0, *,
               workers: int = 1, gp_samples: int = 200_000) -> list[TrialRecord]:
    """Run ``trials`` independent trials at every size and record each functional.

    ``K`` counts iterations, so records cover ``k = 0..K-1``. The state
    evolution is computed first; a failure there is reported as
    :class:`InvalidConfig` before any trial runs. Output order is
    ``(size, trial, k, functional)`` regardless of ``workers``.
    """
    if K < 1 or trials < 1 or not sizes:
        raise InvalidConfig("need K >= 1, trials >= 1 and at least one size", field="harness")
    if any(int(n) < 2 for n in sizes):
        raise InvalidConfig("sizes must be at least 2", field="harness.sizes")
    funcs = _resolve(functionals)
    try:
        se = model.state_evolution(K - 1)
        gp = model.gaussian_process(se, K - 1, seed, gp_samples) if any(f.arity == "iterates" for f in funcs) else None
    except InvalidConfig:
        raise
    except MPForgeError as exc:
        raise InvalidConfig(f"state evolution failed for this model: {exc}", field="model") from exc
    jobs = [(model, int(n), t, K, funcs, seed, se, gp) for n in sizes for t in range(trials)]
    if workers <= 1:
        chunks = [_trial_star(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_trial_star, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [r for chunk in chunks for r in chunk]


def records_to_jsonl(records: Iterable[TrialRecord], provenance: dict | None = None) -> str:
    extra = provenance or {}
    return "".join(json.dumps({**r.to_dict(), **extra}, sort_keys=True) + "\n" for r in records)


def records_from_jsonl(text: str) -> list[TrialRecord]:
    out = []
    for line in text.splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(TrialRecord(d["seed"], d["N"], d["trial"], d["k"], d["functional"], d["empirical"],
                                   d["prediction"]))
    return out


_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class DeviationSummary:
    """Per-``(N, k, functional)`` deviation statistics plus fitted slopes.

    ``slopes[(k, functional)]`` is the least-squares slope of
    ``log(median deviation)`` against ``log N``; it is absent when only one
    size was run, and ``notice`` says so.
    """

    rows: list[dict] = field(default_factory=list)
    slopes: dict[tuple[int, str], float] = field(default_factory=dict)
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    notice: str | None = None

    def row(self, n: int, k: int, functional: str) -> dict:
        for r in self.rows:
            if (r["N"], r["k"], r["functional"]) == (n, k, functional):
                return r
        raise KeyError((n, k, functional))

    def columns(self) -> list[str]:
        return (["N", "k", "functional", "trials", "median_dev", "mean_dev"]
                + [f"q{int(q * 100):02d}_dev" for q in _QUANTILES]
                + [f"p_tail@{e:g}" for e in self.epsilons] + ["slope"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(self.columns())
        for r in self.rows:
            slope = self.slopes.get((r["k"], r["functional"]))
            writer.writerow([r["N"], r["k"], r["functional"], r["trials"], repr(r["median_dev"]), repr(r["mean_dev"])]
                            + [repr(r["quantiles"][q]) for q in _QUANTILES]
                            + [repr(r["tail"][e]) for e in self.epsilons]
                            + ["" if slope is None else repr(slope)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DeviationSummary":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            return cls(notice="empty summary")
        eps = tuple(float(h.split("@", 1)[1]) for h in header if h.startswith("p_tail@"))
        out = cls(epsilons=eps)
        for row in reader:
            if not row:
                continue
            d = dict(zip(header, row))
            rec = {"N": int(d["N"]), "k": int(d["k"]), "functional": d["functional"], "trials": int(d["trials"]),
                   "median_dev": float(d["median_dev"]), "mean_dev": float(d["mean_dev"]),
                   "quantiles": {q: float(d[f"q{int(q * 100):02d}_dev"]) for q in _QUANTILES},
                   "tail": {e: float(d[f"p_tail@{e:g}"]) for e in eps}}
            out.rows.append(rec)
            if d.get("slope"):
                out.slopes[(rec["k"], rec["functional"])] = float(d["slope"])
        return out


def _group(records: Iterable[TrialRecord]) -> dict[tuple[int, int, str], np.ndarray]:
    groups: dict[tuple[int, int, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.N, r.k, r.functional), []).append(r.deviation)
    return {key: np.sort(np.asarray(v)) for key, v in sorted(groups.items())}


def summarize(records: Iterable[TrialRecord], epsilons: Sequence[float] = DEFAULT_EPSILONS) -> DeviationSummary:
    """Quantiles, tail frequencies and size-scaling slopes of the deviations."""
    groups = _group(records)
    summary = DeviationSummary(epsilons=tuple(epsilons))
    for (n, k, name), dev in groups.items():
        summary.rows.append({
            "N": n, "k": k, "functional": name, "trials": int(dev.size),
            "median_dev": float(np.median(dev)), "mean_dev": float(np.mean(dev)),
            "quantiles": {q: float(np.quantile(dev, q)) for q in _QUANTILES},
            "tail": {e: float(np.mean(dev >= e)) for e in summary.epsilons},
        })
    sizes = sorted({n for n, _, _ in groups})
    if len(sizes) < 2:
        summary.notice = "slope omitted: fewer than two distinct sizes"
        return summary
    for k, name in sorted({(k, name) for _, k, name in groups}):
        pts = [(n, groups[(n, k, name)]) for n in sizes if (n, k, name) in groups]
        med = np.array([np.median(d) for _, d in pts])
        if len(pts) >= 2 and np.all(med > 0):
            x = np.log([n for n, _ in pts])
            summary.slopes[(k, name)] = float(np.polyfit(x, np.log(med), 1)[0])
    return summary


@dataclass
class TailEstimate:
    """Empirical ``P(deviation >= epsilon)`` per ``(N, k, functional)``.

    ``violations`` lists ``(k, functional, N_small, N_large)`` where the
    frequency grows with ``N`` by more than two binomial standard errors
    plus one trial's worth of resolution.
    """

    epsilon: float
    frequency: dict[tuple[int, int, str], float]
    trials: dict[tuple[int, int, str], int]
    violations: list[tuple[int, str, int, int]]

    @property
    def monotone(self) -> bool:
        return not self.violations


def tail_estimate(records: Iterable[TrialRecord], epsilon: float) -> TailEstimate:
    groups = _group(records)
    freq = {key: float(np.mean(dev >= epsilon)) for key, dev in groups.items()}
    counts = {key: int(dev.size) for key, dev in groups.items()}
    violations = []
    for k, name in sorted({(k, name) for _, k, name in groups}):
        sizes = sorted(n for n, kk, nn in groups if (kk, nn) == (k, name))
        for n1, n2 in zip(sizes, sizes[1:]):
            p1, p2 = freq[(n1, k, name)], freq[(n2, k, name)]
            t1, t2 = counts[(n1, k, name)], counts[(n2, k, name)]
            pooled = 0.5 * (p1 + p2)
            slack = 2.0 * math.sqrt(pooled * (1 - pooled) * (1 / t1 + 1 / t2)) + 1.0 / min(t1, t2)
            if p2 - p1 > slack:
                violations.append((k, name, n1, n2))
    return TailEstimate(epsilon, freq, counts, violations)


def trial_seed(seed: int, n: int, t: int) -> int:
    """Integer seed of one trial, for reporting."""
    return derive_seed(seed, f"size/{n}/trial/{t}")
