"""Flat, typed experiment configuration.

One ``key = value`` pair per line, dotted keys, JSON literals as values::

    # a sparse probit model
    model.algorithm = "gvamp"
    model.prior.kind = "bernoulli-gaussian"
    model.prior.rho = 0.1
    model.channel.kind = "probit"
    harness.sizes = [256, 512]

Blank lines and lines starting with ``#`` are ignored. Keys missing from the
file take their defaults; unknown keys are errors. :func:`serialize` writes
every key in sorted order, and parsing its output returns an equal config.

Experiments record every iteration by default (``solver.stop_change_eps``
defaults to 0 here, unlike the library default).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields

from .denoisers import ChannelSpec, PriorSpec
from .ensembles import SingularValueLaw
from .errors import InvalidConfig, MPForgeError
from .harness import DEFAULT_EPSILONS, ModelConfig, _BUILTIN
from .solvers import SolverConfig

__all__ = ["ExperimentConfig", "parse_config", "serialize_config", "load_config", "ALGORITHMS"]

ALGORITHMS = ("amp", "vamp", "gvamp", "general-gvamp", "general-vamp")

_SOLVER_DEFAULTS = {f.name: f.default for f in fields(SolverConfig)}
_SOLVER_DEFAULTS["stop_change_eps"] = 0.0

# key -> (type tag, default)
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "model.algorithm": ("str", "gvamp"),
    "model.prior.kind": ("str", "bernoulli-gaussian"),
    "model.prior.tau_x": ("float", 1.0),
    "model.prior.rho": ("float", 0.1),
    "model.channel.kind": ("str", "awgn"),
    "model.channel.tau_w": ("float", 0.01),
    "model.law.kind": ("str", "uniform"),
    "model.law.s_max": ("float", 4.0),
    "model.law.value": ("float", 1.0),
    "model.law.mass": ("float", 1.0),
    "model.law.kappa": ("float", 100.0),
    "model.delta": ("float", 0.5),
    "model.mode": ("str", "orthogonal"),
    "run.N": ("int", 256),
    "run.K": ("int", 10),
    "se.track_signal": ("bool", True),
    "se.mc_samples": ("int", 200_000),
    "harness.sizes": ("list[int]", [256, 512, 1024, 2048]),
    "harness.trials": ("int", 200),
    "harness.K": ("int", 6),
    "harness.functionals": ("list[str]", ["squared_error", "product", "second_moment"]),
    "harness.epsilons": ("list[float]", list(DEFAULT_EPSILONS)),
    "output.dir": ("str", "out"),
}
for _name, _default in _SOLVER_DEFAULTS.items():
    SCHEMA[f"solver.{_name}"] = ("int" if _name == "max_iters" else
                                 "str" if isinstance(_default, str) else "float", _default)
del _name, _default


def _coerce(key: str, tag: str, value):
    def bad():
        raise InvalidConfig(f"{key} expects {tag}, got {value!r}", field=key)

    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            bad()
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad()
        return float(value)
    if tag == "bool":
        if not isinstance(value, bool):
            bad()
        return value
    if tag == "str":
        if not isinstance(value, str):
            bad()
        return value
    if tag.startswith("list["):
        if not isinstance(value, list):
            bad()
        inner = tag[5:-1]
        return [_coerce(key, inner, v) for v in value]
    raise AssertionError(tag)


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated mapping from every schema key to its value."""

    values: dict = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})

    def __post_init__(self):
        merged = {k: v for k, (_, v) in SCHEMA.items()}
        for key, value in self.values.items():
            if key not in SCHEMA:
                raise InvalidConfig(f"unknown key {key!r}", field=key)
            merged[key] = _coerce(key, SCHEMA[key][0], value)
        object.__setattr__(self, "values", merged)
        self._validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def with_(self, **changes) -> "ExperimentConfig":
        """Copy with dotted keys given as ``model__delta=0.3``."""
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in changes.items()})
        return ExperimentConfig(vals)

    # -- derived objects ---------------------------------------------------
    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def algorithm(self) -> str:
        return self.values["model.algorithm"]

    def prior(self) -> PriorSpec:
        v = self.values
        if v["model.prior.kind"] == "gaussian":
            return PriorSpec.gaussian(v["model.prior.tau_x"])
        return PriorSpec(v["model.prior.kind"], tau_x=v["model.prior.tau_x"], rho=v["model.prior.rho"])

    def channel(self) -> ChannelSpec:
        return ChannelSpec(self.values["model.channel.kind"], self.values["model.channel.tau_w"])

    def law(self) -> SingularValueLaw:
        v = self.values
        return SingularValueLaw(v["model.law.kind"], s_max=v["model.law.s_max"], value=v["model.law.value"],
                                mass=v["model.law.mass"], kappa=v["model.law.kappa"])

    def solver(self, **changes) -> SolverConfig:
        kw = {name: self.values[f"solver.{name}"] for name in _SOLVER_DEFAULTS}
        kw.update(changes)
        return SolverConfig(**kw)

    def model(self) -> ModelConfig:
        algo = self.algorithm.replace("general-", "")
        return ModelConfig(algo, self.prior(), self.channel(), self.law(), self.values["model.delta"],
                           self.values["model.mode"], self.solver(), self.values["se.track_signal"])

    def hash(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()[:16]

    # -- validation ----------------------------------------------------------
    def _validate(self) -> None:
        v = self.values
        if v["seed"] < 0 or v["seed"] >= 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer", field="seed")
        if v["model.algorithm"] not in ALGORITHMS:
            raise InvalidConfig(f"algorithm must be one of {ALGORITHMS}", field="model.algorithm")
        delta = v["model.delta"]
        if not (0 < delta <= 1):
            raise InvalidConfig("delta must lie in (0, 1]", field="model.delta")
        if v["model.mode"] not in ("orthogonal", "right"):
            raise InvalidConfig("mode must be orthogonal or right", field="model.mode")
        for key in ("model.law.s_max", "model.law.value"):
            if not (math.isfinite(v[key]) and v[key] > 0):
                raise InvalidConfig("singular values need a bounded positive support", field=key)
        for key in ("run.N", "run.K", "harness.trials", "harness.K", "se.mc_samples"):
            low = 0 if key == "run.K" else 1
            if v[key] < low:
                raise InvalidConfig(f"{key} must be at least {low}", field=key)
        if v["run.N"] < 2 or any(n < 2 for n in v["harness.sizes"]) or not v["harness.sizes"]:
            raise InvalidConfig("problem sizes must be at least 2", field="harness.sizes")
        for name in v["harness.functionals"]:
            if name not in _BUILTIN:
                raise InvalidConfig(f"unknown functional {name!r}", field="harness.functionals")
        if any(not e >= 0 for e in v["harness.epsilons"]):
            raise InvalidConfig("epsilons must be non-negative", field="harness.epsilons")
        try:
            self.prior()
            self.channel()
            self.law()
            self.solver()
            if v["model.algorithm"] != "general-gvamp" and v["model.algorithm"] != "gvamp":
                if v["model.channel.kind"] != "awgn":
                    raise InvalidConfig(f"{v['model.algorithm']} needs an AWGN channel", field="model.channel.kind")
        except InvalidConfig:
            raise
        except (MPForgeError, TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc), field="model") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat ``key = json`` format."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InvalidConfig(f"line {lineno}: expected 'key = value'", field=key or f"line {lineno}")
        if key in values:
            raise InvalidConfig(f"line {lineno}: duplicate key {key!r}", field=key)
        try:
            values[key] = json.loads(rest.strip())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"line {lineno}: value is not a JSON literal ({exc.msg})", field=key) from exc
    return ExperimentConfig(values)


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{key} = {json.dumps(cfg.values[key])}\n" for key in sorted(cfg.values))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config: {exc}", field="--config") from exc
    return parse_config(text)
