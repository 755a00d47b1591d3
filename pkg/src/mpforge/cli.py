"""Command-line front end: ``mpforge {run,se,concentrate,check-translation,plotdata}``.

Exit codes: 0 success, 1 a translation check that did not pass, 2 invalid
configuration or input, 3 numeric failure, 4 internal error. Failures print
one JSON object to stderr. Every output carries the config hash, the seed
and the library version (inline for JSONL, in ``meta.json`` for CSV).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, serialize_config
from .denoisers import prior_posterior
from .ensembles import sample_rri_matrix
from .errors import InternalError, InvalidConfig, MPForgeError, NumericError
from .general import (check_translation_equivalence, gvamp_general_model, run_general_gvamp, run_se_general,
                      translate_gvamp, translate_vamp)
from .harness import DeviationSummary, records_to_jsonl, run_trials, summarize, tail_estimate
from .rng import stream
from .solvers import make_instance
from .state_evolution import se_init_from_config

log = logging.getLogger("mpforge")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INTERNAL = 0, 1, 2, 3, 4


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "version": __version__}


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_meta(out: Path, cfg: ExperimentConfig | None, command: str, files: list[str], extra=None) -> None:
    meta = {"command": command, "files": files, "version": __version__, **(extra or {})}
    if cfg is not None:
        meta.update(_provenance(cfg))
        meta["config"] = serialize_config(cfg)
    _write(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _instance(cfg: ExperimentConfig, full: bool):
    model = cfg.model()
    if model.algorithm == "amp" or not full:
        return model.instance(cfg["run.N"], "run", cfg.seed)
    n = cfg["run.N"]
    m = max(int(round(cfg["model.delta"] * n)), 1)
    fac = sample_rri_matrix(m, n, cfg.law(), cfg["model.mode"], stream(cfg.seed, "run/matrix"))
    return make_instance(fac, cfg.prior(), cfg.channel(), stream(cfg.seed, "run/signal"),
                         stream(cfg.seed, "run/noise"))


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    """Run the configured solver or recursion once and write ``trace.jsonl``."""
    algo = cfg.algorithm
    K = cfg["run.K"]
    solver = cfg.solver(max_iters=K)
    prov = _provenance(cfg)
    init_rng = stream(cfg.seed, "run/init")
    if algo.startswith("general-"):
        inst = _instance(cfg, full=True)
        prior = cfg.prior()
        lines = []
        if algo == "general-gvamp":
            bundle = translate_gvamp(inst, prior, cfg.channel(), solver, rng=init_rng, layout="error")
            for st in run_general_gvamp(bundle.inputs, K):
                x_hat = _x_hat(st.p_in[:, 0] + inst.x0, st.gamma_p_in[0], prior)
                lines.append({"k": st.k, "mse": float(np.mean((x_hat - inst.x0) ** 2)),
                    "alpha1": float(st.alpha_p_in[0]), "beta1": float(st.alpha_p_out[0]),
                    "alpha2": float(st.alpha_q_in[0]), "beta2": float(st.alpha_q_out[0]),
                    "gamma1": float(st.gamma_p_in[0]), "tau1": float(st.gamma_p_out[0]),
                    "gamma2": float(st.gamma_q_in[0]), "tau2": float(st.gamma_q_out[0])})
        else:
            for st in translate_vamp(inst, prior, solver, rng=init_rng).run(K):
                x_hat = _x_hat(st["p"][:, 0] + inst.x0, st["gamma1"][0], prior)
                lines.append({"k": st["k"], "mse": float(np.mean((x_hat - inst.x0) ** 2)),
                              "alpha1": float(st["alpha1"][0]), "alpha2": float(st["alpha2"][0]),
                              "gamma1": float(st["gamma1"][0]), "gamma2": float(st["gamma2"][0])})
        text = "".join(json.dumps({**rec, "algorithm": algo, **prov}, sort_keys=True) + "\n" for rec in lines)
    else:
        model = cfg.model()
        inst = _instance(cfg, full=False)
        trace = model.solve(inst, solver.with_(record_x_hat="none"), "run", cfg.seed, False)
        text = trace.to_jsonl(prov)
    _write(out / "trace.jsonl", text)
    log.info("wrote %s", out / "trace.jsonl")
    return EXIT_OK


def _x_hat(r, gamma, prior):
    return prior_posterior(r, gamma, prior)[0]


def cmd_se(cfg: ExperimentConfig, out: Path) -> int:
    """Write the state-evolution trajectory for ``k = 0..run.K`` to ``se.csv``."""
    K = cfg["run.K"]
    if cfg.algorithm == "general-gvamp":
        solver = cfg.solver()
        init = se_init_from_config(solver, cfg.prior(), cfg.law())
        if init.mode != "centered":
            raise InvalidConfig("the general state evolution needs solver.init_mode = \"centered\"",
                                field="solver.init_mode")
        model = gvamp_general_model(cfg.prior(), cfg.channel(), cfg.law(), cfg["model.delta"], solver)
        traj = run_se_general(model, init, K, mc_samples=cfg["se.mc_samples"], rng=stream(cfg.seed, "se/mc"))
    else:
        traj = cfg.model().state_evolution(K)
    _write(out / "se.csv", traj.to_csv())
    _write_meta(out, cfg, "se", ["se.csv"], {"clip_events": traj.clip_events})
    return EXIT_OK


def cmd_concentrate(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    """Run the size sweep, then write ``records.jsonl``, ``summary.csv`` and ``meta.json``."""
    records = run_trials(cfg.model(), cfg["harness.sizes"], cfg["harness.trials"], cfg["harness.K"],
                         cfg["harness.functionals"], cfg.seed, workers=workers)
    summary = summarize(records, cfg["harness.epsilons"])
    _write(out / "records.jsonl", records_to_jsonl(records, _provenance(cfg)))
    _write(out / "summary.csv", summary.to_csv())
    tails = {f"{e:g}": [list(v) for v in tail_estimate(records, e).violations] for e in cfg["harness.epsilons"]}
    _write_meta(out, cfg, "concentrate", ["records.jsonl", "summary.csv"],
                {"notice": summary.notice, "tail_monotonicity_violations": tails})
    return EXIT_OK


def cmd_check_translation(cfg: ExperimentConfig, out: Path) -> int:
    """Compare GVAMP with its translated recursion; exit 1 if they disagree."""
    inst = _instance(cfg, full=True)
    report = check_translation_equivalence(inst, cfg.prior(), cfg.channel(), cfg.solver(), cfg["run.K"],
                                           rng=stream(cfg.seed, "run/init"))
    _write(out / "report.json", json.dumps({**report.to_dict(), **_provenance(cfg)}, sort_keys=True, indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _long_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["x", "y", "series"])
    writer.writerows(rows)
    return buf.getvalue()


def cmd_plotdata(summary_path: Path, out: Path) -> int:
    """Turn ``summary.csv`` into long-format ``(x, y, series)`` tables, one per figure."""
    try:
        text = summary_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfig(f"cannot read summary: {exc}", field="summary") from exc
    summary = DeviationSummary.from_csv(text)
    median = [(r["N"], repr(r["median_dev"]), f"{r['functional']} k={r['k']}") for r in summary.rows]
    tail = [(r["N"], repr(p), f"{r['functional']} k={r['k']} eps={e:g}")
            for r in summary.rows for e, p in r["tail"].items()]
    slope = [(k, repr(v), name) for (k, name), v in sorted(summary.slopes.items())]
    files = {"median_deviation.csv": median, "tail_frequency.csv": tail, "slope.csv": slope}
    for name, rows in files.items():
        _write(out / name, _long_csv(rows))
    _write_meta(out, None, "plotdata", sorted(files), {"source": str(summary_path)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpforge", description="Message-passing experiments on rotationally invariant designs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "se", "concentrate", "check-translation"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat key = value config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out", type=Path, help="output directory (defaults to output.dir)")
    p = sub.add_parser("plotdata")
    p.add_argument("summary", type=Path)
    p.add_argument("--out", type=Path, default=Path("plotdata"))
    p.add_argument("--workers", type=int, default=1)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("MPFORGE_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(exc: MPForgeError, code: int) -> int:
    sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plotdata":
            return cmd_plotdata(args.summary, args.out)
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_(seed=args.seed)
        if args.workers is not None and args.workers < 1:
            raise InvalidConfig("--workers must be positive", field="--workers")
        out = args.out or Path(cfg["output.dir"])
        log.info("command %s, config %s, seed %d", args.command, cfg.hash(), cfg.seed)
        if args.command == "run":
            return cmd_run(cfg, out)
        if args.command == "se":
            return cmd_se(cfg, out)
        if args.command == "concentrate":
            return cmd_concentrate(cfg, out, args.workers)
        return cmd_check_translation(cfg, out)
    except NumericError as exc:
        return _fail(exc, EXIT_NUMERIC)
    except InternalError as exc:
        return _fail(exc, EXIT_INTERNAL)
    except MPForgeError as exc:
        return _fail(exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
