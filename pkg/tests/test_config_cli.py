import csv
import io
import json

import numpy as np
import pytest

from mpforge import __version__, cli
from mpforge.config import ExperimentConfig, parse_config, serialize_config
from mpforge.errors import InternalError, InvalidConfig, NumericError
from mpforge.state_evolution import gaussian_closed_form

GAUSSIAN = """\
# Gaussian reference model
model.algorithm = "vamp"
model.prior.kind = "gaussian"
model.law.kind = "constant"
model.channel.tau_w = 0.01
run.N = 128
run.K = 6
"""


@pytest.fixture
def gaussian_config(tmp_path):
    path = tmp_path / "gauss.cfg"
    path.write_text(GAUSSIAN)
    return path


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


# -- config --------------------------------------------------------------------


def test_config_roundtrip():
    cfg = parse_config(GAUSSIAN)
    again = parse_config(serialize_config(cfg))
    assert again == cfg and serialize_config(again) == serialize_config(cfg)
    assert cfg.hash() == again.hash() and len(cfg.hash()) == 16


def test_defaults_and_overrides():
    cfg = ExperimentConfig()
    assert cfg.algorithm == "gvamp" and cfg["solver.stop_change_eps"] == 0.0
    changed = cfg.with_(model__delta=0.25, seed=9)
    assert changed["model.delta"] == 0.25 and changed.seed == 9 and changed.hash() != cfg.hash()


@pytest.mark.parametrize("text,field", [
    ("model.delta = 1.5", "model.delta"),
    ("model.colour = 1", "model.colour"),
    ("run.N = 2.5", "run.N"),
    ("run.N = [", "run.N"),
    ("model.algorithm = \"gamp\"", "model.algorithm"),
    ("solver.t_min = 0.0", "solver.t_min"),
    ("model.law.s_max = -1", "model.law.s_max"),
    ("harness.functionals = [\"entropy\"]", "harness.functionals"),
    ("seed = 1\nseed = 2", "seed"),
    ("just words", "just words"),
    ("model.algorithm = \"amp\"\nmodel.channel.kind = \"probit\"", "model.channel.kind"),
])
def test_invalid_configs_name_the_field(text, field):
    with pytest.raises(InvalidConfig) as info:
        parse_config(text)
    assert info.value.field == field


def test_comments_and_blank_lines_are_ignored():
    assert parse_config("\n# nothing here\n\n") == ExperimentConfig()


# -- commands ------------------------------------------------------------------


def test_run_writes_one_record_per_iteration(gaussian_config, tmp_path):
    out = tmp_path / "run"
    assert run_cli("run", "--config", gaussian_config, "--out", out) == 0
    lines = (out / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 7
    rec = json.loads(lines[0])
    cfg = parse_config(GAUSSIAN)
    assert rec["config_hash"] == cfg.hash() and rec["seed"] == 0 and rec["version"] == __version__


def test_run_is_byte_identical(gaussian_config, tmp_path):
    for name in ("a", "b"):
        assert run_cli("run", "--config", gaussian_config, "--seed", 4, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() == (tmp_path / "b" / "trace.jsonl").read_bytes()


def test_bad_delta_exits_two(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("model.delta = 1.5\n")
    assert run_cli("run", "--config", path, "--out", tmp_path) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["field"] == "model.delta"


def test_missing_config_exits_two(tmp_path, capsys):
    assert run_cli("se", "--config", tmp_path / "nope.cfg") == 2
    assert json.loads(capsys.readouterr().err)["field"] == "--config"


@pytest.mark.parametrize("exc,code", [(NumericError("boom", iteration=3), 3), (InternalError("bad"), 4)])
def test_error_exit_codes(monkeypatch, tmp_path, capsys, exc, code):
    def fail(*args, **kwargs):
        raise exc

    monkeypatch.setattr(cli, "cmd_run", fail)
    assert run_cli("run", "--out", tmp_path) == code
    assert json.loads(capsys.readouterr().err)["message"] == str(exc.args[0])


def test_se_matches_closed_form(gaussian_config, tmp_path):
    out = tmp_path / "se"
    assert run_cli("se", "--config", gaussian_config, "--out", out) == 0
    rows = list(csv.DictReader(io.StringIO((out / "se.csv").read_text())))
    oracle = gaussian_closed_form(1.0, 0.01, 1.0, 0.5, 6)["mse_pred"]
    assert len(rows) == 7
    assert np.max(np.abs(np.array([float(r["mse_pred"]) for r in rows]) - oracle)) < 1e-10
    meta = json.loads((out / "meta.json").read_text())
    assert meta["config_hash"] == parse_config(GAUSSIAN).hash() and meta["version"] == __version__


def test_general_se_needs_centered_start(tmp_path):
    path = tmp_path / "g.cfg"
    path.write_text('model.algorithm = "general-gvamp"\n')
    assert run_cli("se", "--config", path, "--out", tmp_path) == 2
    path.write_text('model.algorithm = "general-gvamp"\nsolver.init_mode = "centered"\nsolver.init_var = 0.5\n'
                    "se.mc_samples = 20000\nrun.K = 3\n")
    assert run_cli("se", "--config", path, "--out", tmp_path / "g") == 0
    assert len((tmp_path / "g" / "se.csv").read_text().splitlines()) == 5


def test_check_translation_passes_by_default(tmp_path):
    assert run_cli("check-translation", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["pass"] is True and report["max_discrepancy"] < 1e-8


@pytest.mark.parametrize("algorithm", ["general-gvamp", "general-vamp", "amp", "gvamp"])
def test_run_every_algorithm(tmp_path, algorithm):
    path = tmp_path / "c.cfg"
    channel = "" if algorithm == "gvamp" else 'model.prior.kind = "gaussian"\n'
    path.write_text(f'model.algorithm = "{algorithm}"\nrun.N = 64\nrun.K = 3\n{channel}')
    assert run_cli("run", "--config", path, "--out", tmp_path) == 0
    assert len((tmp_path / "trace.jsonl").read_text().splitlines()) == 4


def test_concentrate_and_plotdata(gaussian_config, tmp_path):
    text = GAUSSIAN + "harness.sizes = [64, 128]\nharness.trials = 4\nharness.K = 2\n"
    path = tmp_path / "h.cfg"
    path.write_text(text)
    out = tmp_path / "conc"
    assert run_cli("concentrate", "--config", path, "--out", out, "--workers", 1) == 0
    records = (out / "records.jsonl").read_text().splitlines()
    assert len(records) == 2 * 4 * 2 * 3
    summary = (out / "summary.csv").read_text()
    assert len(summary.splitlines()) == 1 + 2 * 2 * 3
    plots = tmp_path / "plots"
    assert run_cli("plotdata", out / "summary.csv", "--out", plots) == 0
    for name in ("median_deviation.csv", "tail_frequency.csv", "slope.csv"):
        rows = (plots / name).read_text().splitlines()
        assert rows[0] == "x,y,series" and len(rows) > 1


def test_concentrate_output_is_independent_of_workers(tmp_path):
    path = tmp_path / "h.cfg"
    path.write_text(GAUSSIAN + "harness.sizes = [64, 128]\nharness.trials = 3\nharness.K = 2\n")
    for w in (1, 2):
        assert run_cli("concentrate", "--config", path, "--out", tmp_path / str(w), "--workers", w) == 0
    assert (tmp_path / "1" / "records.jsonl").read_bytes() == (tmp_path / "2" / "records.jsonl").read_bytes()


def test_plotdata_on_empty_summary(tmp_path):
    (tmp_path / "summary.csv").write_text("")
    assert run_cli("plotdata", tmp_path / "summary.csv", "--out", tmp_path / "p") == 0
    for name in ("median_deviation.csv", "tail_frequency.csv", "slope.csv"):
        assert (tmp_path / "p" / name).read_bytes() == b"x,y,series\r\n"


def test_workers_must_be_positive(tmp_path):
    assert run_cli("run", "--workers", 0, "--out", tmp_path) == 2


def test_log_level_from_environment(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("MPFORGE_LOG", "info")
    import logging

    logging.getLogger().handlers.clear()
    path = tmp_path / "c.cfg"
    path.write_text(GAUSSIAN)
    assert run_cli("run", "--config", path, "--out", tmp_path) == 0
    assert "wrote" in capsys.readouterr().err
