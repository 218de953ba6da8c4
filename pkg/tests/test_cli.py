import json
import math
import re
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import pytest

from lblmimo import cli
from lblmimo.cli import (
    CSV_COLUMNS,
    ConfigError,
    emit_results,
    load_config_document,
    main,
    parse_config,
    parse_results,
)
from lblmimo.harness import ComplexityRecord, ConvergenceTrace, SweepConfig, run_ber_sweep

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def records():
    cfg = SweepConfig(detectors=("mmse", "lbl"), N=8, K=3, snr_grid_db=(0.0, 4.0, math.inf),
                      n_trials=500, min_errors=100)
    return run_ber_sweep(cfg)


# ---------------------------------------------------------------- config

def test_defaults_from_empty_document():
    cfg = parse_config({}, {"N": 16, "K": 4, "M": 16, "snr_db": [5.0]})
    assert (cfg.N, cfg.K, cfg.M, cfg.snr_grid_db) == (16, 4, 16, (5.0,))
    assert cfg.lbl.epsilon == 1e-6 and cfg.lbl.t_max == 10
    assert cfg.ep_beta == 0.9 and cfg.min_errors == 500 and cfg.n_trials == 100_000


def test_nested_document(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("detectors: [lbl, ep]\nN: 32\nK: 8\nsnr_db: [1, 2.5, inf]\n"
                 "lbl: {epsilon: 1.0e-4, t_max: 6}\nep: {beta: 0.5}\n")
    cfg = parse_config(load_config_document(p))
    assert cfg.detectors == ("lbl", "ep") and cfg.snr_grid_db == (1.0, 2.5, math.inf)
    assert cfg.lbl == cli.LblConfig(1e-4, 6) and cfg.ep_beta == 0.5


@pytest.mark.parametrize("doc,path", [
    ({"lbl": {"t_max": 0}}, "lbl.t_max"),
    ({"lbl": {"tmax": 3}}, "lbl.tmax"),
    ({"bogus": 1}, "bogus"),
    ({"ep": {"beta": 1.5}}, "ep.beta"),
    ({"N": "many"}, "N"),
    ({"snr_db": [3, 1]}, "snr_db"),
    ({"n_trials": 0}, "n_trials"),
    ({"detectors": ["lbl", "xyz"]}, "detectors"),
    ({"complexity": {"points": [[1, 2]]}}, "complexity.points"),
])
def test_rejections_name_key_path(doc, path):
    with pytest.raises(ConfigError, match=re.escape(path)):
        parse_config(doc)


def test_malformed_document(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("N: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config_document(p)
    with pytest.raises(ConfigError):
        load_config_document(tmp_path / "missing.cfg")


def test_seed_env(monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "77")
    assert parse_config({}).base_seed == 77
    assert parse_config({"seed": 5}).base_seed == 5
    assert parse_config({}, {"seed": 9}).base_seed == 9


# ---------------------------------------------------------------- emit / parse

def test_csv_header_and_rows(records):
    text = emit_results(records[:1], "csv")
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 2


def test_csv_round_trip(records):
    manifest = {"tool": "lblmimo", "x": 1}
    m, back = parse_results(emit_results(records, "csv", manifest))
    assert m == manifest
    for a, b in zip(records, back):
        assert all(getattr(a, c) == getattr(b, c) for c in CSV_COLUMNS)
        assert b.symbol_errors is None


def test_jsonl_round_trip(records):
    m, back = parse_results(emit_results(records, "jsonl", {"k": "v"}))
    assert m == {"k": "v"} and back == records


def test_ber_column_full_precision(records):
    _, back = parse_results(emit_results(records, "csv"))
    for r in back:
        assert r.ber == r.bit_errors / r.bits_total
    row = emit_results(records[:1], "csv").split("\n")[1].split(",")
    ber = row[CSV_COLUMNS.index("ber")]
    assert float(ber) == records[0].ber and (len(ber.replace(".", "")) >= 15 or records[0].ber in (0, 1)
                                             or float(ber) == float(format(records[0].ber, ".17g")))


def test_other_record_types_round_trip():
    recs = [ComplexityRecord("lbl", 192, 64, 10, 4, 10.0, 122880.0, 883200.0, 0.0)]
    for fmt in ("csv", "jsonl"):
        assert parse_results(emit_results(recs, fmt), ComplexityRecord)[1] == recs


def test_emit_rejects_empty():
    with pytest.raises(ValueError):
        emit_results([], "csv")


# ---------------------------------------------------------------- main

def _strip_times(text):
    out = []
    for line in text.splitlines():
        if line.startswith("# manifest: "):
            m = json.loads(line[len("# manifest: "):])
            for k in ("started", "finished", "wall_time_s"):
                m.pop(k)
            out.append(json.dumps(m, sort_keys=True))
        else:
            cells = line.split(",")
            out.append(",".join(cells[:-1]))  # drop wall_time_s
    return out


def test_ber_sweep_byte_identical_modulo_time(tmp_path, capsys):
    args = ["ber-sweep", "-N", "8", "-K", "3", "--snr", "2,6", "--trials", "600",
            "--detectors", "mmse,lbl,ml", "--seed", "4"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b), "--threads", "2"]) == 0
    assert _strip_times(a.read_text()) == _strip_times(b.read_text())
    manifest, recs = parse_results(a.read_text())
    assert manifest["config"]["base_seed"] == 4 and manifest["version"]
    assert len(recs) == 6


def test_jsonl_output(tmp_path):
    out = tmp_path / "r.jsonl"
    assert main(["ber-sweep", "-N", "6", "-K", "2", "--snr", "3", "--trials", "200",
                 "--format", "jsonl", "--out", str(out)]) == 0
    first = json.loads(out.read_text().splitlines()[0])
    assert "manifest" in first


def test_exit_codes(tmp_path, capsys):
    assert main(["nope"]) == cli.EXIT_CONFIG
    assert main(["ber-sweep", "--t-max", "0"]) == cli.EXIT_CONFIG
    assert "lbl.t_max" in capsys.readouterr().err
    assert main(["ber-sweep", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG
    assert main(["load-ratio", "-N", "8", "--trials", "10"]) == cli.EXIT_CONFIG
    assert main(["ber-sweep", "-N", "4", "-K", "2", "--trials", "10", "--out",
                 str(tmp_path / "no" / "dir.csv")]) == cli.EXIT_RUNTIME


def test_runtime_error_code(monkeypatch, capsys):
    def boom(cfg, args):
        raise RuntimeError("kaput")
    monkeypatch.setitem(cli.COMMANDS, "ber-sweep", boom)
    assert main(["ber-sweep", "--trials", "5"]) == cli.EXIT_RUNTIME
    assert "kaput" in capsys.readouterr().err


def test_convergence_and_load_ratio(tmp_path, capsys):
    out = tmp_path / "c.jsonl"
    assert main(["convergence", "-N", "12", "-K", "4", "--snr", "8", "--trials", "300",
                 "--format", "jsonl", "--out", str(out)]) == 0
    _, traces = parse_results(out.read_text(), ConvergenceTrace)
    assert traces[0].trials == 300 and len(traces[0].mean) == 9
    assert "iterations median" in capsys.readouterr().err
    out2 = tmp_path / "l.csv"
    assert main(["load-ratio", "-N", "16", "--snr", "8", "--alphas", "0.25,0.5", "--trials",
                 "200", "--detectors", "lbl", "--out", str(out2)]) == 0
    assert out2.read_text().count("\n") == 4


def test_complexity_table1(capsys, tmp_path):
    out = tmp_path / "t.csv"
    assert main(["complexity", "--config", str(ROOT / "configs" / "table1.cfg"),
                 "--out", str(out)]) == 0
    err = capsys.readouterr().err
    line = next(l for l in err.splitlines() if l.startswith("(192,64,10) MMSE/LBL"))
    ratio = float(re.search(r"op_count ratio ([\d.]+)", line).group(1))
    assert ratio >= 15


def test_selftest_subcommand():
    proc = subprocess.run([sys.executable, "-m", "lblmimo.cli", "selftest"], capture_output=True,
                          text=True, timeout=120)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "selftest passed" in proc.stdout


def test_usage_on_unknown_subcommand():
    proc = subprocess.run([sys.executable, "-m", "lblmimo.cli", "frobnicate"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode != 0 and "usage" in proc.stderr
