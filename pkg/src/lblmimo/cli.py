"""``lblmimo`` command line: run studies from a YAML config and emit CSV or JSON lines.

Config keys (all optional; command-line flags override them)::

    detectors: [mmse, lbl, ep, ml]     # mrc zf mmse pic ep lbl ml
    N: 24
    K: 8
    M: 4
    snr_db: [0, 2, 4, 6, 8]            # a scalar is accepted too
    n_trials: 100000
    seed: 0
    min_errors: 500
    block_trials: 0                    # 0 = automatic
    ml_budget: 1048576
    channel: rayleigh                  # or identity
    lbl: {epsilon: 1.0e-6, t_max: 10}
    ep: {beta: 0.9, iterations: 10}
    pic: {iterations: 10}
    load_ratio: {alphas: [0.5, 0.6, 0.7]}
    complexity: {points: [[192, 64, 10]], trials: 20}

Exit status: 0 success, 1 selftest failure, 2 usage or config error, 3 runtime error.
"""
import argparse
import csv
from dataclasses import asdict, fields, replace
import io
import json
import logging
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import yaml

from . import __version__, harness
from .harness import BerRecord, SweepConfig
from .lbl import LblConfig

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
SEED_ENV = "LBLMIMO_SEED"

CSV_COLUMNS = ("detector", "N", "K", "M", "snr_db", "trials", "bit_errors", "bits_total", "ber",
               "ber_lo", "ber_hi", "mean_iterations", "mean_op_count", "wall_time_s")


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key path."""


# ------------------------------------------------------------------ config

_SCHEMA = {
    "detectors": list, "N": int, "K": int, "M": int, "snr_db": (list, float), "n_trials": int,
    "seed": int, "min_errors": int, "block_trials": int, "ml_budget": int, "channel": str,
    "lbl": {"epsilon": float, "t_max": int},
    "ep": {"beta": float, "iterations": int},
    "pic": {"iterations": int},
    "load_ratio": {"alphas": list},
    "complexity": {"points": list, "trials": int},
}


def _check_keys(doc, schema, path=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(doc).__name__}")
    for key, val in doc.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in schema:
            raise ConfigError(f"{where}: unknown key")
        rule = schema[key]
        if isinstance(rule, dict):
            _check_keys(val, rule, where)
            continue
        kinds = rule if isinstance(rule, tuple) else (rule,)
        ok = any(_is_kind(val, k) for k in kinds)
        if not ok:
            raise ConfigError(f"{where}: expected {' or '.join(k.__name__ for k in kinds)}, "
                              f"got {val!r}")


def _is_kind(val, kind):
    if kind is float:
        return isinstance(val, (int, float)) and not isinstance(val, bool)
    if kind is int:
        return isinstance(val, int) and not isinstance(val, bool)
    return isinstance(val, kind)


def _field(doc, path, default):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def load_config_document(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not a well-formed document: {exc}") from None
    return {} if doc is None else doc


def parse_config(doc=None, overrides=None) -> SweepConfig:
    """Validated :class:`SweepConfig` from a config mapping plus flag overrides.

    ``overrides`` uses the same dotted key paths as the document
    (``"lbl.t_max"``); ``None`` values are ignored.
    """
    doc = {} if doc is None else doc
    _check_keys(doc, _SCHEMA)
    merged = json.loads(json.dumps(doc))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        node = merged
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = val
    _check_keys(merged, _SCHEMA)

    def get(path, default):
        return _field(merged, path, default)

    snr = get("snr_db", [10.0])
    snr = [snr] if not isinstance(snr, list) else snr
    try:
        snr = tuple(_snr_value(v) for v in snr)
    except ValueError as exc:
        raise ConfigError(f"snr_db: {exc}") from None
    points = get("complexity.points", [])
    if not all(isinstance(p, list) and len(p) == 3 and all(_is_kind(v, int) for v in p)
               for p in points):
        raise ConfigError("complexity.points: expected a list of [N, K, T] integer triples")
    alphas = get("load_ratio.alphas", [])
    if not all(_is_kind(a, float) for a in alphas):
        raise ConfigError("load_ratio.alphas: expected a list of numbers")
    detectors = get("detectors", ["mmse", "lbl"])
    if not all(isinstance(d, str) for d in detectors):
        raise ConfigError("detectors: expected a list of detector names")

    try:
        lblc = LblConfig(float(get("lbl.epsilon", 1e-6)), int(get("lbl.t_max", 10)))
    except ValueError as exc:
        raise ConfigError(f"lbl.{exc}") from None
    try:
        return SweepConfig(
            detectors=tuple(detectors), N=get("N", 24), K=get("K", 8), M=get("M", 4),
            snr_grid_db=snr, n_trials=get("n_trials", harness.DEFAULT_TRIALS),
            base_seed=get("seed", _default_seed()), lbl=lblc,
            ep_beta=float(get("ep.beta", 0.9)), ep_iterations=get("ep.iterations", 10),
            pic_iterations=get("pic.iterations", 10),
            min_errors=get("min_errors", harness.DEFAULT_MIN_ERRORS),
            complexity_trials=get("complexity.trials", 20),
            block_trials=get("block_trials", 0),
            ml_budget=get("ml_budget", harness.baseline.ML_BUDGET),
            alphas=tuple(float(a) for a in alphas),
            complexity_points=tuple(tuple(p) for p in points),
            channel=get("channel", "rayleigh"),
        )
    except ValueError as exc:
        raise ConfigError(_with_key_path(str(exc))) from None


def _snr_value(v):
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if not _is_kind(v, float):
        raise ValueError(f"expected numbers or 'inf', got {v!r}")
    return float(v)


_MESSAGE_KEYS = {"ep_beta": "ep.beta", "ep_iterations": "ep.iterations",
                 "pic_iterations": "pic.iterations", "snr_grid_db": "snr_db",
                 "n_trials": "n_trials", "min_errors": "min_errors", "alphas": "load_ratio.alphas",
                 "block_trials": "block_trials", "channel": "channel", "detectors": "detectors"}


def _with_key_path(msg):
    head = msg.split(" ", 1)[0].rstrip(":")
    if head in _MESSAGE_KEYS:
        return f"{_MESSAGE_KEYS[head]}: {msg.split(' ', 1)[1].lstrip(': ')}"
    return msg


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}") from None


# ------------------------------------------------------------------ output

def _revision():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def config_echo(cfg: SweepConfig) -> dict:
    d = asdict(cfg)
    d["snr_grid_db"] = [_json_real(s) for s in cfg.snr_grid_db]
    return d


def _json_real(x):
    return x if math.isfinite(x) else str(x)


def make_manifest(cfg: SweepConfig, command: str, started: float, finished: float) -> dict:
    return {
        "tool": "lblmimo",
        "version": __version__,
        "revision": _revision(),
        "command": command,
        "config": config_echo(cfg),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(finished)),
        "wall_time_s": finished - started,
    }


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (tuple, list)):
        return json.dumps(list(v))
    return "" if v is None else str(v)


def _columns(records):
    if isinstance(records[0], BerRecord):
        return CSV_COLUMNS
    return tuple(f.name for f in fields(records[0]))


def emit_results(records, fmt: str = "csv", manifest: dict = None) -> str:
    """Serialise records; the manifest (if any) leads the document."""
    if not records:
        raise ValueError("no records to emit")
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {fmt!r}")
    buf = io.StringIO()
    if fmt == "csv":
        if manifest is not None:
            buf.write("# manifest: " + json.dumps(manifest, sort_keys=True) + "\n")
        cols = _columns(records)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in cols])
    else:
        if manifest is not None:
            buf.write(json.dumps({"manifest": manifest}, sort_keys=True) + "\n")
        for r in records:
            buf.write(json.dumps(asdict(r)) + "\n")
    return buf.getvalue()


def _coerce(cls, row: dict):
    out = {}
    for f in fields(cls):
        if f.name not in row:
            continue
        raw = row[f.name]
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if raw is None or raw == "":
            out[f.name] = None
        elif "int" in t:
            out[f.name] = int(raw)
        elif "float" in t:
            out[f.name] = float(raw)
        elif t == "tuple":
            out[f.name] = tuple(json.loads(raw) if isinstance(raw, str) else raw)
        else:
            out[f.name] = raw
    return cls(**out)


def parse_results(text: str, record_type=BerRecord):
    """Inverse of :func:`emit_results`: ``(manifest or None, records)``."""
    lines = text.splitlines()
    manifest = None
    if lines and lines[0].startswith("{"):
        first = json.loads(lines[0])
        if "manifest" in first:
            manifest, lines = first["manifest"], lines[1:]
        return manifest, [_coerce(record_type, json.loads(ln)) for ln in lines if ln.strip()]
    if lines and lines[0].startswith("# manifest: "):
        manifest, lines = json.loads(lines[0][len("# manifest: "):]), lines[1:]
    rows = csv.DictReader(lines)
    return manifest, [_coerce(record_type, row) for row in rows]


# ------------------------------------------------------------------ commands

def _cmd_ber_sweep(cfg, args):
    return harness.run_ber_sweep(cfg, args.threads), None


def _cmd_convergence(cfg, args):
    if "lbl" not in cfg.detectors:
        cfg = replace(cfg, detectors=("lbl",))
    traces = harness.run_convergence_study(cfg, args.threads)
    lines = [f"snr {t.snr_db:g} dB: iterations median {t.iterations_median:g}, "
             f"p99 {t.iterations_p99:g}, max {t.iterations_max}" for t in traces]
    return traces, lines


def _cmd_load_ratio(cfg, args):
    if not cfg.alphas:
        raise ConfigError("load_ratio.alphas: at least one value is required")
    return harness.run_load_ratio_study(cfg.N, cfg.alphas, cfg.snr_grid_db[0], cfg,
                                        args.threads), None


def _cmd_complexity(cfg, args):
    points = cfg.complexity_points or ((cfg.N, cfg.K, cfg.lbl.t_max),)
    recs = harness.run_complexity_study(points, cfg.detectors, cfg.M, cfg.snr_grid_db[0],
                                        cfg.complexity_trials, cfg.base_seed)
    lines = []
    for N, K, T in points:
        at = {r.detector: r for r in recs if (r.N, r.K, r.T) == (N, K, T)}
        if "lbl" not in at:
            continue
        for other in (d for d in at if d != "lbl"):
            lines.append(f"({N},{K},{T}) {other.upper()}/LBL: op_count ratio "
                         f"{at[other].op_count / at['lbl'].op_count:.1f}, executed-MAC ratio "
                         f"{at[other].macs / at['lbl'].macs:.2f}")
    return recs, lines


COMMANDS = {
    "ber-sweep": _cmd_ber_sweep,
    "convergence": _cmd_convergence,
    "load-ratio": _cmd_load_ratio,
    "complexity": _cmd_complexity,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help=f"base seed (default: ${SEED_ENV} or 0)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    study = argparse.ArgumentParser(add_help=False, parents=[common])
    study.add_argument("--config", help="YAML config document")
    study.add_argument("--detectors", help="comma-separated detector ids")
    study.add_argument("-N", type=int, dest="N")
    study.add_argument("-K", type=int, dest="K")
    study.add_argument("-M", type=int, dest="M")
    study.add_argument("--snr", help="comma-separated SNR grid in dB ('inf' allowed)")
    study.add_argument("--trials", type=int, help="trial ceiling per point")
    study.add_argument("--min-errors", type=int)
    study.add_argument("--alphas", help="comma-separated load ratios (load-ratio)")
    study.add_argument("--epsilon", type=float, help="LBL tolerance")
    study.add_argument("--t-max", type=int, help="LBL iteration cap")

    p = argparse.ArgumentParser(prog="lblmimo", description=__doc__.split("\n")[0],
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {"ber-sweep": "BER versus SNR for a detector set",
             "convergence": "LBL convergence traces and iteration counts",
             "load-ratio": "BER versus users-per-antenna ratio at fixed SNR",
             "complexity": "operation counts per detection"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[study], help=helps[name])
    sub.add_parser("selftest", parents=[common], help="run the invariant checks")
    return p


def _overrides(args) -> dict:
    def split(s, conv):
        return None if s is None else [conv(v) for v in s.split(",") if v.strip()]

    ov = {
        "seed": args.seed, "N": args.N, "K": args.K, "M": args.M, "n_trials": args.trials,
        "min_errors": args.min_errors, "lbl.epsilon": args.epsilon, "lbl.t_max": args.t_max,
        "detectors": split(args.detectors, str.strip),
        "load_ratio.alphas": split(args.alphas, float),
    }
    try:
        ov["snr_db"] = split(args.snr, lambda v: _snr_value(_num(v)))
    except ValueError as exc:
        raise ConfigError(f"--snr: {exc}") from None
    return ov


def _num(v):
    v = v.strip()
    try:
        return float(v)
    except ValueError:
        return v


def _write(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "selftest":
        from .selftest import run_selftest
        return EXIT_OK if run_selftest() else EXIT_SELFTEST

    try:
        doc = load_config_document(args.config) if args.config else {}
        cfg = parse_config(doc, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    started = time.time()
    try:
        records, summary = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not records:
        print("runtime error: no records produced", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = make_manifest(cfg, args.command, started, time.time())
    try:
        _write(emit_results(records, args.format, manifest), args.out)
    except OSError as exc:
        print(f"runtime error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for line in summary or ():
        print(line, file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
