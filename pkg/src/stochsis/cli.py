"""Command-line entry point.

Subcommands: classify, simulate, ensemble, verify, sweep. Exit codes are
0 on success, 1 for invalid input, 2 when ``verify`` finds a failing check
and 3 for I/O errors.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import enum
import json
import math
import os
import sys
from dataclasses import dataclass
from typing import IO

import numpy as np

from .ensemble import EnsembleConfig, EnsembleReport, run_ensemble
from .model import InvalidParameterError, ModelParams, classify
from .pathstats import SAMPLE_DTYPE, InsufficientSamplesError, PathRecord
from .sde import SchemeConfig, SchemeUnreliableError, simulate_path
from .verify import verify_report

EXIT_OK, EXIT_INVALID, EXIT_VERIFY_FAILED, EXIT_IO = 0, 1, 2, 3

CSV_COLUMNS = (
    "path_index",
    "seed",
    "extinct",
    "t_stop",
    "slope_endpoint",
    "slope_regression",
    "avg_i",
    "avg_i2",
    "psi",
    "mart_state_over_t",
    "mart_log_over_t",
    "clamp_count",
)

_MODEL_KEYS = ("beta", "gamma", "mu", "capacity", "i0")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    scheme: SchemeConfig
    ensemble: EnsembleConfig
    output: str = "csv"
    out_path: str | None = None
    dump_paths: bool = False


# --- number formatting --------------------------------------------------------


def fmt_number(x) -> str:
    """17 significant digits, enough to round-trip any float64."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    s = format(x, ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def to_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written at 17 significant digits; non-finite floats become null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None:
        return "null"
    if isinstance(obj, enum.Enum):
        return to_json(obj.value, indent, _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_number(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(to_json(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + to_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# --- emitters -----------------------------------------------------------------


def _summary_block(fields: dict, sink: IO[str]) -> None:
    sink.write("#summary\n")
    for key, value in fields.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                sink.write(f"# {key}.{sub}={_scalar(v)}\n")
        elif isinstance(value, (list, tuple)):
            sink.write(f"# {key}={';'.join(_scalar(v) for v in value)}\n")
        else:
            sink.write(f"# {key}={_scalar(value)}\n")


def _scalar(v) -> str:
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, str):
        return v
    return fmt_number(v)


def emit_report(report: EnsembleReport, fmt: str, sink: IO[str]) -> None:
    if fmt == "json":
        sink.write(to_json(report.to_dict()) + "\n")
        return
    sink.write(",".join(CSV_COLUMNS) + "\n")
    for s in report.per_path:
        row = s.to_dict()
        sink.write(",".join(fmt_number(row[c]) for c in CSV_COLUMNS) + "\n")
    scalars = {k: v for k, v in report.to_dict().items() if k != "per_path"}
    _summary_block(scalars, sink)


def _record_summary(rec: PathRecord) -> dict:
    try:
        regression = rec.slope_regression
    except InsufficientSamplesError:
        regression = math.nan
    return dict(
        params_hash=rec.params_hash,
        scheme=rec.scheme,
        extinct=rec.extinct,
        t_stop=rec.t_stop,
        n_steps=rec.n_steps,
        clamp_count=rec.clamp_count,
        slope_endpoint=rec.slope_endpoint,
        slope_regression=regression,
        avg_i_final=rec.avg_i_final,
        avg_i2_final=rec.avg_i2_final,
        psi_final=rec.psi_final,
        hoelder_margin=rec.hoelder_margin,
    )


def emit_path(rec: PathRecord, fmt: str, sink: IO[str]) -> None:
    if fmt == "json":
        samples = {name: rec.samples[name].tolist() for name in SAMPLE_DTYPE.names}
        sink.write(to_json({"summary": _record_summary(rec), "samples": samples}) + "\n")
        return
    sink.write(",".join(SAMPLE_DTYPE.names) + "\n")
    for row in rec.samples:
        sink.write(",".join(fmt_number(v) for v in row) + "\n")
    _summary_block(_record_summary(rec), sink)


def emit_paths_long(records: list[PathRecord], sink: IO[str]) -> None:
    sink.write("path_index," + ",".join(SAMPLE_DTYPE.names) + "\n")
    for k, rec in enumerate(records):
        for row in rec.samples:
            sink.write(f"{k}," + ",".join(fmt_number(v) for v in row) + "\n")


# --- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2, reserved for verify
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--beta", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--mu", type=float)
    noise = g.add_mutually_exclusive_group()
    noise.add_argument("--sigma", type=float)
    noise.add_argument("--sigma2", type=float, help="noise variance rate; alternative to --sigma")
    g.add_argument("--capacity", type=float, help="total population N")
    g.add_argument("--i0", type=float, help="initial infected count")
    s = p.add_argument_group("integration")
    s.add_argument("--scheme", choices=["em_log", "em_state", "milstein"])
    s.add_argument("--dt", type=float)
    s.add_argument("--t-end", type=float)
    s.add_argument("--extinction-eps", type=float)
    s.add_argument("--clamp-eps", type=float)
    s.add_argument("--record-stride", type=int)
    e = p.add_argument_group("ensemble")
    e.add_argument("--paths", type=int)
    e.add_argument("--seed", type=int, help="base seed; falls back to $SIS_SEED")
    e.add_argument("--workers", type=int)
    o = p.add_argument_group("output")
    o.add_argument("--out", help="output file (default: standard output)")
    o.add_argument("--format", choices=["csv", "json"])
    o.add_argument("--dump-paths", action="store_true", default=None)
    p.add_argument("--config", help="JSON file with model/scheme/ensemble/output keys; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stochsis", description="Stochastic SIS extinction simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [
        ("classify", "print the regime report"),
        ("simulate", "simulate one path and emit its sample series"),
        ("ensemble", "simulate an ensemble and emit the report"),
        ("verify", "simulate an ensemble and run every applicable check"),
        ("sweep", "grid over sigma^2 and/or beta"),
    ]:
        sp = sub.add_parser(name, help=text)
        _add_common(sp)
        if name == "sweep":
            sp.add_argument("--sigma2-grid", nargs=3, type=float, metavar=("START", "STOP", "NUM"))
            sp.add_argument("--beta-grid", nargs=3, type=float, metavar=("START", "STOP", "NUM"))
            sp.add_argument("--classify-only", action="store_true")
    return parser


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path!r} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _classify_only(ns: argparse.Namespace) -> bool:
    return ns.command == "classify" or (ns.command == "sweep" and ns.classify_only)


def _build(cls, values: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise UsageError(f"unknown {section} keys in config: {sorted(unknown)}")
    return cls(**values)


def parse_args(argv) -> tuple[str, RunConfig, argparse.Namespace]:
    """Resolve flags, ``--config`` and ``$SIS_SEED`` into a RunConfig.

    Precedence: flag, then $SIS_SEED (seed only), then config file, then
    built-in default.
    """
    ns = build_parser().parse_args(argv)
    cfg = _load_config(ns.config)
    model_cfg = dict(cfg.get("model", {}))
    scheme_cfg = dict(cfg.get("scheme", {}))
    ens_cfg = dict(cfg.get("ensemble", {}))

    for key in _MODEL_KEYS:
        if getattr(ns, key) is not None:
            model_cfg[key] = getattr(ns, key)
    if ns.sigma is not None:
        model_cfg.pop("sigma2", None)
        model_cfg["sigma"] = ns.sigma
    if ns.sigma2 is not None:
        model_cfg.pop("sigma", None)
        model_cfg["sigma2"] = ns.sigma2
    if "sigma" in model_cfg and "sigma2" in model_cfg:
        raise UsageError("give either sigma or sigma2, not both")
    if "sigma" not in model_cfg and "sigma2" not in model_cfg:
        raise UsageError("missing noise intensity: set --sigma or --sigma2")
    if "i0" not in model_cfg and "capacity" in model_cfg and _classify_only(ns):
        # the regime does not depend on the initial condition
        model_cfg["i0"] = model_cfg["capacity"] / 2.0
    missing = [k for k in _MODEL_KEYS if k not in model_cfg]
    if missing:
        raise UsageError("missing required parameter(s): " + ", ".join("--" + k for k in missing))
    unknown = set(model_cfg) - set(_MODEL_KEYS) - {"sigma", "sigma2"}
    if unknown:
        raise UsageError(f"unknown model keys in config: {sorted(unknown)}")
    if "sigma2" in model_cfg:
        model = ModelParams.from_sigma2(**model_cfg)
    else:
        model = ModelParams(**model_cfg)

    for flag, key in [
        ("scheme", "scheme"),
        ("dt", "dt"),
        ("t_end", "t_end"),
        ("extinction_eps", "extinction_eps"),
        ("clamp_eps", "clamp_eps"),
        ("record_stride", "record_stride"),
    ]:
        if getattr(ns, flag) is not None:
            scheme_cfg[key] = getattr(ns, flag)
    scheme = _build(SchemeConfig, scheme_cfg, "scheme")
    scheme.resolve(model)

    if ns.paths is not None:
        ens_cfg["n_paths"] = ns.paths
    if ns.seed is not None:
        ens_cfg["base_seed"] = ns.seed
    elif os.environ.get("SIS_SEED"):
        try:
            ens_cfg["base_seed"] = int(os.environ["SIS_SEED"])
        except ValueError:
            raise UsageError(f"SIS_SEED must be an integer, got {os.environ['SIS_SEED']!r}") from None
    if ns.workers is not None:
        ens_cfg["max_workers"] = ns.workers
    ensemble = _build(EnsembleConfig, ens_cfg, "ensemble")

    output = ns.format or cfg.get("output", "csv")
    if output not in ("csv", "json"):
        raise UsageError(f"output must be csv or json, got {output!r}")
    dump = ns.dump_paths if ns.dump_paths is not None else bool(cfg.get("dump_paths", False))
    run = RunConfig(
        model=model,
        scheme=scheme,
        ensemble=ensemble,
        output=output,
        out_path=ns.out if ns.out is not None else cfg.get("out_path"),
        dump_paths=dump,
    )
    return ns.command, run, ns


@contextlib.contextmanager
def _sink(path: str | None):
    if path is None or path == "-":
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(path, "w", newline="") as fh:
            yield fh


# --- subcommands --------------------------------------------------------------


def _cmd_classify(run: RunConfig) -> int:
    report = classify(run.model)
    with _sink(run.out_path) as out:
        if run.output == "json":
            out.write(to_json(report.to_dict()) + "\n")
        else:
            for key, value in report.to_dict().items():
                out.write(f"{key}={_scalar(value)}\n")
    return EXIT_OK


def _cmd_simulate(run: RunConfig) -> int:
    status = EXIT_OK
    try:
        rec = simulate_path(run.model, run.scheme, run.ensemble.base_seed)
    except SchemeUnreliableError as exc:
        print(f"warning: {exc}", file=sys.stderr)
        rec, status = exc.record, EXIT_INVALID
    with _sink(run.out_path) as out:
        emit_path(rec, run.output, out)
    return status


def _run(run: RunConfig):
    if run.dump_paths:
        if run.out_path in (None, "-"):
            raise UsageError("--dump-paths needs --out (paths are written next to it)")
        report, records = run_ensemble(run.model, run.scheme, run.ensemble, keep_paths=True)
        with open(run.out_path + ".paths.csv", "w", newline="") as fh:
            emit_paths_long(records, fh)
        return report
    return run_ensemble(run.model, run.scheme, run.ensemble)


def _cmd_ensemble(run: RunConfig) -> int:
    report = _run(run)
    with _sink(run.out_path) as out:
        emit_report(report, run.output, out)
    return EXIT_OK


def _cmd_verify(run: RunConfig) -> int:
    report = _run(run)
    verdicts = verify_report(run.model, report)
    print(f"{'check':<26} {'predicted':>14} {'measured':>14} {'tolerance':>12}  result", file=sys.stderr)
    for v in verdicts:
        print(
            f"{v.check_name:<26} {v.predicted:>14.6g} {v.measured:>14.6g} {v.tolerance:>12.4g}  "
            f"{'PASS' if v.passed else 'FAIL'}  {v.detail}",
            file=sys.stderr,
        )
    with _sink(run.out_path) as out:
        if run.output == "json":
            out.write(to_json({"verdicts": [v.to_dict() for v in verdicts], "report": report.to_dict()}) + "\n")
        else:
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(["check_name", "predicted", "measured", "tolerance", "passed", "detail"])
            for v in verdicts:
                writer.writerow(
                    [v.check_name, fmt_number(v.predicted), fmt_number(v.measured),
                     fmt_number(v.tolerance), fmt_number(v.passed), v.detail]
                )
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_VERIFY_FAILED


def _grid(spec, default: float) -> np.ndarray:
    if spec is None:
        return np.array([default])
    start, stop, num = spec
    if num < 1 or int(num) != num:
        raise UsageError(f"grid size must be a positive integer, got {num!r}")
    return np.linspace(start, stop, int(num))


def _cmd_sweep(run: RunConfig, ns: argparse.Namespace) -> int:
    if ns.sigma2_grid is None and ns.beta_grid is None:
        raise UsageError("sweep needs --sigma2-grid and/or --beta-grid")
    rows = []
    for beta in _grid(ns.beta_grid, run.model.beta):
        for s2 in _grid(ns.sigma2_grid, run.model.sigma2):
            p = ModelParams.from_sigma2(
                beta=float(beta), gamma=run.model.gamma, mu=run.model.mu, sigma2=float(s2),
                capacity=run.model.capacity, i0=run.model.i0,
            )
            regime = classify(p)
            row = dict(
                beta=p.beta,
                sigma2=p.sigma2,
                r0s=regime.r0s,
                theorem_case=regime.theorem_case.value,
                rate_bound=regime.rate_bound,
                average_bound=regime.average_bound,
                conjecture_region=regime.conjecture_region,
                persistence=regime.persistence,
            )
            if not ns.classify_only:
                rep = run_ensemble(p, run.scheme, run.ensemble)
                row.update(
                    n_paths=rep.n_paths,
                    extinct_fraction=rep.extinct_fraction,
                    slope_mean=rep.slope_mean,
                    slope_stderr=rep.slope_stderr,
                    slope_q95=rep.slope_quantiles[-1],
                    avg_i_mean=rep.avg_i_mean,
                )
            rows.append(row)
    with _sink(run.out_path) as out:
        if run.output == "json":
            out.write(to_json(rows) + "\n")
        else:
            out.write(",".join(rows[0]) + "\n")
            for row in rows:
                out.write(",".join(_scalar(v) for v in row.values()) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, run, ns = parse_args(argv)
        if command == "classify":
            return _cmd_classify(run)
        if command == "simulate":
            return _cmd_simulate(run)
        if command == "ensemble":
            return _cmd_ensemble(run)
        if command == "verify":
            return _cmd_verify(run)
        return _cmd_sweep(run, ns)
    except (UsageError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
