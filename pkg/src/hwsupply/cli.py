"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data validation failure, 3 numerical
or calibration failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

from .calibrate import ALL_YEARS, FINAL_YEAR, grid_points
from .data_model import BASELINE, EXTENDED_FIELDS, Params
from .errors import DataError, NumericalError
from .ingest import data_files, read_bundles, select_calibration_year, write_canonical
from .pipeline import EXTENDED, MINIMAL, calibrate, chi2_of, gaps_by_year, prepare, provenance, run_forecast
from .scenario import Intervention

log = logging.getLogger("hwsupply")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--data-dir", default=d("."), help="directory with the canonical CSV files")
    p.add_argument("--out-dir", default=d("out"), help="where outputs are written")
    p.add_argument("--gof", choices=(FINAL_YEAR, ALL_YEARS), default=d(FINAL_YEAR),
                   help="chi2 at the last observed year only, or summed over all years")
    p.add_argument("--model", choices=(MINIMAL, EXTENDED), default=d(MINIMAL))
    p.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hwsupply", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="validate data and write a normalised copy")
    p.add_argument("--country")

    for name, helptext in (("calibrate", "fit p_enter and field choice"), ("surface", "write the chi2 grid only")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--country", required=True)
        p.add_argument("--grid-step", type=float, default=0.01)
        p.add_argument("--to", type=int, default=2040, dest="horizon", help="horizon year")
        if name == "calibrate":
            p.add_argument("--init", default="uniform",
                           help="extended model start: 'uniform' or a params.json path")

    for name, helptext in (("forecast", "forecast supply and write plot data"), ("gaps", "density gap report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--country", required=True)
        p.add_argument("--to", type=int, default=2040, dest="horizon", help="horizon year")
        p.add_argument("--scenario", default=BASELINE, help="population scenario for the reference line")
        p.add_argument("--params", help="params.json (default: <out-dir>/params.json)")
        p.add_argument("--p-enter", type=float)
        p.add_argument("--p-gp", type=float)
        p.add_argument("--intervention", action="append", default=[], help="intervention JSON file")
    return parser


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _load(args):
    files = data_files(args.data_dir)
    if not files:
        raise UsageError(f"no canonical CSV files in {args.data_dir}")
    bundles = read_bundles(files)
    return files, bundles


def _bundle(bundles, country):
    if country not in bundles:
        raise DataError(f"no data for country {country!r} (have {', '.join(bundles) or 'none'})")
    return bundles[country]


def _setup(args, bundles, interventions=()):
    bundle = _bundle(bundles, args.country)
    return prepare(bundle, args.model, args.horizon, interventions, bundles.values())


def cmd_ingest(args) -> int:
    files, bundles = _load(args)
    out = Path(args.out_dir)
    summary = {"countries": {}, "provenance": provenance(files)}
    for c, b in bundles.items():
        if args.country and c != args.country:
            continue
        write_canonical(b, out / "canonical" / c)
        st = b.stocks
        try:
            t0 = select_calibration_year(st)
        except DataError as exc:
            t0 = None
            log.warning("%s", exc)
        summary["countries"][c] = {
            "years": [st.years[0], st.years[-1]] if st.years else [],
            "fields": [f.code for f in st.fields],
            "calibration_year": t0,
            "break_years": st.break_years,
            "scenarios": sorted(b.populations),
            "totals": {
                f.code: {str(y): st.field_total(f, y) for y in st.years} for f in st.fields
            },
            "sector_split_years": b.sector_split.years if b.sector_split else [],
        }
    _write_json(out / "ingest_summary.json", summary)
    print(f"validated {len(summary['countries'])} countr{'y' if len(summary['countries']) == 1 else 'ies'}")
    return 0


def _init_params(args, setup) -> Params | None:
    if args.model == MINIMAL:
        return None
    if args.init == "uniform":
        return Params(0.5, {f: 1.0 / len(EXTENDED_FIELDS) for f in EXTENDED_FIELDS})
    with open(args.init, encoding="utf-8") as fh:
        return Params.from_json(json.load(fh))


def cmd_calibrate(args, surface_only: bool = False) -> int:
    if args.model == MINIMAL or surface_only:
        try:
            grid_points(args.grid_step)
        except ValueError as exc:
            raise UsageError(str(exc))
    if surface_only and args.model != MINIMAL:
        raise UsageError("the chi2 surface is only defined for the minimal model")
    files, bundles = _load(args)
    setup = _setup(args, bundles)
    out = Path(args.out_dir)
    os.makedirs(out, exist_ok=True)
    init = None if surface_only else _init_params(args, setup)
    fit = calibrate(setup, args.grid_step, args.gof, init)
    if fit.surface is not None:
        fit.surface.write_csv(out / "surface.csv")
    if surface_only:
        print(f"surface.csv written ({len(fit.surface.p_enter)}x{len(fit.surface.p_gp)})")
        return 0
    if not math.isfinite(fit.chi2):
        raise NumericalError(f"calibration produced chi2={fit.chi2!r}")
    obj = fit.params.to_json()
    obj = {
        "country": setup.bundle.country,
        "model": setup.model,
        "p_enter": obj["p_enter"],
        "p_GP": fit.params.p_gp,
        "field_choice": obj["field_choice"],
        "chi2": fit.chi2,
        "gof": args.gof,
        "t0": setup.t0,
        "last_observed": setup.last,
        "provenance": provenance(files, fit.params, model=args.model, gof=args.gof,
                                 grid_step=args.grid_step if args.model == MINIMAL else None),
    }
    _write_json(out / "params.json", obj)
    print(f"{setup.bundle.country} {setup.model}: p_enter={fit.params.p_enter:.4g} "
          f"p_GP={fit.params.p_gp:.4g} chi2={fit.chi2:.4g}")
    return 0


def _forecast_params(args) -> Params:
    if args.p_enter is not None or args.p_gp is not None:
        if args.model != MINIMAL:
            raise UsageError("--p-enter/--p-gp apply to the minimal model; use --params for extended")
        if args.p_enter is None or args.p_gp is None:
            raise UsageError("give both --p-enter and --p-gp")
        try:
            return Params.minimal(args.p_enter, args.p_gp)
        except (ValueError, DataError) as exc:
            raise UsageError(str(exc))
    path = Path(args.params) if args.params else Path(args.out_dir) / "params.json"
    if not path.exists():
        raise UsageError(f"{path} not found; run calibrate first or pass --p-enter/--p-gp")
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("model", args.model) != args.model:
        raise UsageError(f"{path} holds {obj.get('model')} parameters but --model is {args.model}")
    return Params.from_json(obj)


def cmd_forecast(args, report_only: bool = False) -> int:
    params = _forecast_params(args)
    interventions = [Intervention.load(p) for p in args.intervention]
    files, bundles = _load(args)
    setup = _setup(args, bundles, interventions)
    chi2 = chi2_of(setup, params, args.gof)
    gof = {"p_enter": params.p_enter, "field_choice": params.to_json()["field_choice"], "chi2": chi2}
    fc = run_forecast(setup, params, args.scenario, gof)
    out = Path(args.out_dir)
    os.makedirs(out, exist_ok=True)
    used = list(files) + [Path(p) for p in args.intervention]
    prov = provenance(used, params, model=args.model, gof=args.gof, scenario=args.scenario,
                      horizon=args.horizon, interventions=[iv.name for iv in interventions])
    report = fc.report.to_json()
    report["provenance"] = prov
    _write_json(out / "gap_report.json", report)

    if not report_only:
        traj = fc.trajectory
        totals = traj.totals()
        with open(out / "trajectory.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["year", "window", "field", "total", "entered", "exited", "inflow"])
            for k, y in enumerate(traj.years.tolist()):
                for i, f in enumerate(traj.fields):
                    inflow = setup.plan.total(y) if k > 0 else None
                    w.writerow([y, traj.window(y), f.code, _fmt(float(totals[k, i])),
                                _fmt(float(traj.entered[k, i])), _fmt(float(traj.exited[k, i])), _fmt(inflow)])
        cols = ["year", "model", "sd", "iso_baseline", "env_min", "env_max", "observed"]
        for f, rows in fc.series.items():
            with open(out / f"series_{f.code}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for r in rows:
                    w.writerow([_fmt(r[c]) for c in cols])
        with open(out / "gaps.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["year", "field", "dg"])
            for (f, y), v in sorted(gaps_by_year(fc, setup).items(), key=lambda kv: (kv[0][1], kv[0][0])):
                w.writerow([y, f.code, _fmt(v)])
        _write_json(out / "manifest.json", {"provenance": prov, "outputs": sorted(
            p.name for p in out.iterdir() if p.name.startswith(("series_", "trajectory", "gaps", "gap_report")))})

    _print_report(fc.report)
    return 0


def _print_report(report) -> None:
    print(f"{report.country} ({report.model}) density gaps at {report.horizon}, T={report.T}:")
    rows = list(report.fields) + list(report.groups) + [report.aggregate]
    for g in rows:
        sd = f"{g.sd:.3f}"
        p = "n/a" if g.p is None else f"{g.p:.2g}"
        print(f"  {g.label:<8} DG={g.dg:+.3f} ({sd})  p={p} {g.stars}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    handlers = {
        "ingest": cmd_ingest,
        "calibrate": cmd_calibrate,
        "surface": lambda a: cmd_calibrate(a, surface_only=True),
        "forecast": cmd_forecast,
        "gaps": lambda a: cmd_forecast(a, report_only=True),
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"hwsupply: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"hwsupply: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"hwsupply: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"hwsupply: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
