"""Command-line entry point: ``swrve {simulate,fit,icc,permute,power}``.

Exit status: 0 success, 2 configuration or input error, 3 numerical
failure, 4 partial results.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

from . import __version__
from .covariance import CovStructure, IccSpec, VarianceComponents, components_to_icc, icc_to_components
from .datagen import Dataset
from .errors import (
    ConfigError,
    DegenerateAdjustment,
    InvalidSpec,
    SchemaError,
    SwrveError,
    UnbalancedDesign,
)
from .inference import satterthwaite_dof, wald_from_se, wald_test
from .lmm import CellData, reml_fit
from .permutation import permutation_test
from .rve import ESTIMATORS, robust_vcov
from .simharness import SIM_CSV_HEADER, run_grid

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4

_INPUT_ERRORS = (ConfigError, SchemaError, InvalidSpec, UnbalancedDesign)


class _Usage(Exception):
    pass


def _check_input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise _Usage(f"input file not found: {p}")
    return p


def _check_output(path) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.parent.exists():
        raise _Usage(f"output directory does not exist: {p.parent}")
    return p


def _emit(obj, out: Path | None):
    text = json.dumps(obj, indent=2, allow_nan=False, default=_json_default) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _json_default(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    raise TypeError(f"not serializable: {type(v).__name__}")


def _load_cells(path: Path) -> CellData:
    data = Dataset.from_csv(path)
    if data.n_clusters < 2:
        raise InvalidSpec("at least two clusters are needed for a cluster-robust analysis")
    return CellData.from_dataset(data)


# ---- subcommands ----

def cmd_simulate(args) -> int:
    cfg = _check_input(args.config)
    out = _check_output(args.out)
    plot = _check_output(args.plot)
    dump = _check_output(args.dump)
    from .simharness import load_config

    config = load_config(cfg)
    dump_fh = dump.open("w") if dump is not None else None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateAdjustment)
            summaries, failed = run_grid(
                config, out, threads=args.threads, reps=args.reps, seed=args.seed,
                alpha=args.alpha, resume=args.resume, dump=dump_fh,
                progress=_progress if args.verbose else None,
            )
    finally:
        if dump_fh is not None:
            dump_fh.close()
    if out is None:
        print("no --out given; results discarded", file=sys.stderr)
    elif plot is not None:
        from .plots import write_coverage_svg

        with out.open(newline="") as fh:
            write_coverage_svg(list(csv.DictReader(fh)), plot)
    if failed and failed == len(summaries):
        return EXIT_NUMERIC
    return EXIT_PARTIAL if failed else EXIT_OK


def _progress(i, n, sc):
    print(f"[{i}/{n}] {sc.generator.value} I={sc.n_clusters} S={sc.n_sequences} "
          f"K={sc.cluster_period_size} ({sc.rho0}, {sc.rho1})", file=sys.stderr)


def fit_report(cells: CellData, structure, alpha: float = 0.05) -> dict:
    """Estimates, model and robust SEs with t(I-2) intervals for one dataset."""
    fit = reml_fit(cells, structure=structure)
    report = {"swrve_version": __version__, "n_clusters": cells.n_clusters,
              "n_periods": cells.n_periods, "cluster_period_size": cells.cluster_period_size,
              "fit": fit.to_dict(), "treatment_effect": fit.treatment_effect, "alpha": alpha,
              "variance": []}
    if not fit.converged:
        return report
    rows = report["variance"]
    w = wald_test(fit, "model", "I-2", alpha=alpha)
    rows.append({"source": "model", "se": w.se, "dof": w.dof, "ci": [w.ci_low, w.ci_high],
                 "p_value": w.p_value})
    for name in ESTIMATORS:
        row = {"source": name}
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", DegenerateAdjustment)
                rv = robust_vcov(fit, name)
            w = wald_from_se(fit.treatment_effect, rv.treatment_se, fit.n_clusters - 2, 0.0, alpha)
            row.update(se=w.se, dof=w.dof, ci=[w.ci_low, w.ci_high], p_value=w.p_value)
            if rv.adjustments is not None:
                try:
                    s = wald_from_se(fit.treatment_effect, rv.treatment_se, satterthwaite_dof(fit, rv),
                                     0.0, alpha)
                    row["satterthwaite"] = {"dof": s.dof, "ci": [s.ci_low, s.ci_high], "p_value": s.p_value}
                except SwrveError as exc:
                    row["satterthwaite"] = {"error": type(exc).__name__, "message": str(exc)}
            if caught:
                row["warning"] = "DegenerateAdjustment"
        except SwrveError as exc:
            row.update(error=type(exc).__name__, message=str(exc))
        rows.append(row)
    return report


def cmd_fit(args) -> int:
    path = _check_input(args.data)
    out = _check_output(args.out)
    cells = _load_cells(path)
    report = fit_report(cells, CovStructure.parse(args.structure), args.alpha)
    _emit(report, out)
    return EXIT_OK if report["fit"]["converged"] else EXIT_NUMERIC


def cmd_icc(args) -> int:
    structure = CovStructure.parse(args.structure)
    comps = (args.tau_alpha_sq, args.tau_gamma_sq, args.tau_v_sq, args.decay)
    if any(v is not None for v in comps):
        if args.rho0 is not None or args.rho1 is not None:
            raise _Usage("give either ICCs or variance components, not both")
        vc = VarianceComponents(*(0.0 if v is None else v for v in comps),
                                sigma_eps_sq=args.sigma_eps ** 2)
    else:
        if args.rho0 is None or args.rho1 is None:
            raise _Usage("--rho0 and --rho1 are required")
        vc = icc_to_components(IccSpec(args.rho0, args.rho1, args.cac, args.sigma_eps), structure)
    panel = components_to_icc(vc, structure).to_dict()
    panel["tau_v"] = math.sqrt(vc.tau_v_sq)
    _emit(panel, _check_output(args.out))
    return EXIT_OK


def cmd_permute(args) -> int:
    path = _check_input(args.data)
    out = _check_output(args.out)
    cells = _load_cells(path)
    res = permutation_test(cells, working_structure=args.structure, n_perm=args.n_perm,
                           seed=args.seed, alpha=args.alpha, threads=args.threads,
                           exhaustive=args.exhaustive)
    report = res.to_dict()
    report.update(structure=CovStructure.parse(args.structure).value, seed=args.seed)
    _emit(report, out)
    return EXIT_OK


def cmd_power(args) -> int:
    out = _check_output(args.out)
    if args.config is not None:
        from .simharness import load_config

        config = load_config(_check_input(args.config))
    else:
        missing = [n for n in ("I", "S", "K", "rho0", "rho1", "theta") if getattr(args, n) is None]
        if missing:
            raise _Usage("without a config, give --" + ", --".join(missing))
        config = {
            "schema_version": 1,
            "generators": [args.generator],
            "design": {"I": [args.I], "S": [args.S], "K": [args.K]},
            "icc": {"pairs": [[args.rho0, args.rho1]], "cac": args.cac},
            "theta": args.theta,
            "analyses": [{"working_model": wm, "variance_source": vs}
                         for wm, vs in (("EXCH", "model"), ("EXCH", "CR0"), ("EXCH", "CR3"),
                                        ("NE", "CR3"), ("TRUE", "model"))],
        }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateAdjustment)
        summaries, failed = run_grid(config, out, threads=args.threads, reps=args.reps,
                                     seed=args.seed, alpha=args.alpha)
    for s in summaries:
        if s is None:
            continue
        sc = s.scenario
        print(f"{sc.generator.value} I={sc.n_clusters} S={sc.n_sequences} K={sc.cluster_period_size} "
              f"({sc.rho0}, {sc.rho1}) theta={sc.theta}")
        for a, b in s.blocks.items():
            power = "NA" if b is None else f"{100 * b.reject_rate:.1f}%"
            print(f"  {a.label:<28} power {power}")
    if failed and failed == len(summaries):
        return EXIT_NUMERIC
    return EXIT_PARTIAL if failed else EXIT_OK


# ---- parser ----

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swrve", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"swrve {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=False):
        sp.add_argument("--out", help="output path (default: stdout for JSON reports)")
        sp.add_argument("--alpha", type=float, default=0.05)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--seed", type=int, required=seed_required)

    s = sub.add_parser("simulate", help="run a scenario grid to a summary CSV")
    s.add_argument("config")
    common(s)
    s.add_argument("--reps", type=int)
    s.add_argument("--plot", help="also write an SVG coverage plot")
    s.add_argument("--dump", help="per-replicate audit CSV")
    s.add_argument("--resume", action="store_true", help="keep completed scenarios already in --out")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_simulate, alpha=None)

    f = sub.add_parser("fit", help="fit one dataset and report model and robust SEs")
    f.add_argument("data")
    f.add_argument("--structure", default="EXCH")
    common(f)
    f.set_defaults(func=cmd_fit)

    i = sub.add_parser("icc", help="convert between ICCs and variance components")
    i.add_argument("--structure", default="NE_RI")
    i.add_argument("--rho0", type=float)
    i.add_argument("--rho1", type=float)
    i.add_argument("--cac", type=float, default=0.8)
    i.add_argument("--sigma-eps", type=float, default=1.0)
    for name in ("tau-alpha-sq", "tau-gamma-sq", "tau-v-sq", "decay"):
        i.add_argument(f"--{name}", type=float)
    i.add_argument("--out")
    i.set_defaults(func=cmd_icc)

    m = sub.add_parser("permute", help="permutation test of the treatment effect")
    m.add_argument("data")
    m.add_argument("--structure", default="EXCH")
    m.add_argument("--n-perm", type=int, default=1000)
    m.add_argument("--exhaustive", action="store_true")
    common(m, seed_required=True)
    m.set_defaults(func=cmd_permute)

    w = sub.add_parser("power", help="rejection rates under a nonzero effect")
    w.add_argument("config", nargs="?")
    common(w)
    w.add_argument("--reps", type=int)
    w.add_argument("--generator", default="NE_RI")
    w.add_argument("--I", type=int)
    w.add_argument("--S", type=int)
    w.add_argument("--K", type=int)
    w.add_argument("--rho0", type=float)
    w.add_argument("--rho1", type=float)
    w.add_argument("--cac", type=float, default=0.8)
    w.add_argument("--theta", type=float)
    w.set_defaults(func=cmd_power)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"swrve: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _INPUT_ERRORS as exc:
        print(f"swrve: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SwrveError as exc:
        print(f"swrve: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
