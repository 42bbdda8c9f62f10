"""Command line front end: ``survfuse {fit,simulate,grid,certify}``.

Settings come from defaults, then an optional JSON config file, then flags
(flags win).  Exit codes: 0 success, 2 bad input, 3 numerical failure,
4 a certificate or oracle check failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import CASES, COMMANDS, METHODS, WORKERS_ENV, RunConfig, load_config
from .errors import InvalidInputError, NumericalError, StageError, SurvfuseError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CERT = 0, 2, 3, 4


def _csv_list(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _propensity(text):
    if text == "estimate":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number in (0, 1) or 'estimate'") from None


def build_parser():
    p = argparse.ArgumentParser(
        prog="survfuse",
        description="Treatment-effect estimation on restricted mean survival time "
                    "from trial plus real-world data.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (flags override its values)")
        sp.add_argument("--out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--horizon", type=float, help="restriction time L")
        sp.add_argument("--degree", type=int, help="spline degree (default 3)")
        sp.add_argument("--m", type=int, help="penalty derivative order (default 2)")
        sp.add_argument("--knots", type=int, help="interior knots per dimension (default: from n)")
        sp.add_argument("--gamma-grid", type=int, dest="gamma_grid",
                        help="smoothing grid points per parameter (default 15)")
        sp.add_argument("--propensity", type=_propensity,
                        help="known trial propensity, or 'estimate' (default 0.5)")
        sp.add_argument("--no-interactions", dest="interactions", action="store_const",
                        const=False, help="Cox designs without treatment-covariate interactions")
        sp.add_argument("--basis-covariates", type=_csv_list, dest="basis_covariates",
                        help="comma-separated covariates entering the spline bases")
        sp.add_argument("--workers", type=int,
                        help=f"parallel worker processes (default ${WORKERS_ENV} or 1)")

    f = sub.add_parser("fit", help="fit a CSV dataset and write fit results plus a grid table")
    common(f)
    f.add_argument("--data", help="CSV with columns time,event,treat,source and covariates")
    f.add_argument("--covariates", type=_csv_list, help="covariate columns (default: all others)")
    f.add_argument("--methods", type=_csv_list, help=f"subset of {','.join(METHODS)} "
                   "(default: integrative only)")
    f.add_argument("--grid-points", type=int, dest="grid_points",
                   help="grid points per covariate in the output table (default 7)")

    s = sub.add_parser("simulate", help="Monte Carlo evaluation on a synthetic design")
    common(s)
    s.add_argument("--case", choices=CASES)
    s.add_argument("--n1", type=int)
    s.add_argument("--n0", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--methods", type=_csv_list)

    g = sub.add_parser("grid", help="re-evaluate a saved fit on a grid")
    g.add_argument("--config")
    g.add_argument("--fit-file", dest="fit_file", required=False)
    g.add_argument("--out")
    g.add_argument("--grid-points", type=int, dest="grid_points")

    c = sub.add_parser("certify", help="efficiency certificate and oracle identity checks")
    common(c)
    c.add_argument("--data", help="CSV dataset (default: simulate --case)")
    c.add_argument("--covariates", type=_csv_list)
    c.add_argument("--case", choices=CASES)
    c.add_argument("--n1", type=int)
    c.add_argument("--n0", type=int)
    c.add_argument("--oracle-draws", type=int, dest="oracle_draws")
    return p


def resolve_config(args) -> RunConfig:
    raw = load_config(args.config) if getattr(args, "config", None) else {}
    if "command" in raw and raw["command"] != args.command:
        raise InvalidInputError(f"config is for command {raw['command']!r}, not {args.command!r}")
    raw["command"] = args.command
    for k, v in vars(args).items():
        if k in ("config", "command") or v is None:
            continue
        raw[k] = list(v) if isinstance(v, tuple) else v
    if args.command == "fit" and "methods" not in raw:
        raw["methods"] = ["integrative"]
    if args.command in ("simulate", "certify") and "horizon" not in raw and not raw.get("data"):
        from .simulation import case_design
        raw["horizon"] = case_design(str(raw.get("case", "1"))).horizon
    return RunConfig.from_dict(raw)


def fit_grid(fit, points_per_dim):
    """Evenly spaced grid over the central 80% of each basis dimension."""
    axes = []
    for lo, hi in fit.basis_tau.domain:
        w = hi - lo
        axes.append(np.linspace(lo + 0.1 * w, hi - 0.1 * w, points_per_dim))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _out_dir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_fit(cfg: RunConfig) -> int:
    from .data import load_dataset
    from .estimator import FITTERS, basis_setup, write_grid
    if not cfg.data:
        raise InvalidInputError("fit needs --data")
    data = load_dataset(cfg.data, covariates=cfg.covariates)
    out = _out_dir(cfg)
    fcfg = cfg.fit_config().validate()
    setup = basis_setup(data, fcfg)
    for m in cfg.methods:
        fit = FITTERS[m](data, fcfg, setup)
        fit.save(out / f"fit_{m}.json")
        write_grid(fit, fit_grid(fit, cfg.grid_points), out / f"grid_{m}.csv")
        for note in fit.notes:
            print(f"note [{m}]: {note}", file=sys.stderr)
    _write_json(out / "config.json", cfg.to_dict())
    return EXIT_OK


def cmd_grid(cfg: RunConfig) -> int:
    from .estimator import FitResult, write_grid
    if not cfg.fit_file:
        raise InvalidInputError("grid needs --fit-file")
    fit = FitResult.load(cfg.fit_file)
    target = Path(cfg.out)
    if target.suffix != ".csv":
        target.mkdir(parents=True, exist_ok=True)
        target = target / f"grid_{fit.method}.csv"
    write_grid(fit, fit_grid(fit, cfg.grid_points), target)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    from .simulation import DgpSpec, run_monte_carlo
    spec = DgpSpec(cfg.case, cfg.n1, cfg.n0, cfg.seed)
    raw_cfg = cfg.fit_config()
    report = run_monte_carlo(spec, cfg.reps, methods=cfg.methods, cfg=raw_cfg.validate(),
                             workers=cfg.workers)
    out = _out_dir(cfg)
    report.write_csv(out / "mc_report.csv")
    report.write_manifest(out / "manifest.json", cfg.to_dict())
    for m, fails in report.failures.items():
        if fails:
            print(f"{m}: {len(fails)} replications failed", file=sys.stderr)
    return EXIT_OK


def cmd_certify(cfg: RunConfig) -> int:
    from .data import load_dataset
    from .estimator import efficiency_certificate, fit_integrative
    from .oracles import oracle_lemma_s2, oracle_prop_s1, oracle_prop_s2
    from .simulation import DgpSpec, generate
    if cfg.data:
        data = load_dataset(cfg.data, covariates=cfg.covariates)
    else:
        data = generate(DgpSpec(cfg.case, cfg.n1, cfg.n0, cfg.seed))
    fit = fit_integrative(data, cfg.fit_config())
    cert = efficiency_certificate(fit.system, fit.gammas)
    lines = [f"efficiency certificate: min eigenvalue {cert.min_eigenvalue:.3e} "
             f"{'PASS' if cert.passed else 'FAIL'}"]
    ok = cert.passed
    case = cfg.case if not cfg.case.startswith("S") else "1"
    reports = [oracle_prop_s1(case, cfg.oracle_draws, seed=cfg.seed),
               oracle_prop_s2(case, cfg.oracle_draws, seed=cfg.seed),
               oracle_lemma_s2(case, "propensity", cfg.oracle_draws, seed=cfg.seed),
               oracle_lemma_s2(case, "none", cfg.oracle_draws, seed=cfg.seed)]
    for r in reports:
        lines += r.lines()
        ok = ok and r.passed
    out = _out_dir(cfg)
    _write_json(out / "certificate.json", {
        "passed": bool(ok),
        "min_eigenvalue": cert.min_eigenvalue,
        "notes": cert.notes,
        "checks": [{"name": r.name, "label": row.label, "estimate": row.estimate,
                    "target": row.target, "se": row.se, "passed": row.passed}
                   for r in reports for row in r.rows],
    })
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_CERT


HANDLERS = {"fit": cmd_fit, "simulate": cmd_simulate, "grid": cmd_grid, "certify": cmd_certify}
assert set(HANDLERS) == set(COMMANDS)


def exit_code_for(exc) -> int:
    inner = exc.error if isinstance(exc, StageError) else exc
    if isinstance(inner, InvalidInputError):
        return EXIT_INPUT
    if isinstance(inner, NumericalError):
        return EXIT_NUMERIC
    return EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return HANDLERS[cfg.command](cfg)
    except SurvfuseError as exc:
        print(f"survfuse {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except np.linalg.LinAlgError as exc:
        print(f"survfuse {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
