"""Command-line interface: ``ivcox fit`` and ``ivcox simulate``.

Exit codes: 0 success, 1 input or usage error, 2 EM did not converge (the
result is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings

import numpy as np

from .em import EMConfig, bootstrap_se, parameter_names, run_em
from .errors import IVCoxError
from .model import Dataset, DesignSpec
from .simulation import SCENARIO_DESCRIPTIONS, format_table, run_replications, scenario, table_rows, to_csv, to_json

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
REQUIRED_COLUMNS = ("time", "status", "treatment")

INPUT_HELP = """\
input CSV: header row with columns time,status,treatment,x1..xp,z1..zK
  time       observed time, finite and >= 0
  status     1 event, 0 censored
  treatment  1 treated, 0 control
  x1..xp     covariates (enter both the hazard and treatment models)
  zk         instruments (enter the treatment model only, at least one)
"""


class InputError(Exception):
    pass


def _positive(kind):
    def conv(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    conv.__name__ = kind.__name__
    return conv


def _nonnegative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivcox", description="Instrumental-variable Cox regression by Monte Carlo EM.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--B", type=_positive(int), default=None,
                        help="Monte Carlo draws per subject (default 100; 40 when n <= 200 in simulate)")
    common.add_argument("--seed", type=_nonnegative_int, default=0, help="master seed (default 0)")
    common.add_argument("--epsilon", type=_positive(float), default=1e-3,
                        help="EM tolerance on the max-norm parameter change (default 1e-3)")
    common.add_argument("--max-iter", type=_positive(int), default=200, help="EM iteration cap (default 200)")
    common.add_argument("--estimate-sigma-u", action="store_true",
                        help="also estimate the frailty SD (not identified; off by default)")
    common.add_argument("--fresh-draws", action="store_true",
                        help="redraw frailty samples every iteration instead of freezing them")
    common.add_argument("--out", metavar="PATH", help="write output here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="output format (default json)")

    fit = sub.add_parser("fit", parents=[common], help="fit a dataset read from CSV",
                         epilog=INPUT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    fit.add_argument("--input", required=True, metavar="PATH", help="input CSV file")
    fit.add_argument("--bootstrap", type=_positive(int), metavar="N", help="bootstrap standard errors from N resamples")

    sim = sub.add_parser("simulate", parents=[common], help="run a simulation scenario")
    sim.add_argument("--scenario", type=int, required=True,
                     help="; ".join(f"{k}: {v}" for k, v in SCENARIO_DESCRIPTIONS.items()))
    sim.add_argument("--n", type=_positive(int), default=500, help="sample size (default 500)")
    sim.add_argument("--reps", type=_positive(int), default=100, help="replications (default 100)")
    sim.add_argument("--jobs", type=_positive(int), default=1, help="worker processes (default 1)")
    return parser


def _em_config(args, default_B: int = 100) -> EMConfig:
    return EMConfig(B=args.B or default_B, epsilon=args.epsilon, max_iter=args.max_iter,
                    frozen_draws=not args.fresh_draws, estimate_sigma_u=args.estimate_sigma_u, seed=args.seed)


def read_csv(path) -> Dataset:
    """Read the fit input file; raises InputError naming the offending column."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            rows = [r for r in reader if r]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise InputError(f"missing required column '{col}'")
    xs = sorted((h for h in header if h[:1] == "x" and h[1:].isdigit()), key=lambda h: int(h[1:]))
    zs = sorted((h for h in header if h[:1] == "z" and h[1:].isdigit()), key=lambda h: int(h[1:]))
    for prefix, cols in (("x", xs), ("z", zs)):
        expected = [f"{prefix}{i}" for i in range(1, len(cols) + 1)]
        if cols != expected:
            missing = next(e for e in expected if e not in cols)
            raise InputError(f"missing required column '{missing}'")
    if not zs:
        raise InputError("missing required column 'z1' (at least one instrument)")
    unknown = [h for h in header if h not in (*REQUIRED_COLUMNS, *xs, *zs)]
    if unknown:
        raise InputError(f"unknown column '{unknown[0]}'")
    pos = {h: i for i, h in enumerate(header)}
    try:
        data = np.array([[float(r[pos[h]]) for h in header] for r in rows], dtype=float).reshape(len(rows), -1)
    except (ValueError, IndexError) as exc:
        raise InputError(f"malformed row in {path}: {exc}") from exc
    for col in ("status", "treatment"):
        vals = data[:, pos[col]]
        if not np.all((vals == 0) | (vals == 1)):
            raise InputError(f"column '{col}' must contain only 0 and 1")
    col = lambda names: data[:, [pos[h] for h in names]]
    return Dataset.from_arrays(data[:, pos["time"]], data[:, pos["status"]], data[:, pos["treatment"]],
                               col(xs), col(zs))


def _write(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_fit(args) -> int:
    dataset = read_csv(args.input)
    design = DesignSpec.default(dataset.p, dataset.K)
    config = _em_config(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = run_em(dataset, design, config)
    doc = result.to_dict()
    if args.bootstrap:
        doc["bootstrap"] = bootstrap_se(dataset, design, config, n_boot=args.bootstrap).to_dict()
    if args.format == "json":
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        names = parameter_names(design, config.estimate_sigma_u)
        values = result.parameters.vector(config.estimate_sigma_u)
        se = doc.get("bootstrap", {}).get("se", {})
        lines = ["parameter,estimate,bootstrap_se"]
        lines += [f"{nm},{v!r},{se[nm]!r}" if nm in se else f"{nm},{v!r}," for nm, v in zip(names, values.tolist())]
        lines.append(f"hazard_ratio,{result.hazard_ratio!r},")
        text = "\n".join(lines) + "\n"
    _write(text, args.out)
    if not result.converged:
        print(f"warning: EM did not converge in {result.iterations} iterations", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = scenario(args.scenario, n=args.n)
    config = _em_config(args, default_B=40 if args.n <= 200 else 100)
    result = run_replications(spec, args.reps, config, seed=args.seed, jobs=args.jobs)
    rows = table_rows(result, parameters=True)
    sys.stdout.write(format_table(result, parameters=True))
    if args.out:
        _write(to_json(result, rows) if args.format == "json" else to_csv(rows), args.out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return cmd_fit(args) if args.command == "fit" else cmd_simulate(args)
    except (InputError, IVCoxError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
