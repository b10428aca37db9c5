"""Command-line experiment runner.

Example::

    hybrid-se --case ieee14 --algos wls,wls-oblivious,cvi,dvi --runs 100 --out results.csv

Exit status: 0 on success, 2 on configuration errors, 3 when the case file
cannot be loaded or validated.
"""
import argparse
import math
import sys

from .experiment import (ALGORITHMS, ConfigError, ExperimentConfig, load_experiment_case,
                         run_experiment, summarize, write_records, write_summary)
from .network import CaseError, greedy_pmu_placement

EXIT_CONFIG = 2
EXIT_CASE = 3


def _id_list(text):
    try:
        return tuple(sorted({int(x) for x in text.split(",") if x.strip()}))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated bus ids, got {text!r}") from exc


def _algo_list(text):
    return tuple(a.strip() for a in text.split(",") if a.strip())


def build_parser():
    p = argparse.ArgumentParser(
        prog="hybrid-se",
        description="Monte-Carlo hybrid SCADA/PMU state estimation experiments.")
    p.add_argument("--case", default="ieee14",
                   help="bundled case name (ieee14, ieee118, ieee300) or JSON case path")
    p.add_argument("--pmu-buses", type=_id_list, default=None,
                   help="comma-separated PMU bus ids (default: placement stored in the case)")
    p.add_argument("--algos", type=_algo_list, default=ALGORITHMS,
                   help=f"comma-separated subset of {','.join(ALGORITHMS)}")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--iters", type=int, default=50,
                   help="iterations reported per algorithm (dvi: colour-group steps)")
    p.add_argument("--sigma-pmu", type=float, default=1e-2)
    p.add_argument("--sigma-scada", type=float, default=1e-2)
    p.add_argument("--theta-bound-deg", type=float, default=6.0)
    p.add_argument("--perturb", type=float, default=0.1,
                   help="relative state perturbation fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="output path, '-' for stdout")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--summary", default=None,
                   help="also write per-(algo, iter) mean and standard error to this CSV")
    p.add_argument("--timing", action="store_true",
                   help="fill wall_ms (output is then no longer byte-reproducible)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--print-placement", action="store_true",
                   help="print a greedy observability-preserving PMU placement and exit")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if not all(math.isfinite(x) for x in (args.sigma_pmu, args.sigma_scada,
                                              args.theta_bound_deg, args.perturb)):
            raise ConfigError("numeric options must be finite")
        if args.workers < 1:
            raise ConfigError("workers must be >= 1")
        cfg = ExperimentConfig(
            case=args.case, pmu_buses=args.pmu_buses, algorithms=args.algos, runs=args.runs,
            max_iter=args.iters, sigma_pmu=args.sigma_pmu, sigma_scada=args.sigma_scada,
            theta_bound_deg=args.theta_bound_deg, perturb_fraction=args.perturb,
            seed=args.seed, timing=args.timing)
        case = load_experiment_case(cfg)
    except ConfigError as exc:
        print(f"hybrid-se: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CaseError, OSError) as exc:
        print(f"hybrid-se: case error: {exc}", file=sys.stderr)
        return EXIT_CASE

    if args.print_placement:
        print(",".join(str(i) for i in greedy_pmu_placement(case)))
        return 0

    records = list(run_experiment(cfg, workers=args.workers))
    if args.out == "-":
        write_records(records, sys.stdout, args.format)
    else:
        with open(args.out, "w", newline="") as fh:
            write_records(records, fh, args.format)
    if args.summary:
        with open(args.summary, "w", newline="") as fh:
            write_summary(summarize(records), fh)
    return 0


if __name__ == "__main__":
    sys.exit(main())
