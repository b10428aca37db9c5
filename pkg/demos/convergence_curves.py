"""Mean state MSE per iteration over Monte-Carlo runs, printed as a table.

Uses the same experiment loop as the CLI; pass a CSV path to also save the
per-(algorithm, iteration) summary.

    python demos/convergence_curves.py [runs] [summary.csv]
"""
import sys

from hybrid_se.experiment import ExperimentConfig, run_experiment, summarize, write_summary


def main(runs=20, out=None):
    cfg = ExperimentConfig(case="ieee14", runs=runs, max_iter=15, seed=1)
    rows = summarize(run_experiment(cfg))
    by_algo = {}
    for r in rows:
        by_algo.setdefault(r.algo, []).append(r.state_mse)
    algos = list(by_algo)
    print("iter " + " ".join(f"{a:>14s}" for a in algos))
    for k in range(cfg.max_iter + 1):
        print(f"{k:4d} " + " ".join(f"{by_algo[a][k]:14.3e}" for a in algos))
    if out:
        with open(out, "w", newline="") as fh:
            write_summary(rows, fh)


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20, sys.argv[2] if len(sys.argv) > 2 else None)
