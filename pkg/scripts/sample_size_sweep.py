"""Replicated synthetic experiments over several sample sizes.

Writes one experiment directory per size under --out plus a summary.csv with
mean and sample std of out-of-sample eps_ACE and sqrt(PEHE) per estimator.

    python scripts/sample_size_sweep.py --sizes 2000 6000 --replications 10 --out runs/sweep
"""
import argparse
import csv
import logging
from dataclasses import replace
from pathlib import Path

from civrep.harness import ExperimentConfig, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(ROOT / "configs" / "default.json"))
    ap.add_argument("--sizes", type=int, nargs="+", default=[2000, 6000, 10000, 20000])
    ap.add_argument("--replications", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = ExperimentConfig.load(args.config)
    if args.replications:
        base.replications = args.replications
    if args.workers:
        base.workers = args.workers
    out = Path(args.out)
    summary = []
    for n in args.sizes:
        logging.info("n = %d", n)
        report = run_experiment(replace(base, n=n), out / f"n{n}")
        for key, agg in report["aggregates"].items():
            estimator, fold = key.split("/")
            if fold != "out":
                continue
            summary.append({"n": n, "estimator": estimator,
                            "ace_error_mean": agg["ace_error"]["mean"], "ace_error_std": agg["ace_error"]["std"],
                            "pehe_mean": agg["pehe"]["mean"], "pehe_std": agg["pehe"]["std"],
                            "replications": agg["ace_error"]["n"]})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    for row in summary:
        print(f"n={row['n']:6d} {row['estimator']:9s} eps_ACE {row['ace_error_mean']:.3f} +/- "
              f"{row['ace_error_std'] or 0:.3f}  sqrt(PEHE) {row['pehe_mean']:.3f}")


if __name__ == "__main__":
    main()
