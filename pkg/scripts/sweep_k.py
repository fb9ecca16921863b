"""Detection metrics for k in {1, 3, 5, 7} at one bias level, reusing a single run's profiles."""

import argparse

from trustbench.experiment import ExperimentConfig, analyze, execute


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--c", type=float, default=10.0)
    ap.add_argument("--full", action="store_true")
    args = ap.parse_args()
    base = ExperimentConfig.full() if args.full else ExperimentConfig.desk()
    res = execute(base.replace(c=args.c))
    for k in (1, 3, 5, 7):
        a = analyze(res.profiles, res.boundaries, res.analysis.labels, k, args.c)
        print(f"k={k} FA={a.metrics.false_alarm_pct} MD={a.metrics.miss_detection_pct}")


if __name__ == "__main__":
    main()
