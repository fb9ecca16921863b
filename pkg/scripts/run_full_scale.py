"""Full-scale runs at c=0 and c=10; prints the KS table rows of both."""

import argparse
import time

from trustbench.experiment import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/full")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threaded", action="store_true")
    args = ap.parse_args()
    for c in (0.0, 10.0):
        t0 = time.perf_counter()
        out = run_experiment(
            ExperimentConfig.full(c=c, master_seed=args.seed),
            deterministic=not args.threaded,
            output_dir=f"{args.out}/c{c:g}",
        )
        print(f"c={c:g} ({time.perf_counter() - t0:.1f}s) -> {out.output_dir}")
        for r in out.ks_rows:
            print(f"  {r['quantity']:<11} stat={r['ks_stat']:.4f} p={r['p_value']:.3e}")
        d = out.detection
        print(f"  FA={d.false_alarm_pct} MD={d.miss_detection_pct}")


if __name__ == "__main__":
    main()
