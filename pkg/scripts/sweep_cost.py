"""Recompute and communication cost across delta_val and m."""

import argparse

from trustbench.experiment import DEFAULT_DELTA_GRID, ExperimentConfig, sweep_cost


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--batches", type=int, default=1)
    ap.add_argument("--out", default="runs/sweep_cost")
    args = ap.parse_args()
    rows = sweep_cost(ExperimentConfig.desk(n_batches=args.batches), DEFAULT_DELTA_GRID, (2, 4, 8), args.seeds, args.out)
    print(f"{'m':>2} {'delta_val':>9} {'recomputes':>10} {'bits':>7} {'max bits':>8}")
    for r in rows:
        print(f"{r['m']:>2} {r['delta_val']:>9g} {r['avg_recomputes']:>10.4f} "
              f"{r['avg_bits_per_sim_per_endorser_per_dim']:>7.3f} {r['max_bits']:>8.2f}")


if __name__ == "__main__":
    main()
