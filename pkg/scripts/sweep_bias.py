"""FA/MD medians over the bias sweep (desk profile unless --full)."""

import argparse
import logging

from trustbench.experiment import ExperimentConfig, sweep_bias


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--out", default="runs/sweep_bias")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    base = ExperimentConfig.full() if args.full else ExperimentConfig.desk()
    curve = sweep_bias(base.replace(k_nn=args.k), (0, 2, 5, 10, 15), n_seeds=args.seeds, output_dir=args.out)
    print("c,FA%,MD%")
    for r in curve:
        print(f"{r['c']:g},{r['fa_pct']},{r['md_pct']}")


if __name__ == "__main__":
    main()
