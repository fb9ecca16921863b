"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError
from .experiment import (
    DEFAULT_DELTA_GRID,
    MANIFEST,
    ExperimentConfig,
    analyze,
    run_experiment,
    sweep_bias,
    sweep_cost,
    write_analysis,
)
from .ledger import verify_chain_file
from .stats import SourceProfile

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    elif args.profile == "desk":
        cfg = ExperimentConfig.desk()
    else:
        cfg = ExperimentConfig.full()
    overrides = {}
    for name in ("c", "master_seed", "n_batches"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return cfg.replace(**overrides) if overrides else cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trustbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--profile", choices=["full", "desk"], default="full")
        sp.add_argument("--out", help="output directory (TRUSTBENCH_OUT also overrides)")
        sp.add_argument("--c", type=float)
        sp.add_argument("--master-seed", dest="master_seed", type=int)
        sp.add_argument("--n-batches", dest="n_batches", type=int)

    sp = sub.add_parser("run", help="run the full experiment")
    common(sp)
    sp.add_argument("--deterministic", action="store_true", help="single-threaded scheduling")

    sp = sub.add_parser("sweep-bias", help="FA/MD across bias levels")
    common(sp)
    sp.add_argument("--c-list", type=_floats, default=[0, 2, 5, 10, 15])
    sp.add_argument("--seeds", type=int, default=5)

    sp = sub.add_parser("sweep-cost", help="recompute and bit costs across tolerances")
    common(sp)
    sp.add_argument("--delta-list", type=_floats, default=list(DEFAULT_DELTA_GRID))
    sp.add_argument("--m-list", type=_ints, default=[2, 4, 8])
    sp.add_argument("--seeds", type=int, default=20)

    sp = sub.add_parser("verify-ledger", help="verify a chain file")
    sp.add_argument("chain")

    sp = sub.add_parser("detect", help="rerun the statistics on a stored run")
    sp.add_argument("run_dir")

    sp = sub.add_parser("replay-check", help="compare the summary digests of two runs")
    sp.add_argument("run_a")
    sp.add_argument("run_b")
    return p


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    out = run_experiment(cfg, deterministic=args.deterministic, output_dir=args.out)
    for row in out.ks_rows:
        print(f"{row['quantity']:<11} ks={row['ks_stat']} p={row['p_value']} {row['status']}")
    print(f"false_alarm_pct={out.detection.false_alarm_pct} miss_detection_pct={out.detection.miss_detection_pct}")
    print(f"digest {out.digest}")
    print(f"output {out.output_dir}")
    return EXIT_OK


def _cmd_sweep_bias(args) -> int:
    cfg = _load_config(args)
    out = args.out or Path(cfg.output_dir) / "sweep_bias"
    for row in sweep_bias(cfg, args.c_list, args.seeds, output_dir=out):
        print(f"c={row['c']:g} FA%={row['fa_pct']} MD%={row['md_pct']}")
    return EXIT_OK


def _cmd_sweep_cost(args) -> int:
    cfg = _load_config(args)
    out = args.out or Path(cfg.output_dir) / "sweep_cost"
    for r in sweep_cost(cfg, args.delta_list, args.m_list, args.seeds, output_dir=out):
        print(f"m={r['m']} delta_val={r['delta_val']:g} recomputes={r['avg_recomputes']:.4f} "
              f"bits={r['avg_bits_per_sim_per_endorser_per_dim']:.4f}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    path = Path(args.chain)
    if not path.is_file():
        raise UsageError(f"no such chain file: {path}")
    status = verify_chain_file(path)
    if status.ok:
        print(f"ok {status.head_hash}")
        return EXIT_OK
    print(f"broken {status.height} {status.reason}")
    return EXIT_VERIFY


def _cmd_detect(args) -> int:
    run_dir = Path(args.run_dir)
    src = run_dir / "profiles.json"
    if not src.is_file():
        raise UsageError(f"{run_dir} has no profiles.json")
    data = json.loads(src.read_text())
    cfg = ExperimentConfig.from_dict(data["config"])
    profiles = {d["source_id"]: SourceProfile.from_dict(d) for d in data["profiles"]}
    analysis = analyze(profiles, data["boundaries"], data["labels"], cfg.k_nn, cfg.c)
    out = run_dir / "detect"
    out.mkdir(exist_ok=True)
    write_analysis(out, analysis, cfg)
    m = analysis.metrics
    print(f"false_alarm_pct={m.false_alarm_pct} miss_detection_pct={m.miss_detection_pct}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    digests = []
    for d in (args.run_a, args.run_b):
        path = Path(d) / MANIFEST
        if not path.is_file():
            raise UsageError(f"{d} has no {MANIFEST}")
        digests.append(json.loads(path.read_text())["digest"])
    if digests[0] == digests[1]:
        print(f"equal {digests[0]}")
        return EXIT_OK
    print(f"differ {digests[0]} {digests[1]}")
    return EXIT_VERIFY


COMMANDS = {
    "run": _cmd_run,
    "sweep-bias": _cmd_sweep_bias,
    "sweep-cost": _cmd_sweep_cost,
    "verify-ledger": _cmd_verify,
    "detect": _cmd_detect,
    "replay-check": _cmd_replay,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
