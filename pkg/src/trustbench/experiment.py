"""End-to-end experiment: worker pool, batches of policy tasks, validation,
ledger, and the detection statistics computed from the resulting profiles.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import statistics
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .fabric import TaskFabric, TaskStatus
from .ledger import EndorsementPolicy, Ledger, TxKind, ROLE_MODEL_STORE
from .rng import GENERATOR_NAME, Domain, StreamFactory
from .stats import (
    ANOMALOUS,
    HONEST,
    DetectionMetrics,
    SourceProfile,
    batch_averages,
    build_features,
    detection_metrics,
    ecdf_and_ks,
    ecdf_points,
    knn_classify,
)
from .surrogate import (
    GroundTruthModel,
    assign_anomalies,
    quantizer_range,
    sample_policies,
    simulate,
)
from .validation import (
    ToleranceConfig,
    ValidationEngine,
    quantize,
    tolerance_for_valid_rate,
)

log = logging.getLogger(__name__)

OUT_ENV = "TRUSTBENCH_OUT"
MANIFEST = "manifest.json"
PARTIAL_MARKER = "PARTIAL"
NO_ANOMALOUS = "no anomalous population"


@dataclass
class ExperimentConfig:
    n_workers: int = 144
    sims_per_worker: int = 8
    n_policies: int = 500
    anomalous_fraction: float = 0.10
    c: float = 10.0
    sigma: float = 1.0
    anomaly_noise: str = "replace"
    delta_val: Optional[float] = None  # None: tuned to target_valid_rate
    target_valid_rate: float = 0.9
    m: int = 4
    b0: int = 4
    b_max: int = 32
    n_batches: int = 20
    k_nn: int = 5
    max_attempts: int = 5
    block_size: int = 32
    master_seed: int = 0
    surface_id: str = "bilinear"
    d: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_workers", "sims_per_worker", "n_policies", "m", "n_batches", "k_nn", "block_size", "d"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.anomalous_fraction <= 1.0:
            raise ConfigurationError("anomalous_fraction must be in [0, 1]")
        if self.sigma < 0 or self.c < 0:
            raise ConfigurationError("sigma and c must be nonnegative")
        if self.max_attempts < 0:
            raise ConfigurationError("max_attempts must be >= 0")
        if self.delta_val is not None and not self.delta_val >= 0:
            raise ConfigurationError("delta_val must be >= 0")
        if self.n_policies > self.n_workers * self.sims_per_worker:
            raise ConfigurationError(
                f"{self.n_policies} policies per batch exceed worker capacity "
                f"{self.n_workers} x {self.sims_per_worker}"
            )
        if self.m > self.n_workers - 1:
            raise ConfigurationError("endorser set larger than the pool minus the reporter")

    @classmethod
    def full(cls, **overrides) -> "ExperimentConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "ExperimentConfig":
        base = dict(n_workers=48, sims_per_worker=5, n_policies=200, n_batches=20, output_dir="runs/desk")
        base.update(overrides)
        return cls(**base)

    @property
    def tolerance(self) -> float:
        if self.delta_val is not None:
            return float(self.delta_val)
        if self.sigma == 0:
            raise ConfigurationError("cannot tune delta_val with sigma = 0; set it explicitly")
        return tolerance_for_valid_rate(self.target_valid_rate, self.sigma, self.m)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        profile = d.get("profile")
        unknown = set(d) - names - {"profile"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        fields = {k: v for k, v in d.items() if k in names}
        if profile == "desk":
            return cls.desk(**fields)
        if profile not in (None, "full"):
            raise ConfigurationError(f"unknown profile {profile!r}")
        return cls(**fields)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Analysis:
    labels: Dict[str, str]
    predicted: Dict[str, str]
    metrics: DetectionMetrics
    ks_rows: List[dict]
    averages: Dict[str, tuple]
    per_call_V: Dict[str, float]
    mean_D: Dict[str, float]


@dataclass
class RunResult:
    cfg: ExperimentConfig
    specs: list
    fabric: TaskFabric
    ledger: Ledger
    engine: ValidationEngine
    profiles: Dict[str, SourceProfile]
    boundaries: List[int]
    chain_ok: bool
    analysis: Optional[Analysis] = None

    @property
    def rounds(self):
        return self.engine.rounds

    @property
    def n_tasks(self) -> int:
        return len(self.fabric.tasks)

    def avg_recomputes(self) -> float:
        endorser = sum(r.recomputes for r in self.rounds)
        redo = sum(1 for r in self.rounds if r.attempt > 0)
        return (endorser + redo) / self.n_tasks

    def avg_bits(self) -> float:
        """Bits per simulation, per endorser, per dimension.

        The report is broadcast, so every endorser receives all bits the
        reporter sends in each round.
        """
        return sum(r.bits_sent for r in self.rounds) / (self.n_tasks * self.cfg.d)

    def valid_rate(self) -> float:
        return sum(r.valid for r in self.rounds) / len(self.rounds)


@dataclass
class ExperimentOutput:
    output_dir: Path
    ks_rows: List[dict]
    detection: DetectionMetrics
    cost_row: dict
    chain_path: Path
    digest: str
    files: List[str] = field(default_factory=list)
    run: Optional[RunResult] = None


class _Harness:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.streams = StreamFactory(cfg.master_seed)
        self.specs = assign_anomalies(
            cfg.n_workers, cfg.anomalous_fraction, self.streams.stream(Domain.ANOMALY), c=cfg.c, sigma=cfg.sigma,
            noise_model=cfg.anomaly_noise,
        )
        self.by_id = {s.source_id: s for s in self.specs}
        self.windex = {s.source_id: i for i, s in enumerate(self.specs)}
        self.workers = [s.source_id for s in self.specs]
        self.model = GroundTruthModel(cfg.surface_id, cfg.d)
        lo, hi = quantizer_range(self.model, cfg.sigma)
        if not hi > lo:
            lo, hi = lo - 1.0, hi + 1.0
        self.tol = ToleranceConfig(cfg.tolerance, cfg.m, cfg.b0, cfg.b_max, lo, hi)
        self.ledger = Ledger(EndorsementPolicy(cfg.m), cfg.block_size)
        self.fabric = TaskFabric(self.ledger, cfg.max_attempts)
        for w in self.workers:
            self.fabric.register_worker(w)
        self.profiles = {w: SourceProfile(w) for w in self.workers}
        self.engine = ValidationEngine(
            self.tol,
            self.by_id,
            self.model,
            self.fabric,
            self.ledger,
            self.profiles,
            sim_stream=lambda tid, att, sid: self.streams.simulation(self.fabric.tasks[tid].serial, att, self.windex[sid]),
            endorse_stream=lambda tid, att: self.streams.endorsement(self.fabric.tasks[tid].serial, att),
        )
        self.fabric.on_result = self.engine.run_validation
        self.ledger.record(
            TxKind.MODEL_REGISTERED,
            {
                "surface_id": self.model.surface_id,
                "d": self.model.d,
                "params": [list(r) for r in self.model.params],
                "generator": GENERATOR_NAME,
                "role": ROLE_MODEL_STORE,
            },
        )

    def execute(self, worker: str, task) -> None:
        reward = simulate(
            self.by_id[worker], self.model, task.policy, self.streams.simulation(task.serial, task.attempt, self.windex[worker])
        )
        bits = quantize(reward, self.tol.b0, self.tol).encode()
        self.fabric.post_result(worker, task.task_id, reward, bits)

    def slot_order(self, batch: int) -> List[str]:
        slots = [w for w in self.workers for _ in range(self.cfg.sims_per_worker)]
        perm = self.streams.stream(Domain.SLOTS, batch).permutation(len(slots))
        return [slots[i] for i in perm]

    def submit_batch(self, batch: int) -> int:
        n = 0
        for p in sample_policies(self.streams.stream(Domain.POLICIES, batch), self.cfg.n_policies):
            prior = self.fabric.dedupe_check(p)
            if prior is not None:
                log.info("batch %d: policy %s duplicates %s", batch, p.canonical(), prior)
                continue
            self.fabric.submit_task(p)
            n += 1
        return n

    def run_batch_deterministic(self, batch: int) -> None:
        slots = iter(self.slot_order(batch))
        while True:
            head = self.fabric.peek()
            if head is None:
                return
            if head.attempt == 0:
                worker = next(slots)
            else:
                eligible = [w for w in self.workers if w != head.excluded]
                rng = self.streams.redispatch(head.serial, head.attempt)
                worker = eligible[int(rng.integers(len(eligible)))]
            task = self.fabric.claim_task(worker)
            self.execute(worker, task)

    def run_batch_threaded(self, batch: int, n_tasks: int) -> None:
        quota = Counter(self.slot_order(batch)[:n_tasks])

        def loop(worker):
            while True:
                task = self.fabric.claim_task(worker, primary=quota[worker] > 0)
                if task is None:
                    if self.fabric.in_flight() == 0:
                        return
                    self.fabric.wait_for_change()
                    continue
                if task.attempt == 0:
                    quota[worker] -= 1
                self.execute(worker, task)

        with ThreadPoolExecutor(max_workers=len(self.workers)) as pool:
            for fut in [pool.submit(loop, w) for w in self.workers]:
                fut.result()


def _strictly_increasing(bounds: Sequence[int]) -> List[int]:
    out = [bounds[0]]
    for b in bounds[1:]:
        if b > out[-1]:
            out.append(b)
    return out


def analyze(
    profiles: Dict[str, SourceProfile],
    boundaries: Sequence[int],
    labels: Dict[str, str],
    k: int,
    c: float,
) -> Analysis:
    """Batch averages, P_V/P_D features, leave-one-out k-NN and the KS table."""
    averages = batch_averages(profiles, _strictly_increasing(boundaries))
    for sid, (av, ad) in averages.items():
        profiles[sid].per_batch_avg_V = list(av)
        profiles[sid].per_batch_avg_D = list(ad)
    feats, _, _ = build_features(averages)
    active_labels = {s: labels[s] for s in feats}
    kk = min(k, len(feats) - 1 if len(feats) % 2 == 0 else len(feats) - 2)
    if kk != k:
        log.warning("k=%d reduced to %d for %d sources", k, kk, len(feats))
    predicted = knn_classify(feats, active_labels, kk)
    metrics = detection_metrics(predicted, active_labels)

    per_call = {s: p.per_call_V for s, p in profiles.items() if p.n}
    mean_d = {s: p.mean_D for s, p in profiles.items() if p.n}
    honest = [s for s in feats if labels[s] == HONEST]
    bad = [s for s in feats if labels[s] == ANOMALOUS]
    samples = {
        "P_V": lambda ids: [x for s in ids for x in averages[s][0]],
        "P_D": lambda ids: [x for s in ids for x in averages[s][1]],
        "V_per_call": lambda ids: [per_call[s] for s in ids],
        "D_per_call": lambda ids: [mean_d[s] for s in ids],
    }
    rows = []
    for q, get in samples.items():
        if not bad or not honest:
            rows.append({"quantity": q, "c": c, "ks_stat": None, "p_value": None, "status": NO_ANOMALOUS})
            continue
        res = ecdf_and_ks(get(honest), get(bad))
        rows.append({"quantity": q, "c": c, "ks_stat": res.statistic, "p_value": res.p_value, "status": "ok"})
    return Analysis(labels, predicted, metrics, rows, averages, per_call, mean_d)


def execute(cfg: ExperimentConfig, deterministic: bool = True, with_stats: bool = True) -> RunResult:
    """Run every batch in memory (no files written)."""
    cfg.validate()
    h = _Harness(cfg)
    boundaries = [0]
    for b in range(cfg.n_batches):
        n = h.submit_batch(b)
        if deterministic:
            h.run_batch_deterministic(b)
        else:
            h.run_batch_threaded(b, n)
        if h.fabric.in_flight():
            raise RuntimeError(f"batch {b} left {h.fabric.in_flight()} tasks in flight")
        boundaries.append(h.engine.round_count)
    h.ledger.flush()
    status = h.ledger.verify()
    if not status.ok:
        raise RuntimeError(f"end-of-run chain verification failed: {status}")
    res = RunResult(cfg, h.specs, h.fabric, h.ledger, h.engine, h.profiles, boundaries, status.ok)
    if with_stats:
        labels = {s.source_id: s.kind for s in h.specs}
        res.analysis = analyze(h.profiles, boundaries, labels, cfg.k_nn, cfg.c)
    return res


def check_conservation(res: RunResult) -> List[str]:
    """Problems with task accounting against the chain; empty when consistent."""
    problems = []
    counts = res.fabric.counts()
    if counts["submitted"] != counts["committed"] + counts["invalid_flagged"]:
        problems.append(f"task accounting mismatch: {counts}")
    valid_verdicts = Counter()
    for tx in res.ledger.transactions():
        if tx.kind == TxKind.VERDICT and tx.payload["verdict"] == "valid":
            valid_verdicts[tx.payload["task_id"]] += 1
    for t in res.fabric.tasks.values():
        n = valid_verdicts.get(t.task_id, 0)
        if t.status == TaskStatus.COMMITTED and n != 1:
            problems.append(f"{t.task_id} committed with {n} valid verdicts")
        if t.status == TaskStatus.INVALID_FLAGGED and n:
            problems.append(f"{t.task_id} flagged but has a valid verdict")
    return problems


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def directory_digest(out: Path, exclude=(MANIFEST, PARTIAL_MARKER)) -> str:
    h = hashlib.sha256()
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name not in exclude:
            h.update(p.name.encode() + b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def write_analysis(out: Path, analysis: Analysis, cfg: ExperimentConfig) -> None:
    a = analysis
    _write_csv(
        out / "ks_table.csv",
        ["quantity", "c", "ks_stat", "p_value", "status"],
        [[r["quantity"], r["c"], r["ks_stat"], r["p_value"], r["status"]] for r in a.ks_rows],
    )
    m = a.metrics
    _write_csv(out / "detection.csv", ["c", "k", "false_alarm_pct", "miss_detection_pct"], [[cfg.c, cfg.k_nn, m.false_alarm_pct, m.miss_detection_pct]])
    _write_csv(
        out / "features.csv",
        ["source_id", "truth_label", "predicted_label", "avg_V", "mean_D"],
        [[s, a.labels[s], a.predicted.get(s, ""), a.per_call_V.get(s), a.mean_D.get(s)] for s in sorted(a.labels)],
    )
    for fname, idx, per_call in (("ecdf_valid.csv", 0, a.per_call_V), ("ecdf_dev.csv", 1, a.mean_D)):
        rows = []
        for pop in (HONEST, ANOMALOUS):
            ids = [s for s in sorted(a.labels) if a.labels[s] == pop]
            for norm, vals in (
                ("per_call", [per_call[s] for s in ids if s in per_call]),
                ("per_batch", [x for s in ids if s in a.averages for x in a.averages[s][idx]]),
            ):
                if vals:
                    xs, fs = ecdf_points(vals)
                    rows.extend([pop, norm, float(x), float(f)] for x, f in zip(xs, fs))
        _write_csv(out / fname, ["population", "normalization", "value", "cdf"], rows)


def run_experiment(cfg: ExperimentConfig, deterministic: bool = True, output_dir=None) -> ExperimentOutput:
    """Run the experiment and write every output file plus a manifest with the summary digest."""
    out = Path(output_dir or os.environ.get(OUT_ENV) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL_MARKER
    marker.write_text("run started\n")
    try:
        res = execute(cfg, deterministic=deterministic)
        problems = check_conservation(res)
        if problems:
            raise RuntimeError("; ".join(problems[:5]))
        chain_path = res.ledger.save(out / "chain.bin")
        res.fabric.write_results(out / "results.jsonl")
        res.fabric.export_tasks(out / "tasks.csv")
        (out / "rounds.jsonl").write_text("".join(r.audit_line() + "\n" for r in res.rounds))
        cost = {
            "delta_val": res.engine.cfg.delta_val,
            "m": cfg.m,
            "avg_recomputes": res.avg_recomputes(),
            "avg_bits_per_sim_per_endorser_per_dim": res.avg_bits(),
        }
        _write_csv(out / "cost.csv", list(cost), [list(cost.values())])
        write_analysis(out, res.analysis, cfg)
        (out / "profiles.json").write_text(
            json.dumps(
                {
                    # output location is left out so the digest only depends on what was computed
                    "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
                    "boundaries": res.boundaries,
                    "labels": res.analysis.labels,
                    "profiles": [res.profiles[s].to_dict() for s in sorted(res.profiles)],
                },
                sort_keys=True,
            )
        )
        digest = directory_digest(out)
        files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name not in (MANIFEST, PARTIAL_MARKER))
        manifest = {
            "digest": digest,
            "files": files,
            "head_hash": res.ledger.head_hash,
            "generator": GENERATOR_NAME,
            "deterministic": deterministic,
            "config": cfg.to_dict(),
            "delta_val": res.engine.cfg.delta_val,
            "counts": res.fabric.counts(),
        }
        (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except BaseException as exc:
        marker.write_text(f"run aborted: {type(exc).__name__}: {exc}\n")
        raise
    marker.unlink()
    return ExperimentOutput(out, res.analysis.ks_rows, res.analysis.metrics, cost, chain_path, digest, files, res)


def sweep_bias(
    cfg: ExperimentConfig,
    c_list: Sequence[float] = (0, 2, 5, 10, 15),
    n_seeds: int = 5,
    output_dir=None,
) -> List[dict]:
    """FA/MD per bias level; seed i uses master_seed + i for every c, so worker identities are paired."""
    runs = []
    for c in c_list:
        for i in range(n_seeds):
            res = execute(cfg.replace(c=float(c), master_seed=cfg.master_seed + i))
            m = res.analysis.metrics
            runs.append({"c": float(c), "seed": cfg.master_seed + i, "fa": m.false_alarm_pct, "md": m.miss_detection_pct})
            log.info("c=%s seed=%d FA=%s MD=%s", c, cfg.master_seed + i, m.false_alarm_pct, m.miss_detection_pct)
    curve = []
    for c in c_list:
        rs = [r for r in runs if r["c"] == float(c)]
        fa = [r["fa"] for r in rs if r["fa"] is not None]
        md = [r["md"] for r in rs if r["md"] is not None]
        curve.append(
            {
                "c": float(c),
                "fa_pct": statistics.median(fa) if fa else None,
                "md_pct": statistics.median(md) if md else None,
                "runs": rs,
            }
        )
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "detection.csv", ["c", "FA%", "MD%"], [[r["c"], r["fa_pct"], r["md_pct"]] for r in curve])
        _write_csv(out / "detection_runs.csv", ["c", "seed", "FA%", "MD%"], [[r["c"], r["seed"], r["fa"], r["md"]] for r in runs])
    return curve


DEFAULT_DELTA_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 100.0)


def sweep_cost(
    cfg: ExperimentConfig,
    delta_val_list: Sequence[float] = DEFAULT_DELTA_GRID,
    m_list: Sequence[int] = (2, 4, 8),
    n_seeds: int = 20,
    output_dir=None,
) -> List[dict]:
    """Average recomputes and bits per simulation for every (delta_val, m), over paired seeds."""
    rows = []
    for m in m_list:
        for dv in delta_val_list:
            rec, bits = [], []
            for i in range(n_seeds):
                res = execute(cfg.replace(m=int(m), delta_val=float(dv), master_seed=cfg.master_seed + i), with_stats=False)
                rec.append(res.avg_recomputes())
                bits.append(res.avg_bits())
            rows.append(
                {
                    "delta_val": float(dv),
                    "m": int(m),
                    "avg_recomputes": float(np.mean(rec)),
                    "avg_bits_per_sim_per_endorser_per_dim": float(np.mean(bits)),
                    "max_bits": float(np.max(bits)),
                }
            )
            log.info("m=%d delta=%g recomputes=%.4f bits=%.4f", m, dv, rows[-1]["avg_recomputes"], rows[-1]["avg_bits_per_sim_per_endorser_per_dim"])
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = ["delta_val", "m", "avg_recomputes", "avg_bits_per_sim_per_endorser_per_dim"]
        _write_csv(out / "cost.csv", keys, [[r[k] for k in keys] for r in rows])
    return rows
