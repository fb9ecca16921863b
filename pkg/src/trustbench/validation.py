"""Endorsement-based validation of reported results.

A reporter sends a coarse quantized version of its result.  Endorsers
recompute the task; the round is decided by comparing the deviation between
the reconstructed report and the endorsers' mean against the tolerance,
using the quantizer's error bound to tell whether the coarse report already
settles the question.  While it does not, the reporter sends one more bit
per dimension.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, PoolTooSmallError
from .fabric import ResultRecord, TaskFabric
from .ledger import Ledger, TxKind, ROLE_VALIDATION_COMPUTER
from .stats import SourceProfile
from .surrogate import GroundTruthModel, SourceSpec, simulate

log = logging.getLogger(__name__)

B_MAX = 32
VALID = "valid"
INVALID = "invalid"


@dataclass(frozen=True)
class ToleranceConfig:
    delta_val: float
    m: int
    b0: int = 4
    b_max: int = B_MAX
    range_lo: float = 0.0
    range_hi: float = 1.0

    def __post_init__(self):
        if not self.delta_val >= 0:
            raise ConfigurationError("delta_val must be >= 0")
        if self.m < 1:
            raise ConfigurationError("m must be >= 1")
        if not 1 <= self.b0 <= self.b_max <= B_MAX:
            raise ConfigurationError(f"need 1 <= b0 <= b_max <= {B_MAX}")
        if not self.range_lo < self.range_hi:
            raise ConfigurationError("range_lo must be < range_hi")

    def bin_width(self, bits: int) -> float:
        return (self.range_hi - self.range_lo) * 2.0**-bits


def tolerance_for_valid_rate(rate: float, sigma: float, m: int) -> float:
    """Tolerance at which an honest d=1 round is valid with probability ``rate``.

    For honest workers the reported value minus the endorser mean is
    N(0, sigma^2 (1 + 1/m)), so P(valid) = erf(tol / (sigma sqrt(2 (1 + 1/m)))).
    """
    from scipy.special import erfinv

    if not 0 < rate < 1:
        raise ValueError("rate must be in (0, 1)")
    return float(sigma * math.sqrt(2.0 * (1.0 + 1.0 / m)) * erfinv(rate))


def expected_valid_rate(delta_val: float, sigma: float, m: int) -> float:
    return math.erf(delta_val / (sigma * math.sqrt(2.0 * (1.0 + 1.0 / m))))


@dataclass(frozen=True)
class QuantizedReport:
    indices: tuple
    bits_per_dim: int
    trail: tuple = ()  # bits appended by each refinement step, one string per step
    clamped: bool = False

    def reconstruction(self, cfg: ToleranceConfig) -> np.ndarray:
        w = cfg.bin_width(self.bits_per_dim)
        return cfg.range_lo + (np.asarray(self.indices, dtype=float) + 0.5) * w

    def encode(self) -> str:
        """Bit string of the initial indices followed by the refinement trail."""
        b0 = self.bits_per_dim - len(self.trail)
        head = "".join(format(i >> len(self.trail), f"0{b0}b") for i in self.indices)
        return head + "".join(self.trail)


def quantize(value, bits_per_dim: int, cfg: ToleranceConfig) -> QuantizedReport:
    """Uniform per-dimension quantizer over [range_lo, range_hi] with 2**bits bins."""
    x = np.asarray(value, dtype=float).reshape(-1)
    xc = np.clip(x, cfg.range_lo, cfg.range_hi)
    w = cfg.bin_width(bits_per_dim)
    idx = np.floor((xc - cfg.range_lo) / w)
    idx = np.clip(idx, 0, 2**bits_per_dim - 1).astype(np.int64)
    return QuantizedReport(tuple(int(i) for i in idx), bits_per_dim, (), bool(np.any(xc != x)))


def refine(report: QuantizedReport, value, cfg: ToleranceConfig) -> QuantizedReport:
    """Reporter-side refinement: one more bit per dimension of the same value."""
    finer = quantize(value, report.bits_per_dim + 1, cfg)
    bits = [n - 2 * o for n, o in zip(finer.indices, report.indices)]
    if any(b not in (0, 1) for b in bits):
        raise AssertionError("refinement left the enclosing bin")
    return QuantizedReport(
        finer.indices,
        finer.bits_per_dim,
        report.trail + ("".join(map(str, bits)),),
        report.clamped or finer.clamped,
    )


def endorsement_deviation(reported, endorser_values: Sequence) -> float:
    """Euclidean norm of the reported vector minus the endorsers' componentwise mean."""
    if len(endorser_values) == 0:
        raise ValueError("need at least one endorser value")
    y = np.asarray(reported, dtype=float).reshape(-1)
    rows = [np.asarray(v, dtype=float).reshape(-1) for v in endorser_values]
    if any(r.shape != y.shape for r in rows):
        raise ValueError("dimension mismatch between report and endorser values")
    return float(np.linalg.norm(y - np.mean(rows, axis=0)))


def select_endorsers(reporter: str, pool, m: int, rng: np.random.Generator) -> tuple:
    """Uniform m-subset of ``pool`` without the reporter, in sorted-id order of the pool."""
    eligible = sorted(set(pool) - {reporter})
    if m < 1:
        raise ValueError("m must be >= 1")
    if len(eligible) < m:
        raise PoolTooSmallError(f"{len(eligible)} eligible endorsers, need {m}")
    picks = rng.choice(len(eligible), size=m, replace=False)
    return tuple(eligible[i] for i in sorted(picks.tolist()))


@dataclass
class EndorsementRound:
    task_id: str
    attempt: int
    reporter: str
    reported: tuple
    endorsers: tuple
    endorser_values: tuple
    delta: float
    verdict: str
    bits_sent: int
    recomputes: int
    bits_per_dim: int
    refinements: int
    clamped: bool = False
    seq: int = -1

    @property
    def valid(self) -> bool:
        return self.verdict == VALID

    def audit_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "reporter": self.reporter,
            "endorsers": list(self.endorsers),
            "delta": self.delta,
            "verdict": self.verdict,
            "bits_sent": self.bits_sent,
            "recomputes": self.recomputes,
        }

    def audit_line(self) -> str:
        return json.dumps(self.audit_dict(), sort_keys=True)


def validate_with_refinement(
    record: ResultRecord,
    endorser_values: Sequence,
    cfg: ToleranceConfig,
    endorsers: tuple = (),
) -> EndorsementRound:
    value = np.asarray(record.reward, dtype=float)
    d = value.size
    report = quantize(value, cfg.b0, cfg)
    bits_sent = cfg.b0 * d
    while True:
        recon = report.reconstruction(cfg)
        dhat = endorsement_deviation(recon, endorser_values)
        if report.bits_per_dim >= cfg.b_max:
            verdict = VALID if dhat <= cfg.delta_val else INVALID
            break
        err = 0.5 * cfg.bin_width(report.bits_per_dim) * math.sqrt(d)
        if dhat + err <= cfg.delta_val:
            verdict = VALID
            break
        if dhat - err > cfg.delta_val:
            verdict = INVALID
            break
        report = refine(report, value, cfg)
        bits_sent += d
    return EndorsementRound(
        task_id=record.task_id,
        attempt=record.attempt,
        reporter=record.reporter,
        reported=tuple(float(v) for v in recon),
        endorsers=tuple(endorsers),
        endorser_values=tuple(tuple(float(x) for x in np.ravel(v)) for v in endorser_values),
        delta=dhat,
        verdict=verdict,
        bits_sent=bits_sent,
        recomputes=len(endorser_values),
        bits_per_dim=report.bits_per_dim,
        refinements=report.bits_per_dim - cfg.b0,
        clamped=report.clamped,
    )


def update_profiles(rnd: EndorsementRound, profiles: Mapping[str, SourceProfile]) -> None:
    participants = (rnd.reporter,) + tuple(rnd.endorsers)
    unknown = [s for s in participants if s not in profiles]
    if unknown:
        raise KeyError(f"no profile for {unknown}")
    for sid in participants:
        profiles[sid].record(rnd.seq, rnd.valid, rnd.delta)


SimStream = Callable[[str, int, str], np.random.Generator]


class ValidationEngine:
    """Runs endorsement rounds for results posted to a fabric.

    ``sim_stream(task_id, attempt, source_id)`` gives each endorser its own
    random stream for the recomputation; ``endorse_stream(task_id, attempt)``
    drives endorser selection.
    """

    def __init__(
        self,
        cfg: ToleranceConfig,
        specs: Mapping[str, SourceSpec],
        model: GroundTruthModel,
        fabric: TaskFabric,
        ledger: Optional[Ledger],
        profiles: Dict[str, SourceProfile],
        sim_stream: SimStream,
        endorse_stream: Callable[[str, int], np.random.Generator],
        pool: Optional[Sequence[str]] = None,
    ):
        self.cfg = cfg
        self.specs = dict(specs)
        self.model = model
        self.fabric = fabric
        self.ledger = ledger
        self.profiles = profiles
        self.sim_stream = sim_stream
        self.endorse_stream = endorse_stream
        self.pool = sorted(pool if pool is not None else self.specs)
        self.rounds: List[EndorsementRound] = []
        self._lock = threading.Lock()

    @property
    def round_count(self) -> int:
        return len(self.rounds)

    def run_validation(self, record: ResultRecord) -> Optional[EndorsementRound]:
        task = self.fabric.tasks[record.task_id]
        try:
            endorsers = select_endorsers(
                record.reporter, self.pool, self.cfg.m, self.endorse_stream(record.task_id, record.attempt)
            )
        except PoolTooSmallError as exc:
            self.fabric.log_event("operator", record.task_id, f"cannot validate: {exc}")
            return None
        values = [
            simulate(self.specs[j], self.model, task.policy, self.sim_stream(record.task_id, record.attempt, j))
            for j in endorsers
        ]
        rnd = validate_with_refinement(record, values, self.cfg, endorsers)
        with self._lock:
            rnd.seq = len(self.rounds)
            self.rounds.append(rnd)
            update_profiles(rnd, self.profiles)
        if self.ledger is not None:
            self.ledger.record(
                TxKind.ENDORSEMENT_RECORDED,
                {
                    "task_id": rnd.task_id,
                    "attempt": rnd.attempt,
                    "reporter": rnd.reporter,
                    "endorsers": list(rnd.endorsers),
                    "endorser_values": [list(v) for v in rnd.endorser_values],
                    "role": ROLE_VALIDATION_COMPUTER,
                },
                rnd.endorsers,
            )
            sub = self.ledger.record(
                TxKind.VERDICT,
                {
                    "task_id": rnd.task_id,
                    "attempt": rnd.attempt,
                    "reporter": rnd.reporter,
                    "reported": list(rnd.reported),
                    "delta": rnd.delta,
                    "verdict": rnd.verdict,
                    "bits_sent": rnd.bits_sent,
                    "recomputes": rnd.recomputes,
                },
                rnd.endorsers,
            )
            if not sub:
                self.fabric.log_event("operator", rnd.task_id, f"verdict not recorded: {sub.reason}")
                return rnd
        if rnd.valid:
            self.fabric.commit(rnd.task_id)
        else:
            self.fabric.redispatch(rnd.task_id)
        return rnd
