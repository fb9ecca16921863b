"""Task clerk, FIFO message queue and result store shared by all workers.

All state transitions happen under one lock, so claims and posts are
linearizable no matter how many worker threads drive the fabric.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .errors import ProtocolError
from .ledger import Ledger, TxKind, ROLE_VALIDATION_REQUESTER
from .surrogate import Policy

log = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 5
CANONICAL_DIGITS = 6


class TaskStatus(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    AWAITING_VALIDATION = "awaiting_validation"
    COMMITTED = "committed"
    INVALID_FLAGGED = "invalid_flagged"


def payload_hash(p: Policy) -> str:
    return hashlib.sha256(p.canonical(CANONICAL_DIGITS).encode()).hexdigest()


@dataclass
class Task:
    task_id: str
    serial: int
    policy: Policy
    payload_hash: str
    status: TaskStatus = TaskStatus.QUEUED
    attempt: int = 0
    worker: Optional[str] = None
    excluded: Optional[str] = None
    reporters: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class ResultRecord:
    task_id: str
    attempt: int
    reporter: str
    reward: tuple
    report_bits: str
    timestamp: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "task_id": self.task_id,
                "attempt": self.attempt,
                "reporter": self.reporter,
                "reward": list(self.reward),
                "report_bits": self.report_bits,
                "timestamp": self.timestamp,
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class Event:
    kind: str
    task_id: str
    detail: str
    timestamp: int


class TaskFabric:
    def __init__(self, ledger: Optional[Ledger] = None, max_attempts: int = DEFAULT_MAX_ATTEMPTS):
        if max_attempts < 0:
            raise ValueError("max_attempts must be >= 0")
        self.ledger = ledger
        self.max_attempts = max_attempts
        self.tasks: Dict[str, Task] = {}
        self.results: List[ResultRecord] = []
        self.events: List[Event] = []
        self.on_result: Optional[Callable[[ResultRecord], object]] = None
        self._workers: set = set()
        self._queue: deque = deque()
        self._by_hash: Dict[str, str] = {}
        self._claims: Dict[tuple, str] = {}
        self._serial = 0
        self._clock = 0
        self._lock = threading.RLock()
        self._idle = threading.Condition(self._lock)

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def _emit(self, kind: TxKind, payload: dict, endorsements=()):
        if self.ledger is not None:
            self.ledger.record(kind, payload, endorsements)

    def register_worker(self, worker: str) -> None:
        with self._lock:
            self._workers.add(worker)

    @property
    def workers(self) -> List[str]:
        return sorted(self._workers)

    def dedupe_check(self, p: Policy) -> Optional[str]:
        """Task id of a live (not flagged) task with the same canonical payload, else None."""
        with self._lock:
            return self._by_hash.get(payload_hash(p))

    def submit_task(self, p: Policy) -> Task:
        """Enqueue a task for ``p``; a duplicate payload returns the existing task untouched."""
        h = payload_hash(p)
        with self._lock:
            prior = self._by_hash.get(h)
            if prior is not None:
                return self.tasks[prior]
            self._serial += 1
            task = Task(f"t{self._serial:07d}", self._serial, p, h)
            self.tasks[task.task_id] = task
            self._by_hash[h] = task.task_id
            self._queue.append(task.task_id)
            self._emit(
                TxKind.TASK_SUBMITTED,
                {
                    "task_id": task.task_id,
                    "policy": [p.itn, p.irs],
                    "payload_hash": h,
                    "role": ROLE_VALIDATION_REQUESTER,
                },
            )
            self._idle.notify_all()
            return task

    def queue_length(self) -> int:
        return len(self._queue)

    def peek(self) -> Optional[Task]:
        with self._lock:
            return self.tasks[self._queue[0]] if self._queue else None

    def claim_task(self, worker: str, primary: bool = True) -> Optional[Task]:
        """Hand the oldest claimable queued task to ``worker``.

        A task is claimable unless ``worker`` reported its previous attempt.
        With ``primary=False`` only re-dispatched tasks are considered.
        """
        with self._lock:
            if worker not in self._workers:
                raise ProtocolError(f"worker {worker!r} is not registered")
            for i, tid in enumerate(self._queue):
                task = self.tasks[tid]
                if task.excluded == worker or (not primary and task.attempt == 0):
                    continue
                key = (tid, task.attempt)
                if key in self._claims:  # cannot happen while the lock holds; guards the contract
                    raise ProtocolError(f"{tid} attempt {task.attempt} already claimed")
                del self._queue[i]
                self._claims[key] = worker
                task.status = TaskStatus.RUNNING
                task.worker = worker
                return task
            return None

    def post_result(self, worker: str, task_id: str, reward, report_bits: str = "") -> ResultRecord:
        with self._lock:
            task = self.tasks.get(task_id)
            if task is None:
                self._protocol(f"unknown task {task_id!r}")
            if task.status != TaskStatus.RUNNING:
                self._protocol(f"{task_id} is {task.status.value}, not running")
            if task.worker != worker:
                self._protocol(f"{task_id} is bound to {task.worker}, not {worker}")
            reward = tuple(float(x) for x in np.asarray(reward, dtype=float).reshape(-1))
            rec = ResultRecord(task_id, task.attempt, worker, reward, report_bits, self._tick())
            self.results.append(rec)
            task.status = TaskStatus.AWAITING_VALIDATION
            task.reporters.append(worker)
            self._emit(
                TxKind.RESULT_REPORTED,
                {
                    "task_id": task_id,
                    "attempt": task.attempt,
                    "reporter": worker,
                    "reward": list(reward),
                    "report_bits": report_bits,
                },
            )
        if self.on_result is not None:
            self.on_result(rec)
        return rec

    def _protocol(self, msg: str):
        log.error("protocol error, result dropped: %s", msg)
        raise ProtocolError(msg)

    def commit(self, task_id: str) -> Task:
        with self._lock:
            task = self.tasks[task_id]
            if task.status != TaskStatus.AWAITING_VALIDATION:
                raise ProtocolError(f"cannot commit {task_id} in state {task.status.value}")
            task.status = TaskStatus.COMMITTED
            self._idle.notify_all()
            return task

    def redispatch(self, task_id: str) -> Task:
        """Requeue a task whose latest result was invalid, or flag it once attempts run out."""
        with self._lock:
            task = self.tasks[task_id]
            if task.status != TaskStatus.AWAITING_VALIDATION:
                raise ProtocolError(f"cannot redispatch {task_id} in state {task.status.value}")
            if task.attempt >= self.max_attempts:
                task.status = TaskStatus.INVALID_FLAGGED
                self._by_hash.pop(task.payload_hash, None)
                reporter = task.reporters[-1] if task.reporters else None
                self._emit(
                    TxKind.INVALID_FLAGGED,
                    {"task_id": task_id, "attempts": task.attempt + 1, "reporter": reporter},
                )
                ev = Event("invalid_result", task_id, f"flagged after {task.attempt + 1} attempts", self._tick())
                self.events.append(ev)
                log.info("notify: %s invalid after %d attempts", task_id, task.attempt + 1)
            else:
                task.attempt += 1
                task.status = TaskStatus.QUEUED
                task.excluded = task.worker
                task.worker = None
                self._queue.append(task_id)
            self._idle.notify_all()
            return task

    def log_event(self, kind: str, task_id: str, detail: str) -> None:
        with self._lock:
            self.events.append(Event(kind, task_id, detail, self._tick()))
        log.warning("%s: %s %s", kind, task_id, detail)

    def counts(self) -> Dict[str, int]:
        with self._lock:
            out = {s.value: 0 for s in TaskStatus}
            for t in self.tasks.values():
                out[t.status.value] += 1
            out["submitted"] = len(self.tasks)
            return out

    def in_flight(self) -> int:
        c = self.counts()
        return c["queued"] + c["running"] + c["awaiting_validation"]

    def wait_for_change(self, timeout: float = 0.05) -> None:
        with self._idle:
            self._idle.wait(timeout)

    def write_results(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for rec in self.results:
                fh.write(rec.to_json() + "\n")
        return path

    def export_tasks(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "policy", "status", "attempt"])
            for t in self.tasks.values():
                w.writerow([t.task_id, t.policy.canonical(CANONICAL_DIGITS), t.status.value, t.attempt])
        return path


def read_results(path) -> List[ResultRecord]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            d = json.loads(line)
            out.append(
                ResultRecord(d["task_id"], d["attempt"], d["reporter"], tuple(d["reward"]), d["report_bits"], d["timestamp"])
            )
    return out
