"""Counter-based random stream derivation.

Every stochastic draw in a run comes from a Philox generator keyed by the
master seed.  Streams are told apart by the upper three words of the
256-bit Philox counter; the lowest word is left at zero so that a
stream can advance for 2**64 blocks before it could run into a neighbour.

Counter layout (four unsigned 64-bit words, low to high)::

    [0, domain, a, b]

``domain`` is one of the ``Domain`` constants below, ``a`` and ``b`` are
domain-specific identifiers (batch index, task serial, attempt, worker index).
Two identifiers that do not fit the layout are packed with ``pack``.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

GENERATOR_NAME = "philox4x64-10/numpy-2"

_MASK64 = (1 << 64) - 1


class Domain(IntEnum):
    ANOMALY = 1
    POLICIES = 2
    SLOTS = 3
    REDISPATCH = 4
    ENDORSE = 5
    SIMULATE = 6
    WORKER_SEED = 7
    SCRATCH = 15


def pack(hi: int, lo: int) -> int:
    """Pack two 32-bit identifiers into one counter word."""
    if not (0 <= hi < 1 << 32 and 0 <= lo < 1 << 32):
        raise ValueError(f"identifiers out of range: {hi}, {lo}")
    return (hi << 32) | lo


class StreamFactory:
    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ValueError("master_seed must be nonnegative")
        self.master_seed = int(master_seed)

    def stream(self, domain: Domain, a: int = 0, b: int = 0) -> np.random.Generator:
        counter = [0, int(domain), a & _MASK64, b & _MASK64]
        return np.random.Generator(np.random.Philox(key=self.master_seed, counter=counter))

    def simulation(self, task_serial: int, attempt: int, worker_index: int) -> np.random.Generator:
        """Private stream of one worker for one (task, attempt)."""
        return self.stream(Domain.SIMULATE, pack(task_serial, attempt), worker_index)

    def endorsement(self, task_serial: int, attempt: int) -> np.random.Generator:
        return self.stream(Domain.ENDORSE, task_serial, attempt)

    def redispatch(self, task_serial: int, attempt: int) -> np.random.Generator:
        return self.stream(Domain.REDISPATCH, task_serial, attempt)
