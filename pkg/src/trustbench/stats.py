"""Per-source profile bookkeeping and distribution-based anomaly detection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import kolmogorov

HONEST = "honest"
ANOMALOUS = "anomalous"

V_GRID_RANGE = (-1.0, 1.0)
V_GRID_BINS = 41
D_GRID_BINS = 64
D_CAP_PERCENTILE = 99.5


@dataclass
class SourceProfile:
    source_id: str
    V: int = 0
    n: int = 0
    deviations: List[float] = field(default_factory=list)
    # (round seq, +-1, delta) for every round the source took part in
    events: List[Tuple[int, int, float]] = field(default_factory=list)
    per_batch_avg_V: List[float] = field(default_factory=list)
    per_batch_avg_D: List[float] = field(default_factory=list)

    def record(self, seq: int, valid: bool, delta: float) -> None:
        dv = -1 if valid else 1
        self.V += dv
        self.n += 1
        self.deviations.append(float(delta))
        self.events.append((seq, dv, float(delta)))

    @property
    def per_call_V(self) -> Optional[float]:
        return self.V / self.n if self.n else None

    @property
    def mean_D(self) -> Optional[float]:
        return float(np.mean(self.deviations)) if self.deviations else None

    def to_dict(self) -> dict:
        return {"source_id": self.source_id, "events": [list(e) for e in self.events]}

    @classmethod
    def from_dict(cls, d: dict) -> "SourceProfile":
        prof = cls(d["source_id"])
        for seq, dv, delta in d["events"]:
            prof.record(int(seq), dv < 0, delta)
        return prof


def batch_averages(profiles: Mapping[str, SourceProfile], batch_boundaries: Sequence[int]) -> Dict[str, tuple]:
    """Per-source lists (avg_V, avg_D), one entry per batch the source took part in.

    ``batch_boundaries`` are round sequence numbers b0 < b1 < ... ; batch i is
    the half-open range [b_i, b_{i+1}).
    """
    bounds = list(batch_boundaries)
    if len(bounds) < 2:
        raise ValueError("need at least one batch (two boundaries)")
    if any(b1 <= b0 for b0, b1 in zip(bounds, bounds[1:])):
        raise ValueError("batch boundaries must be strictly increasing")
    out = {}
    for sid, prof in profiles.items():
        sums = {}
        for seq, dv, delta in prof.events:
            i = int(np.searchsorted(bounds, seq, side="right")) - 1
            if not 0 <= i < len(bounds) - 1:
                raise ValueError(f"round {seq} of {sid} falls outside the batch partition")
            acc = sums.setdefault(i, [0, 0, 0.0])
            acc[0] += dv
            acc[1] += 1
            acc[2] += delta
        avg_v = [sums[i][0] / sums[i][1] for i in sorted(sums)]
        avg_d = [sums[i][2] / sums[i][1] for i in sorted(sums)]
        out[sid] = (avg_v, avg_d)
    return out


@dataclass(frozen=True)
class Pmf:
    bin_edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        if len(self.masses) != len(self.bin_edges) - 1:
            raise ValueError("need one mass per bin")
        if np.any(self.masses < 0) or abs(float(self.masses.sum()) - 1.0) > 1e-9:
            raise ValueError("masses must be nonnegative and sum to 1")


def uniform_grid(lo: float, hi: float, bins: int) -> np.ndarray:
    if not hi > lo:
        raise ValueError(f"empty grid range [{lo}, {hi}]")
    return np.linspace(lo, hi, bins + 1)


def estimate_pmf(samples: Sequence[float], grid: np.ndarray) -> Pmf:
    """Normalized histogram on ``grid``; samples outside it land in the end bins."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("cannot estimate a pmf from no samples")
    grid = np.asarray(grid, dtype=float)
    x = np.clip(x, grid[0], grid[-1])
    counts, _ = np.histogram(x, bins=grid)
    return Pmf(grid, counts / counts.sum())


def tv_distance(p: Pmf, q: Pmf) -> float:
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError("total variation needs pmfs on the same grid")
    return 0.5 * float(np.abs(p.masses - q.masses).sum())


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int


def ks_statistic(samples_a, samples_b) -> float:
    a = np.sort(np.asarray(samples_a, dtype=float))
    b = np.sort(np.asarray(samples_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two nonempty samples")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ecdf_and_ks(samples_a, samples_b) -> KsResult:
    """Two-sample KS statistic with its asymptotic p-value.

    The p-value is the Kolmogorov survival function at sqrt(n_a n_b / (n_a + n_b)) * D.
    """
    d = ks_statistic(samples_a, samples_b)
    na, nb = len(samples_a), len(samples_b)
    lam = math.sqrt(na * nb / (na + nb)) * d
    p = float(min(1.0, max(0.0, kolmogorov(lam))))
    return KsResult(d, p, na, nb)


def ecdf_points(samples) -> Tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(samples, dtype=float))
    return x, np.arange(1, x.size + 1) / x.size


def knn_classify(
    features: Mapping[str, Tuple[Pmf, Pmf]],
    labels: Mapping[str, str],
    k: int,
) -> Dict[str, str]:
    """Leave-one-out k-NN with distance tv(P_V) + tv(P_D).

    Equal distances are broken by the smaller source id.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"k must be a positive odd integer, got {k}")
    ids = sorted(features)
    n = len(ids)
    if k >= n:
        raise ValueError(f"k={k} needs at least {k + 1} sources, have {n}")
    missing = [s for s in ids if s not in labels]
    if missing:
        raise ValueError(f"no training label for {missing[:3]}")
    edges_v = features[ids[0]][0].bin_edges
    edges_d = features[ids[0]][1].bin_edges
    for s in ids:
        pv, pd = features[s]
        if not (np.array_equal(pv.bin_edges, edges_v) and np.array_equal(pd.bin_edges, edges_d)):
            raise ValueError(f"source {s} uses a different grid")
    mv = np.stack([features[s][0].masses for s in ids])
    md = np.stack([features[s][1].masses for s in ids])
    dist = 0.5 * np.abs(mv[:, None, :] - mv[None, :, :]).sum(-1)
    dist += 0.5 * np.abs(md[:, None, :] - md[None, :, :]).sum(-1)
    lab = [labels[s] for s in ids]
    out = {}
    for i, sid in enumerate(ids):
        # ids are sorted, so a stable sort on distance breaks ties by smaller id
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i][:k]
        votes = sum(lab[j] == ANOMALOUS for j in order)
        out[sid] = ANOMALOUS if votes * 2 > k else HONEST
    return out


@dataclass(frozen=True)
class DetectionMetrics:
    false_alarm_pct: Optional[float]
    miss_detection_pct: Optional[float]  # None when there is no anomalous source


def detection_metrics(predicted: Mapping[str, str], truth: Mapping[str, str]) -> DetectionMetrics:
    if set(predicted) != set(truth):
        raise ValueError("predicted and truth cover different sources")
    honest = [s for s, t in truth.items() if t == HONEST]
    bad = [s for s, t in truth.items() if t == ANOMALOUS]
    fa = 100.0 * sum(predicted[s] == ANOMALOUS for s in honest) / len(honest) if honest else None
    md = 100.0 * sum(predicted[s] == HONEST for s in bad) / len(bad) if bad else None
    return DetectionMetrics(fa, md)


def deviation_cap(per_source_samples: Sequence[Sequence[float]]) -> float:
    pooled = np.concatenate([np.asarray(s, dtype=float) for s in per_source_samples if len(s)])
    cap = float(np.percentile(pooled, D_CAP_PERCENTILE))
    return cap if cap > 0 else 1.0


def build_features(averages: Mapping[str, tuple]) -> Tuple[Dict[str, Tuple[Pmf, Pmf]], np.ndarray, np.ndarray]:
    """P_V and P_D for every source with at least one batch entry, on shared grids."""
    active = {s: v for s, v in averages.items() if v[0]}
    v_grid = uniform_grid(*V_GRID_RANGE, V_GRID_BINS)
    d_grid = uniform_grid(0.0, deviation_cap([v[1] for v in active.values()]), D_GRID_BINS)
    feats = {s: (estimate_pmf(v[0], v_grid), estimate_pmf(v[1], d_grid)) for s, v in active.items()}
    return feats, v_grid, d_grid
