"""Synthetic stand-in for the disease-simulation executor.

A policy is an (itn, irs) coverage pair.  The ground truth is a registered
closed-form surface; workers add Gaussian simulation noise on top of it and
anomalous workers add a second, policy-dependent biased draw.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from .errors import ConfigurationError

RewardVector = np.ndarray

HONEST = "honest"
ANOMALOUS = "anomalous"

# How an anomalous worker's biased draw combines with the simulation noise.
REPLACE = "replace"  # truth + N(c sigma (itn - irs), sigma)
ADDITIVE = "additive"  # truth + N(0, sigma) + N(c sigma (itn - irs), sigma)
NOISE_MODELS = (REPLACE, ADDITIVE)


@dataclass(frozen=True)
class Policy:
    itn: float
    irs: float

    def __post_init__(self):
        for name in ("itn", "irs"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ConfigurationError(f"policy {name}={v!r} outside [0, 1]")

    def canonical(self, digits: int = 6) -> str:
        return f"{self.itn:.{digits}f},{self.irs:.{digits}f}"


@dataclass(frozen=True)
class SourceSpec:
    source_id: str
    kind: str = HONEST
    c: float = 0.0
    sigma: float = 1.0
    seed: int = 0
    noise_model: str = REPLACE

    def __post_init__(self):
        if self.kind not in (HONEST, ANOMALOUS):
            raise ConfigurationError(f"unknown source kind {self.kind!r}")
        if self.noise_model not in NOISE_MODELS:
            raise ConfigurationError(f"unknown noise model {self.noise_model!r}")
        if not self.sigma >= 0:
            raise ConfigurationError(f"sigma must be nonnegative, got {self.sigma}")
        if not self.c >= 0:
            raise ConfigurationError(f"bias scaling c must be nonnegative, got {self.c}")

    @property
    def anomalous(self) -> bool:
        return self.kind == ANOMALOUS


# surface_id -> (function(params, itn, irs) -> array of shape (d,), default params for d)
SurfaceFn = Callable[[np.ndarray, float, float], np.ndarray]
_SURFACES: Dict[str, tuple] = {}


def register_surface(surface_id: str, fn: SurfaceFn, default_params: Callable[[int], np.ndarray]):
    _SURFACES[surface_id] = (fn, default_params)


def available_surfaces() -> list:
    return sorted(_SURFACES)


def _bilinear(params, itn, irs):
    # rows: (scale, itn coeff, irs coeff, interaction coeff)
    s, a, b, ab = params.T
    return s * (1.0 + a * itn + b * irs + ab * itn * irs)


def _bilinear_defaults(d):
    return np.tile([100.0, -0.6, -0.5, 0.3], (d, 1))


def _flat(params, itn, irs):
    return params[:, 0].copy()


register_surface("bilinear", _bilinear, _bilinear_defaults)
register_surface("flat", _flat, lambda d: np.full((d, 1), 50.0))


@dataclass(frozen=True)
class GroundTruthModel:
    surface_id: str = "bilinear"
    d: int = 1
    params: tuple = field(default=None)

    def __post_init__(self):
        if self.surface_id not in _SURFACES:
            raise ConfigurationError(f"unknown surface {self.surface_id!r}")
        if not (isinstance(self.d, int) and self.d >= 1):
            raise ConfigurationError(f"dimension must be a positive integer, got {self.d!r}")
        if self.params is None:
            defaults = _SURFACES[self.surface_id][1](self.d)
            object.__setattr__(self, "params", tuple(map(tuple, defaults)))
        arr = np.asarray(self.params, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != self.d or not np.all(np.isfinite(arr)):
            raise ConfigurationError(f"malformed params for surface {self.surface_id!r}: {self.params!r}")

    def param_array(self) -> np.ndarray:
        return np.asarray(self.params, dtype=float)


def evaluate_true(model: GroundTruthModel, p: Policy) -> RewardVector:
    fn = _SURFACES[model.surface_id][0]
    try:
        out = np.asarray(fn(model.param_array(), float(p.itn), float(p.irs)), dtype=float)
    except (ValueError, IndexError) as exc:
        raise ConfigurationError(f"surface {model.surface_id!r} rejected its params") from exc
    if out.shape != (model.d,) or not np.all(np.isfinite(out)):
        raise ConfigurationError(f"surface {model.surface_id!r} produced {out!r}")
    return out


def simulate(spec: SourceSpec, model: GroundTruthModel, p: Policy, rng: np.random.Generator) -> RewardVector:
    """One noisy evaluation of ``p`` by the worker described by ``spec``.

    Honest output is truth + N(0, sigma) per dimension.  An anomalous worker
    returns truth + N(c*sigma*(itn - irs), sigma) instead (``replace``), or
    adds that draw on top of the simulation noise (``additive``).  The
    simulation noise is drawn first in both cases so every worker consumes
    its stream the same way.
    """
    if spec.sigma < 0:
        raise ConfigurationError("sigma must be nonnegative")
    truth = evaluate_true(model, p)
    noise = rng.normal(0.0, spec.sigma, model.d)
    if not spec.anomalous:
        return truth + noise
    bias = spec.c * spec.sigma * (p.itn - p.irs)
    anomaly = rng.normal(bias, spec.sigma, model.d)
    if spec.noise_model == ADDITIVE:
        return truth + noise + anomaly
    return truth + anomaly


def anomaly_count(n_workers: int, fraction: float) -> int:
    # half-up rounding; Python's round() would send 2.5 to 2
    return int(math.floor(fraction * n_workers + 0.5))


def assign_anomalies(
    n_workers: int,
    fraction: float,
    rng: np.random.Generator,
    c: float = 0.0,
    sigma: float = 1.0,
    noise_model: str = REPLACE,
) -> list:
    """Worker specs with exactly ``round(fraction * n_workers)`` anomalous, picked uniformly."""
    if n_workers < 1:
        raise ConfigurationError("n_workers must be >= 1")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"fraction {fraction} outside [0, 1]")
    n_bad = anomaly_count(n_workers, fraction)
    bad = set(rng.choice(n_workers, size=n_bad, replace=False).tolist()) if n_bad else set()
    seeds = rng.integers(0, 2**63, size=n_workers)
    width = max(3, len(str(n_workers - 1)))
    return [
        SourceSpec(
            source_id=f"w{i:0{width}d}",
            kind=ANOMALOUS if i in bad else HONEST,
            c=c,
            sigma=sigma,
            seed=int(seeds[i]),
            noise_model=noise_model,
        )
        for i in range(n_workers)
    ]


@functools.lru_cache(maxsize=32)
def surface_extrema(model: GroundTruthModel, resolution: int = 101) -> tuple:
    """Per-dimension (min, max) of the ground truth over a grid on [0, 1]^2 (corners included)."""
    grid = np.linspace(0.0, 1.0, resolution)
    vals = np.array([evaluate_true(model, Policy(float(a), float(b))) for a in grid for b in grid])
    return vals.min(axis=0), vals.max(axis=0)


def quantizer_range(model: GroundTruthModel, sigma: float, pad_sigmas: float = 3.0) -> tuple:
    lo, hi = surface_extrema(model)
    return float(lo.min() - pad_sigmas * sigma), float(hi.max() + pad_sigmas * sigma)


def sample_policies(rng: np.random.Generator, n: int) -> list:
    pts = rng.random((n, 2))
    return [Policy(float(a), float(b)) for a, b in pts]


def as_reward(values: Sequence[float]) -> RewardVector:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ValueError(f"reward vector must be nonempty and finite, got {values!r}")
    return arr
