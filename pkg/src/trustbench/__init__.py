"""Endorsement-based validation of outsourced simulations, with a hash-chained
ledger and distribution-based detection of anomalous workers."""

from .experiment import ExperimentConfig, execute, run_experiment, sweep_bias, sweep_cost
from .ledger import Ledger, verify_chain
from .stats import ecdf_and_ks, knn_classify, tv_distance
from .surrogate import GroundTruthModel, Policy, SourceSpec, evaluate_true, simulate
from .validation import ToleranceConfig, endorsement_deviation, validate_with_refinement

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "GroundTruthModel",
    "Ledger",
    "Policy",
    "SourceSpec",
    "ToleranceConfig",
    "ecdf_and_ks",
    "endorsement_deviation",
    "evaluate_true",
    "execute",
    "knn_classify",
    "run_experiment",
    "simulate",
    "sweep_bias",
    "sweep_cost",
    "tv_distance",
    "validate_with_refinement",
    "verify_chain",
]
