"""Benchmark harness and evolutionary search for multi-facility location
mechanisms on the unit segment."""

from .domain import (
    Dataset,
    DatasetError,
    DistributionSpec,
    ProblemSetting,
    generate_dataset,
    load_dataset,
    sample_misreports,
    sample_peaks,
    save_dataset,
)
from .fitness import (
    AuditReport,
    EvaluatorFailure,
    FitnessReport,
    MechanismEvaluator,
    agent_cost,
    empirical_regret,
    evaluate_fitness,
    grid_audit,
    social_cost,
    theta,
)

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "Dataset",
    "DatasetError",
    "DistributionSpec",
    "EvaluatorFailure",
    "FitnessReport",
    "MechanismEvaluator",
    "ProblemSetting",
    "agent_cost",
    "empirical_regret",
    "evaluate_fitness",
    "generate_dataset",
    "grid_audit",
    "load_dataset",
    "sample_misreports",
    "sample_peaks",
    "save_dataset",
    "social_cost",
    "theta",
]
