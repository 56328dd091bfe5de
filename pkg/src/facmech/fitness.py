"""Agent costs, weighted social cost, empirical misreport regret, and the
fitness functional used to rank facility-location mechanisms.

A mechanism is anything satisfying the :class:`MechanismEvaluator` contract:
given one row of reported peaks plus the agent weights and the facility
count, it returns K locations in [0, 1]. Scoring a mechanism on a dataset
costs exactly R * (1 + n * M) invocations: one truthful call per sample and
one call per (sample, agent, misreport) substitution. An agent's cost after
misreporting is always measured at its true peak.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

from .domain import Dataset


class EvaluatorFailure(Exception):
    """A mechanism invocation failed (crash, timeout, or bad output).

    Carries the (sample, agent, misreport) coordinates of the offending
    invocation when they are known.
    """

    def __init__(self, kind: str, message: str, sample: int | None = None,
                 agent: int | None = None, misreport: int | None = None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message
        self.sample = sample
        self.agent = agent
        self.misreport = misreport


class MechanismEvaluator:
    """Callable contract for mechanisms under evaluation.

    ``concurrency`` declares whether the evaluator tolerates concurrent
    invocations ("concurrent") or must be called from one thread at a time
    ("serial"); the scoring engine honors the declaration by reducing
    serially either way.
    """

    concurrency = "serial"

    def locations(self, peaks: Sequence[float], weights: Sequence[float], k: int) -> list[float]:
        raise NotImplementedError

    def locations_batch(self, rows: Sequence[Sequence[float]],
                        weights: Sequence[float], k: int) -> list[list[float]]:
        """Answer many invocations at once; the default just loops."""
        return [self.locations(row, weights, k) for row in rows]

    def close(self) -> None:
        """Release any resources (subprocess runners override this)."""


@dataclass
class FailureInfo:
    kind: str
    message: str
    sample: int | None = None
    agent: int | None = None
    misreport: int | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "message": self.message, "sample": self.sample,
                "agent": self.agent, "misreport": self.misreport}

    @classmethod
    def from_failure(cls, exc: EvaluatorFailure) -> "FailureInfo":
        return cls(kind=exc.kind, message=exc.message, sample=exc.sample,
                   agent=exc.agent, misreport=exc.misreport)


@dataclass
class FitnessReport:
    """Scoring outcome for one mechanism on one dataset.

    ``fitness`` is the weighted social cost plus a unit penalty whenever the
    max regret exceeds the setting's epsilon. Failed evaluations carry the
    +inf sentinel so they sort behind every healthy candidate.
    """

    social_cost: float
    regret_per_agent: tuple[float, ...]
    max_regret: float
    penalized: bool
    fitness: float
    eval_wall_time: float = 0.0
    failure: FailureInfo | None = None

    @property
    def failed(self) -> bool:
        return self.failure is not None

    def to_dict(self) -> dict:
        return {
            "social_cost": self.social_cost,
            "regret_per_agent": list(self.regret_per_agent),
            "max_regret": self.max_regret,
            "penalized": self.penalized,
            "fitness": self.fitness,
            "eval_wall_time": self.eval_wall_time,
            "failure": self.failure.to_dict() if self.failure else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitnessReport":
        failure = data.get("failure")
        return cls(
            social_cost=float(data["social_cost"]),
            regret_per_agent=tuple(float(v) for v in data["regret_per_agent"]),
            max_regret=float(data["max_regret"]),
            penalized=bool(data["penalized"]),
            fitness=float(data["fitness"]),
            eval_wall_time=float(data.get("eval_wall_time", 0.0)),
            failure=FailureInfo(**failure) if failure else None,
        )

    @classmethod
    def from_failure(cls, exc: EvaluatorFailure, wall_time: float = 0.0) -> "FitnessReport":
        inf = float("inf")
        return cls(social_cost=inf, regret_per_agent=(), max_regret=inf,
                   penalized=True, fitness=inf, eval_wall_time=wall_time,
                   failure=FailureInfo.from_failure(exc))


def agent_cost(peak: float, locations: Sequence[float]) -> float:
    """Distance from a peak to its nearest facility."""
    if not locations:
        raise ValueError("at least one facility location is required")
    return min(abs(x - peak) for x in locations)


def social_cost(dataset: Dataset, outputs: Sequence[Sequence[float]],
                weights: Sequence[float] | None = None) -> float:
    """Weighted social cost of per-sample facility placements.

    ``outputs`` holds one row of K locations per sample. The result is
    normalized by the total weight, so it always lies in [0, 1].
    """
    peaks = dataset.peaks
    r, n = peaks.shape
    if len(outputs) != r:
        raise ValueError(f"need one output row per sample: {len(outputs)} != {r}")
    if weights is None:
        weights = dataset.setting.weights
    if len(weights) != n:
        raise ValueError("weights length must equal agent count")
    total = 0.0
    for j in range(r):
        row = peaks[j]
        out = outputs[j]
        for i in range(n):
            total += weights[i] * agent_cost(row[i], out)
    return total / (r * sum(weights))


def theta(max_regret: float, epsilon: float) -> int:
    """Unit penalty indicator: 1 iff max regret strictly exceeds epsilon."""
    if max_regret < 0 or epsilon < 0:
        raise ValueError("max_regret and epsilon must be non-negative")
    return 1 if max_regret > epsilon else 0


def _validate_output(out, k: int, *, sample=None, agent=None, misreport=None) -> list[float]:
    coords = {"sample": sample, "agent": agent, "misreport": misreport}
    try:
        locations = [float(v) for v in out]
    except (TypeError, ValueError) as exc:
        raise EvaluatorFailure("shape", f"output is not a sequence of numbers: {exc}", **coords)
    if len(locations) != k:
        raise EvaluatorFailure("shape", f"expected {k} locations, got {len(locations)}", **coords)
    for v in locations:
        if not math.isfinite(v) or v < 0.0 or v > 1.0:
            raise EvaluatorFailure("range", f"location {v!r} outside [0, 1]", **coords)
    return locations


def _full_pass(dataset: Dataset, evaluator: MechanismEvaluator):
    """One complete scoring pass: social cost and per-agent regret.

    All R * (1 + n * M) invocations go through a single batch so subprocess
    runners can amortize their round trips. Misreported profiles reuse the
    truthful row with one coordinate substituted, unsorted, exactly as the
    mechanism would see raw reports.
    """
    setting = dataset.setting
    r, n, m = setting.r, setting.n, setting.m
    k = setting.k
    weights = list(setting.weights)
    peaks = dataset.peaks
    mis = dataset.misreports

    rows: list[list[float]] = [peaks[j].tolist() for j in range(r)]
    for j in range(r):
        truthful = rows[j]
        for i in range(n):
            for t in range(m):
                row = list(truthful)
                row[i] = float(mis[j, i, t])
                rows.append(row)

    outs = evaluator.locations_batch(rows, weights, k)
    if len(outs) != len(rows):
        raise EvaluatorFailure("protocol", f"{len(outs)} outputs for {len(rows)} invocations")

    truthful_outs = [_validate_output(outs[j], k, sample=j) for j in range(r)]

    cost_total = 0.0
    base_costs = []
    for j in range(r):
        row = rows[j]
        out = truthful_outs[j]
        per_agent = [min(abs(x - row[i]) for x in out) for i in range(n)]
        base_costs.append(per_agent)
        for i in range(n):
            cost_total += weights[i] * per_agent[i]
    sc = cost_total / (r * sum(weights))

    regret = [0.0] * n
    pos = r
    for j in range(r):
        true_row = rows[j]
        for i in range(n):
            best_gain = 0.0
            for t in range(m):
                out = _validate_output(outs[pos], k, sample=j, agent=i, misreport=t)
                pos += 1
                cost_after = min(abs(x - true_row[i]) for x in out)
                gain = base_costs[j][i] - cost_after
                if gain > best_gain:
                    best_gain = gain
            regret[i] += best_gain
    regret = [v / r for v in regret]
    return sc, tuple(regret)


def empirical_regret(dataset: Dataset, evaluator: MechanismEvaluator) -> tuple[float, ...]:
    """Per-agent average best misreporting gain over the sampled misreports."""
    if dataset.setting.m < 1:
        raise ValueError("empirical regret needs at least one misreport per agent")
    _, regret = _full_pass(dataset, evaluator)
    return regret


def evaluate_fitness(dataset: Dataset, evaluator: MechanismEvaluator) -> FitnessReport:
    """Score a mechanism: social cost plus the strategyproofness penalty.

    Evaluator crashes, timeouts, and contract violations produce a report
    with ``failure`` set and the +inf fitness sentinel instead of raising.
    """
    if dataset.setting.m < 1:
        raise ValueError("fitness evaluation needs at least one misreport per agent")
    start = time.perf_counter()
    try:
        sc, regret = _full_pass(dataset, evaluator)
    except EvaluatorFailure as exc:
        return FitnessReport.from_failure(exc, wall_time=time.perf_counter() - start)
    max_regret = max(regret)
    penalized = theta(max_regret, dataset.setting.epsilon) == 1
    return FitnessReport(
        social_cost=sc,
        regret_per_agent=regret,
        max_regret=max_regret,
        penalized=penalized,
        fitness=sc + (1.0 if penalized else 0.0),
        eval_wall_time=time.perf_counter() - start,
    )


@dataclass
class AuditReport:
    """Worst misreporting gain found by an exhaustive grid sweep."""

    grid_resolution: int
    worst_gain: float
    worst_sample: int | None = None
    worst_agent: int | None = None
    worst_misreport: float | None = None
    per_agent_gain: tuple[float, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "grid_resolution": self.grid_resolution,
            "worst_gain": self.worst_gain,
            "worst_sample": self.worst_sample,
            "worst_agent": self.worst_agent,
            "worst_misreport": self.worst_misreport,
            "per_agent_gain": list(self.per_agent_gain),
        }


def grid_audit(dataset: Dataset, evaluator: MechanismEvaluator, grid_resolution: int) -> AuditReport:
    """Sweep every agent's report over the grid {0, 1/G, ..., 1}.

    Replaces the sampled misreports with a deterministic grid and reports
    the worst (sample, agent, misreport) triple with its gain. A zero worst
    gain means no grid deviation ever helped.
    """
    if grid_resolution < 1:
        raise ValueError("grid resolution must be >= 1")
    setting = dataset.setting
    r, n, k = setting.r, setting.n, setting.k
    weights = list(setting.weights)
    grid = [g / grid_resolution for g in range(grid_resolution + 1)]

    rows: list[list[float]] = [dataset.peaks[j].tolist() for j in range(r)]
    for j in range(r):
        truthful = rows[j]
        for i in range(n):
            for g in grid:
                row = list(truthful)
                row[i] = g
                rows.append(row)

    outs = evaluator.locations_batch(rows, weights, k)
    truthful_outs = [_validate_output(outs[j], k, sample=j) for j in range(r)]

    per_agent = [0.0] * n
    worst = AuditReport(grid_resolution=grid_resolution, worst_gain=0.0)
    pos = r
    for j in range(r):
        row = rows[j]
        base = [min(abs(x - row[i]) for x in truthful_outs[j]) for i in range(n)]
        for i in range(n):
            for g in grid:
                out = _validate_output(outs[pos], k, sample=j, agent=i)
                pos += 1
                gain = base[i] - min(abs(x - row[i]) for x in out)
                if gain > per_agent[i]:
                    per_agent[i] = gain
                if gain > worst.worst_gain:
                    worst.worst_gain = gain
                    worst.worst_sample = j
                    worst.worst_agent = i
                    worst.worst_misreport = g
    worst.per_agent_gain = tuple(per_agent)
    return worst
