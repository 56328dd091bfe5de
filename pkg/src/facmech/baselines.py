"""Handcrafted strategyproof rules, the split-median case-study mechanism,
and the exact 1-D weighted k-median oracle that lower-bounds every rule.

The percentile / dictatorial / constant families never read the agent
weights; weights enter only through the social-cost objective when the
best member of a family is selected. Tie-breaking is lexicographic on the
rule's parameter vector everywhere, and the weighted median always returns
the first qualifying point under a stable ascending sort.
"""

from __future__ import annotations

import time
from bisect import bisect_left
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Sequence

import numpy as np

from .domain import Dataset
from .fitness import MechanismEvaluator

# Instances larger than this switch to the numpy-vectorized k-median DP.
_VECTOR_THRESHOLD = 64


def weighted_median(points: Sequence[float], weights: Sequence[float]) -> float:
    """First point (sorted ascending) whose cumulative weight reaches half.

    Stable sort on the point values; ties between equal points keep input
    order, so the result is always one of the inputs.
    """
    if not points:
        raise ValueError("weighted_median needs at least one point")
    if len(points) != len(weights):
        raise ValueError("points and weights must have equal length")
    pairs = sorted(zip(points, weights), key=lambda pw: pw[0])
    total = sum(w for _, w in pairs)
    cum = 0.0
    for p, w in pairs:
        cum += w
        if cum >= total / 2:
            return p
    return pairs[-1][0]


def median_rule(peaks: Sequence[float], weights: Sequence[float], k: int = 1) -> list[float]:
    """Weighted median of the reports; defined for a single facility only."""
    if k != 1:
        raise ValueError("median rule places exactly one facility")
    return [weighted_median(peaks, weights)]


@dataclass(frozen=True)
class PercentileRule:
    """Places facilities at fixed order statistics of the sorted reports."""

    indices: tuple[int, ...]

    def __post_init__(self):
        if not self.indices:
            raise ValueError("percentile rule needs at least one index")
        if any(i < 0 for i in self.indices):
            raise ValueError("order-statistic indices must be >= 0")
        if list(self.indices) != sorted(self.indices):
            raise ValueError("order-statistic indices must be non-decreasing")

    @property
    def ident(self) -> str:
        return "percentile:" + ",".join(str(i) for i in self.indices)


def apply_percentile(rule: PercentileRule, peaks: Sequence[float]) -> list[float]:
    if max(rule.indices) >= len(peaks):
        raise ValueError(f"order-statistic index {max(rule.indices)} out of range for n={len(peaks)}")
    ordered = sorted(peaks)
    return [ordered[i] for i in rule.indices]


@dataclass(frozen=True)
class DictatorialRule:
    """Places facilities at the reports of fixed agent identities."""

    agents: tuple[int, ...]

    def __post_init__(self):
        if not self.agents:
            raise ValueError("dictatorial rule needs at least one agent")
        if any(a < 0 for a in self.agents):
            raise ValueError("agent identities must be >= 0")

    @property
    def ident(self) -> str:
        return "dictator:" + ",".join(str(a) for a in self.agents)


def apply_dictatorial(rule: DictatorialRule, peaks: Sequence[float]) -> list[float]:
    if max(rule.agents) >= len(peaks):
        raise ValueError(f"agent identity {max(rule.agents)} out of range for n={len(peaks)}")
    return [peaks[a] for a in rule.agents]


@dataclass(frozen=True)
class ConstantRule:
    """Places facilities at fixed report-independent locations."""

    locations: tuple[float, ...]

    def __post_init__(self):
        if not self.locations:
            raise ValueError("constant rule needs at least one location")
        if any(not 0.0 <= x <= 1.0 for x in self.locations):
            raise ValueError("constant locations must lie in [0, 1]")

    @property
    def ident(self) -> str:
        return "constant:" + ",".join(repr(float(x)) for x in self.locations)


def apply_constant(rule: ConstantRule, peaks: Sequence[float]) -> list[float]:
    return list(rule.locations)


def _family_train_cost(train: Dataset, outputs: np.ndarray) -> float:
    """Weighted train cost of per-sample outputs, vectorized over samples."""
    peaks = train.peaks
    w = np.asarray(train.setting.weights)
    dist = np.abs(outputs[:, None, :] - peaks[:, :, None]).min(axis=2)
    return float((dist * w).sum() / (peaks.shape[0] * w.sum()))


def best_percentile(train: Dataset) -> PercentileRule:
    """Exhaustive search over all non-decreasing order-statistic multisets.

    Parameterizing by indices instead of real percentiles makes the search
    exact and finite while covering the same outcome family. Ties go to the
    lexicographically smallest index vector.
    """
    n, k = train.setting.n, train.setting.k
    sorted_peaks = np.sort(train.peaks, axis=1)
    best_cost = float("inf")
    best_idx: tuple[int, ...] | None = None
    for idx in combinations_with_replacement(range(n), k):
        cost = _family_train_cost(train, sorted_peaks[:, idx])
        if cost < best_cost:
            best_cost = cost
            best_idx = idx
    return PercentileRule(best_idx)


def best_dictatorial(train: Dataset) -> DictatorialRule:
    """Exhaustive search over agent-identity multisets (unsorted reports)."""
    n, k = train.setting.n, train.setting.k
    best_cost = float("inf")
    best_agents: tuple[int, ...] | None = None
    for agents in combinations_with_replacement(range(n), k):
        cost = _family_train_cost(train, train.peaks[:, agents])
        if cost < best_cost:
            best_cost = cost
            best_agents = agents
    return DictatorialRule(best_agents)


def best_constant(train: Dataset) -> ConstantRule:
    """Exact optimum over fixed placements via k-median on the pooled peaks.

    Every training peak enters the pool carrying its agent's weight; the
    pooled optimum is the empirical-distribution optimum for any
    report-independent rule.
    """
    peaks = train.peaks
    r, n = peaks.shape
    pooled = peaks.ravel().tolist()
    pooled_w = list(train.setting.weights) * r
    solution = kmedian_1d(pooled, pooled_w, train.setting.k)
    return ConstantRule(tuple(solution.locations))


@dataclass(frozen=True)
class KMedianSolution:
    """Optimal facility placement for one weighted instance.

    ``cost`` is the raw weighted sum of distances (no normalization);
    ``boundaries`` lists the (start, end) index ranges of the clusters over
    the sorted points. Facilities sit at weighted medians of their cluster,
    so they always coincide with input points.
    """

    locations: tuple[float, ...]
    cost: float
    boundaries: tuple[tuple[int, int], ...]


def _segment_median_index(prefw: Sequence[float], a: int, b: int) -> int:
    """Index of the weighted median of sorted points a..b (inclusive)."""
    target = prefw[a] + (prefw[b + 1] - prefw[a]) / 2.0
    return bisect_left(prefw, target, a + 1, b + 1) - 1


def _segment_cost(p, prefw, prefs, a: int, b: int, m: int) -> float:
    left = p[m] * (prefw[m + 1] - prefw[a]) - (prefs[m + 1] - prefs[a])
    right = (prefs[b + 1] - prefs[m + 1]) - p[m] * (prefw[b + 1] - prefw[m + 1])
    return left + right


def _kmedian_dp_small(p, prefw, prefs, m: int, k: int):
    inf = float("inf")
    seg = [[0.0] * m for _ in range(m)]
    for a in range(m):
        for b in range(a, m):
            mid = _segment_median_index(prefw, a, b)
            seg[a][b] = _segment_cost(p, prefw, prefs, a, b, mid)
    best = [[inf] * (m + 1) for _ in range(k + 1)]
    opt = [[-1] * (m + 1) for _ in range(k + 1)]
    best[0][0] = 0.0
    for kk in range(1, k + 1):
        prev = best[kk - 1]
        for i in range(kk, m + 1):
            b_val = inf
            b_arg = -1
            for j in range(kk - 1, i):
                v = prev[j] + seg[j][i - 1]
                if v < b_val:
                    b_val = v
                    b_arg = j
            best[kk][i] = b_val
            opt[kk][i] = b_arg
    return opt


def _kmedian_dp_vector(p, prefw, prefs, m: int, k: int):
    inf = float("inf")
    p_arr = np.asarray(p)
    pw = np.asarray(prefw)
    ps = np.asarray(prefs)
    best = np.full((k + 1, m + 1), inf)
    opt = np.full((k + 1, m + 1), -1, dtype=np.int64)
    best[0][0] = 0.0
    for kk in range(1, k + 1):
        prev = best[kk - 1]
        for i in range(kk, m + 1):
            js = np.arange(kk - 1, i)
            target = pw[js] + (pw[i] - pw[js]) / 2.0
            med = np.searchsorted(pw, target, side="left")
            pm = p_arr[med - 1]
            seg = pm * (pw[med] - pw[js]) - (ps[med] - ps[js]) \
                + (ps[i] - ps[med]) - pm * (pw[i] - pw[med])
            vals = prev[js] + seg
            arg = int(np.argmin(vals))
            best[kk][i] = vals[arg]
            opt[kk][i] = kk - 1 + arg
    return opt


def kmedian_1d(points: Sequence[float], weights: Sequence[float], k: int) -> KMedianSolution:
    """Exact weighted k-median on the line.

    Dynamic program over contiguous clusters of the sorted points; within a
    cluster the best facility is the weighted median. Cost ties break toward
    the earlier split, and the reported cost is recomputed directly from the
    chosen locations in the original input order.
    """
    if k < 1:
        raise ValueError("need at least one facility")
    if not points:
        raise ValueError("need at least one point")
    if len(points) != len(weights):
        raise ValueError("points and weights must have equal length")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")

    order = sorted(range(len(points)), key=lambda i: points[i])
    p = [float(points[i]) for i in order]
    w = [float(weights[i]) for i in order]
    m = len(p)
    keff = min(k, m)

    prefw = [0.0] * (m + 1)
    prefs = [0.0] * (m + 1)
    for i in range(m):
        prefw[i + 1] = prefw[i] + w[i]
        prefs[i + 1] = prefs[i] + w[i] * p[i]

    if m <= _VECTOR_THRESHOLD:
        opt = _kmedian_dp_small(p, prefw, prefs, m, keff)
    else:
        opt = _kmedian_dp_vector(p, prefw, prefs, m, keff)

    boundaries: list[tuple[int, int]] = []
    locations: list[float] = []
    i = m
    for kk in range(keff, 0, -1):
        j = int(opt[kk][i])
        boundaries.append((j, i - 1))
        locations.append(p[_segment_median_index(prefw, j, i - 1)])
        i = j
    boundaries.reverse()
    locations.reverse()
    while len(locations) < k:
        locations.append(locations[-1])

    cost = 0.0
    for idx in range(len(points)):
        cost += weights[idx] * min(abs(x - points[idx]) for x in locations)
    return KMedianSolution(tuple(locations), cost, tuple(boundaries))


def nonsp_cost(dataset: Dataset) -> float:
    """Average per-sample optimum: the incentive-free lower bound.

    Solves the exact weighted k-median for every sample and averages the
    normalized costs, so no mechanism can beat this number on the dataset.
    """
    setting = dataset.setting
    total_w = sum(setting.weights)
    total = 0.0
    for j in range(setting.r):
        sol = kmedian_1d(dataset.peaks[j].tolist(), setting.weights, setting.k)
        total += sol.cost / total_w
    return total / setting.r


def case_study_mechanism(peaks: Sequence[float], weights: Sequence[float], k: int = 2) -> list[float]:
    """Split-median rule: sort reports, halve, take each half's weighted median.

    Pairs (peak, weight) sort lexicographically (weight breaks peak ties),
    which keeps the output invariant under permuting agents together with
    their weights.
    """
    if k != 2:
        raise ValueError("the split-median rule places exactly two facilities")
    if len(peaks) < 2:
        raise ValueError("the split-median rule needs at least two agents")
    pairs = sorted(zip(peaks, weights))
    mid = len(pairs) // 2
    return [_group_weighted_median(pairs[:mid]), _group_weighted_median(pairs[mid:])]


def _group_weighted_median(group):
    total = sum(weight for _, weight in group)
    cum = 0.0
    for sample, weight in group:
        cum += weight
        if cum >= total / 2:
            return sample
    return group[-1][0]


class BuiltinEvaluator(MechanismEvaluator):
    """Adapts a plain rule function to the evaluator contract."""

    def __init__(self, ident: str, fn: Callable[[Sequence[float], Sequence[float], int], list[float]]):
        self.ident = ident
        self._fn = fn

    def locations(self, peaks, weights, k):
        return self._fn(peaks, weights, k)


def _parse_numbers(text: str, cast) -> tuple:
    try:
        return tuple(cast(v) for v in text.split(","))
    except ValueError as exc:
        raise ValueError(f"malformed rule parameters {text!r}: {exc}") from None


def builtin_evaluator(ident: str) -> BuiltinEvaluator:
    """Resolve a string identifier to a ready-to-run evaluator.

    Identifiers: ``median``, ``case-study``, ``percentile:1,3``,
    ``dictator:0,4``, ``constant:0.25,0.75``, plus the pathological probes
    ``sleep:<seconds>`` and ``bad-range`` used to exercise host-side
    timeout and validation handling.
    """
    name, _, args = ident.partition(":")
    name = name.strip().lower()
    if name == "median":
        return BuiltinEvaluator(ident, median_rule)
    if name == "case-study":
        return BuiltinEvaluator(ident, case_study_mechanism)
    if name == "percentile":
        rule = PercentileRule(_parse_numbers(args, int))
        return BuiltinEvaluator(ident, lambda peaks, weights, k, _r=rule: _apply_sized(_r, peaks, k, apply_percentile))
    if name == "dictator":
        rule = DictatorialRule(_parse_numbers(args, int))
        return BuiltinEvaluator(ident, lambda peaks, weights, k, _r=rule: _apply_sized(_r, peaks, k, apply_dictatorial))
    if name == "constant":
        rule = ConstantRule(_parse_numbers(args, float))
        return BuiltinEvaluator(ident, lambda peaks, weights, k, _r=rule: _apply_sized(_r, peaks, k, apply_constant))
    if name == "sleep":
        delay = float(args) if args else 3600.0
        def _sleepy(peaks, weights, k, _d=delay):
            time.sleep(_d)
            return [0.5] * k
        return BuiltinEvaluator(ident, _sleepy)
    if name == "bad-range":
        return BuiltinEvaluator(ident, lambda peaks, weights, k: [1.5] * k)
    raise ValueError(f"unknown builtin mechanism: {ident!r}")


def _apply_sized(rule, peaks, k, apply_fn):
    out = apply_fn(rule, peaks)
    if len(out) != k:
        raise ValueError(f"rule {rule} places {len(out)} facilities but K={k}")
    return out


def builtin_source(ident: str) -> str:
    """Template-shaped source listing for a builtin, for display in prompts."""
    if ident == "median":
        return MEDIAN_RULE_SOURCE
    raise ValueError(f"no source listing for builtin {ident!r}")


MEDIAN_RULE_SOURCE = '''def get_locations(samples):
    ordered = sorted(samples)
    total = len(ordered)
    cum = 0
    for value in ordered:
        cum += 1
        if cum >= total / 2:
            return [value]
    return [ordered[-1]]
'''
