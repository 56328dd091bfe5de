import itertools
import random

import numpy as np
import pytest

import facmech.baselines as baselines
from conftest import make_dataset, manual_dataset
from facmech.baselines import (
    ConstantRule,
    DictatorialRule,
    PercentileRule,
    apply_constant,
    apply_dictatorial,
    apply_percentile,
    best_constant,
    best_dictatorial,
    best_percentile,
    builtin_evaluator,
    case_study_mechanism,
    kmedian_1d,
    median_rule,
    nonsp_cost,
    weighted_median,
)
from facmech.fitness import empirical_regret, evaluate_fitness, social_cost


def brute_force_kmedian_cost(points, weights, k):
    """Independent oracle: try every contiguous partition of the sorted
    points into at most k clusters, placing each cluster's facility at the
    point that minimizes its weighted cost by direct scan."""
    order = sorted(range(len(points)), key=lambda i: points[i])
    p = [points[i] for i in order]
    w = [weights[i] for i in order]
    m = len(p)

    def cluster_cost(a, b):
        return min(sum(w[i] * abs(p[i] - p[c]) for i in range(a, b + 1))
                   for c in range(a, b + 1))

    k = min(k, m)
    best = float("inf")
    for cuts in itertools.combinations(range(1, m), k - 1):
        edges = [0, *cuts, m]
        cost = sum(cluster_cost(edges[i], edges[i + 1] - 1) for i in range(k))
        best = min(best, cost)
    return best


def test_weighted_median_examples():
    assert weighted_median([0.2, 0.5, 0.9], [1, 1, 1]) == 0.5
    assert weighted_median([0.0, 1 / 13, 10 / 13], [5, 5, 5]) == 1 / 13
    assert weighted_median([0.1, 0.9], [1, 5]) == 0.9
    with pytest.raises(ValueError):
        weighted_median([], [])


def test_median_rule():
    assert median_rule([0.1, 0.4, 0.8], [1, 1, 1]) == [0.4]
    assert median_rule([0.73], [2.0]) == [0.73]
    # heavy agent dominates: first peak whose cumulative weight reaches 4.5
    assert median_rule([0.9, 0.1, 0.2, 0.3, 0.4], [5, 1, 1, 1, 1]) == [0.9]
    with pytest.raises(ValueError):
        median_rule([0.1, 0.2], [1, 1], k=2)


def test_apply_percentile():
    peaks = [0.9, 0.1, 0.5, 0.3, 0.7]
    assert apply_percentile(PercentileRule((0, 4)), peaks) == [0.1, 0.9]
    assert apply_percentile(PercentileRule((1, 3)), peaks) == [0.3, 0.7]
    assert apply_percentile(PercentileRule((2, 2)), peaks) == [0.5, 0.5]
    with pytest.raises(ValueError):
        apply_percentile(PercentileRule((5,)), peaks)
    with pytest.raises(ValueError):
        PercentileRule((3, 1))


def test_apply_dictatorial():
    peaks = [0.9, 0.1, 0.5]
    assert apply_dictatorial(DictatorialRule((0,)), peaks) == [0.9]
    assert apply_dictatorial(DictatorialRule((2, 0)), peaks) == [0.5, 0.9]
    with pytest.raises(ValueError):
        apply_dictatorial(DictatorialRule((3,)), peaks)


def test_constant_rule_validation():
    assert apply_constant(ConstantRule((0.25, 0.75)), [0.1]) == [0.25, 0.75]
    with pytest.raises(ValueError):
        ConstantRule((1.5,))


def test_best_percentile_matches_direct_enumeration():
    train = make_dataset(n=5, k=1, r=200, m=1, seed=51)
    rule = best_percentile(train)
    # oracle: evaluate every single order statistic with the shared cost helper
    costs = {}
    for i in range(5):
        outputs = [apply_percentile(PercentileRule((i,)), row) for row in train.peaks]
        costs[i] = social_cost(train, outputs)
    best_index = min(costs, key=lambda i: (costs[i], i))
    assert rule.indices == (best_index,)
    # unweighted K=1 cost-minimizing order statistic is the middle one
    assert rule.indices == (2,)


def test_best_percentile_full_cover():
    train = make_dataset(n=4, k=4, r=50, m=1, seed=52)
    rule = best_percentile(train)
    assert rule.indices == (0, 1, 2, 3)
    outputs = [apply_percentile(rule, row) for row in train.peaks]
    assert social_cost(train, outputs) == 0.0


def test_best_dictatorial_prefers_heavy_agent():
    train = make_dataset(n=5, k=1, r=400, m=1, weights=(5, 1, 1, 1, 1), seed=53)
    rule = best_dictatorial(train)
    assert rule.agents == (0,)


def test_best_dictatorial_no_better_than_percentile_unweighted():
    train = make_dataset(n=5, k=1, r=500, m=1, seed=54)
    per = best_percentile(train)
    dic = best_dictatorial(train)
    per_cost = social_cost(train, [apply_percentile(per, row) for row in train.peaks])
    dic_cost = social_cost(train, [apply_dictatorial(dic, row) for row in train.peaks])
    assert dic_cost >= per_cost


def test_single_agent_rules():
    train = make_dataset(n=1, k=1, r=20, m=1, seed=55)
    assert best_dictatorial(train).agents == (0,)
    assert best_percentile(train).indices == (0,)


def test_kmedian_examples():
    sol = kmedian_1d([0.1, 0.2, 0.9], [1, 1, 1], 2)
    assert sol.cost == pytest.approx(0.1)
    assert set(sol.locations) == {0.1, 0.9}
    assert kmedian_1d([0.3, 0.7], [1, 1], 5).cost == 0.0
    sol3 = kmedian_1d([0.0, 1.0], [3, 1], 1)
    assert sol3.locations == (0.0,)
    assert sol3.cost == pytest.approx(1.0)


def test_kmedian_matches_brute_force():
    rng = random.Random(77)
    for _ in range(60):
        n = rng.randint(1, 10)
        k = rng.randint(1, 3)
        points = [rng.random() for _ in range(n)]
        weights = [rng.choice([1, 2, 3, 4, 5]) for _ in range(n)]
        sol = kmedian_1d(points, weights, k)
        oracle = brute_force_kmedian_cost(points, weights, k)
        assert sol.cost == pytest.approx(oracle, abs=1e-12)
        assert len(sol.locations) == k


def test_kmedian_vector_path_agrees_with_small_path(monkeypatch):
    rng = random.Random(78)
    points = [rng.random() for _ in range(150)]
    weights = [rng.choice([1, 2, 3]) for _ in range(150)]
    big = kmedian_1d(points, weights, 4)
    monkeypatch.setattr(baselines, "_VECTOR_THRESHOLD", 10_000)
    small = kmedian_1d(points, weights, 4)
    assert big.cost == small.cost
    assert big.locations == small.locations
    assert big.boundaries == small.boundaries


def test_nonsp_equals_weighted_median_cost_at_k1():
    ds = make_dataset(n=5, k=1, r=200, m=1, weights=(5, 1, 1, 1, 1), seed=60)
    outputs = [median_rule(row.tolist(), ds.setting.weights) for row in ds.peaks]
    assert nonsp_cost(ds) == pytest.approx(social_cost(ds, outputs), abs=1e-12)


def test_nonsp_weighted_k4_matches_published_value():
    ds = make_dataset(n=5, k=4, r=1000, m=1, weights=(5, 1, 1, 1, 1), seed=66)
    assert nonsp_cost(ds) == pytest.approx(0.00473, abs=0.005)


def test_nonsp_lower_bounds_every_builtin():
    ds = make_dataset(n=5, k=2, r=80, m=2, weights=(5, 1, 1, 1, 1), seed=61)
    bound = nonsp_cost(ds)
    for ident in ("case-study", "percentile:1,3", "dictator:0,1", "constant:0.3,0.7"):
        report = evaluate_fitness(ds, builtin_evaluator(ident))
        assert bound <= report.social_cost + 1e-12


def test_best_constant_degenerate_and_uniform():
    peaks = np.full((30, 3), 0.3)
    ds = manual_dataset(peaks, np.zeros((30, 3, 1)))
    rule = best_constant(ds)
    assert rule.locations == (0.3, 0.3, 0.3)[:1]
    train = make_dataset(n=5, k=1, r=800, m=1, seed=62)
    rule = best_constant(train)
    assert rule.locations[0] == pytest.approx(0.5, abs=0.05)
    cost = social_cost(train, [apply_constant(rule, row) for row in train.peaks])
    assert cost == pytest.approx(0.25, abs=0.02)
    assert cost >= nonsp_cost(train) - 1e-12


def test_best_rules_beat_random_rules_of_same_family():
    rng = random.Random(63)
    train = make_dataset(n=5, k=2, r=150, m=1, weights=(5, 1, 1, 1, 1), seed=63)

    def train_cost(apply_fn, rule):
        return social_cost(train, [apply_fn(rule, row) for row in train.peaks])

    best_per = train_cost(apply_percentile, best_percentile(train))
    best_dic = train_cost(apply_dictatorial, best_dictatorial(train))
    best_con = train_cost(apply_constant, best_constant(train))
    for _ in range(100):
        per = PercentileRule(tuple(sorted(rng.choices(range(5), k=2))))
        dic = DictatorialRule(tuple(rng.choices(range(5), k=2)))
        con = ConstantRule((rng.random(), rng.random()))
        assert best_per <= train_cost(apply_percentile, per) + 1e-12
        assert best_dic <= train_cost(apply_dictatorial, dic) + 1e-12
        assert best_con <= train_cost(apply_constant, con) + 1e-12


def test_case_study_trace():
    peaks = [0.0, 1 / 13, 10 / 13, 11 / 13, 12 / 13, 1.0]
    weights = [5, 5, 5, 1, 1, 1]
    assert case_study_mechanism(peaks, weights) == [1 / 13, 12 / 13]
    shifted = list(peaks)
    shifted[2] = 11.5 / 13
    assert case_study_mechanism(shifted, weights) == [1 / 13, 11.5 / 13]
    assert case_study_mechanism([0.8, 0.2], [1, 1]) == [0.2, 0.8]
    with pytest.raises(ValueError):
        case_study_mechanism([0.5], [1])
    with pytest.raises(ValueError):
        case_study_mechanism([0.1, 0.2], [1, 1], k=3)


def test_case_study_permutation_covariant():
    rng = random.Random(64)
    for _ in range(50):
        n = rng.randint(2, 8)
        peaks = [rng.random() for _ in range(n)]
        weights = [rng.choice([1, 2, 3, 4, 5]) for _ in range(n)]
        base = case_study_mechanism(peaks, weights)
        perm = list(range(n))
        rng.shuffle(perm)
        permuted = case_study_mechanism([peaks[i] for i in perm], [weights[i] for i in perm])
        assert sorted(base) == sorted(permuted)


def test_strategyproof_family_zero_regret_quick():
    rng = random.Random(65)
    for seed in range(4):
        n = rng.choice([3, 5])
        k = rng.randint(1, min(3, n))
        ds = make_dataset(n=n, k=k, r=25, m=3,
                          weights=tuple(rng.choice([1, 5]) for _ in range(n)), seed=seed)
        rules = [PercentileRule(tuple(sorted(rng.choices(range(n), k=k)))).ident,
                 DictatorialRule(tuple(rng.choices(range(n), k=k))).ident,
                 ConstantRule(tuple(rng.random() for _ in range(k))).ident]
        if k == 1:
            rules.append("median")
        for ident in rules:
            regret = empirical_regret(ds, builtin_evaluator(ident))
            assert regret == (0.0,) * n, f"{ident} leaked regret {regret}"


def test_builtin_registry():
    assert builtin_evaluator("median").locations([0.2, 0.8, 0.5], [1, 1, 1], 1) == [0.5]
    assert builtin_evaluator("percentile:0,2").locations([0.9, 0.1, 0.5], [1, 1, 1], 2) == [0.1, 0.9]
    assert builtin_evaluator("dictator:1").locations([0.9, 0.1], [1, 1], 1) == [0.1]
    assert builtin_evaluator("constant:0.25,0.75").locations([0.4], [1], 2) == [0.25, 0.75]
    assert builtin_evaluator("case-study").locations([0.8, 0.2], [1, 1], 2) == [0.2, 0.8]
    with pytest.raises(ValueError):
        builtin_evaluator("galaxy-brain")
    with pytest.raises(ValueError):
        builtin_evaluator("percentile:one")
    with pytest.raises(ValueError):
        builtin_evaluator("percentile:0,1").locations([0.1, 0.2], [1, 1], 3)
