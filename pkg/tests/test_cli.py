import csv
import json

import numpy as np
import pytest

from facmech import cli, domain
from facmech.baselines import builtin_evaluator
from facmech.fitness import evaluate_fitness


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture
def small_dataset(tmp_path):
    path = tmp_path / "ds.json"
    rc = run_cli("gen-data", "--distribution", "uniform", "--n", "5", "--k", "1",
                 "--r", "40", "--m", "3", "--seed", "7", "--out", str(path))
    assert rc == cli.EXIT_OK
    return path


def test_gen_data_writes_loadable_dataset(small_dataset):
    ds = domain.load_dataset(small_dataset)
    assert ds.peaks.shape == (40, 5)
    assert ds.misreports.shape == (40, 5, 3)
    assert ds.seed == 7


def test_gen_data_weight_flags(tmp_path):
    path = tmp_path / "w.json"
    rc = run_cli("gen-data", "--distribution", "beta1", "--n", "5", "--k", "2",
                 "--r", "10", "--m", "1", "--weights", "arbitrary:5:3",
                 "--seed", "1", "--out", str(path))
    assert rc == cli.EXIT_OK
    ds = domain.load_dataset(path)
    assert ds.setting.weights == (5.0, 2.0, 1.0, 1.0, 1.0)
    assert ds.setting.distribution == domain.DistributionSpec.make_beta(1, 9)


def test_gen_data_rejects_bad_distribution(tmp_path, capsys):
    rc = run_cli("gen-data", "--distribution", "cauchy", "--n", "3", "--k", "1",
                 "--seed", "1", "--out", str(tmp_path / "x.json"))
    assert rc == cli.EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_eval_matches_library_call(small_dataset, tmp_path, capsys):
    out = tmp_path / "report.json"
    rc = run_cli("eval", "--dataset", str(small_dataset), "--mechanism", "median",
                 "--out", str(out))
    assert rc == cli.EXIT_OK
    report = json.loads(out.read_text())
    reference = evaluate_fitness(domain.load_dataset(small_dataset),
                                 builtin_evaluator("median"))
    assert report["social_cost"] == reference.social_cost
    assert report["max_regret"] == reference.max_regret
    assert report["fitness"] == reference.fitness


def test_eval_via_protocol_matches_in_process(small_dataset, tmp_path):
    out_a = tmp_path / "a.json"
    out_b = tmp_path / "b.json"
    assert run_cli("eval", "--dataset", str(small_dataset), "--mechanism", "median",
                   "--out", str(out_a)) == cli.EXIT_OK
    assert run_cli("eval", "--dataset", str(small_dataset), "--mechanism", "median",
                   "--via", "protocol", "--out", str(out_b)) == cli.EXIT_OK
    a = json.loads(out_a.read_text())
    b = json.loads(out_b.read_text())
    for field in ("social_cost", "regret_per_agent", "max_regret", "penalized", "fitness"):
        assert a[field] == b[field]


def test_eval_unknown_mechanism_is_config_error(small_dataset):
    assert run_cli("eval", "--dataset", str(small_dataset),
                   "--mechanism", "oracle") == cli.EXIT_CONFIG


def test_eval_without_misreports_is_eval_error(tmp_path):
    path = tmp_path / "m0.json"
    run_cli("gen-data", "--distribution", "uniform", "--n", "3", "--k", "1",
            "--r", "10", "--m", "0", "--seed", "2", "--out", str(path))
    assert run_cli("eval", "--dataset", str(path), "--mechanism", "median") == cli.EXIT_EVAL


def test_bench_produces_table_and_csv(tmp_path, capsys):
    train = tmp_path / "train.json"
    test = tmp_path / "test.json"
    for path, seed in ((train, 1), (test, 2)):
        run_cli("gen-data", "--distribution", "uniform", "--n", "5", "--k", "2",
                "--r", "40", "--m", "2", "--weights", "5,1,1,1,1",
                "--seed", str(seed), "--out", str(path))
    out_csv = tmp_path / "bench.csv"
    rc = run_cli("bench", "--train", str(train), "--test", str(test),
                 "--out-csv", str(out_csv))
    assert rc == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert "nonsp" in printed and "percentile" in printed
    with open(out_csv, newline="") as handle:
        rows = list(csv.DictReader(handle))
    names = {row["mechanism"] for row in rows}
    assert {"percentile", "dictatorial", "constant", "case-study", "nonsp"} <= names
    nonsp = min(float(r["social_cost"]) for r in rows if r["mechanism"] == "nonsp")
    assert all(float(r["social_cost"]) >= nonsp - 1e-12 for r in rows)


def test_bench_rejects_mismatched_settings(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    run_cli("gen-data", "--distribution", "uniform", "--n", "5", "--k", "1",
            "--r", "10", "--m", "1", "--seed", "1", "--out", str(a))
    run_cli("gen-data", "--distribution", "uniform", "--n", "5", "--k", "2",
            "--r", "10", "--m", "1", "--seed", "1", "--out", str(b))
    assert run_cli("bench", "--train", str(a), "--test", str(b)) == cli.EXIT_CONFIG


def test_audit_median_grid_finds_nothing(small_dataset, capsys):
    rc = run_cli("audit", "--dataset", str(small_dataset), "--mechanism", "median",
                 "--grid", "60")
    assert rc == cli.EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["worst_gain"] == 0.0


def test_audit_flags_manipulable_mechanism(tmp_path, capsys):
    peaks = [[0.0, 1 / 13, 10 / 13, 11 / 13, 12 / 13, 1.0]]
    mis = [[[p] for p in peaks[0]]]
    setting = domain.ProblemSetting(n=6, k=2, weights=(5, 5, 5, 1, 1, 1),
                                    distribution=domain.DistributionSpec.uniform(),
                                    r=1, m=1)
    ds = domain.Dataset(setting=setting, seed=0, peaks=np.array(peaks),
                        misreports=np.array(mis))
    path = tmp_path / "counter.json"
    domain.save_dataset(ds, path)
    rc = run_cli("audit", "--dataset", str(path), "--mechanism", "case-study",
                 "--grid", "130")
    assert rc == cli.EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["worst_gain"] > 0
    assert report["worst_agent"] == 2


def test_evolve_from_config_file(tmp_path, capsys):
    response = ("{one centered facility} ```python\n"
                "def get_locations(samples):\n    return [0.5]\n```")
    config = {
        "generate": {"n": 3, "K": 1, "distribution": "uniform", "R": 15, "M": 1, "seed": 4},
        "evolution": {"population_size": 4, "generations": 4, "elite_size": 2,
                      "patience": 3, "prompt_capacity": 3, "seed": 9},
        "backend": {"kind": "scripted", "responses": {
            "initialization": [response] * 4,
            "exploration": [response] * 40,
            "modification": [response] * 40,
            "prompt_evolution": ["{probe}"] * 20,
        }},
    }
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps(config))
    run_dir = tmp_path / "run-out"
    rc = run_cli("evolve", "--config", str(config_path), "--run-dir", str(run_dir))
    assert rc == cli.EXIT_OK
    assert (run_dir / "best.json").exists()
    assert (run_dir / "events.jsonl").exists()
    assert "best mechanism" in capsys.readouterr().out
    best = json.loads((run_dir / "best.json").read_text())
    # candidate code runs in the external runner; without one installed every
    # code slot fails and evaluation falls back to nothing better than inf,
    # unless the runner package is present, in which case it actually runs.
    assert best["report"] is not None


def test_evolve_bad_config_is_config_error(tmp_path):
    config_path = tmp_path / "bad.json"
    config_path.write_text("{not json")
    assert run_cli("evolve", "--config", str(config_path),
                   "--run-dir", str(tmp_path / "x")) == cli.EXIT_CONFIG


def test_evolve_missing_key_is_backend_error(tmp_path, monkeypatch):
    monkeypatch.delenv("FACMECH_API_KEY", raising=False)
    config = {
        "generate": {"n": 3, "K": 1, "distribution": "uniform", "R": 10, "M": 1, "seed": 1},
        "evolution": {"population_size": 4, "generations": 4, "elite_size": 2, "patience": 3},
        "backend": {"kind": "remote", "base_url": "http://127.0.0.1:1", "model": "m"},
    }
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps(config))
    assert run_cli("evolve", "--config", str(config_path),
                   "--run-dir", str(tmp_path / "x")) == cli.EXIT_BACKEND


def test_report_emits_plots_and_combined_csv(tmp_path):
    fields = ["distribution", "K", "n", "epsilon", "weights", "seed",
              "mechanism", "rule", "social_cost", "max_regret"]
    rows_by_eps = {
        0.0: [("percentile", 0.085), ("case-study", 0.052), ("nonsp", 0.044)],
        0.001: [("percentile", 0.084), ("case-study", 0.050), ("nonsp", 0.043)],
    }
    paths = []
    for eps, entries in rows_by_eps.items():
        path = tmp_path / f"bench_{eps}.csv"
        with open(path, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=fields)
            writer.writeheader()
            for mech, cost in entries:
                writer.writerow({"distribution": "uniform", "K": 2, "n": 5,
                                 "epsilon": eps, "weights": "[5,1,1,1,1]", "seed": 1,
                                 "mechanism": mech, "rule": mech,
                                 "social_cost": cost, "max_regret": 0.0})
        paths.append(path)
    out_dir = tmp_path / "report"
    rc = run_cli("report", "--csv", str(paths[0]), "--csv", str(paths[1]),
                 "--reference", "case-study", "--out-dir", str(out_dir))
    assert rc == cli.EXIT_OK
    assert (out_dir / "combined.csv").exists()
    assert (out_dir / "net_difference_boxplot.png").stat().st_size > 0
    assert (out_dir / "epsilon_sweep.png").stat().st_size > 0


def test_report_requires_reference_presence(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("distribution,K,n,epsilon,weights,seed,mechanism,rule,social_cost,max_regret\n"
                    'uniform,1,5,0.0,"[1,1,1,1,1]",1,percentile,percentile:2,0.2,0.0\n')
    assert run_cli("report", "--csv", str(path), "--reference", "ghost",
                   "--out-dir", str(tmp_path / "r")) == cli.EXIT_CONFIG
