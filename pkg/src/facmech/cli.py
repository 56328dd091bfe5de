"""Operator command line: dataset generation, mechanism evaluation,
baseline benchmarking, evolution runs, regret audits, and report plots.

Exit codes: 0 success, 2 configuration error, 3 evaluation failure,
4 backend failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import baselines, domain, evolution, llm, sandbox
from .fitness import evaluate_fitness, grid_audit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EVAL = 3
EXIT_BACKEND = 4

BENCH_COLUMNS = ("percentile", "dictatorial", "constant", "median", "case-study")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_weights(text: str | None, n: int) -> tuple[float, ...]:
    """Weights flag: "5,1,1,1,1", "arbitrary:<n>:<index>" or empty for all-ones."""
    if not text:
        return (1.0,) * n
    if text.startswith("arbitrary:"):
        _, n_text, idx_text = text.split(":")
        sets = domain.arbitrary_weight_sets(int(n_text))
        return sets[int(idx_text)]
    return tuple(float(w) for w in text.split(","))


def _load_dataset(path: str) -> domain.Dataset:
    try:
        return domain.load_dataset(path)
    except domain.DatasetError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def cmd_gen_data(args) -> int:
    try:
        dist = domain.DistributionSpec.parse(args.distribution)
        weights = _parse_weights(args.weights, args.n)
        setting = domain.ProblemSetting(n=args.n, k=args.k, weights=weights,
                                        distribution=dist, epsilon=args.epsilon,
                                        r=args.r, m=args.m)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    dataset = domain.generate_dataset(setting, args.seed)
    domain.save_dataset(dataset, args.out)
    print(f"wrote {args.out}: R={setting.r} n={setting.n} M={setting.m} "
          f"dist={args.distribution} seed={args.seed}")
    return EXIT_OK


def _make_evaluator(args, dataset: domain.Dataset):
    """Evaluator from --mechanism or --code, in-process or via the protocol."""
    via = getattr(args, "via", "inprocess")
    budget = getattr(args, "timeout", None) or sandbox.DEFAULT_EVAL_BUDGET
    if args.code:
        source = Path(args.code).read_text(encoding="utf-8")
        if via == "inprocess":
            raise CliError(EXIT_CONFIG, "candidate code only runs via the protocol; use --via protocol")
        try:
            return sandbox.spawn_evaluator("external-code", source, budget=budget)
        except sandbox.SpawnError as exc:
            raise CliError(EXIT_EVAL, f"runner spawn failed: {exc}") from exc
    try:
        if via == "protocol":
            return sandbox.spawn_evaluator("builtin", args.mechanism, budget=budget)
        return baselines.builtin_evaluator(args.mechanism)
    except sandbox.SpawnError as exc:
        raise CliError(EXIT_EVAL, f"runner spawn failed: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.dataset)
    evaluator = _make_evaluator(args, dataset)
    try:
        try:
            report = evaluate_fitness(dataset, evaluator)
        except ValueError as exc:
            raise CliError(EXIT_EVAL, str(exc)) from exc
    finally:
        evaluator.close()
    payload = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    print(payload)
    return EXIT_EVAL if report.failed else EXIT_OK


def _fit_rules(train: domain.Dataset, which: list[str]) -> dict:
    """Fit the requested rule families on the training set."""
    setting = train.setting
    fitted = {}
    for name in which:
        if name == "percentile":
            fitted[name] = baselines.best_percentile(train).ident
        elif name == "dictatorial":
            fitted[name] = baselines.best_dictatorial(train).ident
        elif name == "constant":
            fitted[name] = baselines.best_constant(train).ident
        elif name == "median":
            if setting.k != 1:
                continue
            fitted[name] = "median"
        elif name == "case-study":
            if setting.k != 2 or setting.n < 2:
                continue
            fitted[name] = "case-study"
        else:
            raise CliError(EXIT_CONFIG, f"unknown baseline {name!r}")
    return fitted


def cmd_bench(args) -> int:
    if len(args.train) != len(args.test):
        raise CliError(EXIT_CONFIG, "--train and --test must be paired")
    which = [w.strip() for w in args.baselines.split(",") if w.strip()]
    rows = []
    for train_path, test_path in zip(args.train, args.test):
        train = _load_dataset(train_path)
        test = _load_dataset(test_path)
        if train.setting != test.setting:
            raise CliError(EXIT_CONFIG,
                           f"train/test settings differ for {train_path} vs {test_path}")
        setting = test.setting
        fitted = _fit_rules(train, which)
        dist = setting.distribution.to_dict()["kind"]
        nonsp = baselines.nonsp_cost(test)
        for name, ident in fitted.items():
            evaluator = baselines.builtin_evaluator(ident)
            report = evaluate_fitness(test, evaluator)
            if report.failed:
                raise CliError(EXIT_EVAL, f"evaluation of {ident} failed: {report.failure.kind}")
            if nonsp > report.social_cost + 1e-12:
                raise CliError(EXIT_EVAL,
                               f"oracle bound violated: NonSP {nonsp} > {name} {report.social_cost}")
            # regret is reported on both misreport sets; which one published
            # tables use is ambiguous, so the CSV carries the pair
            train_report = evaluate_fitness(train, evaluator)
            rows.append({
                "distribution": dist, "K": setting.k, "n": setting.n,
                "epsilon": setting.epsilon,
                "weights": llm.format_weights(setting.weights),
                "seed": test.seed, "mechanism": name, "rule": ident,
                "social_cost": report.social_cost, "max_regret": report.max_regret,
                "train_max_regret": train_report.max_regret,
            })
        rows.append({
            "distribution": dist, "K": setting.k, "n": setting.n,
            "epsilon": setting.epsilon,
            "weights": llm.format_weights(setting.weights),
            "seed": test.seed, "mechanism": "nonsp", "rule": "nonsp",
            "social_cost": nonsp, "max_regret": 0.0, "train_max_regret": 0.0,
        })
    _print_bench_table(rows)
    if args.out_csv:
        _write_csv(rows, args.out_csv)
        print(f"wrote {args.out_csv}")
    return EXIT_OK


def _print_bench_table(rows: list[dict]) -> None:
    keys = sorted({(r["distribution"], r["K"]) for r in rows})
    names = []
    for r in rows:
        if r["mechanism"] not in names:
            names.append(r["mechanism"])
    header = ["dist", "K"] + names
    print("  ".join(f"{h:>12}" for h in header))
    for dist, k in keys:
        cells = [f"{dist:>12}", f"{k:>12}"]
        for name in names:
            match = [r for r in rows if r["distribution"] == dist and r["K"] == k
                     and r["mechanism"] == name]
            if match:
                r = match[0]
                text = f"{r['social_cost']:.5f}"
                if r["max_regret"] > 0:
                    text += f" ({r['max_regret']:.5f})"
                cells.append(f"{text:>12}")
            else:
                cells.append(f"{'-':>12}")
        print("  ".join(cells))


def _write_csv(rows: list[dict], path: str) -> None:
    fields = ["distribution", "K", "n", "epsilon", "weights", "seed",
              "mechanism", "rule", "social_cost", "max_regret", "train_max_regret"]
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields, restval="", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def cmd_evolve(args) -> int:
    try:
        config_data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read run config: {exc}") from exc
    try:
        evo_config = evolution.EvolutionConfig.from_dict(config_data.get("evolution", {}))
        backend = llm.backend_from_config(config_data["backend"])
        if "dataset" in config_data:
            dataset = _load_dataset(config_data["dataset"])
        else:
            gen = config_data["generate"]
            setting = domain.ProblemSetting(
                n=int(gen["n"]), k=int(gen["K"]),
                weights=_parse_weights(gen.get("weights"), int(gen["n"])),
                distribution=domain.DistributionSpec.parse(gen["distribution"]),
                epsilon=float(gen.get("epsilon", 0.0)),
                r=int(gen.get("R", 1000)), m=int(gen.get("M", 10)))
            dataset = domain.generate_dataset(setting, int(gen.get("seed", 0)))
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad run config: {exc}") from exc
    if isinstance(backend, llm.RemoteBackend) and not os.environ.get(backend.api_key_env):
        raise CliError(EXIT_BACKEND,
                       f"environment variable {backend.api_key_env} is not set")
    run_dir = Path(args.run_dir)
    try:
        best, state = evolution.evolve(evo_config, dataset, backend, run_dir=run_dir)
    except llm.BackendError as exc:
        raise CliError(EXIT_BACKEND, str(exc)) from exc
    print(f"best mechanism {best.id}: fitness {best.fitness:.6f} "
          f"(generation {best.generation_born})")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_audit(args) -> int:
    dataset = _load_dataset(args.dataset)
    evaluator = _make_evaluator(args, dataset)
    try:
        report = grid_audit(dataset, evaluator, args.grid)
    finally:
        evaluator.close()
    payload = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    print(payload)
    return EXIT_OK


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows: list[dict] = []
    for path in args.csv:
        with open(path, newline="") as handle:
            for row in csv.DictReader(handle):
                row["K"] = int(row["K"])
                row["epsilon"] = float(row["epsilon"])
                row["social_cost"] = float(row["social_cost"])
                row["max_regret"] = float(row["max_regret"])
                rows.append(row)
    if not rows:
        raise CliError(EXIT_CONFIG, "no benchmark rows found")
    reference = args.reference
    names = sorted({r["mechanism"] for r in rows if r["mechanism"] != reference})
    if not any(r["mechanism"] == reference for r in rows):
        raise CliError(EXIT_CONFIG, f"reference mechanism {reference!r} absent from the CSVs")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(rows, str(out_dir / "combined.csv"))

    def row_key(r):
        return (r["distribution"], r["K"], r["epsilon"], r["weights"], r["seed"])

    ref_cost = {row_key(r): r["social_cost"] for r in rows if r["mechanism"] == reference}

    # Boxplot: per mechanism, the spread of social-cost differences vs the reference.
    diffs = {name: [] for name in names}
    for r in rows:
        if r["mechanism"] == reference or row_key(r) not in ref_cost:
            continue
        diffs[r["mechanism"]].append(r["social_cost"] - ref_cost[row_key(r)])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.boxplot([diffs[name] for name in names], tick_labels=names)
    ax.axhline(0.0, linestyle=":", linewidth=1)
    ax.set_ylabel(f"social cost difference vs {reference}")
    fig.tight_layout()
    fig.savefig(out_dir / "net_difference_boxplot.png", dpi=150)
    plt.close(fig)

    # Epsilon sweep: only meaningful when several epsilon values are present.
    epsilons = sorted({r["epsilon"] for r in rows})
    if len(epsilons) > 1:
        fig, ax = plt.subplots(figsize=(7, 4))
        for name in names:
            ys = []
            for eps in epsilons:
                deltas = [r["social_cost"] - ref_cost[row_key(r)] for r in rows
                          if r["mechanism"] == name and r["epsilon"] == eps
                          and row_key(r) in ref_cost]
                ys.append(sum(deltas) / len(deltas) if deltas else float("nan"))
            ax.plot(epsilons, ys, marker="o", label=name)
        ax.set_xlabel("epsilon")
        ax.set_ylabel(f"mean social cost difference vs {reference}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out_dir / "epsilon_sweep.png", dpi=150)
        plt.close(fig)
    print(f"wrote report artifacts to {out_dir}")
    return EXIT_OK


def cmd_runner(args) -> int:
    return sandbox.builtin_runner_main(args.builtin)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facmech",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and store a dataset")
    p.add_argument("--distribution", required=True,
                   help="uniform | normal:MU,SIGMA | beta:A,B | beta1 | beta2")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--r", type=int, default=1000)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--weights", default=None,
                   help='comma list like "5,1,1,1,1", or arbitrary:<n>:<index>')
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("eval", help="score one mechanism on a dataset")
    p.add_argument("--dataset", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--mechanism", help="builtin identifier, e.g. median or percentile:1,3")
    group.add_argument("--code", help="path to candidate source (runs via the protocol)")
    p.add_argument("--via", choices=("inprocess", "protocol"), default="inprocess")
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="fit rule families on train, report on test")
    p.add_argument("--train", action="append", required=True)
    p.add_argument("--test", action="append", required=True)
    p.add_argument("--baselines", default=",".join(BENCH_COLUMNS))
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("evolve", help="run the evolutionary search")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("audit", help="exhaustive misreport grid audit")
    p.add_argument("--dataset", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--mechanism")
    group.add_argument("--code")
    p.add_argument("--via", choices=("inprocess", "protocol"), default="inprocess")
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="plots and combined CSV from bench outputs")
    p.add_argument("--csv", action="append", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("runner", help="serve the wire protocol with a builtin mechanism")
    p.add_argument("--builtin", required=True)
    p.set_defaults(func=cmd_runner)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except llm.BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
