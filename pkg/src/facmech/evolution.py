"""Elitist mechanism-population search driven by a text-completion backend,
with rank-based selection, stagnation detection, and self-evolving
variation prompts.

Each generation fills N offspring slots, alternating exploration (two
parents) and modification (one parent) round-robin so both prompt kinds
keep producing. The population manager keeps the N best by fitness,
dropping offspring whose source duplicates an already-kept record. When the
top-b fitness multiset survives unchanged for T_p consecutive generations,
the prompt population itself is evolved.

With a scripted backend, an entire run is a pure function of
(config.seed, script): the event log is byte-reproducible.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import llm
from .baselines import builtin_evaluator, builtin_source
from .domain import Dataset
from .fitness import EvaluatorFailure, FitnessReport, MechanismEvaluator, evaluate_fitness

logger = logging.getLogger(__name__)

EXPLORATION = llm.EXPLORATION
MODIFICATION = llm.MODIFICATION

FALLBACK_BUILTIN = "median"


@dataclass
class MechanismRecord:
    """One population member: description, source, lineage, and its score."""

    id: str
    description: str
    source: str
    source_kind: str = "code"  # "code" | "builtin"
    parent_ids: tuple[str, ...] = ()
    prompt_id: str | None = None
    report: FitnessReport | None = None
    generation_born: int = 0

    @property
    def fitness(self) -> float:
        if self.report is None:
            raise ValueError(f"mechanism {self.id} has not been evaluated")
        return self.report.fitness

    def dedup_key(self):
        return (self.source_kind, self.source)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "description": self.description,
            "source": self.source,
            "source_kind": self.source_kind,
            "parent_ids": list(self.parent_ids),
            "prompt_id": self.prompt_id,
            "report": self.report.to_dict() if self.report else None,
            "generation_born": self.generation_born,
        }


@dataclass
class PromptStrategy:
    """A variation prompt plus the fitness ledger of its offspring."""

    id: str
    kind: str
    text: str
    offspring_fitnesses: list[float] = field(default_factory=list)
    created_gen: int = 0

    def fitness(self, top_count: int) -> float | None:
        """Mean of the best ``top_count`` offspring; None until one exists."""
        if not self.offspring_fitnesses:
            return None
        best = sorted(self.offspring_fitnesses)[:top_count]
        return sum(best) / len(best)

    def to_dict(self, top_count: int) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "text": self.text,
            "offspring_fitnesses": list(self.offspring_fitnesses),
            "fitness": self.fitness(top_count),
            "created_gen": self.created_gen,
        }


@dataclass
class EvolutionConfig:
    population_size: int = 16
    generations: int = 20
    elite_size: int = 3
    patience: int = 3
    prompt_top_offspring: int = 3
    prompt_capacity: int = 5
    temperature: float = 1.0
    eval_timeout: float = 60.0
    seed: int = 0
    init_retries: int = 3
    runner_command: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.elite_size >= self.population_size:
            raise ValueError("elite_size must be smaller than population_size")
        if self.patience >= self.generations:
            raise ValueError("patience must be smaller than the generation budget")
        if self.prompt_capacity < 2:
            raise ValueError("prompt_capacity must be at least 2")

    def to_dict(self) -> dict:
        return {
            "population_size": self.population_size,
            "generations": self.generations,
            "elite_size": self.elite_size,
            "patience": self.patience,
            "prompt_top_offspring": self.prompt_top_offspring,
            "prompt_capacity": self.prompt_capacity,
            "temperature": self.temperature,
            "eval_timeout": self.eval_timeout,
            "seed": self.seed,
            "init_retries": self.init_retries,
            "runner_command": list(self.runner_command) if self.runner_command else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvolutionConfig":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {key: value for key, value in data.items() if key in known}
        if kwargs.get("runner_command"):
            kwargs["runner_command"] = tuple(kwargs["runner_command"])
        return cls(**kwargs)


@dataclass
class EvolutionState:
    config: EvolutionConfig
    dataset: Dataset
    mech_population: list[MechanismRecord] = field(default_factory=list)
    prompt_population: list[PromptStrategy] = field(default_factory=list)
    generation: int = 0
    stagnation: int = 0
    elite_snapshot: tuple[float, ...] = ()
    events: list[dict] = field(default_factory=list)
    _next_mech: int = 0
    _next_prompt: int = 0

    def new_mech_id(self) -> str:
        ident = f"m{self._next_mech:04d}"
        self._next_mech += 1
        return ident

    def new_prompt_id(self) -> str:
        ident = f"p{self._next_prompt:04d}"
        self._next_prompt += 1
        return ident

    def log(self, event: str, **fields):
        record = {"gen": self.generation, "event": event}
        record.update(fields)
        self.events.append(record)

    def best(self) -> MechanismRecord:
        return min(self.mech_population, key=lambda rec: rec.fitness)

    def event_log_text(self) -> str:
        return "".join(json.dumps(ev, sort_keys=True) + "\n" for ev in self.events)


def select(population: Sequence, count: int, rng: random.Random) -> list:
    """Rank-weighted draw: probability of rank r is proportional to 1/(r+N).

    ``population`` must already be ranked best-first; every member needs a
    fitness. One call draws without replacement; separate calls draw with
    replacement.
    """
    if not population:
        raise ValueError("cannot select from an empty population")
    if count > len(population):
        raise ValueError(f"cannot draw {count} distinct members from {len(population)}")
    for member in population:
        if isinstance(member, MechanismRecord) and member.report is None:
            raise ValueError(f"mechanism {member.id} lacks a fitness report")
    n = len(population)
    weights = [1.0 / (rank + n) for rank in range(1, n + 1)]
    chosen: list[int] = []
    while len(chosen) < count:
        idx = rng.choices(range(n), weights=weights, k=1)[0]
        if idx not in chosen:
            chosen.append(idx)
    return [population[i] for i in chosen]


def manage_population(parents: Sequence[MechanismRecord],
                      offspring: Sequence[MechanismRecord],
                      capacity: int) -> list[MechanismRecord]:
    """Keep the ``capacity`` best of parents plus offspring.

    Offspring whose source duplicates an already-kept record are dropped
    (they would waste budget and distort selection pressure); parents are
    never dropped by deduplication, so the population can never shrink below
    capacity. Stable sort keeps the older record on fitness ties.
    """
    seen = {rec.dedup_key() for rec in parents}
    merged = list(parents)
    for rec in offspring:
        key = rec.dedup_key()
        if key in seen:
            continue
        seen.add(key)
        merged.append(rec)
    merged.sort(key=lambda rec: rec.fitness)
    return merged[:capacity]


def detect_stagnation(state: EvolutionState, population: Sequence[MechanismRecord]) -> bool:
    """Track how long the top-b fitness multiset has been frozen.

    Increments the counter when the multiset is exactly unchanged, resets it
    otherwise, and returns True once the counter reaches the patience
    threshold. The caller resets the counter after triggering prompt
    evolution.
    """
    b = state.config.elite_size
    top = tuple(sorted(rec.fitness for rec in population[:b]))
    if top == state.elite_snapshot:
        state.stagnation += 1
    else:
        state.elite_snapshot = top
        state.stagnation = 0
    return state.stagnation >= state.config.patience


def default_evaluator_factory(config: EvolutionConfig) -> Callable[[MechanismRecord], MechanismEvaluator]:
    """Builtin records run in-process; candidate code runs in a sandboxed runner."""

    def factory(record: MechanismRecord) -> MechanismEvaluator:
        if record.source_kind == "builtin":
            return builtin_evaluator(record.source)
        from .sandbox import spawn_evaluator
        return spawn_evaluator("external-code", record.source,
                               budget=config.eval_timeout,
                               runner_command=config.runner_command)

    return factory


def _evaluate_record(state: EvolutionState, record: MechanismRecord, factory) -> FitnessReport:
    try:
        evaluator = factory(record)
    except Exception as exc:
        failure = exc if isinstance(exc, EvaluatorFailure) else EvaluatorFailure(
            "spawn", f"{type(exc).__name__}: {exc}")
        return FitnessReport.from_failure(failure)
    try:
        return evaluate_fitness(state.dataset, evaluator)
    finally:
        evaluator.close()


def _prompt_ranked(prompts: Sequence[PromptStrategy], top_count: int) -> list[PromptStrategy]:
    """Prompts best-first; prompts without any valid offspring rank last."""
    def key(pair):
        index, prompt = pair
        fitness = prompt.fitness(top_count)
        return (0, fitness, index) if fitness is not None else (1, 0.0, index)
    return [p for _, p in sorted(enumerate(prompts), key=lambda pair: key(pair))]


def _weighted_or_none(dataset: Dataset):
    setting = dataset.setting
    return setting.weights if setting.weighted else None


def _render_variation(state: EvolutionState, kind: str, strategy_text: str,
                      parents: Sequence[MechanismRecord]) -> str:
    weights = _weighted_or_none(state.dataset)
    k = state.dataset.setting.k

    def code_of(record: MechanismRecord) -> str:
        if record.source_kind == "builtin":
            return builtin_source(record.source)
        return record.source

    if kind == EXPLORATION:
        return llm.render(EXPLORATION, k=k, weights=weights, strategy=strategy_text,
                          parents=[(rec.description, code_of(rec)) for rec in parents])
    parent = parents[0]
    return llm.render(MODIFICATION, k=k, weights=weights, strategy=strategy_text,
                      parent=(parent.description, code_of(parent)),
                      fitness=parent.fitness)


def _spawn_offspring(state: EvolutionState, kind: str, prompt: PromptStrategy,
                     backend, factory, rng: random.Random,
                     *, count_for_prompt: bool = True) -> MechanismRecord:
    """One variation step: select parents, prompt the backend, parse, score.

    Raises llm.BackendError / llm.ParseError when no offspring results.
    """
    parent_count = 2 if kind == EXPLORATION else 1
    parents = select(state.mech_population, parent_count, rng)
    prompt_text = _render_variation(state, kind, prompt.text, parents)
    response = backend.complete(prompt_text, temperature=state.config.temperature, kind=kind)
    parsed = llm.parse_response(response)
    record = MechanismRecord(
        id=state.new_mech_id(),
        description=parsed.description,
        source=parsed.code,
        parent_ids=tuple(rec.id for rec in parents),
        prompt_id=prompt.id,
        generation_born=state.generation,
    )
    record.report = _evaluate_record(state, record, factory)
    if count_for_prompt and not record.report.failed:
        prompt.offspring_fitnesses.append(record.report.fitness)
    return record


def run_generation(state: EvolutionState, backend, evaluator_factory,
                   rng: random.Random) -> EvolutionState:
    """One generation: N offspring, truncation, stagnation check."""
    cfg = state.config
    state.generation += 1
    offspring: list[MechanismRecord] = []
    for slot in range(cfg.population_size):
        kind = EXPLORATION if slot % 2 == 0 else MODIFICATION
        candidates = [p for p in state.prompt_population if p.kind == kind]
        prompt = candidates[rng.randrange(len(candidates))]
        try:
            record = _spawn_offspring(state, kind, prompt, backend, evaluator_factory, rng)
        except llm.BackendError as exc:
            state.log("slot_failed", slot=slot, kind=kind, prompt=prompt.id,
                      reason="backend", message=str(exc))
            continue
        except llm.ParseError as exc:
            state.log("slot_failed", slot=slot, kind=kind, prompt=prompt.id,
                      reason="parse", message=str(exc))
            continue
        offspring.append(record)
        state.log("offspring", slot=slot, kind=kind, prompt=prompt.id,
                  parents=list(record.parent_ids), mech=record.id,
                  fitness=record.report.fitness,
                  failure=record.report.failure.kind if record.report.failure else None)

    state.mech_population = manage_population(state.mech_population, offspring,
                                              cfg.population_size)
    state.log("population",
              size=len(state.mech_population),
              best=state.mech_population[0].fitness,
              members=[rec.id for rec in state.mech_population])
    stagnant = detect_stagnation(state, state.mech_population)
    state.log("stagnation", counter=state.stagnation, triggered=stagnant)
    if stagnant:
        prompt_evolution(state, backend, evaluator_factory, rng)
        state.stagnation = 0
    return state


def prompt_evolution(state: EvolutionState, backend, evaluator_factory,
                     rng: random.Random) -> EvolutionState:
    """Evolve the variation prompts when the elite set has stagnated.

    For each current prompt, a same-kind parent is drawn by the rank rule,
    the backend proposes a new prompt of that kind, and the proposal is
    admitted only if one probe offspring evaluates without a timeout. The
    prompt population is then truncated to its capacity, fitness-less
    newcomers ranking last, with at least one prompt of each kind retained.
    """
    cfg = state.config
    current = list(state.prompt_population)
    admitted: list[PromptStrategy] = []
    for existing in current:
        kind = existing.kind
        same_kind = [p for p in current if p.kind == kind]
        ranked = _prompt_ranked(same_kind, cfg.prompt_top_offspring)
        parent = select(ranked, 1, rng)[0]
        listing = [(p.text, p.fitness(cfg.prompt_top_offspring)) for p in same_kind]
        try:
            prompt_text = llm.render(llm.PROMPT_EVOLUTION, k=state.dataset.setting.k,
                                     prompt_kind=kind, prompts=listing)
            response = backend.complete(prompt_text, temperature=cfg.temperature,
                                        kind=llm.PROMPT_EVOLUTION)
            new_text = llm.parse_prompt_response(response)
        except (llm.BackendError, llm.ParseError) as exc:
            state.log("prompt_failed", kind=kind, parent=parent.id, message=str(exc))
            continue
        newcomer = PromptStrategy(id=state.new_prompt_id(), kind=kind, text=new_text,
                                  created_gen=state.generation)
        ok = _probe_prompt(state, newcomer, backend, evaluator_factory, rng)
        state.log("prompt_new", prompt=newcomer.id, kind=kind, parent=parent.id,
                  admitted=ok)
        if ok:
            admitted.append(newcomer)
    state.prompt_population = _truncate_prompts(current + admitted, cfg)
    state.log("prompt_population",
              prompts=[p.id for p in state.prompt_population])
    return state


def _probe_prompt(state: EvolutionState, prompt: PromptStrategy, backend,
                  evaluator_factory, rng: random.Random) -> bool:
    """Quality control: one probe offspring must evaluate without a timeout.

    Probe mechanisms feed the prompt's fitness ledger but never join the
    population.
    """
    try:
        record = _spawn_offspring(state, prompt.kind, prompt, backend,
                                  evaluator_factory, rng)
    except (llm.BackendError, llm.ParseError) as exc:
        state.log("probe", prompt=prompt.id, mech=None, ok=False, message=str(exc))
        return False
    failure = record.report.failure
    ok = failure is None or failure.kind != "timeout"
    state.log("probe", prompt=prompt.id, mech=record.id, ok=ok,
              fitness=record.report.fitness,
              failure=failure.kind if failure else None)
    return ok


def _truncate_prompts(prompts: list[PromptStrategy], cfg: EvolutionConfig) -> list[PromptStrategy]:
    ranked = _prompt_ranked(prompts, cfg.prompt_top_offspring)
    kept = ranked[:cfg.prompt_capacity]
    for kind in (EXPLORATION, MODIFICATION):
        if any(p.kind == kind for p in kept):
            continue
        replacement = next((p for p in ranked if p.kind == kind), None)
        if replacement is None:
            continue
        # Evict the worst kept prompt whose kind is not the last of its kind.
        for i in range(len(kept) - 1, -1, -1):
            other_kind = kept[i].kind
            if sum(1 for p in kept if p.kind == other_kind) > 1:
                kept[i] = replacement
                break
        else:
            kept[-1] = replacement
    return kept


def _initialize_population(state: EvolutionState, backend, factory, rng: random.Random):
    cfg = state.config
    weights = _weighted_or_none(state.dataset)
    k = state.dataset.setting.k
    for slot in range(cfg.population_size):
        record = None
        retries = 0
        for attempt in range(cfg.init_retries):
            try:
                prompt_text = llm.render(llm.INITIALIZATION, k=k, weights=weights)
                response = backend.complete(prompt_text, temperature=cfg.temperature,
                                            kind=llm.INITIALIZATION)
                parsed = llm.parse_response(response)
            except (llm.BackendError, llm.ParseError):
                retries += 1
                continue
            record = MechanismRecord(id=state.new_mech_id(),
                                     description=parsed.description,
                                     source=parsed.code,
                                     generation_born=0)
            break
        fallback = record is None
        if fallback:
            logger.warning("initialization slot %d failed %d times; seeding builtin %r",
                           slot, retries, FALLBACK_BUILTIN)
            record = MechanismRecord(id=state.new_mech_id(),
                                     description="fallback seed: weighted median of the reports",
                                     source=FALLBACK_BUILTIN,
                                     source_kind="builtin",
                                     generation_born=0)
        record.report = _evaluate_record(state, record, factory)
        state.mech_population.append(record)
        state.log("init", slot=slot, mech=record.id, fitness=record.report.fitness,
                  fallback=fallback, retries=retries)
    state.mech_population.sort(key=lambda rec: rec.fitness)


def evolve(config: EvolutionConfig, dataset: Dataset, backend,
           evaluator_factory=None, run_dir: str | Path | None = None):
    """Full search: initialize, run the generation budget, return the best.

    Returns (best_record, state); when ``run_dir`` is given, the config
    snapshot, per-generation population and prompt dumps, the append-only
    event log, and the best mechanism are written there.
    """
    rng = random.Random(config.seed)
    factory = evaluator_factory or default_evaluator_factory(config)
    state = EvolutionState(config=config, dataset=dataset)
    state.prompt_population = [
        PromptStrategy(id=state.new_prompt_id(), kind=EXPLORATION,
                       text=llm.INITIAL_EXPLORATION_STRATEGY),
        PromptStrategy(id=state.new_prompt_id(), kind=MODIFICATION,
                       text=llm.INITIAL_MODIFICATION_STRATEGY),
    ]

    writer = _RunDirWriter(run_dir, state) if run_dir else None
    _initialize_population(state, backend, factory, rng)
    state.elite_snapshot = tuple(sorted(
        rec.fitness for rec in state.mech_population[:config.elite_size]))
    state.stagnation = 0
    if writer:
        writer.snapshot()

    for _ in range(config.generations):
        run_generation(state, backend, factory, rng)
        if writer:
            writer.snapshot()

    best = state.best()
    if writer:
        writer.finish(best)
    return best, state


class _RunDirWriter:
    """Materializes the run directory layout."""

    def __init__(self, run_dir: str | Path, state: EvolutionState):
        self.root = Path(run_dir)
        self.state = state
        (self.root / "populations").mkdir(parents=True, exist_ok=True)
        (self.root / "prompts").mkdir(parents=True, exist_ok=True)
        config = {"evolution": state.config.to_dict(),
                  "setting": state.dataset.setting.to_dict(),
                  "dataset_seed": state.dataset.seed}
        (self.root / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))

    def snapshot(self):
        state = self.state
        gen = state.generation
        top_count = state.config.prompt_top_offspring
        (self.root / "populations" / f"gen_{gen:04d}.json").write_text(
            json.dumps([rec.to_dict() for rec in state.mech_population], indent=2))
        (self.root / "prompts" / f"gen_{gen:04d}.json").write_text(
            json.dumps([p.to_dict(top_count) for p in state.prompt_population], indent=2))
        (self.root / "events.jsonl").write_text(state.event_log_text())

    def finish(self, best: MechanismRecord):
        (self.root / "best.json").write_text(json.dumps(best.to_dict(), indent=2))
        (self.root / "events.jsonl").write_text(self.state.event_log_text())
