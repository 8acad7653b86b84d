"""The evolutionary loop: selection, variation, evaluation, insertion.

Each generation samples parents from the archive using gradient-derived
weights, prompts the generator backend, evaluates and classifies the
returned kernels, inserts correct ones into the archive, and records every
transition. The meta-prompt updates on its own schedule, islands exchange
elites periodically, and a parameter-optimization phase tunes the final
best kernel through templated sweeps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import archive as archive_mod
from . import gradient as gradient_mod
from . import promptgen
from .archive import Archive, InsertOutcome, KernelCandidate, mix_strategies
from .backends import ChatBackend, ChatRequest, extract_last_code_block
from .classifier import BehavioralCoord, classify, default_pattern_table
from .distrib import RunDatabase, load_run
from .evalpipe import BaselineCache, EvalBackend, evaluate
from .fitness import EvaluationResult, Status, compute_fitness
from .gradient import (
    DecayWeight,
    TransitionBuffer,
    TransitionRecord,
    estimate_all,
    gradient_to_hints,
    sampling_weights,
)
from .promptgen import PromptArchive, PromptState, build_prompt, default_prompt_state
from .taskspec import TaskSpec

DEFAULT_SELECTION_RATIOS = {
    "curiosity": 0.55,
    "fitness": 0.2,
    "uniform": 0.15,
    "island": 0.1,
}


@dataclass
class RunConfig:
    max_generations: int = 40
    population_per_generation: int = 8
    selection_ratios: dict = field(default_factory=lambda: dict(DEFAULT_SELECTION_RATIOS))
    grid_bins: int = 4
    target_speedup: float = 2.0
    prompt_update_frequency: int = 10
    max_prompt_mutations: int = 3
    prompt_archive_size: int = 16
    temperature: float = 0.3
    top_p: float = 1.0
    max_tokens: int = 8000
    param_opt_iterations: int = 2
    param_opt_best_of: int = 8
    migration_period: int = 10
    buffer_capacity: int = 256
    gradient_half_life: int = 50
    gradient_temperature: float = 0.5
    hint_threshold: float = 0.05
    hardware: str = "unspecified hardware"
    seed: int = 0

    def __post_init__(self):
        for name in (
            "max_generations",
            "population_per_generation",
            "grid_bins",
            "prompt_update_frequency",
            "max_prompt_mutations",
            "prompt_archive_size",
            "param_opt_iterations",
            "param_opt_best_of",
            "migration_period",
            "buffer_capacity",
            "gradient_half_life",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "max_generations": self.max_generations,
            "population_per_generation": self.population_per_generation,
            "selection_ratios": dict(self.selection_ratios),
            "grid_bins": self.grid_bins,
            "target_speedup": self.target_speedup,
            "prompt_update_frequency": self.prompt_update_frequency,
            "max_prompt_mutations": self.max_prompt_mutations,
            "prompt_archive_size": self.prompt_archive_size,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "param_opt_iterations": self.param_opt_iterations,
            "param_opt_best_of": self.param_opt_best_of,
            "migration_period": self.migration_period,
            "buffer_capacity": self.buffer_capacity,
            "gradient_half_life": self.gradient_half_life,
            "gradient_temperature": self.gradient_temperature,
            "hint_threshold": self.hint_threshold,
            "hardware": self.hardware,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


@dataclass
class Backends:
    """The backend bundle a run needs; the strong generator is optional."""

    generator: ChatBackend
    meta: ChatBackend
    evaluator: EvalBackend
    strong_generator: Optional[ChatBackend] = None


@dataclass
class RunReport:
    task_id: str
    generations_run: int
    candidates_evaluated: int
    best_candidate: Optional[dict]
    best_result: Optional[dict]
    best_fitness: float
    coverage: dict
    archive_records: list
    prompt_versions: list
    param_opt_adopted: bool
    budget: dict

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "generations_run": self.generations_run,
            "candidates_evaluated": self.candidates_evaluated,
            "best_candidate": self.best_candidate,
            "best_result": self.best_result,
            "best_fitness": self.best_fitness,
            "coverage": self.coverage,
            "archive_records": self.archive_records,
            "prompt_versions": self.prompt_versions,
            "param_opt_adopted": self.param_opt_adopted,
            "budget": self.budget,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def transition_outcome(insert_outcome: Optional[InsertOutcome], delta_f: float) -> str:
    """Cell discovery or elite replacement dominate the fitness delta."""
    if insert_outcome is not None and insert_outcome.inserted:
        return gradient_mod.OUTCOME_IMPROVEMENT
    if delta_f < 0:
        return gradient_mod.OUTCOME_REGRESSION
    return gradient_mod.OUTCOME_NEUTRAL


def _request_seed(seed: int, generation: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, generation, index]).generate_state(1)[0])


class _RunState:
    """Mutable loop state, reconstructible from the run database."""

    def __init__(self, config: RunConfig, task: TaskSpec):
        self.config = config
        self.task = task
        self.archive = Archive(levels=config.grid_bins)
        self.buffer = TransitionBuffer(capacity=config.buffer_capacity)
        self.prompt_archive = PromptArchive(capacity=config.prompt_archive_size)
        self.prompt_archive.add_version(default_prompt_state())
        self.results: dict[str, EvaluationResult] = {}
        self.last: Optional[tuple[KernelCandidate, EvaluationResult]] = None
        self.generation = 0
        self.candidates_evaluated = 0
        self.generator_requests = 0


def _snapshot(db: Optional[RunDatabase], state: _RunState, generation: int) -> None:
    if db is None:
        return
    records = state.archive.to_records()
    if not records:
        db.append_record(
            "archive_snapshot", {"generation": generation, "n_cells": 0, "cell": None}
        )
        return
    for rec in records:
        db.append_record(
            "archive_snapshot",
            {"generation": generation, "n_cells": len(records), "cell": rec},
        )


def _restore(state: _RunState, db: RunDatabase) -> bool:
    """Rebuild loop state from the database; True when a snapshot existed."""
    replayed = load_run(db)
    state.generation = replayed.generation
    state.archive = Archive.from_records(replayed.archive_records, levels=state.config.grid_bins)
    for t in replayed.transitions:
        state.buffer.record_transition(TransitionRecord.from_dict(t["record"]))
    for p in replayed.prompt_versions:
        state.prompt_archive.add_version(PromptState.from_dict(p["state"]))
    ordered = sorted(
        replayed.candidates.values(), key=lambda c: (c["generation"], c.get("index", 0))
    )
    for body in ordered:
        cand = KernelCandidate.from_dict(body["candidate"])
        ev = replayed.evaluations.get(cand.candidate_id)
        if ev is not None:
            result = EvaluationResult.from_dict(ev["result"])
            state.results[cand.candidate_id] = result
            state.last = (cand, result)
        if cand.prompt_version_id in state.prompt_archive.entries:
            state.prompt_archive.record_prompt_fitness(cand.prompt_version_id, cand.fitness)
        state.candidates_evaluated += 1
        if body["generation"] >= 1:
            state.generator_requests += 1
    return replayed.has_snapshot


def _record_candidate(
    db: Optional[RunDatabase],
    cand: KernelCandidate,
    result: EvaluationResult,
    generation: int,
    index: int,
) -> None:
    if db is None:
        return
    db.append_record(
        "candidate",
        {
            "candidate_id": cand.candidate_id,
            "generation": generation,
            "index": index,
            "candidate": cand.to_dict(),
        },
    )
    db.append_record(
        "evaluation",
        {"candidate_id": cand.candidate_id, "generation": generation, "result": result.to_dict()},
    )


def _ingest_candidate(
    state: _RunState,
    cand: KernelCandidate,
    result: EvaluationResult,
    parent: Optional[KernelCandidate],
    db: Optional[RunDatabase],
    generation: int,
    index: int,
) -> Optional[InsertOutcome]:
    """Archive insertion, transition recording, and bookkeeping for one candidate."""
    outcome = None
    if result.status is Status.CORRECT:
        outcome = state.archive.insert(cand)
    state.results[cand.candidate_id] = result
    state.last = (cand, result)
    state.candidates_evaluated += 1
    _record_candidate(db, cand, result, generation, index)
    if parent is not None:
        rec = TransitionRecord(
            parent_coord=parent.coord,
            child_coord=cand.coord,
            delta_fitness=cand.fitness - parent.fitness,
            outcome=transition_outcome(outcome, cand.fitness - parent.fitness),
            timestamp=float(generation),
            iteration=generation,
        )
        state.buffer.record_transition(rec)
        if db is not None:
            db.append_record(
                "transition", {"generation": generation, "record": rec.to_dict()}
            )
    state.prompt_archive.record_prompt_fitness(cand.prompt_version_id, cand.fitness)
    return outcome


def _result_for(state: _RunState, cand: Optional[KernelCandidate]) -> Optional[EvaluationResult]:
    """Resolve a candidate's evaluation; migrants inherit the donor's result."""
    if cand is None:
        return None
    res = state.results.get(cand.candidate_id)
    if res is None and cand.parent_id is not None:
        res = state.results.get(cand.parent_id)
    return res


def _evaluate_source(
    backends: Backends,
    task: TaskSpec,
    source: Optional[str],
    cache: BaselineCache,
) -> EvaluationResult:
    if source is None:
        return EvaluationResult(status=Status.COMPILE_FAIL, log="no code block")
    return evaluate(backends.evaluator, source, task, baseline_cache=cache)


def _make_candidate(
    task: TaskSpec,
    source: Optional[str],
    result: EvaluationResult,
    fitness: float,
    candidate_id: str,
    parent: Optional[KernelCandidate],
    generation: int,
    prompt_version: str,
    pattern_table,
) -> KernelCandidate:
    if source is not None:
        coord = classify(source, pattern_table)
    elif parent is not None:
        coord = parent.coord
    else:
        coord = BehavioralCoord(0, 0, 0)
    return KernelCandidate(
        candidate_id=candidate_id,
        source=source or "",
        coord=coord,
        fitness=fitness,
        parent_id=parent.candidate_id if parent else None,
        generation=generation,
        prompt_version_id=prompt_version,
    )


def run(
    config: RunConfig,
    task: TaskSpec,
    backends: Backends,
    db: Optional[RunDatabase] = None,
    resume: bool = False,
    progress=None,
) -> RunReport:
    """Execute the full evolutionary loop and return the final report.

    Candidate failures never abort the run; only infrastructure errors
    (database, unreachable backends) propagate. With `resume` the loop
    continues from the last complete snapshot in `db`.
    """
    state = _RunState(config, task)
    pattern_table = default_pattern_table(task.language)
    hint_table = gradient_mod.default_hint_table()
    decay = DecayWeight(half_life_iterations=config.gradient_half_life)
    cache = BaselineCache()
    strategy = mix_strategies(config.selection_ratios)

    resumed = False
    if db is not None and resume:
        resumed = _restore(state, db)
    if db is not None and not resumed:
        db.append_record("config", {"task_id": task.task_id, "config": config.to_dict()})

    # Generation 0: evaluate and insert the user-provided starting kernel.
    if state.generation == 0 and not resumed:
        if task.initial_kernel:
            result = _evaluate_source(backends, task, task.initial_kernel, cache)
            fitness = compute_fitness(result, config.target_speedup)
            cand = _make_candidate(
                task,
                task.initial_kernel,
                result,
                fitness,
                f"{task.task_id}-g0-seed",
                None,
                0,
                state.prompt_archive.current_version,
                pattern_table,
            )
            _ingest_candidate(state, cand, result, None, db, 0, 0)
        _snapshot(db, state, 0)

    for gen in range(state.generation + 1, config.max_generations + 1):
        rng = np.random.default_rng([config.seed, gen])
        cell_fitness = {k: c.fitness for k, c in state.archive.cells.items()}
        estimates = estimate_all(
            state.buffer, cell_fitness, decay, gen, levels=config.grid_bins
        )
        weights = sampling_weights(estimates, temperature=config.gradient_temperature)
        by_cell = {e.cell.as_tuple(): e for e in estimates}
        generator = backends.generator
        if gen == 1 and backends.strong_generator is not None:
            generator = backends.strong_generator

        batch: list[tuple[KernelCandidate, EvaluationResult]] = []
        for i in range(config.population_per_generation):
            parent = None
            hints: list[str] = []
            if state.archive.occupancy > 0:
                parent = archive_mod.select_parent(
                    state.archive,
                    strategy,
                    weights=weights,
                    rng=rng,
                    island=i % archive_mod.NUM_ISLANDS,
                )
                est = by_cell.get(parent.coord.as_tuple())
                if est is not None:
                    hints = gradient_to_hints(
                        est.combined,
                        parent.coord,
                        hint_table,
                        threshold=config.hint_threshold,
                    )
            top = None
            best = state.archive.best()
            best_res = _result_for(state, best)
            if best_res is not None:
                top = (best, best_res)
            parent_pair = None
            parent_res = _result_for(state, parent)
            if parent_res is not None:
                parent_pair = (parent, parent_res)
            prompt = build_prompt(
                task,
                top=top,
                last=parent_pair if parent_pair is not None else state.last,
                hints=hints,
                hardware=config.hardware,
                prompt=state.prompt_archive.current_state(),
            )
            request = ChatRequest(
                messages=[{"role": "user", "content": prompt}],
                temperature=config.temperature,
                top_p=config.top_p,
                max_tokens=config.max_tokens,
                seed=_request_seed(config.seed, gen, i),
            )
            response = generator.complete(request)
            state.generator_requests += 1
            source = extract_last_code_block(response.text)
            result = _evaluate_source(backends, task, source, cache)
            fitness = compute_fitness(result, config.target_speedup)
            cand = _make_candidate(
                task,
                source,
                result,
                fitness,
                f"{task.task_id}-g{gen}-s{i}",
                parent,
                gen,
                state.prompt_archive.current_version,
                pattern_table,
            )
            _ingest_candidate(state, cand, result, parent, db, gen, i)
            batch.append((cand, result))

        archive_mod.migrate(state.archive, gen, period=config.migration_period)

        if promptgen.should_update_prompt(gen, config.prompt_update_frequency) and batch:
            _update_prompt(state, backends, batch, config, db, gen)

        _snapshot(db, state, gen)
        state.generation = gen
        if progress is not None:
            progress(gen, state.archive.coverage_stats())

    best = state.archive.best()
    adopted = False
    if best is not None and config.param_opt_iterations > 0:
        tuned, adopted = parameter_optimization_phase(
            best,
            backends,
            task,
            config,
            state,
            db,
        )
        best = tuned

    best_result = _result_for(state, best)
    return RunReport(
        task_id=task.task_id,
        generations_run=state.generation,
        candidates_evaluated=state.candidates_evaluated,
        best_candidate=best.to_dict() if best else None,
        best_result=best_result.to_dict() if best_result else None,
        best_fitness=best.fitness if best else 0.0,
        coverage=state.archive.coverage_stats(),
        archive_records=state.archive.to_records(),
        prompt_versions=sorted(state.prompt_archive.entries),
        param_opt_adopted=adopted,
        budget={"generator_requests": state.generator_requests},
    )


def _update_prompt(
    state: _RunState,
    backends: Backends,
    batch: list,
    config: RunConfig,
    db: Optional[RunDatabase],
    generation: int,
) -> None:
    """One meta-prompt step; malformed meta output leaves the prompt as-is."""
    current = state.prompt_archive.current_state()
    try:
        diffs, _dropped = promptgen.request_prompt_update(
            backends.meta,
            current,
            batch,
            max_mutations=config.max_prompt_mutations,
            seed=_request_seed(config.seed, generation, 10_000),
        )
        new_state = promptgen.apply_prompt_diff(
            current, diffs, max_mutations=config.max_prompt_mutations
        )
    except (
        promptgen.NoParsableDiffs,
        promptgen.SearchNotFound,
        promptgen.AmbiguousMatch,
        promptgen.RegionViolation,
        promptgen.TooManyMutations,
    ):
        return
    state.prompt_archive.add_version(new_state)
    if db is not None:
        db.append_record(
            "prompt_version",
            {"generation": generation, "state": new_state.to_dict()},
        )


def parameter_optimization_phase(
    best: KernelCandidate,
    backends: Backends,
    task: TaskSpec,
    config: RunConfig,
    state: _RunState,
    db: Optional[RunDatabase] = None,
) -> tuple[KernelCandidate, bool]:
    """Templated tuning of the final best kernel; strict-improvement adoption.

    Each iteration requests `param_opt_best_of` templated variants, sweeps
    every detected config, and adopts a variant only when it is correct and
    strictly faster than the incumbent.
    """
    best_result = _result_for(state, best)
    if best_result is None or best_result.status is not Status.CORRECT:
        return best, False
    adopted = False
    cache = BaselineCache()
    pattern_table = default_pattern_table(task.language)
    for it in range(config.param_opt_iterations):
        gen = config.max_generations + 1 + it
        for j in range(config.param_opt_best_of):
            prompt = build_prompt(
                task,
                top=(best, best_result),
                hardware=config.hardware,
                prompt=state.prompt_archive.current_state(),
                parameter_tuning=True,
            )
            request = ChatRequest(
                messages=[{"role": "user", "content": prompt}],
                temperature=config.temperature,
                top_p=config.top_p,
                max_tokens=config.max_tokens,
                seed=_request_seed(config.seed, gen, j),
            )
            response = backends.generator.complete(request)
            state.generator_requests += 1
            source = extract_last_code_block(response.text)
            if source is None:
                continue
            result = _evaluate_source(backends, task, source, cache)
            fitness = compute_fitness(result, config.target_speedup)
            cand = _make_candidate(
                task,
                source,
                result,
                fitness,
                f"{task.task_id}-g{gen}-p{j}",
                best,
                gen,
                state.prompt_archive.current_version,
                pattern_table,
            )
            _record_candidate(db, cand, result, gen, j)
            state.results[cand.candidate_id] = result
            state.candidates_evaluated += 1
            if (
                result.status is Status.CORRECT
                and best_result.runtime_ms is not None
                and result.runtime_ms is not None
                and result.runtime_ms < best_result.runtime_ms
            ):
                best, best_result = cand, result
                adopted = True
    if adopted:
        state.archive.insert(best)
    return best, adopted
