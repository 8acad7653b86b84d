"""Candidate evaluation: compile/execute backends, templated-kernel
parameter sweeps, and the min-time benchmarking schedule.

The mock backend is the desk-scale test rig: kernel sources carry an
embedded directive line

    // KF-MOCK: compile=ok|fail correct=0.98 time_ms=0.9 base_ms=1.2 sync_ms=0.05 first_iter_mult=10

and the execution cost model is closed-form from those fields, so every
timing and correctness outcome is an exact oracle. Per-config overrides for
templated kernels use keys like `time_ms(16,16)=0.9` and `compile(16,16)=fail`.
"""

from __future__ import annotations

import hashlib
import math
import re
import statistics
import threading
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from . import fitness as fitness_mod
from .fitness import EvaluationResult, NuStats, Status, check_correctness, cosine_similarity
from .taskspec import BenchConstraints, TaskSpec

INITIAL_TRIALS = 3  # fixed probe count; median informs the schedule


class NonPositiveTimeError(ValueError):
    pass


class ExecutionFailure(RuntimeError):
    pass


class MalformedDispatch(ValueError):
    pass


@dataclass(frozen=True)
class BenchSchedule:
    warmup_iters: int
    main_iters: int
    inner_loop: int

    def __post_init__(self):
        if self.warmup_iters < 1 or self.main_iters < 1 or self.inner_loop < 1:
            raise ValueError("schedule fields must be >= 1")
        if self.main_iters % self.inner_loop != 0:
            raise ValueError("main_iters must be a multiple of inner_loop")

    def to_dict(self) -> dict:
        return {
            "warmup_iters": self.warmup_iters,
            "main_iters": self.main_iters,
            "inner_loop": self.inner_loop,
        }


def plan_schedule(initial_iter_time_s: float, c: BenchConstraints) -> BenchSchedule:
    """Derive iteration counts from a rough per-iteration time (seconds).

    Warmup and main trials satisfy both the minimum-iteration floors and
    the minimum-total-time constraints; the inner loop amortizes the
    per-synchronization overhead for fast kernels.
    """
    if initial_iter_time_s <= 0:
        raise NonPositiveTimeError("initial iteration time must be positive")
    warmup = max(c.min_warmup_iters, math.ceil(c.min_warmup_time_s / initial_iter_time_s))
    inner = max(1, math.ceil(c.inner_loop_min_time_s / initial_iter_time_s))
    main = max(c.min_main_iters, math.ceil(c.min_main_time_s / initial_iter_time_s))
    main = inner * math.ceil(main / inner)
    return BenchSchedule(warmup_iters=warmup, main_iters=main, inner_loop=inner)


@dataclass
class CompileResult:
    ok: bool
    artifact: Optional[dict]  # JSON-serializable build artifact reference
    log: str = ""


class EvalBackend(Protocol):
    """Compile/execute abstraction; a backend declares determinism itself."""

    deterministic: bool

    def compile(self, source: str, task: TaskSpec) -> CompileResult: ...

    def config_compiles(self, artifact: dict, config: Optional[tuple]) -> tuple[bool, str]: ...

    def reference_outputs(self, task: TaskSpec) -> np.ndarray: ...

    def candidate_outputs(
        self, artifact: dict, task: TaskSpec, config: Optional[tuple]
    ) -> np.ndarray: ...

    def initial_trials(
        self, artifact: dict, task: TaskSpec, n: int, config: Optional[tuple]
    ) -> list[float]: ...

    def execute(
        self, artifact: dict, task: TaskSpec, schedule: BenchSchedule, config: Optional[tuple]
    ) -> list[float]: ...

    def baseline_artifact(self, task: TaskSpec, candidate_artifact: Optional[dict]) -> dict: ...


_DIRECTIVE_RE = re.compile(r"//\s*KF-MOCK:\s*(.*)")
_TOKEN_RE = re.compile(r"(\w+)(?:\(([^)]*)\))?=([^\s]+)")


def parse_mock_directive(source: str) -> dict:
    """Parse the KF-MOCK directive; absent fields take benign defaults."""
    directive = {
        "compile": "ok",
        "correct": 1.0,
        "time_ms": 1.0,
        "base_ms": 1.0,
        "sync_ms": 0.0,
        "first_iter_mult": 1.0,
        "per_config_time_ms": {},
        "per_config_compile": {},
    }
    m = _DIRECTIVE_RE.search(source)
    if not m:
        return directive
    for key, cfg, value in _TOKEN_RE.findall(m.group(1)):
        if cfg:
            cfg_key = tuple(int(x) for x in cfg.split(","))
            if key == "time_ms":
                directive["per_config_time_ms"][cfg_key] = float(value)
            elif key == "compile":
                directive["per_config_compile"][cfg_key] = value
        elif key == "compile":
            directive["compile"] = value
        elif key in ("correct", "time_ms", "base_ms", "sync_ms", "first_iter_mult"):
            directive[key] = float(value)
    return directive


def _directive_to_artifact(directive: dict, source: str) -> dict:
    art = dict(directive)
    art["per_config_time_ms"] = {
        ",".join(map(str, k)): v for k, v in directive["per_config_time_ms"].items()
    }
    art["per_config_compile"] = {
        ",".join(map(str, k)): v for k, v in directive["per_config_compile"].items()
    }
    art["source_hash"] = hashlib.sha256(source.encode()).hexdigest()[:16]
    return art


class MockEvalBackend:
    """Deterministic backend driven entirely by KF-MOCK directives."""

    deterministic = True

    def compile(self, source: str, task: TaskSpec) -> CompileResult:
        directive = parse_mock_directive(source)
        if directive["compile"] == "fail":
            return CompileResult(
                ok=False,
                artifact=None,
                log="compilation error: undeclared identifier (mock)",
            )
        return CompileResult(
            ok=True, artifact=_directive_to_artifact(directive, source), log="compiled ok"
        )

    def config_compiles(self, artifact: dict, config: Optional[tuple]) -> tuple[bool, str]:
        if config is None:
            return True, ""
        status = artifact["per_config_compile"].get(",".join(map(str, config)))
        if status == "fail":
            return False, f"instantiation error for config {config} (mock)"
        return True, ""

    def _time_ms(self, artifact: dict, config: Optional[tuple]) -> float:
        if config is not None:
            key = ",".join(map(str, config))
            if key in artifact["per_config_time_ms"]:
                return artifact["per_config_time_ms"][key]
        return artifact["time_ms"]

    def reference_outputs(self, task: TaskSpec) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(task.task_id.encode()).digest()[:8], "big")
        rng = np.random.default_rng(seed)
        # Offset keeps |y| away from zero so planted violations have nu ~ 0.5.
        return rng.normal(loc=0.0, scale=1.0, size=1000) + 3.0

    def candidate_outputs(
        self, artifact: dict, task: TaskSpec, config: Optional[tuple] = None
    ) -> np.ndarray:
        expected = self.reference_outputs(task)
        frac_ok = artifact["correct"]
        n_bad = int(round((1.0 - frac_ok) * expected.size))
        actual = expected.copy()
        if n_bad > 0:
            actual[:n_bad] *= 1.5  # nu ~= 0.5 on violated elements
        return actual

    def initial_trials(
        self, artifact: dict, task: TaskSpec, n: int = INITIAL_TRIALS, config: Optional[tuple] = None
    ) -> list[float]:
        t = self._time_ms(artifact, config) / 1000.0
        sync = artifact["sync_ms"] / 1000.0
        trials = [t * artifact["first_iter_mult"] + sync]
        trials.extend([t + sync] * (n - 1))
        return trials

    def execute(
        self,
        artifact: dict,
        task: TaskSpec,
        schedule: BenchSchedule,
        config: Optional[tuple] = None,
    ) -> list[float]:
        """Per-chunk wall times (seconds) after warmup; closed-form cost model."""
        t = self._time_ms(artifact, config) / 1000.0
        sync = artifact["sync_ms"] / 1000.0
        n_chunks = schedule.main_iters // schedule.inner_loop
        # Warmup (including the first-iteration spike) happens untimed.
        return [schedule.inner_loop * t + sync] * n_chunks

    def baseline_artifact(
        self, task: TaskSpec, candidate_artifact: Optional[dict] = None
    ) -> dict:
        directive = parse_mock_directive(task.reference_code)
        if not _DIRECTIVE_RE.search(task.reference_code) and candidate_artifact:
            directive["time_ms"] = candidate_artifact["base_ms"]
            directive["sync_ms"] = candidate_artifact["sync_ms"]
            directive["first_iter_mult"] = candidate_artifact["first_iter_mult"]
        return _directive_to_artifact(directive, task.reference_code)


def run_benchmark(
    backend: EvalBackend,
    artifact: dict,
    task: TaskSpec,
    schedule: BenchSchedule,
    config: Optional[tuple] = None,
) -> tuple[float, float, list[float]]:
    """Warmup untimed, then main iterations in inner-loop chunks with one
    synchronization per chunk. Returns (mean_ms, stddev_ms, chunk_times_s)."""
    try:
        chunks = backend.execute(artifact, task, schedule, config)
    except ExecutionFailure:
        raise
    except Exception as e:  # backend adapters may raise transport errors
        raise ExecutionFailure(str(e)) from e
    per_iter_ms = [c / schedule.inner_loop * 1000.0 for c in chunks]
    mean = statistics.fmean(per_iter_ms)
    std = statistics.pstdev(per_iter_ms) if len(per_iter_ms) > 1 else 0.0
    return mean, std, chunks


@dataclass
class TemplateSweep:
    parameter_names: list[str]
    configs: list[tuple]
    per_config_results: dict[tuple, EvaluationResult] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "parameter_names": self.parameter_names,
            "configs": [list(c) for c in self.configs],
            "per_config_results": {
                ",".join(map(str, k)): v.to_dict()
                for k, v in self.per_config_results.items()
            },
        }


_FORWARD_SIG_RE = re.compile(r"\bforward\s*\(([^)]*)\)\s*\{")
_BRANCH_RE = re.compile(
    r"(?:if|else\s+if)\s*\(([^)]*)\)\s*\{\s*return\s+forward_templated<([^>]*)>"
)
_COND_RE = re.compile(r"(\w+)\s*==\s*([\w.]+)")


def detect_template(source: str) -> Optional[tuple[list[str], list[tuple]]]:
    """Detect a parameter-dispatch function enumerating constant configs.

    Returns (parameter_names, configs) or None when the source carries no
    dispatch pattern. Detection is syntactic over the dispatch function only.
    """
    if "forward_templated<" not in source:
        return None
    sig = None
    for m in _FORWARD_SIG_RE.finditer(source):
        params = m.group(1)
        names = re.findall(r"\bint\s+(\w+)", params)
        if names:
            sig = names
            break
    if sig is None:
        return None
    configs = []
    for cond, _targs in _BRANCH_RE.findall(source):
        values = {}
        for name, value in _COND_RE.findall(cond):
            if name not in sig:
                raise MalformedDispatch(f"condition on non-parameter {name!r}")
            if not re.fullmatch(r"-?\d+", value):
                raise MalformedDispatch(
                    f"non-constant branch condition: {name} == {value}"
                )
            values[name] = int(value)
        if set(values) != set(sig):
            raise MalformedDispatch(
                f"branch does not constrain every parameter: {cond.strip()!r}"
            )
        configs.append(tuple(values[n] for n in sig))
    if not configs:
        raise MalformedDispatch("dispatch found but no parsable parameter tuples")
    return sig, configs


class BaselineCache:
    """Task-scoped single-flight guard around baseline timing."""

    def __init__(self):
        self._lock = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._values: dict[str, float] = {}
        self.computations = 0

    def get(self, task: TaskSpec, backend: EvalBackend, candidate_artifact: Optional[dict]) -> float:
        key = f"{task.task_id}:{task.hardware_profile_id}"
        with self._lock:
            if key in self._values:
                return self._values[key]
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            with self._lock:
                if key in self._values:
                    return self._values[key]
            value = measure_baseline(backend, task, candidate_artifact)
            with self._lock:
                self._values[key] = value
                self.computations += 1
            return value


def measure_baseline(
    backend: EvalBackend, task: TaskSpec, candidate_artifact: Optional[dict] = None
) -> float:
    """Baseline timed with a schedule planned by the same rule as candidates."""
    artifact = backend.baseline_artifact(task, candidate_artifact)
    constraints = task.test_config.benchmark_constraints
    trials = backend.initial_trials(artifact, task, INITIAL_TRIALS, None)
    schedule = plan_schedule(statistics.median(trials), constraints)
    mean_ms, _, _ = run_benchmark(backend, artifact, task, schedule)
    return mean_ms


def _evaluate_config(
    backend: EvalBackend,
    artifact: dict,
    task: TaskSpec,
    config: Optional[tuple],
    baseline_cache: BaselineCache,
) -> EvaluationResult:
    ok, log = backend.config_compiles(artifact, config)
    if not ok:
        return EvaluationResult(status=Status.COMPILE_FAIL, log=log, config_used=config)
    tc = task.test_config
    expected = backend.reference_outputs(task)
    actual = backend.candidate_outputs(artifact, task, config)
    verdict, nu_stats = check_correctness(
        expected,
        actual,
        rel_tol=tc.correctness_rel_tol,
        pass_fraction=tc.correctness_pass_fraction,
        eps=tc.epsilon_div,
    )
    try:
        cosine = cosine_similarity(expected, actual)
    except fitness_mod.ZeroVector:
        cosine = None

    constraints = tc.benchmark_constraints
    trials = backend.initial_trials(artifact, task, INITIAL_TRIALS, config)
    rough_s = statistics.median(trials)
    baseline_ms = baseline_cache.get(task, backend, artifact)

    if not verdict:
        return EvaluationResult(
            status=Status.INCORRECT,
            baseline_ms=baseline_ms,
            runtime_ms=rough_s * 1000.0,
            nu_stats=nu_stats,
            cosine_sim=cosine,
            log=(
                f"correctness check failed: {nu_stats.violation_fraction:.4f} of "
                f"elements violate rel_tol {tc.correctness_rel_tol}"
            ),
            config_used=config,
        )

    schedule = plan_schedule(rough_s, constraints)
    mean_ms, std_ms, _ = run_benchmark(backend, artifact, task, schedule, config)
    return EvaluationResult(
        status=Status.CORRECT,
        baseline_ms=baseline_ms,
        runtime_ms=mean_ms,
        runtime_std_ms=std_ms,
        nu_stats=nu_stats,
        cosine_sim=cosine,
        log=f"correct; mean {mean_ms:.6g} ms over {schedule.main_iters} iterations",
        config_used=config,
    )


def sweep_parameters(
    backend: EvalBackend,
    source: str,
    task: TaskSpec,
    configs: list[tuple],
    baseline_cache: Optional[BaselineCache] = None,
    parameter_names: Optional[list[str]] = None,
    artifact: Optional[dict] = None,
) -> tuple[EvaluationResult, TemplateSweep]:
    """Compile once, evaluate every config; best = argmin runtime among Correct.

    When no config is correct, the best is the highest-fitness failure. The
    full per-config log is retained for prompt feedback.
    """
    if not configs:
        raise ValueError("configs must be non-empty")
    cache = baseline_cache if baseline_cache is not None else BaselineCache()
    if artifact is None:
        compiled = backend.compile(source, task)
        if not compiled.ok:
            res = EvaluationResult(status=Status.COMPILE_FAIL, log=compiled.log)
            sweep = TemplateSweep(parameter_names=parameter_names or [], configs=list(configs))
            return res, sweep
        artifact = compiled.artifact
    sweep = TemplateSweep(parameter_names=parameter_names or [], configs=list(configs))
    for config in configs:
        sweep.per_config_results[config] = _evaluate_config(
            backend, artifact, task, config, cache
        )
    correct = [
        (r.runtime_ms, c)
        for c, r in sweep.per_config_results.items()
        if r.status is Status.CORRECT
    ]
    if correct:
        _, best_config = min(correct)
    else:
        best_config = max(
            sweep.per_config_results,
            key=lambda c: fitness_mod.compute_fitness(
                sweep.per_config_results[c], task.target_speedup
            )
            if sweep.per_config_results[c].status is not Status.CORRECT
            else -1.0,
        )
    best = sweep.per_config_results[best_config]
    best.sweep = sweep
    return best, sweep


def evaluate(
    backend: EvalBackend,
    source: str,
    task: TaskSpec,
    baseline_cache: Optional[BaselineCache] = None,
) -> EvaluationResult:
    """Full pipeline: compile, correctness, benchmark; templated sources
    route through the parameter sweep. Candidate failures never raise."""
    cache = baseline_cache if baseline_cache is not None else BaselineCache()
    compiled = backend.compile(source, task)
    if not compiled.ok:
        return EvaluationResult(status=Status.COMPILE_FAIL, log=compiled.log)
    try:
        template = detect_template(source)
    except MalformedDispatch as e:
        return EvaluationResult(
            status=Status.COMPILE_FAIL, log=f"malformed dispatch function: {e}"
        )
    if template is not None:
        names, configs = template
        best, _ = sweep_parameters(
            backend,
            source,
            task,
            configs,
            baseline_cache=cache,
            parameter_names=names,
            artifact=compiled.artifact,
        )
        return best
    return _evaluate_config(backend, compiled.artifact, task, None, cache)
