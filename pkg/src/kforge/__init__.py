"""Evolutionary GPU-kernel optimization with gradient-informed MAP-Elites."""

from .archive import Archive, KernelCandidate, SelectionStrategy, mix_strategies
from .classifier import BehavioralCoord, classify, default_pattern_table
from .evalpipe import MockEvalBackend, evaluate, plan_schedule, sweep_parameters
from .fitness import EvaluationResult, Status, compute_fitness
from .orchestrator import Backends, RunConfig, RunReport, run
from .taskspec import TaskSpec, load_task_dir, parse_task

__version__ = "0.1.0"

__all__ = [
    "Archive",
    "Backends",
    "BehavioralCoord",
    "EvaluationResult",
    "KernelCandidate",
    "MockEvalBackend",
    "RunConfig",
    "RunReport",
    "SelectionStrategy",
    "Status",
    "TaskSpec",
    "classify",
    "compute_fitness",
    "default_pattern_table",
    "evaluate",
    "load_task_dir",
    "mix_strategies",
    "parse_task",
    "plan_schedule",
    "run",
    "sweep_parameters",
    "__version__",
]
