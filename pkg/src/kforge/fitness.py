"""Fitness computation, correctness checking, and reporting metrics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class Status(str, enum.Enum):
    COMPILE_FAIL = "compile_fail"
    INCORRECT = "incorrect"
    CORRECT = "correct"


class ShapeMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class NonPositiveTime(ValueError):
    pass


class MissingSpeedup(ValueError):
    pass


@dataclass
class NuStats:
    """Relative-precision statistics over one output comparison."""

    violation_fraction: float
    max_nu: float

    def to_dict(self) -> dict:
        return {"violation_fraction": self.violation_fraction, "max_nu": self.max_nu}

    @classmethod
    def from_dict(cls, d: dict) -> "NuStats":
        return cls(d["violation_fraction"], d["max_nu"])


@dataclass
class EvaluationResult:
    """Outcome of compiling, checking, and benchmarking one candidate."""

    status: Status
    baseline_ms: Optional[float] = None
    runtime_ms: Optional[float] = None
    runtime_std_ms: Optional[float] = None
    nu_stats: Optional[NuStats] = None
    cosine_sim: Optional[float] = None
    log: str = ""
    config_used: Optional[tuple] = None
    sweep: Optional[object] = None  # TemplateSweep, attached by evalpipe

    @property
    def speedup(self) -> Optional[float]:
        if self.runtime_ms is None or not self.baseline_ms or self.baseline_ms <= 0:
            return None
        return self.baseline_ms / self.runtime_ms

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "baseline_ms": self.baseline_ms,
            "runtime_ms": self.runtime_ms,
            "runtime_std_ms": self.runtime_std_ms,
            "nu_stats": self.nu_stats.to_dict() if self.nu_stats else None,
            "cosine_sim": self.cosine_sim,
            "log": self.log,
            "config_used": list(self.config_used) if self.config_used else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationResult":
        return cls(
            status=Status(d["status"]),
            baseline_ms=d.get("baseline_ms"),
            runtime_ms=d.get("runtime_ms"),
            runtime_std_ms=d.get("runtime_std_ms"),
            nu_stats=NuStats.from_dict(d["nu_stats"]) if d.get("nu_stats") else None,
            cosine_sim=d.get("cosine_sim"),
            log=d.get("log", ""),
            config_used=tuple(d["config_used"]) if d.get("config_used") else None,
        )


def compute_fitness(res: EvaluationResult, target_speedup: float) -> float:
    """Map an evaluation result to fitness in [0, 1].

    0.0 for compile failures, 0.1 for incorrect kernels, and
    0.5 + 0.5 * min(1, speedup / target) for correct ones.
    """
    if target_speedup <= 0:
        raise ValueError(f"target_speedup must be positive, got {target_speedup}")
    if res.status is Status.COMPILE_FAIL:
        return 0.0
    if res.status is Status.INCORRECT:
        return 0.1
    if res.speedup is None:
        raise MissingSpeedup("correct result without a measured speedup")
    s_norm = min(1.0, res.speedup / target_speedup)
    return 0.5 + 0.5 * s_norm


def check_correctness(
    expected: np.ndarray,
    actual: np.ndarray,
    rel_tol: float = 0.01,
    pass_fraction: float = 0.99,
    eps: float = 1e-6,
) -> tuple[bool, NuStats]:
    """Relative-precision check: nu = |y - yhat| / (|y| + eps) per element.

    Passes iff the fraction of elements with nu < rel_tol is >= pass_fraction.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    expected = np.asarray(expected, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if expected.shape != actual.shape:
        raise ShapeMismatch(f"expected {expected.shape}, actual {actual.shape}")
    nu = np.abs(expected - actual) / (np.abs(expected) + eps)
    violations = nu >= rel_tol
    frac = float(np.mean(violations)) if nu.size else 0.0
    stats = NuStats(violation_fraction=frac, max_nu=float(nu.max()) if nu.size else 0.0)
    return (1.0 - frac) >= pass_fraction, stats


def cosine_similarity(expected: np.ndarray, actual: np.ndarray) -> float:
    """Cosine similarity of the flattened arrays."""
    e = np.asarray(expected, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if e.shape != a.shape:
        raise ShapeMismatch(f"expected {e.shape}, actual {a.shape}")
    ne = float(np.linalg.norm(e))
    na = float(np.linalg.norm(a))
    if ne == 0.0 or na == 0.0:
        raise ZeroVector("cosine similarity undefined for zero vectors")
    return float(np.dot(e, a) / (ne * na))


def fast_p(speedups: list[float], p: float) -> float:
    """Fraction of tasks with speedup strictly greater than p."""
    if not speedups:
        raise EmptyInput("fast_p over an empty list")
    return sum(1 for s in speedups if s > p) / len(speedups)


def hardware_speedup(t_a_of_kb: float, t_a_of_ka: float) -> float:
    """Runtime ratio on device A: kernel optimized elsewhere over kernel optimized on A."""
    if t_a_of_kb <= 0 or t_a_of_ka <= 0:
        raise NonPositiveTime("both runtimes must be positive")
    return t_a_of_kb / t_a_of_ka


def hws_p(values: list[float], p: float) -> float:
    """Fraction of hardware-speedup values strictly greater than p."""
    return fast_p(values, p)


def geometric_mean(values: list[float]) -> float:
    """Geometric mean; callers restrict to correct tasks."""
    if not values:
        raise EmptyInput("geometric mean over an empty list")
    return math.exp(sum(math.log(v) for v in values) / len(values))
