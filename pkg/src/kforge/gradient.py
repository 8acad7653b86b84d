"""Transition tracking and gradient estimation over behavioral space.

A circular buffer records parent->child transitions. From it we estimate,
per occupied cell, a fitness gradient (decay-weighted fitness deltas by
direction), an improvement-rate gradient (conditional improvement
frequencies), and an exploration gradient pointing at empty or low-quality
cells. Their weighted combination drives cell sampling weights and
natural-language mutation hints.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

import numpy as np

from .classifier import BehavioralCoord

OUTCOME_IMPROVEMENT = "improvement"
OUTCOME_NEUTRAL = "neutral"
OUTCOME_REGRESSION = "regression"

DEFAULT_BUFFER_CAPACITY = 256
DEFAULT_HALF_LIFE = 50
DEFAULT_COMBINE_WEIGHTS = (0.4, 0.4, 0.2)
DEFAULT_TEMPERATURE = 0.5
DEFAULT_LOW_QUALITY_THRESHOLD = 0.5  # below "correct" fitness
DEFAULT_HINT_THRESHOLD = 0.05
MAX_HINTS = 3

_DIM_NAMES = ("mem", "algo", "sync")


@dataclass(frozen=True)
class TransitionRecord:
    parent_coord: BehavioralCoord
    child_coord: BehavioralCoord
    delta_fitness: float
    outcome: str
    timestamp: float
    iteration: int

    def to_dict(self) -> dict:
        return {
            "parent_coord": list(self.parent_coord.as_tuple()),
            "child_coord": list(self.child_coord.as_tuple()),
            "delta_fitness": self.delta_fitness,
            "outcome": self.outcome,
            "timestamp": self.timestamp,
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionRecord":
        return cls(
            parent_coord=BehavioralCoord.from_tuple(d["parent_coord"]),
            child_coord=BehavioralCoord.from_tuple(d["child_coord"]),
            delta_fitness=d["delta_fitness"],
            outcome=d["outcome"],
            timestamp=d["timestamp"],
            iteration=d["iteration"],
        )


class TransitionBuffer:
    """Fixed-capacity ring buffer; oldest records are evicted when full."""

    def __init__(self, capacity: int = DEFAULT_BUFFER_CAPACITY):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._records: deque[TransitionRecord] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._records)

    def record_transition(self, rec: TransitionRecord) -> None:
        self._records.append(rec)

    def records(self) -> list[TransitionRecord]:
        return list(self._records)

    def transitions_from(self, cell: BehavioralCoord) -> list[TransitionRecord]:
        return [r for r in self._records if r.parent_coord == cell]

    def occupied_parent_cells(self) -> list[BehavioralCoord]:
        seen = []
        for r in self._records:
            if r.parent_coord not in seen:
                seen.append(r.parent_coord)
        return sorted(seen)


@dataclass(frozen=True)
class DecayWeight:
    half_life_iterations: int = DEFAULT_HALF_LIFE

    def __post_init__(self):
        if self.half_life_iterations <= 0:
            raise ValueError("half_life_iterations must be positive")

    def weight(self, rec_iteration: int, now_iter: int) -> float:
        age = max(0, now_iter - rec_iteration)
        return 2.0 ** (-age / self.half_life_iterations)


@dataclass
class GradientEstimate:
    cell: BehavioralCoord
    grad_f: np.ndarray
    grad_r: np.ndarray
    grad_e: np.ndarray
    combined: np.ndarray
    support: int

    def magnitude(self) -> float:
        return float(np.linalg.norm(self.combined))


def fitness_gradient(
    buffer: TransitionBuffer,
    cell: BehavioralCoord,
    decay: DecayWeight,
    now_iter: int,
) -> np.ndarray:
    """Decay-weighted mean of delta_fitness * sign(move) per dimension."""
    trans = buffer.transitions_from(cell)
    grad = np.zeros(3)
    if not trans:
        return grad
    for t in trans:
        w = decay.weight(t.iteration, now_iter)
        for d in range(3):
            move = t.child_coord.as_tuple()[d] - t.parent_coord.as_tuple()[d]
            grad[d] += t.delta_fitness * np.sign(move) * w
    return grad / len(trans)


def improvement_rate_gradient(
    buffer: TransitionBuffer, cell: BehavioralCoord
) -> np.ndarray:
    """P(improvement | move up) - P(improvement | move down), per dimension.

    A conditional with zero samples contributes 0 for its term.
    """
    trans = buffer.transitions_from(cell)
    grad = np.zeros(3)
    for d in range(3):
        pos = [t for t in trans if t.child_coord.as_tuple()[d] > t.parent_coord.as_tuple()[d]]
        neg = [t for t in trans if t.child_coord.as_tuple()[d] < t.parent_coord.as_tuple()[d]]
        p_pos = (
            sum(1 for t in pos if t.outcome == OUTCOME_IMPROVEMENT) / len(pos)
            if pos
            else 0.0
        )
        p_neg = (
            sum(1 for t in neg if t.outcome == OUTCOME_IMPROVEMENT) / len(neg)
            if neg
            else 0.0
        )
        grad[d] = p_pos - p_neg
    return grad


def exploration_gradient(
    cell_fitness: dict[tuple[int, int, int], float],
    cell: BehavioralCoord,
    low_quality_threshold: float = DEFAULT_LOW_QUALITY_THRESHOLD,
    levels: int = 4,
) -> np.ndarray:
    """Unit vector toward empty and low-quality cells, inverse-distance weighted.

    Empty cells count with fitness 0; the cell itself is excluded. The raw
    sum is L2-normalized when non-zero so combination weights stay meaningful.
    """
    occupied = cell_fitness
    fits = list(occupied.values())
    f_max = max(fits) if fits else 0.0
    b = np.array(cell.as_tuple(), dtype=float)
    raw = np.zeros(3)
    for cx in range(levels):
        for cy in range(levels):
            for cz in range(levels):
                key = (cx, cy, cz)
                if key == cell.as_tuple():
                    continue
                f_c = occupied.get(key)
                if f_c is None:
                    f_c = 0.0
                elif f_c >= low_quality_threshold:
                    continue
                c = np.array(key, dtype=float)
                dist = float(np.abs(c - b).sum())
                raw += ((f_max - f_c) / dist) * ((c - b) / dist)
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        return raw
    return raw / norm


def combined_gradient(
    grad_f: np.ndarray,
    grad_r: np.ndarray,
    grad_e: np.ndarray,
    weights: tuple[float, float, float] = DEFAULT_COMBINE_WEIGHTS,
) -> np.ndarray:
    if any(w < 0 for w in weights):
        raise ValueError("combination weights must be non-negative")
    a, b, g = weights
    return a * np.asarray(grad_f) + b * np.asarray(grad_r) + g * np.asarray(grad_e)


def estimate_all(
    buffer: TransitionBuffer,
    cell_fitness: dict[tuple[int, int, int], float],
    decay: DecayWeight,
    now_iter: int,
    weights: tuple[float, float, float] = DEFAULT_COMBINE_WEIGHTS,
    low_quality_threshold: float = DEFAULT_LOW_QUALITY_THRESHOLD,
    levels: int = 4,
) -> list[GradientEstimate]:
    """One GradientEstimate per occupied cell."""
    estimates = []
    for key in sorted(cell_fitness):
        cell = BehavioralCoord.from_tuple(key)
        gf = fitness_gradient(buffer, cell, decay, now_iter)
        gr = improvement_rate_gradient(buffer, cell)
        ge = exploration_gradient(cell_fitness, cell, low_quality_threshold, levels)
        estimates.append(
            GradientEstimate(
                cell=cell,
                grad_f=gf,
                grad_r=gr,
                grad_e=ge,
                combined=combined_gradient(gf, gr, ge, weights),
                support=len(buffer.transitions_from(cell)),
            )
        )
    return estimates


def sampling_weights(
    estimates: list[GradientEstimate], temperature: float = DEFAULT_TEMPERATURE
) -> dict[tuple[int, int, int], float]:
    """Softmax of combined-gradient magnitudes over cells; sums to 1."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not estimates:
        return {}
    mags = np.array([e.magnitude() for e in estimates]) / temperature
    mags -= mags.max()  # numerical stability; softmax is shift-invariant
    exps = np.exp(mags)
    probs = exps / exps.sum()
    return {e.cell.as_tuple(): float(p) for e, p in zip(estimates, probs)}


@dataclass
class HintTable:
    """Phrases keyed by (dimension, sign, current level)."""

    phrases: dict[tuple[str, int, int], str]

    def lookup(self, dim: str, sign: int, level: int) -> Optional[str]:
        return self.phrases.get((dim, sign, level))

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for key in sorted(self.phrases):
            h.update(f"{key}\t{self.phrases[key]}\n".encode())
        return h.hexdigest()


def parse_hint_table(text: str) -> HintTable:
    """Tab-separated records: dimension, sign (+/-), level, phrase."""
    phrases = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        dim, sign, level, phrase = line.split("\t", 3)
        phrases[(dim, 1 if sign == "+" else -1, int(level))] = phrase
    return HintTable(phrases)


def default_hint_table() -> HintTable:
    data = resources.files("kforge.data").joinpath("hints.tsv")
    return parse_hint_table(data.read_text(encoding="utf-8"))


def gradient_to_hints(
    combined: np.ndarray,
    coord: BehavioralCoord,
    hint_table: Optional[HintTable] = None,
    threshold: float = DEFAULT_HINT_THRESHOLD,
    max_hints: int = MAX_HINTS,
) -> list[str]:
    """Translate gradient directions into mutation hints.

    Hints that would push a coordinate outside [0, 3] are suppressed;
    at most `max_hints` are returned, highest magnitude first.
    """
    table = hint_table if hint_table is not None else default_hint_table()
    combined = np.asarray(combined, dtype=float)
    scored = []
    levels = coord.as_tuple()
    for d, dim in enumerate(_DIM_NAMES):
        mag = abs(float(combined[d]))
        if mag <= threshold:
            continue
        sign = 1 if combined[d] > 0 else -1
        if (sign > 0 and levels[d] >= 3) or (sign < 0 and levels[d] <= 0):
            continue
        phrase = table.lookup(dim, sign, levels[d])
        if phrase:
            scored.append((mag, phrase))
    scored.sort(key=lambda x: -x[0])
    return [p for _, p in scored[:max_hints]]
