"""MAP-Elites archive: one elite per behavioral cell, parent selection,
and island partitioning with periodic ring migration."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .classifier import BehavioralCoord

GRID_LEVELS = 4
NUM_ISLANDS = 4
DEFAULT_MIGRATION_PERIOD = 10

STRATEGY_NAMES = ("uniform", "fitness", "curiosity", "island")


class EmptyArchive(RuntimeError):
    pass


class MissingWeights(ValueError):
    pass


class AllZeroRatios(ValueError):
    pass


@dataclass
class KernelCandidate:
    candidate_id: str
    source: str
    coord: BehavioralCoord
    fitness: float
    parent_id: Optional[str] = None
    generation: int = 0
    eval_record_id: Optional[str] = None
    prompt_version_id: str = "seed"

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness out of range: {self.fitness}")
        if self.parent_id == self.candidate_id:
            raise ValueError("candidate cannot be its own parent")
        if self.generation < 0:
            raise ValueError("generation must be >= 0")

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "source": self.source,
            "coord": list(self.coord.as_tuple()),
            "fitness": self.fitness,
            "parent_id": self.parent_id,
            "generation": self.generation,
            "eval_record_id": self.eval_record_id,
            "prompt_version_id": self.prompt_version_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelCandidate":
        return cls(
            candidate_id=d["candidate_id"],
            source=d["source"],
            coord=BehavioralCoord.from_tuple(d["coord"]),
            fitness=d["fitness"],
            parent_id=d.get("parent_id"),
            generation=d.get("generation", 0),
            eval_record_id=d.get("eval_record_id"),
            prompt_version_id=d.get("prompt_version_id", "seed"),
        )


@dataclass(frozen=True)
class InsertOutcome:
    kind: str  # "new_cell" | "replaced_elite" | "rejected"
    displaced_id: Optional[str] = None

    def __post_init__(self):
        if (self.kind == "replaced_elite") != (self.displaced_id is not None):
            raise ValueError("displaced_id present iff kind is replaced_elite")

    @property
    def inserted(self) -> bool:
        return self.kind in ("new_cell", "replaced_elite")


def island_of(coord: BehavioralCoord) -> int:
    """Island index: cells are banded by d_algo (4 islands over 4 levels)."""
    return coord.d_algo % NUM_ISLANDS


def all_coords(levels: int = GRID_LEVELS):
    for t in itertools.product(range(levels), repeat=3):
        yield t


class Archive:
    """The 4x4x4 MAP-Elites grid. Single-writer; reads are snapshot-safe."""

    def __init__(self, levels: int = GRID_LEVELS):
        self.levels = levels
        self.cells: dict[tuple[int, int, int], KernelCandidate] = {}

    @property
    def occupancy(self) -> int:
        return len(self.cells)

    def elites(self) -> list[KernelCandidate]:
        return [self.cells[c] for c in sorted(self.cells)]

    def best(self) -> Optional[KernelCandidate]:
        if not self.cells:
            return None
        return max(self.elites(), key=lambda c: c.fitness)

    def insert(self, cand: KernelCandidate) -> InsertOutcome:
        """Strict-improvement insertion; equal fitness keeps the incumbent."""
        key = cand.coord.as_tuple()
        incumbent = self.cells.get(key)
        if incumbent is None:
            self.cells[key] = cand
            return InsertOutcome("new_cell")
        if cand.fitness > incumbent.fitness:
            self.cells[key] = cand
            return InsertOutcome("replaced_elite", displaced_id=incumbent.candidate_id)
        return InsertOutcome("rejected")

    def coverage_stats(self) -> dict:
        elites = self.elites()
        hist = {
            dim: [0] * self.levels for dim in ("d_mem", "d_algo", "d_sync")
        }
        for c in elites:
            hist["d_mem"][c.coord.d_mem] += 1
            hist["d_algo"][c.coord.d_algo] += 1
            hist["d_sync"][c.coord.d_sync] += 1
        fits = [c.fitness for c in elites]
        return {
            "occupancy": len(elites),
            "best_fitness": max(fits) if fits else 0.0,
            "mean_fitness": float(np.mean(fits)) if fits else 0.0,
            "histograms": hist,
        }

    def to_records(self) -> list[dict]:
        return [c.to_dict() for c in self.elites()]

    @classmethod
    def from_records(cls, records: list[dict], levels: int = GRID_LEVELS) -> "Archive":
        arch = cls(levels=levels)
        for rec in records:
            cand = KernelCandidate.from_dict(rec)
            arch.cells[cand.coord.as_tuple()] = cand
        return arch


@dataclass(frozen=True)
class SelectionStrategy:
    """One of the base strategies, or a ratio mix of them."""

    name: str = "uniform"
    ratios: Optional[tuple[tuple[str, float], ...]] = None  # set for mixes

    def __post_init__(self):
        if self.name != "mix" and self.name not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.name!r}")


UNIFORM = SelectionStrategy("uniform")
FITNESS_PROPORTIONATE = SelectionStrategy("fitness")
CURIOSITY = SelectionStrategy("curiosity")
ISLAND = SelectionStrategy("island")


def mix_strategies(ratios: dict[str, float]) -> SelectionStrategy:
    """Composite strategy: sample a base strategy by normalized ratio, then delegate."""
    if any(v < 0 for v in ratios.values()):
        raise ValueError("ratios must be non-negative")
    total = sum(ratios.values())
    if total <= 0:
        raise AllZeroRatios("ratios must sum to a positive value")
    for name in ratios:
        if name not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {name!r}")
    normalized = tuple(sorted((k, v / total) for k, v in ratios.items() if v > 0))
    if len(normalized) == 1:
        return SelectionStrategy(normalized[0][0])
    return SelectionStrategy("mix", ratios=normalized)


def select_parent(
    archive: Archive,
    strategy: SelectionStrategy,
    weights: Optional[dict[tuple, float]] = None,
    rng: Optional[np.random.Generator] = None,
    island: int = 0,
) -> KernelCandidate:
    """Sample a parent elite according to the strategy.

    `weights` (gradient-derived) are required for the curiosity strategy;
    `island` is the caller's current island for the island strategy.
    """
    if archive.occupancy == 0:
        raise EmptyArchive("cannot select from an empty archive")
    rng = rng if rng is not None else np.random.default_rng()

    name = strategy.name
    if name == "mix":
        names = [n for n, _ in strategy.ratios]
        probs = np.array([r for _, r in strategy.ratios])
        name = names[int(rng.choice(len(names), p=probs / probs.sum()))]

    keys = sorted(archive.cells)
    if name == "uniform":
        probs = np.ones(len(keys))
    elif name == "fitness":
        probs = np.array([archive.cells[k].fitness for k in keys])
        if probs.sum() <= 0:
            probs = np.ones(len(keys))
    elif name == "curiosity":
        if weights is None:
            raise MissingWeights("curiosity selection requires gradient weights")
        probs = np.array([max(weights.get(k, 0.0), 0.0) for k in keys])
        if probs.sum() <= 0:
            probs = np.ones(len(keys))
    elif name == "island":
        in_island = np.array(
            [1.0 if island_of(archive.cells[k].coord) == island else 0.0 for k in keys]
        )
        probs = in_island if in_island.sum() > 0 else np.ones(len(keys))
    else:  # pragma: no cover - guarded by SelectionStrategy
        raise ValueError(f"unknown strategy {name!r}")

    idx = int(rng.choice(len(keys), p=probs / probs.sum()))
    return archive.cells[keys[idx]]


@dataclass
class MigrationEvent:
    from_island: int
    to_island: int
    candidate_id: str
    target_coord: tuple[int, int, int]
    outcome: str


def migrate(
    archive: Archive, generation: int, period: int = DEFAULT_MIGRATION_PERIOD
) -> list[MigrationEvent]:
    """Ring migration every `period` generations.

    Each island's best elite is offered, via insert semantics, to the
    corresponding-coordinate cell in each ring neighbor (the same
    (d_mem, d_sync) with d_algo mapped to the neighbor's band).
    """
    if period <= 0:
        raise ValueError("period must be positive")
    if generation <= 0 or generation % period != 0:
        return []
    report: list[MigrationEvent] = []
    best_per_island: dict[int, KernelCandidate] = {}
    for cand in archive.elites():
        isl = island_of(cand.coord)
        cur = best_per_island.get(isl)
        if cur is None or cand.fitness > cur.fitness:
            best_per_island[isl] = cand
    for isl in sorted(best_per_island):
        donor = best_per_island[isl]
        for neighbor in ((isl - 1) % NUM_ISLANDS, (isl + 1) % NUM_ISLANDS):
            if neighbor == isl:
                continue
            target = BehavioralCoord(donor.coord.d_mem, neighbor, donor.coord.d_sync)
            migrant = replace(
                donor,
                candidate_id=f"{donor.candidate_id}-mig{generation}i{neighbor}",
                coord=target,
                parent_id=donor.candidate_id,
            )
            outcome = archive.insert(migrant)
            report.append(
                MigrationEvent(
                    from_island=isl,
                    to_island=neighbor,
                    candidate_id=donor.candidate_id,
                    target_coord=target.as_tuple(),
                    outcome=outcome.kind,
                )
            )
    return report
