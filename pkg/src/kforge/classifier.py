"""Static behavioral classification of kernel sources.

Assigns each source a deterministic coordinate (d_mem, d_algo, d_sync),
each component a discrete level 0-3, via weighted pattern matching with
category-specific scores. Pattern tables are plain-text data files so
descriptors can be tuned without code changes; the active table's content
hash is recorded in the run log.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources

DIMENSIONS = ("mem", "algo", "sync")

# Explicit annotation required for algo level 3 (not statically decidable);
# matched before comment stripping.
NOVEL_ALGO_ANNOTATION = re.compile(r"KF:ALGO-LEVEL-3")

# Sync matches carrying this flag are credited to d_mem instead of d_sync
# when they sit near a local-memory access (heuristic proximity rule).
FLAG_SHARED_MEM_SYNC = "shared_mem_sync"
_SUPPRESSION_WINDOW_LINES = 10


class UnknownLanguage(ValueError):
    pass


class MalformedPatternTable(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BehavioralCoord:
    d_mem: int
    d_algo: int
    d_sync: int

    def __post_init__(self):
        for name, v in zip(("d_mem", "d_algo", "d_sync"), self.as_tuple()):
            if not 0 <= v <= 3:
                raise ValueError(f"{name} out of range: {v}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.d_mem, self.d_algo, self.d_sync)

    @classmethod
    def from_tuple(cls, t) -> "BehavioralCoord":
        return cls(int(t[0]), int(t[1]), int(t[2]))


@dataclass(frozen=True)
class Pattern:
    dimension: str
    category: str
    level: int
    weight: float
    regex: str
    flags: str = ""

    def compiled(self) -> re.Pattern:
        return re.compile(self.regex, re.MULTILINE)


@dataclass
class PatternTable:
    patterns: list[Pattern]
    # Cumulative category score required to unlock each level.
    thresholds: dict[int, float] = field(
        default_factory=lambda: {1: 1.0, 2: 1.0, 3: 1.0}
    )

    def __post_init__(self):
        for p in self.patterns:
            if p.dimension not in DIMENSIONS:
                raise MalformedPatternTable(f"unknown dimension {p.dimension!r}")
            if not 0 <= p.level <= 3:
                raise MalformedPatternTable(f"level out of range: {p.level}")

    def for_dimension(self, dim: str) -> list[Pattern]:
        return [p for p in self.patterns if p.dimension == dim]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.patterns:
            h.update(
                f"{p.dimension}\t{p.category}\t{p.level}\t{p.weight}\t{p.flags}\t{p.regex}\n".encode()
            )
        for lvl in sorted(self.thresholds):
            h.update(f"threshold\t{lvl}\t{self.thresholds[lvl]}\n".encode())
        return h.hexdigest()


def parse_pattern_table(text: str) -> PatternTable:
    """Parse the tabular table format: one tab-separated record per line.

    Columns: dimension, category, level, weight, flags ('-' for none), regex.
    Lines starting with '#' and blank lines are ignored.
    """
    patterns = []
    thresholds = {1: 1.0, 2: 1.0, 3: 1.0}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t", 5)
        if parts[0] == "threshold":
            if len(parts) != 3:
                raise MalformedPatternTable(f"line {lineno}: bad threshold record")
            thresholds[int(parts[1])] = float(parts[2])
            continue
        if len(parts) != 6:
            raise MalformedPatternTable(f"line {lineno}: expected 6 columns")
        dim, category, level, weight, flags, regex = parts
        patterns.append(
            Pattern(
                dimension=dim,
                category=category,
                level=int(level),
                weight=float(weight),
                regex=regex,
                flags="" if flags == "-" else flags,
            )
        )
    return PatternTable(patterns=patterns, thresholds=thresholds)


def load_pattern_table(path) -> PatternTable:
    with open(path, encoding="utf-8") as f:
        return parse_pattern_table(f.read())


def default_pattern_table(language) -> PatternTable:
    """Shipped per-language table. `language` is a Language enum or its name."""
    name = getattr(language, "value", str(language)).lower()
    if name not in ("sycl", "cuda", "triton"):
        raise UnknownLanguage(f"no pattern table for {language!r}")
    data = resources.files("kforge.data").joinpath(f"patterns_{name}.tsv")
    return parse_pattern_table(data.read_text(encoding="utf-8"))


def strip_comments(source: str) -> str:
    """Remove //, /* */ and # comments, preserving line structure."""
    out = re.sub(r"/\*.*?\*/", lambda m: "\n" * m.group(0).count("\n"), source, flags=re.DOTALL)
    out = re.sub(r"//[^\n]*", "", out)
    out = re.sub(r"(?m)^\s*#(?!include|pragma|define|if|endif|else)[^\n]*", "", out)
    return out


def _match_positions(source: str, pattern: Pattern) -> list[int]:
    """Line numbers (0-based) of every occurrence of the pattern."""
    positions = []
    for m in pattern.compiled().finditer(source):
        positions.append(source.count("\n", 0, m.start()))
    return positions


def _local_memory_lines(source: str, table: PatternTable) -> set[int]:
    lines: set[int] = set()
    for p in table.for_dimension("mem"):
        if p.category == "slm":
            lines.update(_match_positions(source, p))
    return lines


def _category_scores(source: str, table: PatternTable) -> dict[str, dict[str, float]]:
    """Per-dimension, per-category cumulative scores with suppression applied.

    A sync pattern flagged shared_mem_sync that occurs within the suppression
    window of a local-memory access is credited to d_mem (category 'slm')
    rather than d_sync.
    """
    slm_lines = _local_memory_lines(source, table)
    scores: dict[str, dict[str, float]] = {d: {} for d in DIMENSIONS}
    for p in table.patterns:
        positions = _match_positions(source, p)
        if not positions:
            continue
        credited = p.dimension
        category = p.category
        n = len(positions)
        if p.dimension == "sync" and FLAG_SHARED_MEM_SYNC in p.flags and slm_lines:
            suppressed = [
                pos
                for pos in positions
                if any(abs(pos - sl) <= _SUPPRESSION_WINDOW_LINES for sl in slm_lines)
            ]
            if suppressed:
                mem = scores["mem"]
                mem["slm"] = mem.get("slm", 0.0) + p.weight * len(suppressed)
                n -= len(suppressed)
            if n == 0:
                continue
        dim_scores = scores[credited]
        dim_scores[category] = dim_scores.get(category, 0.0) + p.weight * n
    return scores


def dimension_score(source: str, table: PatternTable, dim: str) -> tuple[float, int]:
    """Total matched weight and attained level for one dimension."""
    if dim not in DIMENSIONS:
        raise ValueError(f"unknown dimension {dim!r}")
    annotated_novel = dim == "algo" and bool(NOVEL_ALGO_ANNOTATION.search(source))
    stripped = strip_comments(source)
    scores = _category_scores(stripped, table)[dim]
    total = sum(scores.values())
    level = 0
    slm_lines = _local_memory_lines(stripped, table)
    for p in table.for_dimension(dim):
        if p.level <= level or p.level == 0:
            continue
        positions = _match_positions(stripped, p)
        if not positions:
            continue
        if (
            p.dimension == "sync"
            and FLAG_SHARED_MEM_SYNC in p.flags
            and slm_lines
            and all(
                any(abs(pos - sl) <= _SUPPRESSION_WINDOW_LINES for sl in slm_lines)
                for pos in positions
            )
        ):
            continue  # fully suppressed: evidence belongs to d_mem
        if scores.get(p.category, 0.0) >= table.thresholds.get(p.level, 1.0):
            level = max(level, p.level)
    if dim == "algo":
        if annotated_novel:
            level = 3
        else:
            level = min(level, 2)
    return total, level


def classify(source: str, table: PatternTable) -> BehavioralCoord:
    """Deterministic behavioral coordinate of a kernel source."""
    levels = [dimension_score(source, table, d)[1] for d in DIMENSIONS]
    return BehavioralCoord(*levels)
