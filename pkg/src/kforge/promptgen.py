"""Prompt assembly, SEARCH/REPLACE prompt evolution, and the prompt archive.

The generation prompt is a fixed scaffold with named slots plus four
evolvable regions (philosophy, strategies, pitfalls, analysis_guidance).
The meta-prompter proposes targeted SEARCH/REPLACE diffs restricted to the
evolvable regions; applied diffs produce new immutable PromptState versions
tracked in a capacity-16 archive whose per-entry fitness is the best kernel
fitness achieved under that version.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .backends import ChatBackend, ChatRequest

REGIONS = ("philosophy", "strategies", "pitfalls", "analysis_guidance")
DEFAULT_MAX_MUTATIONS = 3
DEFAULT_ARCHIVE_CAPACITY = 16
DEFAULT_UPDATE_FREQUENCY = 10

SEED_VERSION_ID = "seed"

_REGION_BEGIN = "<<KF:REGION {name}>>"
_REGION_END = "<<KF:ENDREGION {name}>>"

_DIFF_RE = re.compile(
    r"<<<<SEARCH region=(?P<region>\w+)\n(?P<search>.*?)\n====\n(?P<replace>.*?)\n?>>>>REPLACE",
    re.DOTALL,
)


class RenderError(ValueError):
    pass


class SearchNotFound(ValueError):
    pass


class AmbiguousMatch(ValueError):
    pass


class RegionViolation(ValueError):
    pass


class TooManyMutations(ValueError):
    pass


class NoParsableDiffs(ValueError):
    pass


class UnknownVersion(KeyError):
    pass


DEFAULT_SCAFFOLD = """\
You are a {language} programming expert specializing in GPU kernel optimization. \
Given a reference implementation, your objective is to create a performant kernel \
with identical functionality. The code you generate will be pasted into an existing \
project; follow the existing code structure and function signatures.
{examples_block}
Reference code / Task:
This is the reference implementation:
{reference_code}
{instructions_block}{top_kernel_block}{last_kernel_block}
Hardware specification:
Your code will run on the following hardware:
{hardware}
Please consider the hardware specification when improving the code.

Main Instructions:
1. Provide a functional kernel that matches the reference implementation.
2. Use constructs to efficiently run the code on GPU.
3. Provide the complete code in a code block.

Optimization philosophy:
{philosophy_region}

Optimization strategies:
{strategies_region}
{hints_block}
Common pitfalls:
{pitfalls_region}

Analysis guidance:
{analysis_region}

Critical Requirements:
1. The kernel must exactly match the reference's functionality.
2. The code must compile and run properly on the GPU.
3. Do not cache or reuse previous results; ensure the code executes fully on each run.

Response Format:
1. Analysis: summarize the issues found in the previous kernel and log, then explain \
your proposed changes and optimizations.
2. Code: provide the complete, improved {language} code in a code block:
```
Your code here
```
"""

TEMPLATE_REQUEST = """\
To optimize this kernel for specific hardware, please propose a templated kernel \
with some template parameters that can be tuned. Write an extension that implements \
a templated {language} kernel and a forward function for dispatching. Select \
suitable parameter options by adding them as dispatch options in the forward function.

Requirements:
1. The kernel should be templated on suitable parameters, e.g. block size.
2. The forward_templated function should launch the kernel with the given parameter values.
3. The forward function must have standard arguments corresponding to the template \
parameters of forward_templated and select the correct instantiation based on the \
input values.
4. The code must match the given kernel in functionality.
"""


def _version_id(evolvable: dict[str, str], parent: Optional[str]) -> str:
    h = hashlib.sha256()
    for name in REGIONS:
        h.update(name.encode())
        h.update(b"\x00")
        h.update(evolvable[name].encode())
        h.update(b"\x01")
    h.update((parent or "").encode())
    return "v" + h.hexdigest()[:12]


@dataclass(frozen=True)
class PromptState:
    """Immutable prompt version: fixed scaffold plus four evolvable regions."""

    fixed_scaffold: str
    evolvable: tuple[tuple[str, str], ...]  # region name -> text, frozen
    version_id: str
    parent_version: Optional[str] = None

    def __post_init__(self):
        names = tuple(n for n, _ in self.evolvable)
        if names != REGIONS:
            raise ValueError(f"expected exactly the regions {REGIONS}, got {names}")

    def region(self, name: str) -> str:
        return dict(self.evolvable)[name]

    def with_regions(self, updated: dict[str, str]) -> "PromptState":
        merged = {name: updated.get(name, text) for name, text in self.evolvable}
        vid = _version_id(merged, self.version_id)
        return PromptState(
            fixed_scaffold=self.fixed_scaffold,
            evolvable=tuple((n, merged[n]) for n in REGIONS),
            version_id=vid,
            parent_version=self.version_id,
        )

    def to_dict(self) -> dict:
        return {
            "fixed_scaffold": self.fixed_scaffold,
            "evolvable": {n: t for n, t in self.evolvable},
            "version_id": self.version_id,
            "parent_version": self.parent_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptState":
        return cls(
            fixed_scaffold=d["fixed_scaffold"],
            evolvable=tuple((n, d["evolvable"][n]) for n in REGIONS),
            version_id=d["version_id"],
            parent_version=d.get("parent_version"),
        )


@dataclass
class PromptDiff:
    region: str
    search: str
    replace: str

    def __post_init__(self):
        if not self.search:
            raise ValueError("search must be non-empty")

    def to_dict(self) -> dict:
        return {"region": self.region, "search": self.search, "replace": self.replace}


def default_prompt_state() -> PromptState:
    """Seed prompt: shipped scaffold and region data files."""
    data = resources.files("kforge.data")
    evolvable = {}
    for name in REGIONS:
        evolvable[name] = data.joinpath(f"region_{name}.txt").read_text(
            encoding="utf-8"
        ).rstrip("\n")
    return PromptState(
        fixed_scaffold=DEFAULT_SCAFFOLD,
        evolvable=tuple((n, evolvable[n]) for n in REGIONS),
        version_id=SEED_VERSION_ID,
    )


def _wrap_region(name: str, text: str) -> str:
    return (
        _REGION_BEGIN.format(name=name)
        + "\n"
        + text
        + "\n"
        + _REGION_END.format(name=name)
    )


def build_prompt(
    task,
    top: Optional[tuple] = None,
    last: Optional[tuple] = None,
    hints: Optional[list[str]] = None,
    hardware: str = "unspecified hardware",
    prompt: Optional[PromptState] = None,
    example: Optional[tuple[str, str]] = None,
    parameter_tuning: bool = False,
) -> str:
    """Render the generation prompt. Deterministic in its inputs.

    `top` and `last` are (candidate, result) pairs; omitted optional slots
    collapse cleanly. With `parameter_tuning` the templated-kernel request
    is appended and the given kernel is the `top` candidate.
    """
    state = prompt if prompt is not None else default_prompt_state()
    language = task.language.value.upper()

    examples_block = ""
    if example is not None:
        ref, kern = example
        examples_block = (
            "\nExamples:\n"
            f"Here is an example of a correct {language} kernel for a given reference:\n"
            f"{ref}\n{kern}\n"
        )

    instructions_block = ""
    if task.user_instructions:
        instructions_block = f"\nUser instructions:\n{task.user_instructions}\n"

    top_kernel_block = ""
    if top is not None:
        cand, res = top
        runtime = f"{res.runtime_ms:.6g} ms" if res.runtime_ms is not None else "n/a"
        top_kernel_block = (
            "\nTop performing kernel:\n"
            f"This is the best kernel tested so far (Runtime: {runtime}):\n"
            f"{cand.source}\n"
        )

    last_kernel_block = ""
    if last is not None:
        cand, res = last
        runtime = f"{res.runtime_ms:.6g} ms" if res.runtime_ms is not None else "n/a"
        last_kernel_block = (
            "\nLast tested kernel:\n"
            f"Here is the last kernel we tested (Runtime: {runtime}):\n"
            f"{cand.source}\n"
            "Console output from running this kernel:\n"
            f"{res.log}\n"
        )

    hints_block = ""
    if hints:
        hints_block = "\nGradient-derived optimization hints:\n" + "".join(
            f"- {h}\n" for h in hints
        )

    slots = {
        "language": language,
        "examples_block": examples_block,
        "reference_code": task.reference_code,
        "instructions_block": instructions_block,
        "top_kernel_block": top_kernel_block,
        "last_kernel_block": last_kernel_block,
        "hardware": hardware,
        "hints_block": hints_block,
        "philosophy_region": _wrap_region("philosophy", state.region("philosophy")),
        "strategies_region": _wrap_region("strategies", state.region("strategies")),
        "pitfalls_region": _wrap_region("pitfalls", state.region("pitfalls")),
        "analysis_region": _wrap_region(
            "analysis_guidance", state.region("analysis_guidance")
        ),
    }
    try:
        rendered = state.fixed_scaffold.format_map(slots)
    except KeyError as e:
        raise RenderError(f"unfilled required slot: {e}") from e

    if parameter_tuning:
        rendered += "\n" + TEMPLATE_REQUEST.format(language=language)
    return rendered


def apply_prompt_diff(
    state: PromptState,
    diffs: list[PromptDiff],
    max_mutations: int = DEFAULT_MAX_MUTATIONS,
) -> PromptState:
    """Apply SEARCH/REPLACE diffs to the evolvable regions only.

    Each search must match exactly once inside its named region. A search
    that is absent from the region but present in the fixed scaffold is a
    region violation.
    """
    if len(diffs) > max_mutations:
        raise TooManyMutations(f"{len(diffs)} diffs exceed the limit of {max_mutations}")
    regions = {n: t for n, t in state.evolvable}
    for diff in diffs:
        if diff.region not in regions:
            raise RegionViolation(f"unknown region {diff.region!r}")
        text = regions[diff.region]
        count = text.count(diff.search)
        if count == 0:
            if diff.search in state.fixed_scaffold:
                raise RegionViolation(
                    "diff targets the fixed scaffold, not an evolvable region"
                )
            raise SearchNotFound(
                f"search text not found in region {diff.region!r}"
            )
        if count > 1:
            raise AmbiguousMatch(
                f"search text occurs {count} times in region {diff.region!r}"
            )
        regions[diff.region] = text.replace(diff.search, diff.replace, 1)
    return state.with_regions(regions)


def should_update_prompt(generation: int, frequency: int = DEFAULT_UPDATE_FREQUENCY) -> bool:
    if frequency < 1:
        raise ValueError("frequency must be >= 1")
    return generation > 0 and generation % frequency == 0


def parse_prompt_diffs(text: str) -> tuple[list[PromptDiff], list[str]]:
    """Extract well-formed diffs; malformed candidates are dropped with reasons."""
    diffs = []
    dropped = []
    for m in _DIFF_RE.finditer(text):
        region, search, replace = m.group("region"), m.group("search"), m.group("replace")
        if region not in REGIONS:
            dropped.append(f"unknown region {region!r}")
            continue
        if not search.strip():
            dropped.append("empty search text")
            continue
        diffs.append(PromptDiff(region=region, search=search, replace=replace))
    return diffs, dropped


def request_prompt_update(
    meta_backend: ChatBackend,
    state: PromptState,
    recent: list[tuple],
    max_mutations: int = DEFAULT_MAX_MUTATIONS,
    model: str = "mock",
    seed: Optional[int] = None,
) -> tuple[list[PromptDiff], list[str]]:
    """Ask the meta-prompter for prompt diffs; parse but never apply them.

    Excess diffs beyond `max_mutations` are dropped in returned order.
    """
    if not recent:
        raise ValueError("recent outcomes must be non-empty")
    sections = "\n\n".join(
        f"[{name}]\n{text}" for name, text in state.evolvable
    )
    outcomes = []
    for cand, res in recent:
        outcomes.append(
            f"candidate {cand.candidate_id} coord={cand.coord.as_tuple()} "
            f"fitness={cand.fitness:.4f} status={res.status.value}\n"
            f"code:\n{cand.source}\nlog:\n{res.log}"
        )
    content = (
        "You analyze kernel-generation outcomes and refine the guidance prompt.\n"
        "Current evolvable sections:\n"
        f"{sections}\n\n"
        "Recent outcomes:\n" + "\n---\n".join(outcomes) + "\n\n"
        "Diagnose which guidance was missing, misleading, or insufficiently "
        "specific, then emit targeted updates as SEARCH/REPLACE diffs in this "
        "exact format, one block per change, regions limited to "
        f"{', '.join(REGIONS)}:\n"
        "<<<<SEARCH region=NAME\n<text to find>\n====\n<replacement>\n>>>>REPLACE\n"
        f"Emit at most {max_mutations} diffs."
    )
    response = meta_backend.complete(
        ChatRequest(messages=[{"role": "user", "content": content}], model=model, seed=seed)
    )
    diffs, dropped = parse_prompt_diffs(response.text)
    if not diffs:
        raise NoParsableDiffs(
            "meta-prompter response contained no well-formed diff blocks"
        )
    if len(diffs) > max_mutations:
        dropped.extend(
            f"diff {i} beyond max_mutations" for i in range(max_mutations, len(diffs))
        )
        diffs = diffs[:max_mutations]
    return diffs, dropped


@dataclass
class PromptArchiveEntry:
    state: PromptState
    fitness: float = 0.0
    uses: int = 0

    def to_dict(self) -> dict:
        return {"state": self.state.to_dict(), "fitness": self.fitness, "uses": self.uses}


class PromptArchive:
    """Versioned prompt store; capacity-bounded, evicts lowest fitness, never the best."""

    def __init__(self, capacity: int = DEFAULT_ARCHIVE_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: dict[str, PromptArchiveEntry] = {}
        self.current_version: Optional[str] = None

    def add_version(self, state: PromptState) -> None:
        if state.version_id in self.entries:
            self.current_version = state.version_id
            return
        if len(self.entries) >= self.capacity:
            self._evict()
        self.entries[state.version_id] = PromptArchiveEntry(state=state)
        self.current_version = state.version_id

    def _evict(self) -> None:
        best = self.best_version()
        candidates = [
            (e.fitness, vid)
            for vid, e in self.entries.items()
            if vid != best and vid != self.current_version
        ]
        if not candidates:
            return
        _, victim = min(candidates)
        del self.entries[victim]

    def record_prompt_fitness(self, version_id: str, kernel_fitness: float) -> None:
        if version_id not in self.entries:
            raise UnknownVersion(version_id)
        entry = self.entries[version_id]
        entry.fitness = max(entry.fitness, kernel_fitness)
        entry.uses += 1

    def best_version(self) -> Optional[str]:
        if not self.entries:
            return None
        return max(self.entries.items(), key=lambda kv: (kv[1].fitness, kv[0]))[0]

    def get(self, version_id: str) -> PromptArchiveEntry:
        if version_id not in self.entries:
            raise UnknownVersion(version_id)
        return self.entries[version_id]

    def current_state(self) -> PromptState:
        if self.current_version is None:
            raise UnknownVersion("no current prompt version")
        return self.entries[self.current_version].state

    def version_forest(self) -> dict[str, Optional[str]]:
        """version_id -> parent_version, for lineage reconstruction."""
        return {vid: e.state.parent_version for vid, e in self.entries.items()}
