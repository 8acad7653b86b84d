"""Parsing and validation of kernel-optimization tasks.

A task lives in a directory: `task.yaml` with the hyperparameters, one or
more source files carrying marked sections, and optionally an opaque test
harness script. Sections are delimited by line-anchored sentinel markers
`### KF:BEGIN <name>` / `### KF:END <name>` so they survive any host
language's comment syntax.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

SECTION_NAMES = ("reference", "instructions", "initial_kernel")

_BEGIN_RE = re.compile(r"^.*### KF:BEGIN (\w+)\s*$")
_END_RE = re.compile(r"^.*### KF:END (\w+)\s*$")
_SAFE_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")


class Language(str, enum.Enum):
    SYCL = "sycl"
    CUDA = "cuda"
    TRITON = "triton"


class MalformedConfig(ValueError):
    pass


class MissingField(MalformedConfig):
    pass


class UnknownLanguage(MalformedConfig):
    pass


class UnterminatedSection(ValueError):
    pass


class DuplicateSection(ValueError):
    pass


@dataclass
class BenchConstraints:
    min_warmup_time_s: float = 1.0
    min_warmup_iters: int = 10
    inner_loop_min_time_s: float = 0.01
    min_main_iters: int = 10
    min_main_time_s: float = 1.0

    def __post_init__(self):
        for name in (
            "min_warmup_time_s",
            "min_warmup_iters",
            "inner_loop_min_time_s",
            "min_main_iters",
            "min_main_time_s",
        ):
            if getattr(self, name) <= 0:
                raise MalformedConfig(f"{name} must be strictly positive")

    def to_dict(self) -> dict:
        return {
            "min_warmup_time_s": self.min_warmup_time_s,
            "min_warmup_iters": self.min_warmup_iters,
            "inner_loop_min_time_s": self.inner_loop_min_time_s,
            "min_main_iters": self.min_main_iters,
            "min_main_time_s": self.min_main_time_s,
        }


@dataclass
class TestConfig:
    correctness_rel_tol: float = 0.01
    correctness_pass_fraction: float = 0.99
    epsilon_div: float = 1e-6
    benchmark_constraints: BenchConstraints = field(default_factory=BenchConstraints)
    harness_path: Optional[str] = None  # opaque; executed by the execution worker

    def __post_init__(self):
        if not 0 < self.correctness_rel_tol < 1:
            raise MalformedConfig("correctness_rel_tol must be in (0, 1)")
        if not 0 < self.correctness_pass_fraction <= 1:
            raise MalformedConfig("correctness_pass_fraction must be in (0, 1]")
        if self.epsilon_div <= 0:
            raise MalformedConfig("epsilon_div must be positive")

    def to_dict(self) -> dict:
        return {
            "rel_tol": self.correctness_rel_tol,
            "pass_fraction": self.correctness_pass_fraction,
            "epsilon": self.epsilon_div,
            "benchmark": self.benchmark_constraints.to_dict(),
            "test_harness": self.harness_path,
        }


@dataclass
class TaskSpec:
    task_id: str
    language: Language
    reference_code: str
    user_instructions: Optional[str] = None
    initial_kernel: Optional[str] = None
    test_config: TestConfig = field(default_factory=TestConfig)
    target_speedup: float = 2.0
    hardware_profile_id: str = "default"

    def __post_init__(self):
        if not self.task_id or not _SAFE_ID_RE.match(self.task_id):
            raise MalformedConfig(f"task_id not filesystem-safe: {self.task_id!r}")
        if not self.reference_code:
            raise MalformedConfig("reference_code must be non-empty")
        if self.target_speedup <= 0:
            raise MalformedConfig("target_speedup must be positive")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "language": self.language.value,
            "reference_code": self.reference_code,
            "user_instructions": self.user_instructions,
            "initial_kernel": self.initial_kernel,
            "test_config": self.test_config.to_dict(),
            "target_speedup": self.target_speedup,
            "hardware_profile": self.hardware_profile_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        tc = d.get("test_config", {})
        return cls(
            task_id=d["task_id"],
            language=Language(d["language"]),
            reference_code=d["reference_code"],
            user_instructions=d.get("user_instructions"),
            initial_kernel=d.get("initial_kernel"),
            test_config=_test_config_from_dict(tc),
            target_speedup=d.get("target_speedup", 2.0),
            hardware_profile_id=d.get("hardware_profile", "default"),
        )


def _test_config_from_dict(tc: dict) -> TestConfig:
    bench = tc.get("benchmark") or {}
    return TestConfig(
        correctness_rel_tol=tc.get("rel_tol", 0.01),
        correctness_pass_fraction=tc.get("pass_fraction", 0.99),
        epsilon_div=tc.get("epsilon", 1e-6),
        benchmark_constraints=BenchConstraints(**bench),
        harness_path=tc.get("test_harness"),
    )


def extract_marked_sections(text: str) -> dict[str, str]:
    """Extract every marked section verbatim, keyed by canonical name.

    Text outside markers is ignored. Section bodies preserve byte content
    (lines between the BEGIN and END marker lines).
    """
    sections: dict[str, str] = {}
    open_name: Optional[str] = None
    body: list[str] = []
    for line in text.split("\n"):
        begin = _BEGIN_RE.match(line)
        end = _END_RE.match(line)
        if begin:
            name = begin.group(1)
            if open_name is not None:
                raise UnterminatedSection(
                    f"section {open_name!r} not closed before {name!r} opens"
                )
            if name in sections:
                raise DuplicateSection(f"section {name!r} defined twice")
            open_name = name
            body = []
        elif end:
            name = end.group(1)
            if open_name != name:
                raise UnterminatedSection(
                    f"### KF:END {name} without matching BEGIN"
                )
            sections[name] = "\n".join(body)
            open_name = None
        elif open_name is not None:
            body.append(line)
    if open_name is not None:
        raise UnterminatedSection(f"section {open_name!r} never closed")
    return sections


def parse_task(config_text: str, section_files: dict[str, str]) -> TaskSpec:
    """Build a TaskSpec from the YAML config and the marked source files."""
    try:
        config = yaml.safe_load(config_text)
    except yaml.YAMLError as e:
        raise MalformedConfig(f"invalid YAML: {e}") from e
    if not isinstance(config, dict):
        raise MalformedConfig("config must be a YAML mapping")

    for key in ("task_id", "language"):
        if key not in config:
            raise MissingField(f"required config key {key!r} absent")

    lang_raw = str(config["language"]).lower()
    try:
        language = Language(lang_raw)
    except ValueError:
        raise UnknownLanguage(f"unsupported language {config['language']!r}") from None

    sections: dict[str, str] = {}
    for fname, text in sorted(section_files.items()):
        for name, body in extract_marked_sections(text).items():
            if name in sections:
                raise DuplicateSection(f"section {name!r} appears in multiple files")
            sections[name] = body

    if "reference" not in sections:
        raise MissingField("no reference section found in the source files")

    tolerance = config.get("tolerance") or {}
    if "test_harness" in config:
        tolerance = dict(tolerance, test_harness=config["test_harness"])
    if "benchmark" in config:
        tolerance = dict(tolerance, benchmark=config["benchmark"])

    return TaskSpec(
        task_id=str(config["task_id"]),
        language=language,
        reference_code=sections["reference"],
        user_instructions=sections.get("instructions"),
        initial_kernel=sections.get("initial_kernel"),
        test_config=_test_config_from_dict(tolerance),
        target_speedup=float(config.get("target_speedup", 2.0)),
        hardware_profile_id=str(config.get("hardware_profile", "default")),
    )


def validate_task(spec: TaskSpec) -> list[str]:
    """Non-fatal warnings about a parsed task. Never mutates the task."""
    warnings = []
    if spec.user_instructions is None and spec.initial_kernel is None:
        warnings.append(
            "no user instructions and no initial kernel: pure-reference mode"
        )
    if spec.target_speedup > 10.0:
        # s_norm = min(1, speedup/target): a huge target flattens the reward.
        warnings.append(
            f"target_speedup {spec.target_speedup}: fitness saturates early"
        )
    if spec.test_config.harness_path is None:
        warnings.append("no test harness configured; relying on built-in checks")
    return warnings


def serialize_task(spec: TaskSpec) -> tuple[str, dict[str, str]]:
    """Render a TaskSpec back to the on-disk format (config text + files)."""
    config = {
        "task_id": spec.task_id,
        "language": spec.language.value,
        "target_speedup": spec.target_speedup,
        "hardware_profile": spec.hardware_profile_id,
        "tolerance": {
            "rel_tol": spec.test_config.correctness_rel_tol,
            "pass_fraction": spec.test_config.correctness_pass_fraction,
            "epsilon": spec.test_config.epsilon_div,
        },
        "benchmark": spec.test_config.benchmark_constraints.to_dict(),
    }
    if spec.test_config.harness_path:
        config["test_harness"] = spec.test_config.harness_path

    chunks = []
    for name, body in (
        ("reference", spec.reference_code),
        ("instructions", spec.user_instructions),
        ("initial_kernel", spec.initial_kernel),
    ):
        if body is None:
            continue
        chunks.append(f"### KF:BEGIN {name}\n{body}\n### KF:END {name}")
    source = "\n".join(chunks) + "\n"
    return yaml.safe_dump(config, sort_keys=True), {"sections.txt": source}


def load_task_dir(path) -> TaskSpec:
    """Load a task directory: task.yaml plus every other regular file."""
    root = Path(path)
    config_path = root / "task.yaml"
    if not config_path.is_file():
        raise MalformedConfig(f"no task.yaml in {root}")
    section_files = {
        p.name: p.read_text(encoding="utf-8")
        for p in sorted(root.iterdir())
        if p.is_file() and p.name != "task.yaml"
    }
    return parse_task(config_path.read_text(encoding="utf-8"), section_files)
