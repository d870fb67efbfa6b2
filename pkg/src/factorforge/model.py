"""Core domain types shared by every other module.

Everything here is an immutable value object: safe to share across threads,
cheap to serialize, and round-trippable through plain dicts (``to_dict`` /
``from_dict``). Validation happens at construction time so downstream code
can rely on the invariants without re-checking them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence


class TaskSetError(ValueError):
    """Raised when a task-set document cannot be loaded or is malformed."""


class Category(str, Enum):
    """Broad data-domain grouping of a task, used for aggregate reporting."""

    FUNDAMENTAL = "fundamental"
    HIGH_FREQUENCY = "high_frequency"
    PRICE_VOLUME = "price_volume"
    OTHER = "other"


class Difficulty(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


#: Ascending complexity rank used by scheduling tie-breaks.
DIFFICULTY_RANK: dict[Difficulty, int] = {
    Difficulty.EASY: 0,
    Difficulty.MEDIUM: 1,
    Difficulty.HARD: 2,
}


class Provenance(str, Enum):
    """Where a candidate solution came from."""

    LLM_DRAFT = "llm_draft"
    LLM_REPAIR = "llm_repair"
    WARM_START = "warm_start"


@dataclass(frozen=True)
class DataSourceDescriptor:
    """A named input table available to candidate code.

    ``schema_note`` is free text describing columns and keys; it is the only
    part of the descriptor that ever reaches a prompt. ``path`` stays on the
    harness side (it is bound to the name via the sandbox manifest).
    """

    name: str
    path: str
    schema_note: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("data source name must be nonempty")
        if not self.path:
            raise ValueError(f"data source {self.name!r}: path must be nonempty")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "path": self.path, "schema_note": self.schema_note}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DataSourceDescriptor":
        _reject_unknown(d, {"name", "path", "schema_note"}, "data source")
        return cls(
            name=str(d.get("name", "")),
            path=str(d.get("path", "")),
            schema_note=str(d.get("schema_note", "")),
        )


@dataclass(frozen=True)
class OutputContract:
    """Shape of the series a candidate must produce.

    The only supported kind is a keyed series: one value per
    ``key_columns`` tuple, serialized as CSV with ``value_column`` last.
    """

    kind: str = "keyed_series"
    key_columns: tuple[str, ...] = ("datetime", "instrument")
    value_column: str = "value"

    def __post_init__(self) -> None:
        if self.kind != "keyed_series":
            raise ValueError(f"unsupported output contract kind {self.kind!r}")
        if not self.key_columns:
            raise ValueError("key_columns must be nonempty")
        if len(set(self.key_columns)) != len(self.key_columns):
            raise ValueError("key_columns must not contain duplicates")
        if self.value_column in self.key_columns:
            raise ValueError("value_column must be disjoint from key_columns")

    @property
    def header(self) -> str:
        """The exact CSV header line this contract demands."""
        return ",".join((*self.key_columns, self.value_column))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "key_columns": list(self.key_columns),
            "value_column": self.value_column,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "OutputContract":
        _reject_unknown(d, {"kind", "key_columns", "value_column"}, "output contract")
        return cls(
            kind=str(d.get("kind", "keyed_series")),
            key_columns=tuple(d.get("key_columns", ("datetime", "instrument"))),
            value_column=str(d.get("value_column", "value")),
        )


@dataclass(frozen=True)
class TaskSpec:
    """One candidate data-development task.

    ``implementable`` is harness-only ground truth (some task pools mix in
    tasks that cannot be implemented at all); it must never appear in any
    rendered prompt, which the prompt tests assert.
    """

    id: str
    name: str
    category: Category
    difficulty: Difficulty
    description: str
    data_sources: tuple[DataSourceDescriptor, ...] = ()
    output_contract: OutputContract = OutputContract()
    implementable: bool | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "name": self.name,
            "category": self.category.value,
            "difficulty": self.difficulty.value,
            "description": self.description,
            "data_sources": [s.to_dict() for s in self.data_sources],
            "output_contract": self.output_contract.to_dict(),
        }
        if self.implementable is not None:
            d["implementable"] = self.implementable
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskSpec":
        known = {
            "id",
            "name",
            "category",
            "difficulty",
            "description",
            "data_sources",
            "output_contract",
            "implementable",
        }
        _reject_unknown(d, known, f"task {d.get('id', '?')!r}")
        try:
            category = Category(d.get("category", ""))
        except ValueError:
            raise TaskSetError(
                f"task {d.get('id', '?')!r}: unknown category {d.get('category')!r}"
            ) from None
        try:
            difficulty = Difficulty(d.get("difficulty", ""))
        except ValueError:
            raise TaskSetError(
                f"task {d.get('id', '?')!r}: unknown difficulty {d.get('difficulty')!r}"
            ) from None
        contract = d.get("output_contract")
        implementable = d.get("implementable")
        if implementable is not None and not isinstance(implementable, bool):
            raise TaskSetError(f"task {d.get('id', '?')!r}: implementable must be boolean")
        return cls(
            id=str(d.get("id", "")),
            name=str(d.get("name", "")),
            category=category,
            difficulty=difficulty,
            description=str(d.get("description", "")),
            data_sources=tuple(
                DataSourceDescriptor.from_dict(s) for s in d.get("data_sources", ())
            ),
            output_contract=(
                OutputContract.from_dict(contract) if contract is not None else OutputContract()
            ),
            implementable=implementable,
        )


@dataclass(frozen=True)
class CandidateSolution:
    """A concrete attempt at a task, in the configured candidate dialect."""

    task_id: str
    code: str
    attempt_index: int
    provenance: Provenance

    def __post_init__(self) -> None:
        if not self.code.strip():
            raise ValueError("candidate code must be nonempty")
        if self.attempt_index < 0:
            raise ValueError("attempt_index must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "code": self.code,
            "attempt_index": self.attempt_index,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CandidateSolution":
        return cls(
            task_id=str(d["task_id"]),
            code=str(d["code"]),
            attempt_index=int(d["attempt_index"]),
            provenance=Provenance(d["provenance"]),
        )


@dataclass(frozen=True)
class ExecutionOutcome:
    """Result of one sandboxed run of candidate code.

    ``succeeded`` is derived, never stored independently: a run succeeded
    exactly when it exited 0 and was not killed at the timeout.
    """

    exit_code: int
    timed_out: bool
    stdout: str
    stderr: str
    wall_time: float

    @property
    def succeeded(self) -> bool:
        return self.exit_code == 0 and not self.timed_out

    def to_dict(self) -> dict[str, Any]:
        return {
            "succeeded": self.succeeded,
            "exit_code": self.exit_code,
            "timed_out": self.timed_out,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExecutionOutcome":
        return cls(
            exit_code=int(d["exit_code"]),
            timed_out=bool(d["timed_out"]),
            stdout=str(d.get("stdout", "")),
            stderr=str(d.get("stderr", "")),
            wall_time=float(d.get("wall_time", 0.0)),
        )


@dataclass(frozen=True)
class FormatReport:
    """Output-format verdict: a list of named rule violations.

    ``score`` is binary and derived: 1 exactly when no rule was violated.
    An unparseable output (missing or unreadable file, no header line) must
    carry at least one violation, so ``parseable == False`` forces score 0.
    """

    parseable: bool
    violations: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.parseable and not self.violations:
            raise ValueError("unparseable output must carry at least one violation")

    @property
    def score(self) -> int:
        return 0 if self.violations else 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "parseable": self.parseable,
            "score": self.score,
            "violations": [[rule, msg] for rule, msg in self.violations],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FormatReport":
        return cls(
            parseable=bool(d["parseable"]),
            violations=tuple((str(r), str(m)) for r, m in d.get("violations", ())),
        )


#: Correlation is "undefined" (too little overlap, zero variance) as None,
#: never as a sentinel number; aggregation decides its numeric treatment.
@dataclass(frozen=True)
class QuantReport:
    """Supervised comparison of a candidate series against ground truth."""

    correlation: float | None
    value_accuracy: float
    overlap_fraction: float
    n_aligned: int

    def __post_init__(self) -> None:
        if self.n_aligned < 0:
            raise ValueError("n_aligned must be nonnegative")
        if not 0.0 <= self.value_accuracy <= 1.0:
            raise ValueError("value_accuracy must lie in [0, 1]")
        if not 0.0 <= self.overlap_fraction <= 1.0 + 1e-12:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if self.correlation is not None and abs(self.correlation) > 1.0 + 1e-12:
            raise ValueError("correlation magnitude must not exceed 1")
        if self.n_aligned == 0 and (self.correlation is not None or self.value_accuracy != 0.0):
            raise ValueError("zero aligned pairs force undefined correlation and accuracy 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "correlation": self.correlation,
            "value_accuracy": self.value_accuracy,
            "overlap_fraction": self.overlap_fraction,
            "n_aligned": self.n_aligned,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QuantReport":
        corr = d.get("correlation")
        return cls(
            correlation=None if corr is None else float(corr),
            value_accuracy=float(d["value_accuracy"]),
            overlap_fraction=float(d["overlap_fraction"]),
            n_aligned=int(d["n_aligned"]),
        )


@dataclass(frozen=True)
class FeedbackBundle:
    """The multi-channel verdict on one attempt.

    ``quantitative`` may only be present when the run actually produced a
    parseable output (otherwise there is nothing to align against truth).
    """

    execution: ExecutionOutcome
    format: FormatReport
    quantitative: QuantReport | None = None
    critique: str | None = None

    def __post_init__(self) -> None:
        if self.quantitative is not None:
            if not (self.execution.succeeded and self.format.parseable):
                raise ValueError(
                    "quantitative feedback requires successful execution and parseable output"
                )

    def to_dict(self) -> dict[str, Any]:
        return {
            "execution": self.execution.to_dict(),
            "format": self.format.to_dict(),
            "quantitative": None if self.quantitative is None else self.quantitative.to_dict(),
            "critique": self.critique,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeedbackBundle":
        quant = d.get("quantitative")
        return cls(
            execution=ExecutionOutcome.from_dict(d["execution"]),
            format=FormatReport.from_dict(d["format"]),
            quantitative=None if quant is None else QuantReport.from_dict(quant),
            critique=d.get("critique"),
        )


def validate_task_set(tasks: Sequence[TaskSpec]) -> list[tuple[str, str]]:
    """Check task invariants, returning ``(task_id, violation)`` pairs.

    Violations are data, not faults: an empty list means the set is valid.
    """
    violations: list[tuple[str, str]] = []
    seen: set[str] = set()
    for task in tasks:
        if not task.id:
            violations.append((task.id, "empty id"))
        elif task.id in seen:
            violations.append((task.id, f"duplicate id {task.id!r}"))
        else:
            seen.add(task.id)
        if not task.description.strip():
            violations.append((task.id, "empty description"))
        # DataSourceDescriptor/OutputContract invariants are enforced at
        # construction; nothing further to re-derive here.
    return violations


def load_task_set(path: str | Path) -> list[TaskSpec]:
    """Load a task set from a JSON document (top-level array of tasks).

    Unknown fields are rejected with an error naming the field. Relative
    data-source paths resolve against the document's own directory, so task
    sets are relocatable alongside their data.
    """
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise TaskSetError(f"cannot read task set {p}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TaskSetError(f"task set {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise TaskSetError(f"task set {p} must be a top-level JSON array")
    tasks = [TaskSpec.from_dict(item) for item in doc]
    base = p.resolve().parent
    resolved: list[TaskSpec] = []
    for task in tasks:
        sources = tuple(
            s
            if Path(s.path).is_absolute()
            else DataSourceDescriptor(s.name, str(base / s.path), s.schema_note)
            for s in task.data_sources
        )
        resolved.append(
            TaskSpec(
                id=task.id,
                name=task.name,
                category=task.category,
                difficulty=task.difficulty,
                description=task.description,
                data_sources=sources,
                output_contract=task.output_contract,
                implementable=task.implementable,
            )
        )
    problems = validate_task_set(resolved)
    if problems:
        detail = "; ".join(f"{tid or '?'}: {msg}" for tid, msg in problems)
        raise TaskSetError(f"task set {p} is invalid: {detail}")
    return resolved


def _reject_unknown(d: Mapping[str, Any], known: set[str], where: str) -> None:
    for key in d:
        if key not in known:
            raise TaskSetError(f"unknown field {key!r} in {where}")
