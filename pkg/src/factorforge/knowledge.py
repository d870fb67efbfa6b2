"""The growing practical knowledge base.

Archives full trial traces of attempted tasks, mints error->fix pairs from
failed-then-changed consecutive trials, and answers similarity queries over
error-message embeddings. Retrieval is an exact linear scan (the base stays
small), which keeps it deterministic and oracle-checkable.

Persistence is an append-only JSON-lines file whose first line pins the
schema version; embeddings are stored inline as number arrays, so a loaded
base reproduces similarities bit-for-bit.
"""

from __future__ import annotations

import difflib
import json
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .gateway import ChatRequest, Embedding, LLMGateway, cosine_similarity
from .model import (
    CandidateSolution,
    ExecutionOutcome,
    FeedbackBundle,
    FormatReport,
    Provenance,
)

SCHEMA_VERSION = 1

#: Retrieval defaults: a handful of pairs bounds prompt size, and a high
#: similarity floor keeps irrelevant errors out of repair prompts.
DEFAULT_TOP_N_PAIRS = 3
DEFAULT_TOP_N_SUCCESS = 1
DEFAULT_MIN_SIMILARITY = 0.80

_ERROR_TOKEN_RE = re.compile(r"\b\w*(?:Error|Exception)\b|\bTraceback\b")
_ERROR_TEXT_LIMIT = 512


class KnowledgeBaseError(Exception):
    """Raised for persistence and seed-file faults."""


class SchemaVersionError(KnowledgeBaseError):
    """The persisted file declares a schema this code does not understand."""


@dataclass(frozen=True)
class TrialRecord:
    """One attempt inside a task's trace."""

    attempt_index: int
    code: str
    feedback: FeedbackBundle

    def __post_init__(self) -> None:
        if not self.code:
            raise ValueError("trial code must be nonempty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "attempt_index": self.attempt_index,
            "code": self.code,
            "feedback": self.feedback.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrialRecord":
        return cls(
            attempt_index=int(d["attempt_index"]),
            code=str(d["code"]),
            feedback=FeedbackBundle.from_dict(d["feedback"]),
        )


@dataclass(frozen=True)
class KnowledgeEntry:
    """Archived trace of one task attempt sequence."""

    entry_id: str
    task_id: str
    task_description: str
    trace: tuple[TrialRecord, ...]
    final_solution: CandidateSolution
    success: bool
    created_at: str

    def __post_init__(self) -> None:
        indices = [t.attempt_index for t in self.trace]
        if indices != list(range(len(indices))):
            raise ValueError("trace attempt indices must be contiguous from 0")
        if self.success:
            if not self.trace:
                raise ValueError("successful entry requires a nonempty trace")
            if self.final_solution.code != self.trace[-1].code:
                raise ValueError("final solution must equal the last trial's code")

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "task_id": self.task_id,
            "task_description": self.task_description,
            "trace": [t.to_dict() for t in self.trace],
            "final_solution": self.final_solution.to_dict(),
            "success": self.success,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "KnowledgeEntry":
        return cls(
            entry_id=str(d["entry_id"]),
            task_id=str(d["task_id"]),
            task_description=str(d["task_description"]),
            trace=tuple(TrialRecord.from_dict(t) for t in d["trace"]),
            final_solution=CandidateSolution.from_dict(d["final_solution"]),
            success=bool(d["success"]),
            created_at=str(d["created_at"]),
        )


@dataclass(frozen=True)
class ErrorFixPair:
    """An indexed repair: the error that preceded a code change that helped."""

    pair_id: str
    error_text: str
    failing_code: str
    fixed_code: str
    fix_steps: tuple[str, ...]
    error_embedding: Embedding
    source_entry: str

    def __post_init__(self) -> None:
        if not self.error_text:
            raise ValueError("error_text must be nonempty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "error_text": self.error_text,
            "failing_code": self.failing_code,
            "fixed_code": self.fixed_code,
            "fix_steps": list(self.fix_steps),
            "error_embedding": list(self.error_embedding.vector),
            "source_entry": self.source_entry,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ErrorFixPair":
        return cls(
            pair_id=str(d["pair_id"]),
            error_text=str(d["error_text"]),
            failing_code=str(d["failing_code"]),
            fixed_code=str(d["fixed_code"]),
            fix_steps=tuple(str(s) for s in d["fix_steps"]),
            error_embedding=Embedding(tuple(float(v) for v in d["error_embedding"])),
            source_entry=str(d["source_entry"]),
        )


@dataclass(frozen=True)
class RetrievalHit:
    pair: ErrorFixPair
    similarity: float


def extract_error_text(feedback: FeedbackBundle) -> str:
    """The feedback message a repair gets indexed under.

    Preference order: the last stderr line carrying an error-class token,
    then the whole stderr truncated to a stable bound, then the format
    violations, then a plain exit-code description. Always nonempty, so the
    pair invariant holds for every failure mode.
    """
    stderr = feedback.execution.stderr
    lines = [line for line in stderr.splitlines() if line.strip()]
    for line in reversed(lines):
        if _ERROR_TOKEN_RE.search(line):
            return line.strip()
    if stderr.strip():
        return stderr.strip()[:_ERROR_TEXT_LIMIT]
    if feedback.format.violations:
        joined = "; ".join(f"{rule}: {msg}" for rule, msg in feedback.format.violations)
        return joined[:_ERROR_TEXT_LIMIT]
    return f"execution failed with exit code {feedback.execution.exit_code}"


def _mechanical_fix_steps(failing_code: str, fixed_code: str, limit: int = 8) -> tuple[str, ...]:
    """Diff-derived repair steps used when LLM summarization is disabled."""
    diff = difflib.unified_diff(
        failing_code.splitlines(), fixed_code.splitlines(), lineterm="", n=0
    )
    steps: list[str] = []
    for line in diff:
        if line.startswith("+++") or line.startswith("---") or line.startswith("@@"):
            continue
        if line.startswith("+"):
            steps.append(f"add: {line[1:].strip()}")
        elif line.startswith("-"):
            steps.append(f"remove: {line[1:].strip()}")
        if len(steps) >= limit:
            break
    return tuple(steps) if steps else ("rewrite the solution",)


def _llm_fix_steps(error_text: str, failing_code: str, fixed_code: str, gateway: LLMGateway) -> tuple[str, ...]:
    request = ChatRequest(
        messages=(
            (
                "system",
                "You summarize code repairs as a short ordered list of steps, "
                "one step per line, no commentary.",
            ),
            (
                "user",
                "The failing code produced this error:\n"
                + error_text
                + "\n\nFailing code:\n```\n"
                + failing_code
                + "\n```\n\nFixed code:\n```\n"
                + fixed_code
                + "\n```\n\nList the steps that turn the failing code into the fixed code.",
            ),
        )
    )
    text = gateway.chat(request)
    steps = tuple(line.strip("- ").strip() for line in text.splitlines() if line.strip())
    return steps if steps else ("rewrite the solution",)


class KnowledgeBase:
    """Entries plus error->fix pairs, optionally mirrored to a JSONL file.

    Append-only: entry and pair counts never decrease. A path given at
    construction is kept in sync on every insert; ``persist`` writes a full
    snapshot anywhere. Reads take a lock-protected snapshot, so concurrent
    readers never see a torn base.
    """

    def __init__(self, path: str | Path | None = None):
        self.entries: list[KnowledgeEntry] = []
        self.pairs: list[ErrorFixPair] = []
        self._description_embeddings: dict[str, Embedding] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None
        if self.path is not None and self.path.exists():
            loaded = KnowledgeBase.load(self.path)
            self.entries = loaded.entries
            self.pairs = loaded.pairs
            self._description_embeddings = loaded._description_embeddings
        elif self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(
                json.dumps({"schema_version": SCHEMA_VERSION}) + "\n", encoding="utf-8"
            )

    # -- growth -----------------------------------------------------------

    def new_entry_id(self) -> str:
        with self._lock:
            return f"e{len(self.entries) + 1:04d}"

    def insert_trace(
        self,
        entry: KnowledgeEntry,
        gateway: LLMGateway,
        summarize_fixes: bool = False,
    ) -> list[ErrorFixPair]:
        """Archive a trace; mint pairs from failed-then-changed trial steps.

        A pair is minted for every consecutive trial pair (i, i+1) where
        trial i failed execution or scored format 0 and trial i+1 changed
        the code. Failed (never-solved) traces are archived too, but as
        reporting context only; their steps still mint pairs when a later
        attempt repaired an earlier error.
        """
        description_embedding = gateway.embed(entry.task_description) if entry.task_description else None
        minted: list[ErrorFixPair] = []
        for i in range(len(entry.trace) - 1):
            failing, fixed = entry.trace[i], entry.trace[i + 1]
            failed = (not failing.feedback.execution.succeeded) or failing.feedback.format.score == 0
            if not failed or fixed.code == failing.code:
                continue
            error_text = extract_error_text(failing.feedback)
            if summarize_fixes:
                steps = _llm_fix_steps(error_text, failing.code, fixed.code, gateway)
            else:
                steps = _mechanical_fix_steps(failing.code, fixed.code)
            minted.append(
                ErrorFixPair(
                    pair_id=f"{entry.entry_id}:p{i}",
                    error_text=error_text,
                    failing_code=failing.code,
                    fixed_code=fixed.code,
                    fix_steps=steps,
                    error_embedding=gateway.embed(error_text),
                    source_entry=entry.entry_id,
                )
            )
        with self._lock:
            self.entries.append(entry)
            self.pairs.extend(minted)
            if description_embedding is not None:
                self._description_embeddings[entry.entry_id] = description_embedding
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(self._entry_line(entry, description_embedding) + "\n")
                    for pair in minted:
                        fh.write(self._pair_line(pair) + "\n")
        return minted

    def warm_start(self, seed_file: str | Path, gateway: LLMGateway) -> int:
        """Load expert solutions as successful single-trial entries.

        The seed file is JSONL: one ``{"task_id", "description", "code"}``
        object per line. The whole file is parsed before anything commits,
        so a malformed line leaves the base untouched and is reported with
        its line number.
        """
        path = Path(seed_file)
        if not path.exists():
            raise KnowledgeBaseError(f"warm-start seed file {path} does not exist")
        records: list[dict[str, Any]] = []
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    records.append(
                        {
                            "task_id": str(obj["task_id"]),
                            "description": str(obj["description"]),
                            "code": str(obj["code"]),
                        }
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise KnowledgeBaseError(
                        f"malformed warm-start record at line {lineno} of {path}"
                    ) from exc

        created_at = datetime.now(timezone.utc).isoformat()
        clean_feedback = FeedbackBundle(
            execution=ExecutionOutcome(exit_code=0, timed_out=False, stdout="", stderr="", wall_time=0.0),
            format=FormatReport(parseable=True, violations=()),
        )
        for record in records:
            solution = CandidateSolution(
                task_id=record["task_id"],
                code=record["code"],
                attempt_index=0,
                provenance=Provenance.WARM_START,
            )
            entry = KnowledgeEntry(
                entry_id=self.new_entry_id(),
                task_id=record["task_id"],
                task_description=record["description"],
                trace=(TrialRecord(attempt_index=0, code=record["code"], feedback=clean_feedback),),
                final_solution=solution,
                success=True,
                created_at=created_at,
            )
            self.insert_trace(entry, gateway)
        return len(records)

    # -- retrieval --------------------------------------------------------

    def query_by_feedback(
        self,
        error_text: str,
        gateway: LLMGateway,
        top_n: int = DEFAULT_TOP_N_PAIRS,
        min_sim: float = DEFAULT_MIN_SIMILARITY,
    ) -> list[RetrievalHit]:
        """Exact top-n scan over pair embeddings by feedback similarity.

        Hits come back sorted by similarity descending, ties broken by
        pair_id ascending, and only hits at or above ``min_sim`` qualify.
        """
        if not error_text:
            raise ValueError("error_text must be nonempty")
        with self._lock:
            pairs = list(self.pairs)
        if top_n <= 0 or not pairs:
            return []
        query = gateway.embed(error_text)
        hits = [
            RetrievalHit(pair=pair, similarity=cosine_similarity(query, pair.error_embedding))
            for pair in pairs
        ]
        hits = [h for h in hits if h.similarity >= min_sim]
        hits.sort(key=lambda h: (-h.similarity, h.pair.pair_id))
        return hits[:top_n]

    def query_similar_success(
        self,
        task_description: str,
        gateway: LLMGateway,
        top_n: int = DEFAULT_TOP_N_SUCCESS,
    ) -> list[tuple[KnowledgeEntry, float]]:
        """Rank successful entries by task-description similarity."""
        if not task_description:
            raise ValueError("task_description must be nonempty")
        with self._lock:
            candidates = [
                (entry, self._description_embeddings.get(entry.entry_id))
                for entry in self.entries
                if entry.success
            ]
        if top_n <= 0 or not candidates:
            return []
        query = gateway.embed(task_description)
        ranked = [
            (entry, cosine_similarity(query, embedding))
            for entry, embedding in candidates
            if embedding is not None
        ]
        ranked.sort(key=lambda pair: (-pair[1], pair[0].entry_id))
        return ranked[:top_n]

    # -- persistence ------------------------------------------------------

    @staticmethod
    def _entry_line(entry: KnowledgeEntry, description_embedding: Embedding | None) -> str:
        doc = {"kind": "entry", **entry.to_dict()}
        if description_embedding is not None:
            doc["description_embedding"] = list(description_embedding.vector)
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def _pair_line(pair: ErrorFixPair) -> str:
        doc = {"kind": "pair", **pair.to_dict()}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def persist(self, path: str | Path) -> None:
        """Write a full snapshot; ``load`` reproduces it exactly."""
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            lines = [json.dumps({"schema_version": SCHEMA_VERSION})]
            lines.extend(
                self._entry_line(e, self._description_embeddings.get(e.entry_id))
                for e in self.entries
            )
            lines.extend(self._pair_line(pair) for pair in self.pairs)
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeBase":
        p = Path(path)
        if not p.exists():
            raise KnowledgeBaseError(f"knowledge base file {p} does not exist")
        kb = cls()
        lines = [line for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]
        if not lines:
            return kb
        try:
            head = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise KnowledgeBaseError(f"malformed schema line in {p}") from exc
        version = head.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"knowledge base {p} has schema_version {version!r}, expected {SCHEMA_VERSION}"
            )
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                obj = json.loads(line)
                kind = obj.pop("kind")
                if kind == "entry":
                    vector = obj.pop("description_embedding", None)
                    entry = KnowledgeEntry.from_dict(obj)
                    kb.entries.append(entry)
                    if vector is not None:
                        kb._description_embeddings[entry.entry_id] = Embedding(
                            tuple(float(v) for v in vector)
                        )
                elif kind == "pair":
                    kb.pairs.append(ErrorFixPair.from_dict(obj))
                else:
                    raise KnowledgeBaseError(f"unknown record kind {kind!r} at line {lineno} of {p}")
            except KnowledgeBaseError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise KnowledgeBaseError(f"malformed record at line {lineno} of {p}") from exc
        return kb

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {
                "entries": len(self.entries),
                "successful_entries": sum(1 for e in self.entries if e.success),
                "pairs": len(self.pairs),
            }
