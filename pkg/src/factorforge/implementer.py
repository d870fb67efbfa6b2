"""The implementation agent: draft, execute, evaluate, repair.

One :func:`run_task` call drives a single task's evolve loop: render the
retrieval-augmented prompt, get candidate code, execute it in the sandbox
(consuming exactly one unit of the shared global budget per execution),
evaluate the output, and either stop on success or fold the feedback into
the next attempt. The full trace lands in the knowledge base either way.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from .evaluators import KeyedSeries, parse_output, pearson, supervised_diff_critique
from .gateway import ChatRequest, GatewayError, LLMGateway
from .knowledge import (
    DEFAULT_MIN_SIMILARITY,
    DEFAULT_TOP_N_PAIRS,
    DEFAULT_TOP_N_SUCCESS,
    KnowledgeBase,
    KnowledgeEntry,
    RetrievalHit,
    TrialRecord,
    extract_error_text,
)
from .model import (
    CandidateSolution,
    ExecutionOutcome,
    FeedbackBundle,
    FormatReport,
    Provenance,
    TaskSpec,
)
from .sandbox import SandboxConfig, SandboxError, cleanup, execute

_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)

DEFAULT_SUCCESS_CORR = 0.99


class BudgetExhaustedError(RuntimeError):
    """run_task was invoked with no global trials left."""


class AttemptBudget:
    """Per-task iteration cap plus the shared global execution counter.

    The global counter never goes negative: :meth:`try_consume` either takes
    exactly one unit or refuses. Every sandbox execution in the system is
    paired with exactly one successful consume.
    """

    def __init__(self, max_iters_per_task: int = 5, global_trials: int = 0):
        if max_iters_per_task < 1:
            raise ValueError("max_iters_per_task must be at least 1")
        if global_trials < 0:
            raise ValueError("global_trials must be nonnegative")
        self.max_iters_per_task = max_iters_per_task
        self._remaining = global_trials
        self._lock = threading.Lock()

    @property
    def global_trials_remaining(self) -> int:
        with self._lock:
            return self._remaining

    def try_consume(self) -> bool:
        with self._lock:
            if self._remaining < 1:
                return False
            self._remaining -= 1
            return True


@dataclass(frozen=True)
class TaskResult:
    """Final verdict of one run_task call."""

    task_id: str
    success: bool
    best_feedback: FeedbackBundle
    attempts_used: int
    trace: tuple[TrialRecord, ...]

    def __post_init__(self) -> None:
        if self.attempts_used != len(self.trace):
            raise ValueError("attempts_used must equal the trace length")


def success_predicate(
    feedback: FeedbackBundle,
    mode: str,
    success_corr: float = DEFAULT_SUCCESS_CORR,
) -> bool:
    """Did this attempt solve the task, under the given feedback mode?

    Unsupervised: clean execution and a violation-free output format.
    Supervised: additionally, a defined correlation at or above the
    acceptance threshold.
    """
    if mode not in ("supervised", "unsupervised"):
        raise ValueError(f"unknown feedback mode {mode!r}")
    base = feedback.execution.succeeded and feedback.format.score == 1
    if mode == "unsupervised":
        return base
    return (
        base
        and feedback.quantitative is not None
        and feedback.quantitative.correlation is not None
        and feedback.quantitative.correlation >= success_corr
    )


def _feedback_rank(feedback: FeedbackBundle, mode: str, success_corr: float) -> tuple:
    """Lexicographic quality: success, correlation (undefined lowest), format, exec."""
    corr = None if feedback.quantitative is None else feedback.quantitative.correlation
    return (
        success_predicate(feedback, mode, success_corr),
        (1, corr) if corr is not None else (0, 0.0),
        feedback.format.score,
        feedback.execution.succeeded,
    )


def extract_code(llm_output: str) -> tuple[str, bool]:
    """Pull candidate code out of the LLM's reply.

    Returns (code, fallback_used): the first fenced block when there is
    one, otherwise the whole trimmed output with the fallback flag set.
    An effectively empty reply is an error.
    """
    if not llm_output.strip():
        raise ValueError("empty LLM output, no code to extract")
    match = _FENCE_RE.search(llm_output)
    if match:
        return match.group(1).rstrip("\n"), False
    return llm_output.strip(), True


def render_impl_prompt(
    task: TaskSpec,
    last_attempt: tuple[str, FeedbackBundle] | None,
    hits: Sequence[RetrievalHit],
    similar: KnowledgeEntry | None,
    contract_note: str | None = None,
) -> ChatRequest:
    """Compose the implementation prompt, sections in a fixed order.

    Order: task description and data-source schema notes; output contract;
    similar correct implementation (when retrieved); error->fix pairs (when
    retrieved); the latest attempt with its feedback (when present); the
    single-fenced-block output instruction. Deterministic for fixed inputs,
    and never includes data-source paths or the implementability flag.
    """
    contract = task.output_contract
    parts: list[str] = []
    parts.append(f"Task: {task.id}")
    parts.append(f"Name: {task.name}")
    parts.append(f"Category: {task.category.value} | difficulty: {task.difficulty.value}")
    parts.append(f"Description: {task.description}")
    if task.data_sources:
        parts.append("Available data sources (bound by name at runtime):")
        for source in task.data_sources:
            note = f" | schema: {source.schema_note}" if source.schema_note else ""
            parts.append(f"- {source.name}{note}")
    parts.append("")
    parts.append(
        "Output contract: assign the final series to a variable named `result`, "
        f"keyed by ({', '.join(contract.key_columns)}) with one numeric value per key. "
        f"The harness serializes it as CSV with header {contract.header!r}, rows "
        "sorted ascending by key."
    )
    if contract_note:
        parts.append(contract_note)
    if similar is not None:
        parts.append("")
        parts.append("A similar task was already solved. Its description and solution:")
        parts.append(f"Description: {similar.task_description}")
        parts.append("Solution:")
        parts.append("```\n" + similar.final_solution.code + "\n```")
    if hits:
        parts.append("")
        parts.append("Past errors similar to the latest feedback, with their fixes:")
        for hit in hits:
            parts.append(f"- error: {hit.pair.error_text}")
            for step in hit.pair.fix_steps:
                parts.append(f"  fix step: {step}")
            parts.append("  fixed code:")
            parts.append("```\n" + hit.pair.fixed_code + "\n```")
    if last_attempt is not None:
        code, feedback = last_attempt
        parts.append("")
        parts.append("Your previous attempt:")
        parts.append("```\n" + code + "\n```")
        parts.append("Feedback on the previous attempt:")
        execution = feedback.execution
        parts.append(
            f"- execution: {'ok' if execution.succeeded else 'failed'} "
            f"(exit code {execution.exit_code}"
            + (", timed out" if execution.timed_out else "")
            + ")"
        )
        if execution.stderr.strip():
            parts.append("- stderr (tail):")
            tail = execution.stderr.strip().splitlines()[-10:]
            parts.extend(f"    {line}" for line in tail)
        parts.append(f"- format score: {feedback.format.score}")
        for rule, message in feedback.format.violations:
            parts.append(f"    {rule}: {message}")
        if feedback.quantitative is not None:
            quant = feedback.quantitative
            parts.append(
                f"- comparison against reference: correlation "
                f"{quant.correlation if quant.correlation is not None else 'undefined'}, "
                f"value accuracy {quant.value_accuracy}, aligned rows {quant.n_aligned}"
            )
        if feedback.critique:
            parts.append(f"- critique: {feedback.critique}")
    parts.append("")
    parts.append(
        "Reply with exactly one fenced code block containing the complete "
        "solution. No prose outside the block."
    )
    return ChatRequest(
        messages=(
            (
                "system",
                "You are the implementation agent of an autonomous "
                "data-development system. You write complete, runnable "
                "solutions for one task at a time.",
            ),
            ("user", "\n".join(parts)),
        )
    )


def run_task(
    task: TaskSpec,
    kb: KnowledgeBase,
    budget: AttemptBudget,
    gateway: LLMGateway,
    sandbox_cfg: SandboxConfig,
    mode: str = "unsupervised",
    truth: KeyedSeries | None = None,
    truth_code: str | None = None,
    run_dir: str | Path | None = None,
    success_corr: float = DEFAULT_SUCCESS_CORR,
    critique_enabled: bool = False,
    summarize_fixes: bool = False,
    top_n_pairs: int = DEFAULT_TOP_N_PAIRS,
    min_similarity: float = DEFAULT_MIN_SIMILARITY,
    attempt_offset: int = 0,
    result_seq: int = 0,
    rep: int = 0,
) -> TaskResult:
    """Drive one task to success or budget exhaustion; archive the trace.

    Every sandbox execution consumes one global trial. Gateway and sandbox
    faults abort the current attempt but are recorded as failed trials, so
    trace completeness and budget conservation hold regardless of fault
    paths. ``attempt_offset`` numbers artifact directories uniquely when a
    task is re-attempted across repetitions.
    """
    if budget.global_trials_remaining < 1:
        raise BudgetExhaustedError("no global trials remaining")
    trace: list[TrialRecord] = []
    last_attempt: tuple[str, FeedbackBundle] | None = None
    success = False

    for attempt_index in range(budget.max_iters_per_task):
        if not budget.try_consume():
            break

        hits: list[RetrievalHit] = []
        if last_attempt is not None:
            hits = kb.query_by_feedback(
                extract_error_text(last_attempt[1]),
                gateway,
                top_n=top_n_pairs,
                min_sim=min_similarity,
            )
        similar_entries = kb.query_similar_success(
            task.description, gateway, top_n=DEFAULT_TOP_N_SUCCESS
        )
        similar = similar_entries[0][0] if similar_entries else None

        request = render_impl_prompt(task, last_attempt, hits, similar)
        code = ""
        fault: str | None = None
        try:
            reply = gateway.chat(request)
            code, _used_fallback = extract_code(reply)
        except (GatewayError, ValueError) as exc:
            fault = f"attempt aborted before execution: {exc}"
            code = "# no code produced"

        if fault is None:
            try:
                outcome, output_path, workdir = execute(code, task, sandbox_cfg)
            except SandboxError as exc:
                fault = f"sandbox fault: {exc}"
        if fault is not None:
            outcome = ExecutionOutcome(
                exit_code=-1, timed_out=False, stdout="", stderr=fault, wall_time=0.0
            )
            output_path = None
            workdir = None

        if output_path is not None:
            series, format_report = parse_output(output_path, task.output_contract)
        else:
            series, format_report = None, FormatReport(
                parseable=False, violations=(("R1", "no output produced"),)
            )

        quantitative = None
        if (
            mode == "supervised"
            and truth is not None
            and outcome.succeeded
            and format_report.parseable
            and series is not None
        ):
            quantitative = pearson(series, truth)

        critique = None
        if critique_enabled and truth_code is not None and mode == "supervised":
            critique = supervised_diff_critique(code, truth_code, quantitative, gateway)

        feedback = FeedbackBundle(
            execution=outcome,
            format=format_report,
            quantitative=quantitative,
            critique=critique,
        )
        trace.append(TrialRecord(attempt_index=attempt_index, code=code, feedback=feedback))

        if run_dir is not None:
            _write_attempt_artifacts(
                Path(run_dir),
                task.id,
                attempt_offset + attempt_index,
                request,
                code,
                feedback,
                rep=rep,
                attempt_index=attempt_index,
                result_seq=result_seq,
            )
        if workdir is not None:
            cleanup(workdir, keep_artifacts=sandbox_cfg.keep_artifacts)

        if success_predicate(feedback, mode, success_corr):
            success = True
            break
        last_attempt = (code, feedback)

    if not trace:
        raise BudgetExhaustedError("global budget exhausted before the first attempt")

    best = max(trace, key=lambda t: _feedback_rank(t.feedback, mode, success_corr))
    final = trace[-1]
    entry = KnowledgeEntry(
        entry_id=kb.new_entry_id(),
        task_id=task.id,
        task_description=task.description,
        trace=tuple(trace),
        final_solution=CandidateSolution(
            task_id=task.id,
            code=final.code,
            attempt_index=final.attempt_index,
            provenance=Provenance.LLM_DRAFT if final.attempt_index == 0 else Provenance.LLM_REPAIR,
        ),
        success=success,
        created_at=_utc_now(),
    )
    kb.insert_trace(entry, gateway, summarize_fixes=summarize_fixes)

    return TaskResult(
        task_id=task.id,
        success=success,
        best_feedback=best.feedback,
        attempts_used=len(trace),
        trace=tuple(trace),
    )


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_attempt_artifacts(
    run_dir: Path,
    task_id: str,
    attempt_number: int,
    request: ChatRequest,
    code: str,
    feedback: FeedbackBundle,
    rep: int,
    attempt_index: int,
    result_seq: int,
) -> None:
    attempt_dir = run_dir / task_id / f"attempt_{attempt_number:04d}"
    attempt_dir.mkdir(parents=True, exist_ok=True)
    prompt_text = "\n\n".join(f"[{role}]\n{content}" for role, content in request.messages)
    (attempt_dir / "prompt.txt").write_text(prompt_text + "\n", encoding="utf-8")
    (attempt_dir / "code.txt").write_text(code + "\n", encoding="utf-8")
    (attempt_dir / "stdout.txt").write_text(feedback.execution.stdout, encoding="utf-8")
    (attempt_dir / "stderr.txt").write_text(feedback.execution.stderr, encoding="utf-8")
    doc: dict[str, Any] = {
        "schema_version": 1,
        "task_id": task_id,
        "rep": rep,
        "attempt_index": attempt_index,
        "result_seq": result_seq,
        "bundle": feedback.to_dict(),
    }
    (attempt_dir / "feedback.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
