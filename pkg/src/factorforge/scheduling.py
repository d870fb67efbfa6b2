"""The scheduling agent.

Renders a guided reasoning prompt, asks the LLM for a dependency diagram
plus an ordering, repairs whatever comes back into a valid schedule, and
re-ranks dynamically as implementation feedback arrives: repeated failures
on a task demote it behind tasks that have not failed, and an optional
periodic policy hands the whole remaining pool back to the LLM.

The LLM's ordering is always advisory. Dependency-graph consistency wins,
enforced by a stable repair that follows the proposal as closely as the
graph allows.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

from .gateway import ChatRequest, LLMGateway
from .mermaid import MermaidHeaderError, TaskDag, parse_mermaid, render_mermaid, topological_order
from .model import DIFFICULTY_RANK, TaskSpec

DEFAULT_FAILURE_THRESHOLD = 2
DEFAULT_RESCHED_PERIOD = 5

_FENCE_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)
_ORDER_ITEM_RE = re.compile(r"^(?:\d+[.)]\s*|[-*]\s+)?([A-Za-z0-9_.\-]+)$")


@dataclass(frozen=True)
class OutcomeSummary:
    """What the scheduler learns from one task's implementation round."""

    task_id: str
    attempts_used: int
    final_success: bool
    last_error_digest: str | None = None

    def __post_init__(self) -> None:
        if self.final_success and self.attempts_used < 1:
            raise ValueError("a successful outcome implies at least one attempt")

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "attempts_used": self.attempts_used,
            "final_success": self.final_success,
            "last_error_digest": self.last_error_digest,
        }


@dataclass
class ScheduleState:
    """Mutable schedule bookkeeping owned by the orchestrator loop."""

    tasks: tuple[TaskSpec, ...]
    remaining: list[str]
    completed: set[str]
    failed_budget: dict[str, int]
    dag: TaskDag
    history: list[OutcomeSummary]
    k_limit: int
    warnings: list[str] = field(default_factory=list)
    events: list[dict[str, Any]] = field(default_factory=list)
    attempts_since_resched: int = 0

    def task_by_id(self, task_id: str) -> TaskSpec:
        for task in self.tasks:
            if task.id == task_id:
                return task
        raise KeyError(task_id)


def validate_schedule_state(state: ScheduleState) -> list[str]:
    """Invariant check used by tests and defensive assertions."""
    problems: list[str] = []
    ids = {t.id for t in state.tasks}
    if set(state.remaining) & state.completed:
        problems.append("remaining and completed overlap")
    if not (set(state.remaining) | state.completed) <= ids:
        problems.append("schedule mentions unknown task ids")
    if len(set(state.remaining)) != len(state.remaining):
        problems.append("remaining contains duplicates")
    position = {t: i for i, t in enumerate(state.remaining)}
    for edge in state.dag.edges:
        if edge.src in position and edge.dst in position:
            if position[edge.src] > position[edge.dst]:
                problems.append(f"remaining order violates edge {edge.src} -> {edge.dst}")
    return problems


def _heuristic_key(task: TaskSpec) -> tuple[int, str]:
    return (DIFFICULTY_RANK[task.difficulty], task.id)


def render_schedule_prompt(tasks: Sequence[TaskSpec], history: Sequence[OutcomeSummary]) -> ChatRequest:
    """Deterministic guided reasoning prompt for the scheduling call.

    Includes every task's descriptive fields (never the harness-only
    implementability flag, never filesystem paths), summarized feedback
    history with per-task failure counts, and instructions to reason over
    task complexity and task dependency before committing to a diagram and
    an ordering.
    """
    if not tasks:
        raise ValueError("cannot schedule an empty task set")
    lines = ["Candidate tasks:"]
    for task in tasks:
        lines.append(
            f"- id: {task.id} | name: {task.name} | category: {task.category.value} "
            f"| difficulty: {task.difficulty.value}"
        )
        lines.append(f"  description: {task.description}")
    lines.append("")
    if history:
        lines.append("Implementation feedback so far:")
        failures: dict[str, int] = {}
        successes: list[str] = []
        for summary in history:
            if summary.final_success:
                successes.append(summary.task_id)
            else:
                failures[summary.task_id] = failures.get(summary.task_id, 0) + 1
        for task_id in sorted(failures):
            lines.append(f"- task {task_id}: failure count {failures[task_id]}")
        for task_id in successes:
            lines.append(f"- task {task_id}: completed successfully")
    else:
        lines.append("Implementation feedback so far: none.")
    lines.append("")
    lines.append(
        "Reason step by step about two things before answering: "
        "Task complexity and task dependency. A task A depends-helps task B "
        "when implementing A first yields knowledge that makes B easier."
    )
    lines.append(
        "Then output, in this order:\n"
        "1. A fenced ```mermaid block containing a `graph TD` diagram. Add one "
        "edge `A -->|rationale| B` for every dependency, with a short rationale "
        "on every edge.\n"
        "2. A fenced ```order block listing every task id, one per line, in the "
        "order they should be implemented (first line first)."
    )
    return ChatRequest(
        messages=(
            (
                "system",
                "You are the scheduling agent of an autonomous data-development "
                "system. You order candidate tasks so that easy, foundational "
                "work happens first and later tasks benefit from accumulated "
                "knowledge.",
            ),
            ("user", "\n".join(lines)),
        )
    )


def parse_order_block(text: str) -> list[str] | None:
    """Extract the proposed ordering from the last non-diagram fenced block."""
    best: list[str] | None = None
    for match in _FENCE_RE.finditer(text):
        info, body = match.group(1).strip().lower(), match.group(2)
        if info == "mermaid":
            continue
        first = next((ln.strip() for ln in body.splitlines() if ln.strip()), "")
        if first.startswith(("graph ", "flowchart ")):
            continue
        tokens: list[str] = []
        ok = True
        for line in body.splitlines():
            line = line.strip()
            if not line:
                continue
            item = _ORDER_ITEM_RE.match(line)
            if item is None:
                ok = False
                break
            tokens.append(item.group(1))
        if ok and tokens:
            best = tokens
    return best


def _repair_order(preference: Sequence[str], dag: TaskDag) -> list[str]:
    """Stable repair: the DAG-valid order closest to the preference list."""
    position = {task_id: i for i, task_id in enumerate(preference)}
    return topological_order(dag, tie_break=lambda task_id: position[task_id])


def propose_schedule(
    tasks: Sequence[TaskSpec],
    history: Sequence[OutcomeSummary],
    gateway: LLMGateway,
    k_limit: int = 1,
    failure_threshold: int = DEFAULT_FAILURE_THRESHOLD,
) -> tuple[ScheduleState, TaskDag]:
    """One scheduling call: prompt, parse, repair, fall back as needed.

    The returned state's remaining order always respects the returned DAG.
    Garbage output degrades to a difficulty-then-id heuristic order over an
    empty DAG, with a warning recorded on the state.
    """
    if not tasks:
        raise ValueError("cannot schedule an empty task set")
    ids = [t.id for t in tasks]
    id_set = set(ids)
    by_id = {t.id: t for t in tasks}
    warnings: list[str] = []

    response = gateway.chat(render_schedule_prompt(tasks, history))

    try:
        parsed_dag, parse_warnings = parse_mermaid(response)
        warnings.extend(parse_warnings)
        unknown = sorted(set(parsed_dag.nodes) - id_set)
        if unknown:
            warnings.append(f"diagram mentions unknown task ids {unknown}; ignoring them")
        dag = TaskDag(
            nodes=tuple(sorted(id_set)),
            edges=parsed_dag.subgraph(id_set).edges,
        )
    except MermaidHeaderError:
        warnings.append("no dependency diagram in scheduler output; using heuristic order")
        dag = TaskDag(nodes=tuple(sorted(id_set)))

    proposed = parse_order_block(response)
    if proposed is not None and sorted(proposed) == sorted(ids):
        remaining = _repair_order(proposed, dag)
    else:
        if proposed is not None:
            warnings.append("proposed order is not a permutation of the task ids; using DAG order")
        remaining = topological_order(dag, tie_break=lambda t: _heuristic_key(by_id[t]))

    failed_budget: dict[str, int] = {}
    for summary in history:
        if not summary.final_success and summary.task_id in id_set:
            failed_budget[summary.task_id] = failed_budget.get(summary.task_id, 0) + 1
    state = ScheduleState(
        tasks=tuple(tasks),
        remaining=_layered_order(remaining, dag, failed_budget, failure_threshold),
        completed=set(),
        failed_budget=failed_budget,
        dag=dag,
        history=list(history),
        k_limit=k_limit,
        warnings=warnings,
    )
    state.events.append(
        {
            "event": "proposed",
            "order": list(state.remaining),
            "mermaid": render_mermaid(dag),
            "warnings": list(warnings),
        }
    )
    return state, dag


def random_scheduler(tasks: Sequence[TaskSpec], seed: int, k_limit: int = 1) -> ScheduleState:
    """Seeded uniform permutation over an empty DAG; the experimental control."""
    ids = [t.id for t in tasks]
    rng = random.Random(seed)
    rng.shuffle(ids)
    state = ScheduleState(
        tasks=tuple(tasks),
        remaining=ids,
        completed=set(),
        failed_budget={},
        dag=TaskDag(nodes=tuple(sorted(t.id for t in tasks))),
        history=[],
        k_limit=k_limit,
    )
    state.events.append({"event": "random", "seed": seed, "order": list(ids)})
    return state


def fixed_scheduler(tasks: Sequence[TaskSpec], k_limit: int = 1) -> ScheduleState:
    """Task-file order, no DAG; the adversarial/static baseline."""
    state = ScheduleState(
        tasks=tuple(tasks),
        remaining=[t.id for t in tasks],
        completed=set(),
        failed_budget={},
        dag=TaskDag(nodes=tuple(sorted(t.id for t in tasks))),
        history=[],
        k_limit=k_limit,
    )
    state.events.append({"event": "fixed", "order": list(state.remaining)})
    return state


def select_top_k(state: ScheduleState, k: int) -> list[str]:
    """The first min(k, len(remaining)) task ids, in schedule order."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return list(state.remaining[: min(k, len(state.remaining))])


def _layered_order(
    remaining: Sequence[str],
    dag: TaskDag,
    failed_budget: dict[str, int],
    failure_threshold: int,
) -> list[str]:
    """Demote repeat offenders behind never-failed tasks, then DAG-repair."""
    layered = sorted(
        remaining,
        key=lambda t: 1 if failed_budget.get(t, 0) >= failure_threshold else 0,
    )
    sub = dag.subgraph(layered)
    return _repair_order(layered, sub)


def update_with_feedback(
    state: ScheduleState,
    summary: OutcomeSummary,
    gateway: LLMGateway | None = None,
    resched_policy: str = "local",
    failure_threshold: int = DEFAULT_FAILURE_THRESHOLD,
    resched_period: int = DEFAULT_RESCHED_PERIOD,
) -> ScheduleState:
    """Fold one outcome into the schedule, demoting or re-proposing.

    Success moves the task to completed; failure bumps its failure count.
    Once a task has failed ``failure_threshold`` times it is demoted behind
    every never-failed remaining task, subject to DAG order. Under the
    ``llm_periodic`` policy, every ``resched_period`` consumed attempts the
    remaining pool is re-proposed by the LLM with the accumulated history.
    """
    if summary.task_id not in state.remaining:
        raise ValueError(f"unknown or already-settled task id {summary.task_id!r}")

    remaining = list(state.remaining)
    completed = set(state.completed)
    failed_budget = dict(state.failed_budget)
    history = [*state.history, summary]
    events = [*state.events, {"event": "feedback", **summary.to_dict()}]
    warnings = list(state.warnings)
    attempts = state.attempts_since_resched + summary.attempts_used

    if summary.final_success:
        remaining.remove(summary.task_id)
        completed.add(summary.task_id)
    else:
        failed_budget[summary.task_id] = failed_budget.get(summary.task_id, 0) + 1

    reordered = _layered_order(remaining, state.dag, failed_budget, failure_threshold)
    if reordered != remaining:
        events.append({"event": "demoted", "order": list(reordered)})
    remaining = reordered
    dag = state.dag

    if (
        resched_policy == "llm_periodic"
        and gateway is not None
        and attempts >= resched_period
        and remaining
    ):
        pool = [state.task_by_id(t) for t in remaining]
        fresh, dag = propose_schedule(
            pool, history, gateway, k_limit=state.k_limit, failure_threshold=failure_threshold
        )
        remaining = fresh.remaining
        warnings.extend(fresh.warnings)
        events.append({"event": "rescheduled", "order": list(remaining)})
        attempts = 0

    new_state = ScheduleState(
        tasks=state.tasks,
        remaining=remaining,
        completed=completed,
        failed_budget=failed_budget,
        dag=dag,
        history=history,
        k_limit=state.k_limit,
        warnings=warnings,
        events=events,
        attempts_since_resched=attempts,
    )
    return new_state
