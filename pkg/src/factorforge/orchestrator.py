"""The top-level run loop: schedule, implement, evaluate, aggregate, report.

One :func:`run` call executes the configured number of repetitions. Each
repetition gets a fresh schedule and a fresh global execution budget; the
knowledge base persists across repetitions unless configured otherwise, so
later repetitions benefit from everything learned earlier. Artifacts land
in the run directory: the resolved config, a schedule event log, the
aggregate report as JSON, markdown, and CSV, the trajectory CSV, rendered
figures, and the final knowledge base snapshot.
"""

from __future__ import annotations

import dataclasses
import json
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .config import RunConfig, build_gateway
from .evaluators import (
    AggregateReport,
    FactorMetrics,
    KeyedSeries,
    aggregate,
    evolution_trajectory,
    factor_metrics,
    parse_output,
    render_report_markdown,
    write_report_csv,
    write_trajectory_csv,
)
from .figures import render_metrics_figure, render_trajectory_figure
from .gateway import LLMGateway
from .implementer import AttemptBudget, TaskResult, run_task
from .knowledge import KnowledgeBase
from .model import FeedbackBundle, TaskSpec, load_task_set
from .sandbox import SandboxConfig
from .scheduling import (
    OutcomeSummary,
    ScheduleState,
    fixed_scheduler,
    propose_schedule,
    random_scheduler,
    select_top_k,
    update_with_feedback,
)

REPORT_SCHEMA_VERSION = 1


class OrchestratorError(RuntimeError):
    """A run-level fault: bad inputs or a broken internal invariant."""


@dataclass(frozen=True)
class RunResult:
    """Everything a caller needs after :func:`run` returns."""

    report: AggregateReport
    categories: Mapping[str, str]
    results: tuple[TaskResult, ...]
    result_reps: tuple[int, ...]
    trajectory: tuple[tuple[int, float, float], ...]
    budget_rows: tuple[dict[str, int], ...]
    incomplete: bool
    run_dir: Path | None


def _load_truths(tasks: Sequence[TaskSpec], truth_dir: str) -> dict[str, KeyedSeries]:
    """Read one golden series per task; a broken golden is a hard error."""
    truths: dict[str, KeyedSeries] = {}
    root = Path(truth_dir)
    for task in tasks:
        path = root / f"{task.id}.csv"
        if not path.is_file():
            raise OrchestratorError(f"missing ground truth for task {task.id!r}: {path}")
        series, report = parse_output(path, task.output_contract)
        if series is None or report.violations:
            detail = "; ".join(f"{rule}: {msg}" for rule, msg in report.violations)
            raise OrchestratorError(f"ground truth for task {task.id!r} is invalid: {detail}")
        truths[task.id] = series
    return truths


def _build_schedule(
    config: RunConfig,
    tasks: Sequence[TaskSpec],
    history: Sequence[OutcomeSummary],
    gateway: LLMGateway,
    rep: int,
    k: int,
) -> ScheduleState:
    if config.scheduler == "evolving":
        state, _dag = propose_schedule(
            tasks, history, gateway, k_limit=k, failure_threshold=config.failure_threshold
        )
        return state
    if config.scheduler == "random":
        return random_scheduler(tasks, seed=config.seed + rep, k_limit=k)
    return fixed_scheduler(tasks, k_limit=k)


def _build_kb(config: RunConfig, run_dir: Path | None, gateway: LLMGateway) -> KnowledgeBase:
    """Fresh knowledge base, mirrored into the run directory when there is one."""
    mirror = run_dir / "kb.jsonl" if run_dir is not None else None
    if mirror is not None and mirror.exists():
        mirror.unlink()
    if config.kb_path is not None and Path(config.kb_path).is_file():
        if mirror is not None:
            shutil.copyfile(config.kb_path, mirror)
            kb = KnowledgeBase(path=mirror)
        else:
            kb = KnowledgeBase.load(config.kb_path)
            kb.path = None
    else:
        kb = KnowledgeBase(path=mirror)
    if config.warm_start_seed is not None:
        kb.warm_start(config.warm_start_seed, gateway)
    return kb


def normalized_config(config: RunConfig) -> dict[str, Any]:
    """A config fingerprint that is stable across run directories and modes.

    Path fields collapse to basenames, and the fields that necessarily
    differ between a recording run and its replay (the gateway mode, the
    transcript, the run directory) are dropped. Two runs that behave the
    same produce byte-identical fingerprints.
    """
    doc = dataclasses.asdict(config)
    for key in ("run_dir", "gateway_mode", "transcript_path"):
        doc.pop(key, None)
    for key in ("task_set", "kb_path", "warm_start_seed", "truth_dir"):
        if doc.get(key) is not None:
            doc[key] = Path(doc[key]).name
    doc["sandbox"]["runner_template"] = Path(doc["sandbox"]["runner_template"]).name
    doc["sandbox"]["interpreter"] = [Path(part).name for part in doc["sandbox"]["interpreter"]]
    return doc


def run(config: RunConfig) -> RunResult:
    """Execute the configured run end to end and write its artifacts.

    A fault mid-run still writes a partial report (flagged incomplete)
    before propagating, so every run directory tells a truthful story.
    """
    tasks = load_task_set(config.task_set)
    if not tasks:
        raise OrchestratorError(f"task set {config.task_set} is empty")
    task_map = {task.id: task for task in tasks}
    categories = {task.id: task.category.value for task in tasks}
    k = config.k_limit if config.k_limit is not None else len(tasks)
    if config.global_budget < k:
        raise OrchestratorError(
            f"global_budget ({config.global_budget}) must cover the {k} selected tasks"
        )

    gateway = build_gateway(config)
    sandbox_cfg: SandboxConfig = config.sandbox.build()
    truths: dict[str, KeyedSeries] = {}
    if config.feedback_mode == "supervised":
        truths = _load_truths(tasks, config.truth_dir)

    run_dir = Path(config.run_dir) if config.run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        run_dir.joinpath("config.json").write_text(
            json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True, default=str) + "\n",
            encoding="utf-8",
        )

    kb = _build_kb(config, run_dir, gateway)
    all_results: list[TaskResult] = []
    result_reps: list[int] = []
    bundles: dict[str, list[FeedbackBundle]] = {task.id: [] for task in tasks}
    attempt_counters: dict[str, int] = {task.id: 0 for task in tasks}
    history: list[OutcomeSummary] = []
    events_log: list[dict[str, Any]] = []
    budget_rows: list[dict[str, int]] = []
    incomplete = False

    try:
        for rep in range(config.repetitions):
            if config.fresh_kb_per_rep and rep > 0:
                kb = _build_kb(config, run_dir, gateway)
            state = _build_schedule(config, tasks, history, gateway, rep, k)
            budget = AttemptBudget(
                max_iters_per_task=config.max_iters_per_task,
                global_trials=config.global_budget,
            )
            chosen = set(select_top_k(state, k))
            attempted: set[str] = set()
            rep_attempts = 0

            while budget.global_trials_remaining >= 1:
                next_id = next(
                    (t for t in state.remaining if t in chosen and t not in attempted), None
                )
                if next_id is None:
                    break
                task = task_map[next_id]
                result = run_task(
                    task,
                    kb,
                    budget,
                    gateway,
                    sandbox_cfg,
                    mode=config.feedback_mode,
                    truth=truths.get(next_id),
                    run_dir=run_dir,
                    success_corr=config.success_corr,
                    critique_enabled=config.critique_enabled,
                    summarize_fixes=config.summarize_fixes,
                    attempt_offset=attempt_counters[next_id],
                    result_seq=len(all_results),
                    rep=rep,
                )
                attempted.add(next_id)
                attempt_counters[next_id] += result.attempts_used
                rep_attempts += result.attempts_used
                all_results.append(result)
                result_reps.append(rep)
                bundles[next_id].append(result.best_feedback)
                summary = OutcomeSummary(
                    task_id=next_id,
                    attempts_used=result.attempts_used,
                    final_success=result.success,
                )
                history.append(summary)
                state = update_with_feedback(
                    state,
                    summary,
                    gateway=gateway if config.scheduler == "evolving" else None,
                    resched_policy=(
                        config.resched_policy if config.scheduler == "evolving" else "local"
                    ),
                    failure_threshold=config.failure_threshold,
                    resched_period=config.resched_period,
                )

            for event in state.events:
                events_log.append({"rep": rep, **event})
            used = config.global_budget - budget.global_trials_remaining
            if used != rep_attempts:
                raise OrchestratorError(
                    f"budget accounting broken in rep {rep}: consumed {used}, "
                    f"recorded {rep_attempts} attempts"
                )
            budget_rows.append({"rep": rep, "budget": config.global_budget, "used": used})
    except BaseException:
        incomplete = True
        if run_dir is not None:
            # Best effort only: the original fault must propagate even if
            # writing the partial report fails too.
            try:
                result = _assemble(
                    tasks, categories, bundles, all_results, result_reps,
                    budget_rows, incomplete, run_dir,
                )
                _write_artifacts(run_dir, config, result, events_log, kb)
            except Exception:
                pass
        raise

    result = _assemble(
        tasks, categories, bundles, all_results, result_reps, budget_rows, incomplete, run_dir
    )
    if run_dir is not None:
        _write_artifacts(run_dir, config, result, events_log, kb)
    return result


def _assemble(
    tasks: Sequence[TaskSpec],
    categories: Mapping[str, str],
    bundles: Mapping[str, list[FeedbackBundle]],
    all_results: list[TaskResult],
    result_reps: list[int],
    budget_rows: list[dict[str, int]],
    incomplete: bool,
    run_dir: Path | None,
) -> RunResult:
    per_factor: list[FactorMetrics] = []
    for task in tasks:
        per_run = bundles.get(task.id, [])
        if per_run:
            per_factor.append(factor_metrics(task.id, per_run))
        else:
            per_factor.append(
                FactorMetrics(
                    task_id=task.id,
                    avg_exec=0.0,
                    avg_format=0.0,
                    avg_corr=None,
                    max_corr=None,
                    runs=0,
                )
            )
    report = aggregate(per_factor, categories)
    trajectory = tuple(evolution_trajectory(all_results))
    return RunResult(
        report=report,
        categories=dict(categories),
        results=tuple(all_results),
        result_reps=tuple(result_reps),
        trajectory=trajectory,
        budget_rows=tuple(budget_rows),
        incomplete=incomplete,
        run_dir=run_dir,
    )


def report_document(config: RunConfig, result: RunResult) -> dict[str, Any]:
    """The deterministic report body written to report.json."""
    result_rows = []
    for seq, (task_result, rep) in enumerate(zip(result.results, result.result_reps)):
        best = task_result.best_feedback
        result_rows.append(
            {
                "seq": seq,
                "rep": rep,
                "task_id": task_result.task_id,
                "success": task_result.success,
                "attempts_used": task_result.attempts_used,
                "best": {
                    "exec": best.execution.succeeded,
                    "format": best.format.score,
                    "corr": None if best.quantitative is None else best.quantitative.correlation,
                },
            }
        )
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "incomplete": result.incomplete,
        "config_fingerprint": normalized_config(config),
        "categories": dict(result.categories),
        "report": result.report.to_dict(),
        "trajectory": [list(row) for row in result.trajectory],
        "budget": list(result.budget_rows),
        "results": result_rows,
    }


def _write_artifacts(
    run_dir: Path,
    config: RunConfig,
    result: RunResult,
    events_log: list[dict[str, Any]],
    kb: KnowledgeBase,
) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_dir.joinpath("schedule.log.jsonl").open("w", encoding="utf-8") as fh:
        for event in events_log:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    run_dir.joinpath("report.json").write_text(
        json.dumps(report_document(config, result), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    render_artifacts(run_dir, result.report, result.categories, result.trajectory)
    kb.persist(run_dir / "kb.jsonl")


def render_artifacts(
    run_dir: Path,
    report: AggregateReport,
    categories: Mapping[str, str],
    trajectory: Sequence[tuple[int, float, float]],
) -> None:
    """Render the human-facing views: markdown, CSVs, and PNG figures."""
    run_dir.joinpath("report.md").write_text(
        render_report_markdown(report, categories), encoding="utf-8"
    )
    write_report_csv(report, categories, run_dir / "report.csv")
    write_trajectory_csv(trajectory, run_dir / "trajectory.csv")
    render_trajectory_figure(trajectory, run_dir / "trajectory.png")
    render_metrics_figure(report, run_dir / "metrics.png")


def regenerate_renderings(run_dir: str | Path) -> Path:
    """Rebuild report.md, the CSVs, and the figures from report.json."""
    root = Path(run_dir)
    doc_path = root / "report.json"
    if not doc_path.is_file():
        raise OrchestratorError(f"no report.json under {root}")
    doc = json.loads(doc_path.read_text(encoding="utf-8"))
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise OrchestratorError(
            f"unsupported report schema_version {doc.get('schema_version')!r}"
        )
    report = AggregateReport.from_dict(doc["report"])
    trajectory = [tuple(row) for row in doc["trajectory"]]
    render_artifacts(root, report, doc["categories"], trajectory)
    return root
