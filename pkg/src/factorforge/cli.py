"""Command line entry points.

Data goes to stdout, diagnostics to stderr, and the exit status reflects
harness health, not task success: a run whose tasks all failed still
exits 0 with an honest report, while a broken config or a harness fault
exits 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, build_gateway, load_config
from .evaluators import parse_output, pearson, render_report_markdown
from .gateway import GatewayError
from .implementer import AttemptBudget, run_task
from .knowledge import KnowledgeBase, KnowledgeBaseError
from .mermaid import render_mermaid
from .model import OutputContract, TaskSetError, load_task_set
from .orchestrator import OrchestratorError, regenerate_renderings, run
from .sandbox import SandboxError
from .scheduling import propose_schedule, render_schedule_prompt
from .toybench import build_toy_workspace

_KNOWN_FAULTS = (
    ConfigError,
    GatewayError,
    KnowledgeBaseError,
    OrchestratorError,
    SandboxError,
    TaskSetError,
)


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(doc: object) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, object] = {}
    if getattr(args, "run_dir", None) is not None:
        overrides["run_dir"] = str(Path(args.run_dir).resolve())
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "repetitions", None) is not None:
        overrides["repetitions"] = args.repetitions
    if getattr(args, "fresh_kb_per_rep", False):
        overrides["fresh_kb_per_rep"] = True
    return dataclasses.replace(config, **overrides) if overrides else config


def _cmd_run(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    result = run(config)
    print(render_report_markdown(result.report, result.categories), end="")
    successes = sum(1 for r in result.results if r.success)
    _info(
        f"run finished: {successes}/{len(result.results)} task rounds succeeded, "
        f"artifacts in {result.run_dir if result.run_dir else '(no run_dir configured)'}"
    )
    return 0


def _cmd_schedule(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    tasks = load_task_set(config.task_set)
    if args.dry_run:
        request = render_schedule_prompt(tasks, [])
        print(request.text)
        return 0
    gateway = build_gateway(config)
    k = config.k_limit if config.k_limit is not None else len(tasks)
    state, dag = propose_schedule(
        tasks, [], gateway, k_limit=k, failure_threshold=config.failure_threshold
    )
    for warning in state.warnings:
        _info(f"warning: {warning}")
    _emit({"order": state.remaining, "mermaid": render_mermaid(dag)})
    return 0


def _cmd_implement(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    tasks = load_task_set(config.task_set)
    matches = [t for t in tasks if t.id == args.task]
    if not matches:
        raise ConfigError(f"task {args.task!r} is not in {config.task_set}")
    task = matches[0]
    gateway = build_gateway(config)
    kb = KnowledgeBase()
    if config.kb_path is not None and Path(config.kb_path).is_file():
        kb = KnowledgeBase.load(config.kb_path)
        kb.path = None
    if config.warm_start_seed is not None:
        kb.warm_start(config.warm_start_seed, gateway)
    truth = None
    if config.feedback_mode == "supervised":
        truth_path = Path(config.truth_dir) / f"{task.id}.csv"
        series, _report = parse_output(truth_path, task.output_contract)
        if series is None:
            raise OrchestratorError(f"cannot read ground truth {truth_path}")
        truth = series
    budget = AttemptBudget(
        max_iters_per_task=config.max_iters_per_task, global_trials=config.global_budget
    )
    result = run_task(
        task,
        kb,
        budget,
        gateway,
        config.sandbox.build(),
        mode=config.feedback_mode,
        truth=truth,
        run_dir=config.run_dir,
        success_corr=config.success_corr,
    )
    best = result.best_feedback
    _emit(
        {
            "task_id": result.task_id,
            "success": result.success,
            "attempts_used": result.attempts_used,
            "best": {
                "exec": best.execution.succeeded,
                "format": best.format.score,
                "corr": None if best.quantitative is None else best.quantitative.correlation,
            },
        }
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    contract = OutputContract()
    candidate, candidate_report = parse_output(args.candidate, contract)
    truth, truth_report = parse_output(args.truth, contract)
    if truth is None or truth_report.violations:
        detail = "; ".join(f"{r}: {m}" for r, m in truth_report.violations)
        raise OrchestratorError(f"reference file is invalid: {detail or 'unreadable'}")
    doc: dict[str, object] = {
        "format": {
            "parseable": candidate_report.parseable,
            "score": candidate_report.score,
            "violations": [list(v) for v in candidate_report.violations],
        }
    }
    if candidate is not None:
        doc["quantitative"] = pearson(candidate, truth, min_overlap=args.min_overlap).to_dict()
    _emit(doc)
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    root = regenerate_renderings(args.run_dir)
    _info(f"re-rendered report.md, report.csv, trajectory.csv, and figures in {root}")
    return 0


def _cmd_kb(args: argparse.Namespace) -> int:
    kb = KnowledgeBase.load(args.kb)
    kb.path = None
    if args.kb_command == "stats":
        _emit(kb.stats())
        return 0
    config = load_config(args.config)
    gateway = build_gateway(config)
    hits = kb.query_by_feedback(args.text, gateway, top_n=args.top_n, min_sim=args.min_sim)
    _emit(
        [
            {
                "pair_id": hit.pair.pair_id,
                "similarity": hit.similarity,
                "error_text": hit.pair.error_text,
                "fix_steps": list(hit.pair.fix_steps),
            }
            for hit in hits
        ]
    )
    return 0


def _cmd_toy(args: argparse.Namespace) -> int:
    workspace = build_toy_workspace(seed=args.seed, out_dir=args.out)
    _emit(
        {
            "root": str(workspace.root),
            "data_files": {name: str(path) for name, path in workspace.data_files.items()},
            "tasks": str(workspace.tasks_path),
            "truth_dir": str(workspace.truth_dir),
        }
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorforge",
        description="LLM-driven data-development harness: schedule, implement, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a full configured run")
    p_run.add_argument("--config", required=True, help="path to the run config JSON")
    p_run.add_argument("--run-dir", help="override the artifact directory")
    p_run.add_argument("--seed", type=int, help="override the run seed")
    p_run.add_argument("--repetitions", type=int, help="override the repetition count")
    p_run.add_argument(
        "--fresh-kb-per-rep",
        action="store_true",
        help="rebuild the knowledge base at the start of every repetition",
    )
    p_run.set_defaults(func=_cmd_run)

    p_sched = sub.add_parser("schedule", help="propose a schedule without implementing")
    p_sched.add_argument("--config", required=True)
    p_sched.add_argument(
        "--dry-run", action="store_true", help="print the scheduling prompt instead of calling"
    )
    p_sched.set_defaults(func=_cmd_schedule)

    p_impl = sub.add_parser("implement", help="run the implementation loop for one task")
    p_impl.add_argument("--config", required=True)
    p_impl.add_argument("--task", required=True, help="task id from the configured task set")
    p_impl.set_defaults(func=_cmd_implement)

    p_eval = sub.add_parser("eval", help="score a candidate output file against a reference")
    p_eval.add_argument("--candidate", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--min-overlap", type=float, default=0.5)
    p_eval.set_defaults(func=_cmd_eval)

    p_report = sub.add_parser("report", help="re-render report views from report.json")
    p_report.add_argument("--run-dir", required=True)
    p_report.set_defaults(func=_cmd_report)

    p_kb = sub.add_parser("kb", help="inspect a knowledge base file")
    kb_sub = p_kb.add_subparsers(dest="kb_command", required=True)
    p_kb_stats = kb_sub.add_parser("stats", help="entry and pair counts")
    p_kb_stats.add_argument("--kb", required=True)
    p_kb_stats.set_defaults(func=_cmd_kb)
    p_kb_query = kb_sub.add_parser("query", help="retrieve error->fix pairs by similarity")
    p_kb_query.add_argument("--kb", required=True)
    p_kb_query.add_argument("--config", required=True, help="config supplying the backend")
    p_kb_query.add_argument("--text", required=True, help="error text to search for")
    p_kb_query.add_argument("--top-n", type=int, default=3)
    p_kb_query.add_argument("--min-sim", type=float, default=0.0)
    p_kb_query.set_defaults(func=_cmd_kb)

    p_toy = sub.add_parser("toy", help="generate the bundled toy dataset and task set")
    p_toy.add_argument("--seed", type=int, default=42)
    p_toy.add_argument("--out", required=True, help="output directory")
    p_toy.set_defaults(func=_cmd_toy)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _KNOWN_FAULTS as exc:
        _info(f"error: {exc}")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
