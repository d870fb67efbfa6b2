"""Deterministic end-to-end fixtures built on the stub interpreter.

Three rigs, shared by the unit and acceptance suites:

- golden-run rig: the three-task toy set wired so every task's golden
  output is also available as a prebaked data source the stub can copy,
  with one task scripted to fail once before being fixed.
- knowledge-transfer rig: one task whose correct fix appears in the LLM
  script only when the prompt already carries a seeded token, so success
  hinges on what the knowledge base injects.
- dependency rig: two tasks sharing one error; the second task's fix
  requires the error->fix pair minted while solving the first, so task
  order decides how many tasks fit in the budget.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from factorforge.config import RunConfig, SandboxSettings
from factorforge.evaluators import KeyedSeries, write_series
from factorforge.toybench import build_toy_workspace

STUB_INTERPRETER = str(Path(__file__).resolve().parent / "stub_interpreter.py")

MULTIINDEX_ERROR = "AttributeError: 'MultiIndex' object has no attribute 'date'"


def fenced(code: str) -> str:
    return f"```\n{code}\n```"


def write_stub_template(directory: Path) -> Path:
    template = directory / "runner_template.txt"
    template.write_text("{{CANDIDATE_CODE}}\n", encoding="utf-8")
    return template


def stub_sandbox_settings(directory: Path, timeout: float = 30.0) -> SandboxSettings:
    return SandboxSettings(
        interpreter=(sys.executable, STUB_INTERPRETER),
        runner_template=str(write_stub_template(directory)),
        timeout=timeout,
    )


def _schedule_response(order: list[str], edges: list[tuple[str, str]]) -> str:
    lines = ["Considering task complexity and dependencies:", "", "```mermaid", "graph TD"]
    for task_id in order:
        lines.append(f"    {task_id}[{task_id}]")
    for src, dst in edges:
        lines.append(f"    {src} -->|knowledge flows forward| {dst}")
    lines.append("```")
    lines.append("")
    lines.append("```order")
    lines.extend(order)
    lines.append("```")
    return "\n".join(lines)


# -- golden-run rig ---------------------------------------------------------


def build_golden_rig(root: Path, seed: int = 42) -> dict:
    """Toy workspace plus a task set whose goldens double as data sources.

    The scripted LLM solves mid_price and PB_ROE on the first try and
    liquidity_imbalance on the second, after one attribute error.
    """
    workspace = build_toy_workspace(seed=seed, out_dir=root / "toy")
    toy_dir = Path(workspace.tasks_path).resolve().parent
    tasks = json.loads(Path(workspace.tasks_path).read_text(encoding="utf-8"))
    for task in tasks:
        for source in task["data_sources"]:
            if not Path(source["path"]).is_absolute():
                source["path"] = str(toy_dir / source["path"])
        task["data_sources"].append(
            {
                "name": f"prebaked_{task['id']}",
                "path": str(Path(workspace.truth_dir) / f"{task['id']}.csv"),
                "schema_note": "columns: datetime, instrument, value",
            }
        )
    tasks_path = root / "tasks_e2e.json"
    tasks_path.write_text(json.dumps(tasks, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    order = ["mid_price", "liquidity_imbalance", "PB_ROE"]
    rules = [
        {
            "contains": ["Task: liquidity_imbalance", "Your previous attempt"],
            "response": fenced("EMIT prebaked_liquidity_imbalance"),
        },
        {
            "contains": ["Task: liquidity_imbalance"],
            "response": fenced(f"RAISE {MULTIINDEX_ERROR}"),
        },
        {"contains": ["Task: mid_price"], "response": fenced("EMIT prebaked_mid_price")},
        {"contains": ["Task: PB_ROE"], "response": fenced("EMIT prebaked_PB_ROE")},
        {
            "contains": ["task dependency"],
            "response": _schedule_response(
                order, [("mid_price", "liquidity_imbalance"), ("liquidity_imbalance", "PB_ROE")]
            ),
        },
    ]
    return {
        "workspace": workspace,
        "tasks_path": tasks_path,
        "truth_dir": str(workspace.truth_dir),
        "backend": {"kind": "mock", "rules": rules},
    }


def golden_run_config(rig: dict, root: Path, run_dir: Path, gateway_mode: str,
                      transcript_path: Path) -> RunConfig:
    return RunConfig(
        task_set=str(rig["tasks_path"]),
        global_budget=6,
        sandbox=stub_sandbox_settings(root),
        scheduler="evolving",
        repetitions=1,
        max_iters_per_task=5,
        feedback_mode="supervised",
        gateway_mode=gateway_mode,
        transcript_path=str(transcript_path),
        seed=7,
        run_dir=str(run_dir),
        truth_dir=rig["truth_dir"],
        backend=rig["backend"],
    )


# -- knowledge-transfer rig --------------------------------------------------


def _valid_series() -> KeyedSeries:
    return KeyedSeries(
        {
            ("2024-01-02", "AAA"): 1.5,
            ("2024-01-02", "BBB"): 2.5,
            ("2024-01-03", "AAA"): 3.25,
            ("2024-01-03", "BBB"): 4.75,
        }
    )


def _single_task_doc(task_id: str, description: str, source_name: str, source_path: str) -> dict:
    return {
        "id": task_id,
        "name": task_id.replace("_", " "),
        "category": "high_frequency",
        "difficulty": "easy",
        "description": description,
        "data_sources": [
            {"name": source_name, "path": source_path, "schema_note": "columns: datetime, instrument, value"}
        ],
        "output_contract": {
            "kind": "keyed_series",
            "key_columns": ["datetime", "instrument"],
            "value_column": "value",
        },
    }


TRANSFER_DESCRIPTION = (
    "Compute the session-weighted spread factor for every (datetime, instrument) key."
)


def build_transfer_rig(root: Path) -> dict:
    """One task; the fix responds only to a token seeded via warm start."""
    series_path = root / "prebaked_w.csv"
    write_series(_valid_series(), series_path)
    tasks_path = root / "tasks_w.json"
    tasks_path.write_text(
        json.dumps(
            [_single_task_doc("task_w", TRANSFER_DESCRIPTION, "prebaked_w", str(series_path))],
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    seed_path = root / "warm_seed.jsonl"
    seed_record = {
        "task_id": "task_w_variant",
        "description": TRANSFER_DESCRIPTION,
        "code": "EMIT prebaked_w  # WARM_FIX_TOKEN: weight by session volume",
    }
    seed_path.write_text(json.dumps(seed_record) + "\n", encoding="utf-8")
    rules = [
        {
            "contains": ["Task: task_w", "WARM_FIX_TOKEN"],
            "response": fenced("EMIT prebaked_w"),
        },
        {"contains": ["Task: task_w"], "response": fenced(f"RAISE {MULTIINDEX_ERROR}")},
    ]
    return {
        "tasks_path": tasks_path,
        "warm_seed": seed_path,
        "backend": {"kind": "mock", "rules": rules},
    }


# -- dependency rig ----------------------------------------------------------


def build_dependency_rig(root: Path) -> dict:
    """Two tasks, one shared error; solving task_a first unlocks task_b.

    task_a fails once, then its repair (tagged MAGIC_FIX_TOKEN) succeeds,
    minting an error->fix pair. task_b emits the same error; its fix rule
    fires only when the prompt carries both the retrieved-pairs section and
    the token, which requires the pair from task_a to be in the base. The
    task file lists task_b first, so file order is the adversarial order.
    """
    series_a = root / "prebaked_a.csv"
    series_b = root / "prebaked_b.csv"
    write_series(_valid_series(), series_a)
    write_series(_valid_series(), series_b)
    tasks_path = root / "tasks_dep.json"
    tasks_path.write_text(
        json.dumps(
            [
                _single_task_doc(
                    "task_b",
                    "Derive the order-flow persistence factor from the keyed series.",
                    "prebaked_b",
                    str(series_b),
                ),
                _single_task_doc(
                    "task_a",
                    "Derive the order-flow baseline factor from the keyed series.",
                    "prebaked_a",
                    str(series_a),
                ),
            ],
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    rules = [
        {
            "contains": ["Task: task_a", "Your previous attempt"],
            "response": fenced("EMIT prebaked_a  # MAGIC_FIX_TOKEN: flatten the index first"),
        },
        {"contains": ["Task: task_a"], "response": fenced(f"RAISE {MULTIINDEX_ERROR}")},
        {
            "contains": [
                "Task: task_b",
                "Past errors similar to the latest feedback",
                "MAGIC_FIX_TOKEN",
            ],
            "response": fenced("EMIT prebaked_b"),
        },
        {"contains": ["Task: task_b"], "response": fenced(f"RAISE {MULTIINDEX_ERROR}")},
        {
            "contains": ["task dependency"],
            "response": _schedule_response(["task_a", "task_b"], [("task_a", "task_b")]),
        },
    ]
    return {"tasks_path": tasks_path, "backend": {"kind": "mock", "rules": rules}}


def dependency_run_config(rig: dict, root: Path, scheduler: str, seed: int = 0,
                          run_dir: Path | None = None) -> RunConfig:
    return RunConfig(
        task_set=str(rig["tasks_path"]),
        global_budget=4,
        sandbox=stub_sandbox_settings(root),
        scheduler=scheduler,
        repetitions=1,
        max_iters_per_task=2,
        feedback_mode="unsupervised",
        gateway_mode="live",
        seed=seed,
        run_dir=None if run_dir is None else str(run_dir),
        backend=rig["backend"],
    )
