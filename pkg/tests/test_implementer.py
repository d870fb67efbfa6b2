import json
import sys
import threading

import pytest

from factorforge.evaluators import KeyedSeries
from factorforge.gateway import Embedding, LLMGateway, MockBackend, hash_embedding
from factorforge.implementer import (
    AttemptBudget,
    BudgetExhaustedError,
    TaskResult,
    extract_code,
    render_impl_prompt,
    run_task,
    success_predicate,
)
from factorforge.knowledge import ErrorFixPair, KnowledgeBase
from factorforge.model import (
    Category,
    DataSourceDescriptor,
    Difficulty,
    OutputContract,
    Provenance,
    TaskSpec,
)
from factorforge.sandbox import SandboxConfig

from .helpers.oracles import make_bundle

DIM = 16

PY_TEMPLATE = """\
import json, os, sys
with open(sys.argv[1]) as fh:
    manifest = json.load(fh)
{{CANDIDATE_CODE}}
"""

GOOD_CODE = (
    "with open(manifest['output_path'], 'w') as fh:\n"
    "    fh.write('datetime,instrument,value\\n2024-01-02,a,1\\n2024-01-02,b,2\\n')\n"
)

BROKEN_CODE = "raise KeyError('bid')"


def fenced(code):
    return f"```python\n{code}\n```"


def make_task(tmp_path, task_id="t1", description="compute a demo factor"):
    source = tmp_path / "quotes.csv"
    if not source.exists():
        source.write_text("datetime,instrument,bid,ask\n2024-01-02,a,1.0,1.1\n")
    return TaskSpec(
        id=task_id,
        name="demo",
        category=Category.HIGH_FREQUENCY,
        difficulty=Difficulty.EASY,
        description=description,
        data_sources=(
            DataSourceDescriptor(name="quotes", path=str(source), schema_note="columns: bid, ask"),
        ),
        output_contract=OutputContract(),
    )


def py_sandbox(tmp_path):
    return SandboxConfig(
        interpreter_command=(sys.executable,),
        runner_template=PY_TEMPLATE,
        timeout=30.0,
        workdir_root=str(tmp_path),
    )


class SpyBackend:
    """Wraps a MockBackend, recording every chat prompt it answers."""

    def __init__(self, inner):
        self.inner = inner
        self.prompts = []

    def complete(self, request):
        self.prompts.append(request.text)
        return self.inner.complete(request)

    def embed_text(self, text):
        return self.inner.embed_text(text)


def spy_gateway(rules=(), fallback=()):
    spy = SpyBackend(MockBackend(rules=rules, fallback_responses=fallback, embedding_dimension=DIM))
    return LLMGateway(backend=spy, embedding_dimension=DIM), spy


class TestAttemptBudget:
    def test_validation(self):
        with pytest.raises(ValueError):
            AttemptBudget(max_iters_per_task=0)
        with pytest.raises(ValueError):
            AttemptBudget(global_trials=-1)

    def test_consume_until_empty(self):
        budget = AttemptBudget(max_iters_per_task=5, global_trials=2)
        assert budget.try_consume()
        assert budget.try_consume()
        assert not budget.try_consume()
        assert budget.global_trials_remaining == 0

    def test_concurrent_consumers_never_overdraw(self):
        budget = AttemptBudget(max_iters_per_task=5, global_trials=50)
        taken = []

        def worker():
            while budget.try_consume():
                taken.append(1)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(taken) == 50


class TestTaskResult:
    def test_attempts_must_match_trace(self):
        with pytest.raises(ValueError):
            TaskResult(
                task_id="t",
                success=False,
                best_feedback=make_bundle(False, 0),
                attempts_used=2,
                trace=(),
            )


class TestSuccessPredicate:
    def test_unsupervised_needs_clean_exec_and_format(self):
        assert success_predicate(make_bundle(True, 1), "unsupervised")
        assert not success_predicate(make_bundle(True, 0), "unsupervised")
        assert not success_predicate(make_bundle(False, 0), "unsupervised")

    def test_supervised_needs_high_correlation(self):
        assert success_predicate(make_bundle(True, 1, corr=0.995), "supervised")
        assert not success_predicate(make_bundle(True, 1, corr=0.5), "supervised")
        assert not success_predicate(make_bundle(True, 1), "supervised")

    def test_threshold_is_configurable(self):
        assert success_predicate(make_bundle(True, 1, corr=0.5), "supervised", success_corr=0.4)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            success_predicate(make_bundle(True, 1), "vibes")


class TestExtractCode:
    def test_first_fenced_block(self):
        code, fallback = extract_code("intro\n```python\nx = 1\n```\n```\ny = 2\n```")
        assert code == "x = 1"
        assert not fallback

    def test_untagged_fence(self):
        assert extract_code("```\nx = 1\n```")[0] == "x = 1"

    def test_fallback_to_whole_reply(self):
        code, fallback = extract_code("  x = 1  ")
        assert code == "x = 1"
        assert fallback

    def test_empty_reply_rejected(self):
        with pytest.raises(ValueError):
            extract_code("   \n  ")


class TestRenderImplPrompt:
    def pair(self):
        return ErrorFixPair(
            pair_id="e0001:p0",
            error_text="KeyError: 'bid'",
            failing_code="bad = 1",
            fixed_code="good = 2",
            fix_steps=("flatten the index",),
            error_embedding=Embedding.normalized(hash_embedding("KeyError: 'bid'", DIM)),
            source_entry="e0001",
        )

    def test_sections_in_fixed_order(self, tmp_path):
        task = make_task(tmp_path)
        from factorforge.knowledge import KnowledgeEntry, TrialRecord
        from factorforge.model import CandidateSolution

        similar = KnowledgeEntry(
            entry_id="e0001",
            task_id="t0",
            task_description="an earlier, related factor",
            trace=(TrialRecord(attempt_index=0, code="prior = 1", feedback=make_bundle(True, 1)),),
            final_solution=CandidateSolution(
                task_id="t0", code="prior = 1", attempt_index=0, provenance=Provenance.WARM_START
            ),
            success=True,
            created_at="2026-08-14T00:00:00+00:00",
        )
        from factorforge.knowledge import RetrievalHit

        hits = [RetrievalHit(pair=self.pair(), similarity=0.91)]
        last = ("prev = 0", make_bundle(False, 0, stderr="Traceback\nKeyError: 'bid'"))
        text = render_impl_prompt(task, last, hits, similar).text
        anchors = [
            "Task: t1",
            "Available data sources (bound by name at runtime):",
            "Output contract: assign the final series to a variable named `result`",
            "A similar task was already solved.",
            "Past errors similar to the latest feedback, with their fixes:",
            "Your previous attempt:",
            "Reply with exactly one fenced code block",
        ]
        positions = [text.index(a) for a in anchors]
        assert positions == sorted(positions)

    def test_data_sources_by_name_never_by_path(self, tmp_path):
        task = make_task(tmp_path)
        text = render_impl_prompt(task, None, [], None).text
        assert "- quotes | schema: columns: bid, ask" in text
        assert str(tmp_path) not in text
        assert "quotes.csv" not in text

    def test_stderr_tail_capped_at_ten_lines(self, tmp_path):
        task = make_task(tmp_path)
        stderr = "\n".join(f"line {i}" for i in range(30))
        last = ("x = 1", make_bundle(False, 0, stderr=stderr))
        text = render_impl_prompt(task, last, [], None).text
        assert "line 29" in text
        assert "line 20" in text
        assert "line 19" not in text

    def test_quantitative_feedback_included(self, tmp_path):
        task = make_task(tmp_path)
        last = ("x = 1", make_bundle(True, 1, corr=0.42))
        text = render_impl_prompt(task, last, [], None).text
        assert "correlation 0.42" in text

    def test_contract_note_inserted(self, tmp_path):
        task = make_task(tmp_path)
        text = render_impl_prompt(task, None, [], None, contract_note="Mind the gaps.").text
        assert "Mind the gaps." in text

    def test_deterministic(self, tmp_path):
        task = make_task(tmp_path)
        a = render_impl_prompt(task, None, [], None)
        b = render_impl_prompt(task, None, [], None)
        assert a == b


class TestRunTask:
    def test_first_attempt_success(self, tmp_path):
        task = make_task(tmp_path)
        kb = KnowledgeBase()
        gateway, spy = spy_gateway(fallback=[fenced(GOOD_CODE)])
        budget = AttemptBudget(max_iters_per_task=5, global_trials=10)
        result = run_task(task, kb, budget, gateway, py_sandbox(tmp_path))
        assert result.success
        assert result.attempts_used == 1
        assert budget.global_trials_remaining == 9
        assert kb.stats() == {"entries": 1, "successful_entries": 1, "pairs": 0}
        assert kb.entries[0].final_solution.provenance is Provenance.LLM_DRAFT

    def test_repair_after_failure(self, tmp_path):
        task = make_task(tmp_path)
        kb = KnowledgeBase()
        gateway, spy = spy_gateway(
            rules=[(("Task: t1", "Your previous attempt"), fenced(GOOD_CODE))],
            fallback=[fenced(BROKEN_CODE)],
        )
        budget = AttemptBudget(max_iters_per_task=5, global_trials=10)
        result = run_task(task, kb, budget, gateway, py_sandbox(tmp_path))
        assert result.success
        assert result.attempts_used == 2
        assert budget.global_trials_remaining == 8
        assert kb.stats()["pairs"] == 1
        assert kb.entries[0].final_solution.provenance is Provenance.LLM_REPAIR

    def test_error_fix_pairs_enter_prompt_only_after_a_failure(self, tmp_path):
        task = make_task(tmp_path)
        kb = KnowledgeBase()
        gateway, spy = spy_gateway(
            rules=[
                (("Past errors similar to the latest feedback",), fenced(GOOD_CODE)),
            ],
            fallback=[fenced(BROKEN_CODE), fenced(BROKEN_CODE)],
        )
        # Seed a pair whose error matches what BROKEN_CODE will raise.
        seed_task = make_task(tmp_path, task_id="t0")
        seed_gateway, _ = spy_gateway(fallback=["x"])
        from factorforge.knowledge import KnowledgeEntry, TrialRecord
        from factorforge.model import CandidateSolution

        kb.insert_trace(
            KnowledgeEntry(
                entry_id="e0001",
                task_id="t0",
                task_description="earlier task",
                trace=(
                    TrialRecord(
                        attempt_index=0,
                        code="old = 1",
                        feedback=make_bundle(False, 0, stderr="KeyError: 'bid'"),
                    ),
                    TrialRecord(attempt_index=1, code="old = 2", feedback=make_bundle(True, 1)),
                ),
                final_solution=CandidateSolution(
                    task_id="t0", code="old = 2", attempt_index=1, provenance=Provenance.LLM_REPAIR
                ),
                success=True,
                created_at="2026-08-14T00:00:00+00:00",
            ),
            seed_gateway,
        )
        budget = AttemptBudget(max_iters_per_task=5, global_trials=10)
        result = run_task(task, kb, budget, gateway, py_sandbox(tmp_path))
        assert result.success
        assert result.attempts_used == 2
        assert "Past errors similar to the latest feedback" not in spy.prompts[0]
        assert "Past errors similar to the latest feedback" in spy.prompts[1]
        assert "fix step: " in spy.prompts[1]

    def test_similar_success_offered_from_the_first_attempt(self, tmp_path):
        task = make_task(tmp_path, description="compute the quote midpoint factor")
        kb = KnowledgeBase()
        seed_gateway, _ = spy_gateway()
        seed = tmp_path / "seed.jsonl"
        seed.write_text(
            json.dumps(
                {
                    "task_id": "t0",
                    "description": "compute the quote midpoint factor",
                    "code": "prior = 42",
                }
            )
            + "\n"
        )
        kb.warm_start(seed, seed_gateway)
        gateway, spy = spy_gateway(fallback=[fenced(GOOD_CODE)])
        budget = AttemptBudget(max_iters_per_task=5, global_trials=10)
        run_task(task, kb, budget, gateway, py_sandbox(tmp_path))
        assert "A similar task was already solved." in spy.prompts[0]
        assert "prior = 42" in spy.prompts[0]

    def test_budget_exhausted_before_start(self, tmp_path):
        task = make_task(tmp_path)
        gateway, _ = spy_gateway(fallback=[fenced(GOOD_CODE)])
        budget = AttemptBudget(max_iters_per_task=5, global_trials=0)
        with pytest.raises(BudgetExhaustedError):
            run_task(task, KnowledgeBase(), budget, gateway, py_sandbox(tmp_path))

    def test_global_budget_caps_the_loop(self, tmp_path):
        task = make_task(tmp_path)
        gateway, _ = spy_gateway(fallback=[fenced(BROKEN_CODE)] * 5)
        budget = AttemptBudget(max_iters_per_task=5, global_trials=2)
        result = run_task(task, KnowledgeBase(), budget, gateway, py_sandbox(tmp_path))
        assert not result.success
        assert result.attempts_used == 2
        assert budget.global_trials_remaining == 0

    def test_max_iters_caps_the_loop(self, tmp_path):
        task = make_task(tmp_path)
        gateway, _ = spy_gateway(fallback=[fenced(BROKEN_CODE)] * 5)
        budget = AttemptBudget(max_iters_per_task=3, global_trials=10)
        result = run_task(task, KnowledgeBase(), budget, gateway, py_sandbox(tmp_path))
        assert result.attempts_used == 3
        assert budget.global_trials_remaining == 7

    def test_gateway_fault_becomes_failed_trial(self, tmp_path):
        task = make_task(tmp_path)
        gateway, _ = spy_gateway()  # no rules, no fallbacks: chat raises
        budget = AttemptBudget(max_iters_per_task=2, global_trials=10)
        result = run_task(task, KnowledgeBase(), budget, gateway, py_sandbox(tmp_path))
        assert not result.success
        assert result.attempts_used == 2
        assert budget.global_trials_remaining == 8
        trial = result.trace[0]
        assert trial.code == "# no code produced"
        assert trial.feedback.execution.exit_code == -1
        assert "attempt aborted before execution" in trial.feedback.execution.stderr
        assert ("R1", "no output produced") in trial.feedback.format.violations

    def test_sandbox_fault_becomes_failed_trial(self, tmp_path):
        task = make_task(tmp_path)
        gateway, _ = spy_gateway(fallback=[fenced(GOOD_CODE)] * 2)
        cfg = SandboxConfig(
            interpreter_command=("/no/such/interpreter",),
            runner_template=PY_TEMPLATE,
            workdir_root=str(tmp_path),
        )
        budget = AttemptBudget(max_iters_per_task=2, global_trials=10)
        result = run_task(task, KnowledgeBase(), budget, gateway, cfg)
        assert not result.success
        assert "sandbox fault" in result.trace[0].feedback.execution.stderr
        assert budget.global_trials_remaining == 8

    def test_exec_ok_without_output_scores_format_zero(self, tmp_path):
        task = make_task(tmp_path)
        gateway, _ = spy_gateway(fallback=[fenced("pass")])
        budget = AttemptBudget(max_iters_per_task=1, global_trials=10)
        result = run_task(task, KnowledgeBase(), budget, gateway, py_sandbox(tmp_path))
        assert not result.success
        feedback = result.trace[0].feedback
        assert feedback.execution.succeeded
        assert feedback.format.score == 0
        assert feedback.format.violations[0][0] == "R1"

    def test_supervised_success_requires_matching_truth(self, tmp_path):
        task = make_task(tmp_path)
        truth = KeyedSeries({("2024-01-02", "a"): 1.0, ("2024-01-02", "b"): 2.0})
        gateway, _ = spy_gateway(fallback=[fenced(GOOD_CODE)])
        budget = AttemptBudget(max_iters_per_task=2, global_trials=10)
        result = run_task(
            task,
            KnowledgeBase(),
            budget,
            gateway,
            py_sandbox(tmp_path),
            mode="supervised",
            truth=truth,
        )
        assert result.success
        quant = result.best_feedback.quantitative
        assert quant is not None
        assert quant.correlation == pytest.approx(1.0)

    def test_supervised_low_correlation_is_not_success(self, tmp_path):
        task = make_task(tmp_path)
        truth = KeyedSeries({("2024-01-02", "a"): 2.0, ("2024-01-02", "b"): 1.0})
        gateway, _ = spy_gateway(fallback=[fenced(GOOD_CODE)] * 2)
        budget = AttemptBudget(max_iters_per_task=2, global_trials=10)
        result = run_task(
            task,
            KnowledgeBase(),
            budget,
            gateway,
            py_sandbox(tmp_path),
            mode="supervised",
            truth=truth,
        )
        assert not result.success
        assert result.attempts_used == 2

    def test_best_feedback_is_the_peak_not_the_last(self, tmp_path):
        task = make_task(tmp_path)
        truth = KeyedSeries(
            {("2024-01-02", "a"): 1.0, ("2024-01-02", "b"): 2.0, ("2024-01-02", "c"): 3.0}
        )
        # Attempt 1 runs and correlates at 0.5 (two rows swapped); attempt 2
        # crashes, so the peak is the earlier attempt.
        half_code = (
            "with open(manifest['output_path'], 'w') as fh:\n"
            "    fh.write('datetime,instrument,value\\n"
            "2024-01-02,a,1\\n2024-01-02,b,3\\n2024-01-02,c,2\\n')\n"
        )
        gateway, _ = spy_gateway(
            rules=[(("Your previous attempt",), fenced(BROKEN_CODE))],
            fallback=[fenced(half_code)],
        )
        budget = AttemptBudget(max_iters_per_task=2, global_trials=10)
        result = run_task(
            task,
            KnowledgeBase(),
            budget,
            gateway,
            py_sandbox(tmp_path),
            mode="supervised",
            truth=truth,
        )
        assert not result.success
        assert result.attempts_used == 2
        assert result.best_feedback.quantitative is not None
        assert result.best_feedback.execution.succeeded

    def test_attempt_artifacts_written(self, tmp_path):
        task = make_task(tmp_path)
        run_dir = tmp_path / "run"
        gateway, _ = spy_gateway(fallback=[fenced(GOOD_CODE)])
        budget = AttemptBudget(max_iters_per_task=2, global_trials=10)
        run_task(
            task,
            KnowledgeBase(),
            budget,
            gateway,
            py_sandbox(tmp_path),
            run_dir=run_dir,
            attempt_offset=3,
            result_seq=7,
            rep=2,
        )
        attempt_dir = run_dir / "t1" / "attempt_0003"
        assert (attempt_dir / "prompt.txt").exists()
        assert (attempt_dir / "code.txt").read_text().startswith("with open(")
        assert (attempt_dir / "stdout.txt").exists()
        assert (attempt_dir / "stderr.txt").exists()
        doc = json.loads((attempt_dir / "feedback.json").read_text())
        assert doc["schema_version"] == 1
        assert doc["task_id"] == "t1"
        assert doc["rep"] == 2
        assert doc["attempt_index"] == 0
        assert doc["result_seq"] == 7
        assert doc["bundle"]["execution"]["exit_code"] == 0

    def test_failed_trace_archived_for_reporting(self, tmp_path):
        task = make_task(tmp_path)
        kb = KnowledgeBase()
        gateway, _ = spy_gateway(fallback=[fenced(BROKEN_CODE)] * 2)
        budget = AttemptBudget(max_iters_per_task=2, global_trials=10)
        result = run_task(task, kb, budget, gateway, py_sandbox(tmp_path))
        assert not result.success
        assert kb.stats() == {"entries": 1, "successful_entries": 0, "pairs": 0}
