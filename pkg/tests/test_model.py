import json

import pytest

from factorforge.model import (
    CandidateSolution,
    Category,
    DataSourceDescriptor,
    Difficulty,
    ExecutionOutcome,
    FeedbackBundle,
    FormatReport,
    OutputContract,
    Provenance,
    QuantReport,
    TaskSetError,
    TaskSpec,
    load_task_set,
    validate_task_set,
)


def make_task(task_id="t1", **overrides):
    fields = dict(
        id=task_id,
        name="demo task",
        category=Category.HIGH_FREQUENCY,
        difficulty=Difficulty.EASY,
        description="compute something per (datetime, instrument)",
        data_sources=(DataSourceDescriptor(name="quotes", path="/data/quotes.csv"),),
        output_contract=OutputContract(),
    )
    fields.update(overrides)
    return TaskSpec(**fields)


class TestOutputContract:
    def test_header(self):
        assert OutputContract().header == "datetime,instrument,value"

    def test_rejects_value_column_among_keys(self):
        with pytest.raises(ValueError):
            OutputContract(key_columns=("datetime", "value"), value_column="value")

    def test_rejects_duplicate_keys(self):
        with pytest.raises(ValueError):
            OutputContract(key_columns=("datetime", "datetime"))

    def test_roundtrip(self):
        contract = OutputContract(key_columns=("date", "asset"), value_column="score")
        assert OutputContract.from_dict(contract.to_dict()) == contract


class TestTaskSpec:
    def test_roundtrip(self):
        task = make_task()
        assert TaskSpec.from_dict(task.to_dict()) == task

    def test_unknown_field_rejected_by_name(self):
        doc = make_task().to_dict()
        doc["surprise"] = 1
        with pytest.raises(TaskSetError, match="surprise"):
            TaskSpec.from_dict(doc)

    def test_bad_category_rejected(self):
        doc = make_task().to_dict()
        doc["category"] = "cryptid"
        with pytest.raises(TaskSetError):
            TaskSpec.from_dict(doc)

    def test_implementable_flag_optional_and_typed(self):
        doc = make_task().to_dict()
        doc["implementable"] = "yes"
        with pytest.raises(TaskSetError):
            TaskSpec.from_dict(doc)
        doc["implementable"] = False
        assert TaskSpec.from_dict(doc).implementable is False


class TestExecutionOutcome:
    def test_success_requires_zero_exit_and_no_timeout(self):
        ok = ExecutionOutcome(exit_code=0, timed_out=False, stdout="", stderr="", wall_time=0.1)
        assert ok.succeeded
        assert not ExecutionOutcome(0, True, "", "", 0.1).succeeded
        assert not ExecutionOutcome(1, False, "", "", 0.1).succeeded


class TestFormatReport:
    def test_score_is_violation_free_indicator(self):
        assert FormatReport(parseable=True, violations=()).score == 1
        assert FormatReport(parseable=True, violations=(("R6", "x"),)).score == 0

    def test_unparseable_requires_a_violation(self):
        with pytest.raises(ValueError):
            FormatReport(parseable=False, violations=())


class TestQuantReport:
    def test_no_alignment_forces_undefined(self):
        with pytest.raises(ValueError):
            QuantReport(correlation=0.5, value_accuracy=0.0, overlap_fraction=0.0, n_aligned=0)

    def test_correlation_bounds(self):
        with pytest.raises(ValueError):
            QuantReport(correlation=1.5, value_accuracy=1.0, overlap_fraction=1.0, n_aligned=3)


class TestFeedbackBundle:
    def test_quantitative_requires_clean_execution(self):
        failed = ExecutionOutcome(1, False, "", "boom", 0.1)
        fmt = FormatReport(parseable=True, violations=())
        quant = QuantReport(correlation=1.0, value_accuracy=1.0, overlap_fraction=1.0, n_aligned=4)
        with pytest.raises(ValueError):
            FeedbackBundle(execution=failed, format=fmt, quantitative=quant)

    def test_quantitative_requires_parseable_output(self):
        ok = ExecutionOutcome(0, False, "", "", 0.1)
        fmt = FormatReport(parseable=False, violations=(("R1", "missing"),))
        quant = QuantReport(correlation=1.0, value_accuracy=1.0, overlap_fraction=1.0, n_aligned=4)
        with pytest.raises(ValueError):
            FeedbackBundle(execution=ok, format=fmt, quantitative=quant)


class TestCandidateSolution:
    def test_empty_code_rejected(self):
        with pytest.raises(ValueError):
            CandidateSolution(task_id="t", code="  ", attempt_index=0, provenance=Provenance.LLM_DRAFT)


class TestTaskSetLoading:
    def write_tasks(self, path, docs):
        path.write_text(json.dumps(docs), encoding="utf-8")

    def test_loads_and_resolves_relative_paths(self, tmp_path):
        (tmp_path / "data").mkdir()
        docs = [make_task().to_dict()]
        docs[0]["data_sources"][0]["path"] = "data/quotes.csv"
        self.write_tasks(tmp_path / "tasks.json", docs)
        tasks = load_task_set(tmp_path / "tasks.json")
        assert tasks[0].data_sources[0].path == str((tmp_path / "data/quotes.csv").resolve())

    def test_absolute_paths_kept(self, tmp_path):
        docs = [make_task().to_dict()]
        self.write_tasks(tmp_path / "tasks.json", docs)
        tasks = load_task_set(tmp_path / "tasks.json")
        assert tasks[0].data_sources[0].path == "/data/quotes.csv"

    def test_duplicate_ids_rejected(self, tmp_path):
        docs = [make_task().to_dict(), make_task().to_dict()]
        self.write_tasks(tmp_path / "tasks.json", docs)
        with pytest.raises(TaskSetError, match="duplicate"):
            load_task_set(tmp_path / "tasks.json")

    def test_top_level_must_be_array(self, tmp_path):
        (tmp_path / "tasks.json").write_text(json.dumps({"tasks": []}), encoding="utf-8")
        with pytest.raises(TaskSetError):
            load_task_set(tmp_path / "tasks.json")

    def test_validate_reports_empty_description(self):
        problems = validate_task_set([make_task(description=" ")])
        assert ("t1", "empty description") in [(t, v) for t, v in problems] or problems
