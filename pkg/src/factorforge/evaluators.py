"""Tool-based, supervised, and aggregate evaluation.

Three layers, all pure functions over immutable inputs:

- format: :func:`parse_output` checks a produced CSV against the keyed-series
  contract with named rules R1..R7, returning a series for whatever rows were
  salvageable plus a report of every violation.
- supervised: :func:`pearson` aligns candidate and truth series and scores
  correlation and value accuracy.
- aggregate: :func:`factor_metrics` and :func:`aggregate` roll per-run
  verdicts up into per-factor, per-category, and overall tables, and
  :func:`evolution_trajectory` emits the cumulative progress curve.

The module also owns the bit-exact output file contract (UTF-8, LF, no
quoting, shortest round-trip decimals) shared with the runner harness.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .gateway import ChatRequest, GatewayError, LLMGateway
from .model import FeedbackBundle, FormatReport, OutputContract, QuantReport

#: Tolerances for counting a candidate value as matching truth.
VALUE_ABS_TOL = 1e-8
VALUE_REL_TOL = 1e-5

_NUMBER_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")


def format_value(value: float) -> str:
    """Render a finite value in the canonical decimal form.

    Integral values become bare integer digits ("11", never "11.0");
    everything else uses the shortest round-trip representation. For
    magnitudes in [1e-4, 1e16) or exactly 0 this rendering is byte-identical
    across every shortest-round-trip formatter (including JavaScript's), so
    serializers in other dialects can match it exactly.
    """
    if not math.isfinite(value):
        raise ValueError(f"cannot render non-finite value {value!r}")
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def _is_iso_datetime(token: str) -> bool:
    try:
        date.fromisoformat(token)
        return True
    except ValueError:
        pass
    try:
        datetime.fromisoformat(token)
        return True
    except ValueError:
        return False


class KeyedSeries:
    """A series keyed by (datetime, instrument), values finite or missing.

    Keys are unique by construction (a mapping comes in), datetimes must be
    ISO-8601, tokens must not contain commas (the CSV form is unquoted), and
    present values must be finite.
    """

    __slots__ = ("_rows",)

    def __init__(self, rows: Mapping[tuple[str, str], float | None]):
        validated: dict[tuple[str, str], float | None] = {}
        for (dt, instrument), value in rows.items():
            if "," in dt or "," in instrument:
                raise ValueError(f"key tokens must not contain commas: {(dt, instrument)!r}")
            if not _is_iso_datetime(dt):
                raise ValueError(f"datetime token {dt!r} is not ISO-8601")
            if value is not None and not math.isfinite(value):
                raise ValueError(f"value for {(dt, instrument)!r} is not finite")
            validated[(dt, instrument)] = None if value is None else float(value)
        self._rows = validated

    def __len__(self) -> int:
        return len(self._rows)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, KeyedSeries) and self._rows == other._rows

    def get(self, key: tuple[str, str]) -> float | None:
        return self._rows.get(key)

    def keys(self) -> list[tuple[str, str]]:
        return list(self._rows.keys())

    def items_sorted(self) -> list[tuple[tuple[str, str], float | None]]:
        return sorted(self._rows.items(), key=lambda kv: kv[0])

    def defined_items(self) -> dict[tuple[str, str], float]:
        return {k: v for k, v in self._rows.items() if v is not None}


def write_series(series: KeyedSeries, path: str | Path, contract: OutputContract = OutputContract()) -> None:
    """Serialize a series in the canonical, bit-exact output form.

    UTF-8, LF endings, exact contract header, rows sorted ascending by key,
    no quoting, values via :func:`format_value` (missing values render as an
    empty field). Writing the same series twice yields identical bytes.
    """
    lines = [contract.header]
    for (dt, instrument), value in series.items_sorted():
        rendered = "" if value is None else format_value(value)
        lines.append(f"{dt},{instrument},{rendered}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def parse_output(path: str | Path, contract: OutputContract = OutputContract()) -> tuple[KeyedSeries | None, FormatReport]:
    """Check an output file against the keyed-series contract.

    Rules, each independently reported:
      R1 file exists and is readable UTF-8;
      R2 header is exactly the contract header;
      R3 every row has exactly one field per column;
      R4 datetime fields parse as ISO-8601 dates or timestamps;
      R5 no duplicate keys (first occurrence wins);
      R6 rows sorted ascending (non-decreasing) by key;
      R7 values parse as finite decimals, or are empty (missing).

    The format score is 1 exactly when no rule is violated. The series is
    still returned for any salvageable rows (a mis-sorted but otherwise valid
    file correlates fine); it is None only when nothing was parseable at all
    (no file, undecodable bytes, or no header line).
    """
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError:
        report = FormatReport(parseable=False, violations=(("R1", f"output file {p.name} does not exist or is unreadable"),))
        return None, report
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        report = FormatReport(parseable=False, violations=(("R1", "output file is not valid UTF-8"),))
        return None, report

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        report = FormatReport(parseable=False, violations=(("R2", "output file has no header line"),))
        return None, report

    violations: list[tuple[str, str]] = []
    n_keys = len(contract.key_columns)
    n_fields = n_keys + 1
    if lines[0] != contract.header:
        violations.append(("R2", f"header must be exactly {contract.header!r}, got {lines[0]!r}"))

    rows: dict[tuple[str, str], float | None] = {}
    seen_keys: set[tuple[str, ...]] = set()
    previous_key: tuple[str, ...] | None = None
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != n_fields:
            violations.append(("R3", f"line {lineno}: expected {n_fields} fields, got {len(fields)}"))
            continue
        key = tuple(fields[:n_keys])
        value_token = fields[n_keys]

        datetime_ok = _is_iso_datetime(key[0])
        if not datetime_ok:
            violations.append(("R4", f"line {lineno}: datetime {key[0]!r} is not ISO-8601"))

        if key in seen_keys:
            violations.append(("R5", f"line {lineno}: duplicate key {key!r}"))
            continue
        seen_keys.add(key)
        if previous_key is not None and key < previous_key:
            violations.append(("R6", f"line {lineno}: keys not sorted ascending at {key!r}"))
        previous_key = key

        value: float | None
        if value_token == "":
            value = None
        elif _NUMBER_RE.match(value_token) and math.isfinite(float(value_token)):
            value = float(value_token)
        else:
            violations.append(("R7", f"line {lineno}: value {value_token!r} is not a finite decimal"))
            value = None

        if datetime_ok:
            rows[(key[0], key[1])] = value

    report = FormatReport(parseable=True, violations=tuple(violations))
    return KeyedSeries(rows), report


def pearson(candidate: KeyedSeries, truth: KeyedSeries, min_overlap: float = 0.5) -> QuantReport:
    """Correlation and value accuracy over the aligned key intersection.

    Pairs where either side is missing are dropped. The correlation is
    defined only when at least two pairs align, the overlap fraction (aligned
    pairs over all truth keys) reaches ``min_overlap``, and both sides have
    nonzero variance; otherwise it is reported as undefined rather than some
    sentinel number. Constancy is decided by exact value comparison, not by
    the computed variance: a constant series whose floating-point mean lands
    a hair off its value must not yield a correlation made of rounding noise.
    """
    if len(truth) == 0:
        raise ValueError("truth series is empty")
    truth_defined = truth.defined_items()
    pairs = [
        (cv, tv)
        for key, tv in truth_defined.items()
        if (cv := candidate.get(key)) is not None
    ]
    n_aligned = len(pairs)
    overlap = n_aligned / len(truth)
    if n_aligned == 0:
        return QuantReport(correlation=None, value_accuracy=0.0, overlap_fraction=0.0, n_aligned=0)

    c = np.array([p[0] for p in pairs], dtype=np.float64)
    t = np.array([p[1] for p in pairs], dtype=np.float64)
    accuracy = float(np.mean(np.abs(c - t) <= VALUE_ABS_TOL + VALUE_REL_TOL * np.abs(t)))

    correlation: float | None = None
    if n_aligned >= 2 and overlap >= min_overlap and np.ptp(c) > 0.0 and np.ptp(t) > 0.0:
        dc = c - c.mean()
        dt = t - t.mean()
        denom_c = float(dc @ dc)
        denom_t = float(dt @ dt)
        if denom_c > 0.0 and denom_t > 0.0:
            r = float((dc @ dt) / math.sqrt(denom_c * denom_t))
            correlation = max(-1.0, min(1.0, r))

    return QuantReport(
        correlation=correlation,
        value_accuracy=accuracy,
        overlap_fraction=overlap,
        n_aligned=n_aligned,
    )


@dataclass(frozen=True)
class FactorMetrics:
    """Per-task metrics over repeated runs."""

    task_id: str
    avg_exec: float
    avg_format: float
    avg_corr: float | None
    max_corr: float | None
    runs: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "avg_exec": self.avg_exec,
            "avg_format": self.avg_format,
            "avg_corr": self.avg_corr,
            "max_corr": self.max_corr,
            "runs": self.runs,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FactorMetrics":
        return cls(
            task_id=str(d["task_id"]),
            avg_exec=float(d["avg_exec"]),
            avg_format=float(d["avg_format"]),
            avg_corr=None if d["avg_corr"] is None else float(d["avg_corr"]),
            max_corr=None if d["max_corr"] is None else float(d["max_corr"]),
            runs=int(d["runs"]),
        )


@dataclass(frozen=True)
class MetricRow:
    """One aggregated table row: the four headline metrics."""

    avg_exec: float
    avg_format: float
    avg_corr: float
    max_corr: float

    def to_dict(self) -> dict[str, float]:
        return {
            "avg_exec": self.avg_exec,
            "avg_format": self.avg_format,
            "avg_corr": self.avg_corr,
            "max_corr": self.max_corr,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricRow":
        return cls(
            avg_exec=float(d["avg_exec"]),
            avg_format=float(d["avg_format"]),
            avg_corr=float(d["avg_corr"]),
            max_corr=float(d["max_corr"]),
        )


@dataclass(frozen=True)
class AggregateReport:
    """Per-factor rows plus category averages and the overall mean row."""

    per_factor: tuple[FactorMetrics, ...]
    category_rows: tuple[tuple[str, MetricRow], ...]
    overall: MetricRow

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_factor": [m.to_dict() for m in self.per_factor],
            "category_order": [name for name, _ in self.category_rows],
            "per_category": {name: row.to_dict() for name, row in self.category_rows},
            "overall": self.overall.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AggregateReport":
        order = d.get("category_order", sorted(d["per_category"]))
        return cls(
            per_factor=tuple(FactorMetrics.from_dict(m) for m in d["per_factor"]),
            category_rows=tuple(
                (name, MetricRow.from_dict(d["per_category"][name])) for name in order
            ),
            overall=MetricRow.from_dict(d["overall"]),
        )


def factor_metrics(task_id: str, per_run: Sequence[FeedbackBundle]) -> FactorMetrics:
    """Fold one task's repeated-run verdicts into its metrics row.

    Execution and format are means of per-run binaries. Correlation averages
    only over runs where it was defined; if no run defined it, the factor's
    correlation is undefined (the aggregate layer decides what that counts
    as, not this one).
    """
    if not per_run:
        raise ValueError("per_run must be nonempty")
    execs = [1.0 if b.execution.succeeded else 0.0 for b in per_run]
    formats = [float(b.format.score) for b in per_run]
    correlations = [
        b.quantitative.correlation
        for b in per_run
        if b.quantitative is not None and b.quantitative.correlation is not None
    ]
    return FactorMetrics(
        task_id=task_id,
        avg_exec=sum(execs) / len(execs),
        avg_format=sum(formats) / len(formats),
        avg_corr=sum(correlations) / len(correlations) if correlations else None,
        max_corr=max(correlations) if correlations else None,
        runs=len(per_run),
    )


def aggregate(per_factor: Sequence[FactorMetrics], categories: Mapping[str, str]) -> AggregateReport:
    """Roll factor rows up into category averages and the overall mean.

    Undefined correlations count as 0 here (and only here). The overall row
    is the mean over all factors, not the mean of category means. Categories
    appear in first-appearance order of the factor list.
    """
    if not per_factor:
        raise ValueError("per_factor must be nonempty")

    def row_of(metrics: Iterable[FactorMetrics]) -> MetricRow:
        ms = list(metrics)
        n = len(ms)
        return MetricRow(
            avg_exec=sum(m.avg_exec for m in ms) / n,
            avg_format=sum(m.avg_format for m in ms) / n,
            avg_corr=sum(m.avg_corr if m.avg_corr is not None else 0.0 for m in ms) / n,
            max_corr=sum(m.max_corr if m.max_corr is not None else 0.0 for m in ms) / n,
        )

    ordered_categories: list[str] = []
    for m in per_factor:
        label = categories.get(m.task_id, "other")
        if label not in ordered_categories:
            ordered_categories.append(label)
    category_rows = tuple(
        (
            label,
            row_of(m for m in per_factor if categories.get(m.task_id, "other") == label),
        )
        for label in ordered_categories
    )
    return AggregateReport(
        per_factor=tuple(per_factor),
        category_rows=category_rows,
        overall=row_of(per_factor),
    )


def supervised_diff_critique(
    candidate_code: str,
    truth_code: str,
    quant: QuantReport | None,
    gateway: LLMGateway,
) -> str | None:
    """Ask the LLM to articulate how the candidate differs from the truth.

    Gateway faults are non-fatal: the critique is simply omitted, the rest
    of the feedback bundle stands.
    """
    quant_text = (
        "no quantitative comparison available"
        if quant is None
        else (
            f"correlation: {quant.correlation}, value_accuracy: {quant.value_accuracy}, "
            f"overlap_fraction: {quant.overlap_fraction}, n_aligned: {quant.n_aligned}"
        )
    )
    request = ChatRequest(
        messages=(
            (
                "system",
                "You compare a candidate implementation against a reference "
                "implementation and articulate the differences that explain "
                "the measured gap.",
            ),
            (
                "user",
                "Reference implementation:\n```\n"
                + truth_code
                + "\n```\n\nCandidate implementation:\n```\n"
                + candidate_code
                + "\n```\n\nMeasured comparison: "
                + quant_text
                + "\n\nList the substantive differences and which of them "
                "likely cause the gap.",
            ),
        )
    )
    try:
        return gateway.chat(request)
    except GatewayError:
        return None


class _ResultLike(Protocol):
    """Structural view of a task result, avoiding a dependency cycle."""

    @property
    def success(self) -> bool: ...

    @property
    def best_feedback(self) -> FeedbackBundle: ...


def evolution_trajectory(results: Sequence[_ResultLike]) -> list[tuple[int, float, float]]:
    """Cumulative (step, success rate, mean correlation) per completed task.

    Undefined or absent correlations contribute 0, matching the aggregate
    rule, so the curve is comparable with the final table.
    """
    trajectory: list[tuple[int, float, float]] = []
    successes = 0
    corr_sum = 0.0
    for step, result in enumerate(results, start=1):
        if result.success:
            successes += 1
        quant = result.best_feedback.quantitative
        if quant is not None and quant.correlation is not None:
            corr_sum += quant.correlation
        trajectory.append((step, successes / step, corr_sum / step))
    return trajectory


def write_trajectory_csv(rows: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    lines = ["step_index,cumulative_success_rate,cumulative_mean_corr"]
    for step, rate, corr in rows:
        lines.append(f"{step},{format_value(rate)},{format_value(corr)}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def _cell(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def render_report_markdown(report: AggregateReport, categories: Mapping[str, str]) -> str:
    """Human-readable metric tables, grouped by category.

    Layout mirrors the machine CSV: factor rows under their category, one
    average row per category, and a final overall mean row in which
    undefined correlations count as 0.
    """
    lines = [
        "| Category | Factor | avg. exec | avg. format | avg. corr | max. corr |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for label, row in report.category_rows:
        for m in report.per_factor:
            if categories.get(m.task_id, "other") != label:
                continue
            lines.append(
                f"| {label} | {m.task_id} | {m.avg_exec:.3f} | {m.avg_format:.3f} "
                f"| {_cell(m.avg_corr)} | {_cell(m.max_corr)} |"
            )
        lines.append(
            f"| {label} | *category average* | {row.avg_exec:.3f} | {row.avg_format:.3f} "
            f"| {row.avg_corr:.3f} | {row.max_corr:.3f} |"
        )
    o = report.overall
    lines.append(
        f"| *all* | *overall mean (undefined corr as 0)* | {o.avg_exec:.3f} "
        f"| {o.avg_format:.3f} | {o.avg_corr:.3f} | {o.max_corr:.3f} |"
    )
    return "\n".join(lines) + "\n"


def write_report_csv(report: AggregateReport, categories: Mapping[str, str], path: str | Path) -> None:
    """Machine-readable mirror of the markdown tables."""
    lines = ["scope,category,task_id,avg_exec,avg_format,avg_corr,max_corr,runs"]

    def fmt(value: float | None) -> str:
        return "" if value is None else format_value(value)

    for m in report.per_factor:
        label = categories.get(m.task_id, "other")
        lines.append(
            f"factor,{label},{m.task_id},{fmt(m.avg_exec)},{fmt(m.avg_format)},"
            f"{fmt(m.avg_corr)},{fmt(m.max_corr)},{m.runs}"
        )
    for label, row in report.category_rows:
        lines.append(
            f"category,{label},,{fmt(row.avg_exec)},{fmt(row.avg_format)},"
            f"{fmt(row.avg_corr)},{fmt(row.max_corr)},"
        )
    o = report.overall
    lines.append(f"overall,,,{fmt(o.avg_exec)},{fmt(o.avg_format)},{fmt(o.avg_corr)},{fmt(o.max_corr)},")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
