"""LLM-driven development of data transformations, end to end.

The pipeline: a scheduling agent orders candidate tasks via a dependency
diagram, an implementation agent drafts and repairs code with retrieval
from an evolving knowledge base, a sandbox executes candidates against
declared data sources, and evaluators score execution, output format, and
correlation against ground truth, rolled up into reproducible reports.
"""

from .config import ConfigError, RunConfig, build_gateway, load_config
from .evaluators import (
    AggregateReport,
    FactorMetrics,
    KeyedSeries,
    MetricRow,
    aggregate,
    factor_metrics,
    format_value,
    parse_output,
    pearson,
    write_series,
)
from .gateway import (
    ChatRequest,
    Embedding,
    GatewayError,
    HttpBackend,
    LLMGateway,
    MockBackend,
    ReplayMissError,
    Transcript,
    canonical_digest,
    cosine_similarity,
)
from .implementer import AttemptBudget, TaskResult, run_task, success_predicate
from .knowledge import ErrorFixPair, KnowledgeBase, KnowledgeEntry, TrialRecord
from .mermaid import TaskDag, parse_mermaid, render_mermaid, topological_order
from .model import (
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
from .orchestrator import OrchestratorError, RunResult, run
from .sandbox import SandboxConfig, SandboxError, execute
from .scheduling import (
    OutcomeSummary,
    ScheduleState,
    fixed_scheduler,
    propose_schedule,
    random_scheduler,
    select_top_k,
    update_with_feedback,
)
from .toybench import build_toy_workspace, generate_toy_dataset, ground_truth

__version__ = "0.1.0"

__all__ = [
    "AggregateReport",
    "AttemptBudget",
    "CandidateSolution",
    "Category",
    "ChatRequest",
    "ConfigError",
    "DataSourceDescriptor",
    "Difficulty",
    "Embedding",
    "ErrorFixPair",
    "ExecutionOutcome",
    "FactorMetrics",
    "FeedbackBundle",
    "FormatReport",
    "GatewayError",
    "HttpBackend",
    "KeyedSeries",
    "KnowledgeBase",
    "KnowledgeEntry",
    "LLMGateway",
    "MetricRow",
    "MockBackend",
    "OrchestratorError",
    "OutcomeSummary",
    "OutputContract",
    "Provenance",
    "QuantReport",
    "ReplayMissError",
    "RunConfig",
    "RunResult",
    "SandboxConfig",
    "SandboxError",
    "ScheduleState",
    "TaskDag",
    "TaskResult",
    "TaskSetError",
    "TaskSpec",
    "Transcript",
    "TrialRecord",
    "aggregate",
    "build_gateway",
    "build_toy_workspace",
    "canonical_digest",
    "cosine_similarity",
    "execute",
    "factor_metrics",
    "fixed_scheduler",
    "format_value",
    "generate_toy_dataset",
    "ground_truth",
    "load_config",
    "load_task_set",
    "parse_mermaid",
    "parse_output",
    "pearson",
    "propose_schedule",
    "random_scheduler",
    "render_mermaid",
    "run",
    "run_task",
    "select_top_k",
    "success_predicate",
    "topological_order",
    "update_with_feedback",
    "validate_task_set",
    "write_series",
]
