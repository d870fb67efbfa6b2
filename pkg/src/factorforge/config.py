"""Run configuration: a strict JSON document with environment interpolation.

``${VAR}`` references in string values are expanded from the process
environment (a missing variable is an error naming it), and path-valued
fields are resolved relative to the directory containing the config file,
so a config directory can be relocated wholesale.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .gateway import (
    Backend,
    HttpBackend,
    LLMGateway,
    MockBackend,
    TRANSCRIPT_MODES,
    Transcript,
)
from .sandbox import DEFAULT_ENV_ALLOWLIST, SandboxConfig

SCHEDULERS = ("evolving", "random", "fixed")
FEEDBACK_MODES = ("supervised", "unsupervised")
RESCHED_POLICIES = ("local", "llm_periodic")

_ENV_REF_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(ValueError):
    """The configuration document is malformed or inconsistent."""


def interpolate_env(value: Any, env: Mapping[str, str] | None = None) -> Any:
    """Expand ``${VAR}`` in every string, recursively through containers."""
    table = os.environ if env is None else env

    def expand(text: str) -> str:
        def sub(match: re.Match[str]) -> str:
            name = match.group(1)
            if name not in table:
                raise ConfigError(f"environment variable {name!r} is not set")
            return table[name]

        return _ENV_REF_RE.sub(sub, text)

    if isinstance(value, str):
        return expand(value)
    if isinstance(value, list):
        return [interpolate_env(item, table) for item in value]
    if isinstance(value, dict):
        return {key: interpolate_env(item, table) for key, item in value.items()}
    return value


@dataclass(frozen=True)
class SandboxSettings:
    """Sandbox section of the run config; template path, not template text."""

    interpreter: tuple[str, ...]
    runner_template: str
    timeout: float = 60.0
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST
    keep_artifacts: bool = False
    output_filename: str = "output.csv"

    def __post_init__(self) -> None:
        if not self.interpreter:
            raise ConfigError("sandbox.interpreter must be a nonempty command list")

    def build(self) -> SandboxConfig:
        template_path = Path(self.runner_template)
        if not template_path.is_file():
            raise ConfigError(f"runner template not found: {template_path}")
        return SandboxConfig(
            interpreter_command=self.interpreter,
            runner_template=template_path.read_text(encoding="utf-8"),
            runner_filename=template_path.name,
            timeout=self.timeout,
            env_allowlist=self.env_allowlist,
            output_filename=self.output_filename,
            keep_artifacts=self.keep_artifacts,
        )


@dataclass(frozen=True)
class RunConfig:
    """Everything one orchestrated run needs, fully resolved."""

    task_set: str
    global_budget: int
    sandbox: SandboxSettings
    scheduler: str = "evolving"
    k_limit: int | None = None
    repetitions: int = 10
    max_iters_per_task: int = 5
    feedback_mode: str = "unsupervised"
    gateway_mode: str = "live"
    transcript_path: str | None = None
    kb_path: str | None = None
    warm_start_seed: str | None = None
    seed: int = 0
    run_dir: str | None = None
    fresh_kb_per_rep: bool = False
    success_corr: float = 0.99
    failure_threshold: int = 2
    resched_policy: str = "local"
    resched_period: int = 5
    truth_dir: str | None = None
    backend: Mapping[str, Any] | None = None
    embedding_dimension: int = 32
    critique_enabled: bool = False
    summarize_fixes: bool = False
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}")
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ConfigError(
                f"feedback_mode must be one of {FEEDBACK_MODES}, got {self.feedback_mode!r}"
            )
        if self.gateway_mode not in TRANSCRIPT_MODES:
            raise ConfigError(
                f"gateway_mode must be one of {TRANSCRIPT_MODES}, got {self.gateway_mode!r}"
            )
        if self.resched_policy not in RESCHED_POLICIES:
            raise ConfigError(
                f"resched_policy must be one of {RESCHED_POLICIES}, got {self.resched_policy!r}"
            )
        if self.global_budget < 1:
            raise ConfigError("global_budget must be at least 1")
        if self.k_limit is not None and self.k_limit < 1:
            raise ConfigError("k_limit must be at least 1 when given")
        if self.k_limit is not None and self.global_budget < self.k_limit:
            raise ConfigError("global_budget must be at least k_limit")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.max_iters_per_task < 1:
            raise ConfigError("max_iters_per_task must be at least 1")
        if self.resched_period < 1:
            raise ConfigError("resched_period must be at least 1")
        if self.embedding_dimension < 1:
            raise ConfigError("embedding_dimension must be at least 1")
        if not 0.0 < self.success_corr <= 1.0:
            raise ConfigError("success_corr must be in (0, 1]")
        if self.failure_threshold < 1:
            raise ConfigError("failure_threshold must be at least 1")
        if self.feedback_mode == "supervised" and self.truth_dir is None:
            raise ConfigError("supervised feedback requires truth_dir")
        if self.gateway_mode in ("record", "replay") and self.transcript_path is None:
            raise ConfigError(f"gateway_mode {self.gateway_mode!r} requires transcript_path")


_PATH_FIELDS = (
    "task_set",
    "transcript_path",
    "kb_path",
    "warm_start_seed",
    "truth_dir",
    "run_dir",
)
_KNOWN_FIELDS = frozenset(
    (
        *_PATH_FIELDS,
        "global_budget",
        "sandbox",
        "scheduler",
        "k_limit",
        "repetitions",
        "max_iters_per_task",
        "feedback_mode",
        "gateway_mode",
        "seed",
        "fresh_kb_per_rep",
        "success_corr",
        "failure_threshold",
        "resched_policy",
        "resched_period",
        "backend",
        "embedding_dimension",
        "critique_enabled",
        "summarize_fixes",
        "extra",
    )
)
_KNOWN_SANDBOX_FIELDS = frozenset(
    (
        "interpreter",
        "runner_template",
        "timeout",
        "env_allowlist",
        "keep_artifacts",
        "output_filename",
    )
)


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    return str((base / value).resolve()) if not Path(value).is_absolute() else value


def load_config(path: str | Path) -> RunConfig:
    """Parse, interpolate, resolve, and validate a run config file."""
    config_path = Path(path)
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    doc = interpolate_env(raw)

    unknown = sorted(set(doc) - _KNOWN_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config field {unknown[0]!r}")
    for required in ("task_set", "global_budget", "sandbox"):
        if required not in doc:
            raise ConfigError(f"config is missing required field {required!r}")

    base = config_path.resolve().parent
    sandbox_doc = doc["sandbox"]
    if not isinstance(sandbox_doc, dict):
        raise ConfigError("sandbox section must be an object")
    unknown_sandbox = sorted(set(sandbox_doc) - _KNOWN_SANDBOX_FIELDS)
    if unknown_sandbox:
        raise ConfigError(f"unknown sandbox field {unknown_sandbox[0]!r}")
    for required in ("interpreter", "runner_template"):
        if required not in sandbox_doc:
            raise ConfigError(f"sandbox section is missing required field {required!r}")
    interpreter = sandbox_doc["interpreter"]
    if isinstance(interpreter, str):
        interpreter = [interpreter]
    if not isinstance(interpreter, list) or not all(isinstance(c, str) for c in interpreter):
        raise ConfigError("sandbox.interpreter must be a string or list of strings")
    sandbox = SandboxSettings(
        interpreter=tuple(interpreter),
        runner_template=_resolve(base, sandbox_doc["runner_template"]),
        timeout=float(sandbox_doc.get("timeout", 60.0)),
        env_allowlist=tuple(sandbox_doc.get("env_allowlist", DEFAULT_ENV_ALLOWLIST)),
        keep_artifacts=bool(sandbox_doc.get("keep_artifacts", False)),
        output_filename=str(sandbox_doc.get("output_filename", "output.csv")),
    )

    kwargs: dict[str, Any] = {
        key: doc[key] for key in _KNOWN_FIELDS if key in doc and key != "sandbox"
    }
    for key in _PATH_FIELDS:
        if key in kwargs:
            kwargs[key] = _resolve(base, kwargs[key])
    return RunConfig(sandbox=sandbox, **kwargs)


def build_backend(
    settings: Mapping[str, Any] | None, embedding_dimension: int
) -> Backend | None:
    """Construct the configured LLM backend, or None for replay-only runs."""
    if settings is None:
        return None
    kind = settings.get("kind")
    if kind == "mock":
        rules = []
        for index, rule in enumerate(settings.get("rules", ())):
            if not isinstance(rule, dict) or "response" not in rule:
                raise ConfigError(f"mock rule {index} must be an object with a 'response'")
            needles = rule.get("contains", ())
            if isinstance(needles, str):
                needles = (needles,)
            rules.append((tuple(needles), rule["response"]))
        return MockBackend(
            rules=rules,
            fallback_responses=tuple(settings.get("fallback", ())),
            embedding_dimension=embedding_dimension,
        )
    if kind == "http":
        if "endpoint" not in settings:
            raise ConfigError("http backend requires an 'endpoint'")
        return HttpBackend(
            endpoint=settings["endpoint"],
            model_tag=settings.get("model_tag", "default"),
            embedding_model_tag=settings.get("embedding_model_tag", ""),
            api_key_env=settings.get("api_key_env", ""),
            timeout=float(settings.get("timeout", 30.0)),
            embedding_dimension=embedding_dimension,
        )
    raise ConfigError(f"unknown backend kind {kind!r}")


def build_gateway(config: RunConfig) -> LLMGateway:
    """Assemble the gateway: transcript mode plus the optional backend."""
    transcript = Transcript(mode=config.gateway_mode, path=config.transcript_path)
    backend = build_backend(config.backend, config.embedding_dimension)
    if backend is None and config.gateway_mode != "replay":
        raise ConfigError(
            f"gateway_mode {config.gateway_mode!r} requires a backend; only replay runs without one"
        )
    return LLMGateway(
        backend=backend,
        transcript=transcript,
        embedding_dimension=config.embedding_dimension,
    )
