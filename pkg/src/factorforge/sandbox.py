"""Isolated execution of candidate code via the runner harness.

Each attempt gets a fresh temporary workdir holding three files: the runner
entrypoint (the configured template with the candidate code spliced in), the
manifest binding data-source names to absolute paths, and, on success, the
candidate's output file. Communication is entirely file-based; the child
sees an allowlisted environment plus the manifest path variable and is
killed at the timeout.

Isolation is process + workdir + environment only. There is no network
namespace or syscall filtering: the threat model is buggy generated code,
not malice.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

from .model import ExecutionOutcome, TaskSpec

#: Environment variable pointing the runner at its manifest.
MANIFEST_ENV_VAR = "RUNNER_MANIFEST"

#: Placeholder replaced verbatim with the candidate source.
CODE_PLACEHOLDER = "{{CANDIDATE_CODE}}"

#: Placeholder (quoted in the template) replaced with a JSON string literal
#: of the candidate source, for dialects where a verbatim splice of foreign
#: syntax would not parse.
CODE_JSON_PLACEHOLDER = '"{{CANDIDATE_CODE_JSON}}"'

STREAM_LIMIT = 64 * 1024
TRUNCATION_MARKER = "\n... [truncated]"

DEFAULT_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "SYSTEMROOT")


class SandboxError(Exception):
    """Raised when an attempt could not even be launched."""


@dataclass(frozen=True)
class SandboxConfig:
    """How to launch one candidate attempt."""

    interpreter_command: tuple[str, ...]
    runner_template: str
    runner_filename: str = "runner.py"
    timeout: float = 60.0
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST
    output_filename: str = "output.csv"
    keep_artifacts: bool = False
    workdir_root: str | None = None

    def __post_init__(self) -> None:
        if not self.interpreter_command:
            raise ValueError("interpreter_command must be nonempty")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


def materialize(code: str, task: TaskSpec, cfg: SandboxConfig) -> tuple[Path, Path, Path]:
    """Create the workdir with runner, manifest, and reserved output path."""
    try:
        workdir = Path(tempfile.mkdtemp(prefix=f"sandbox-{task.id}-", dir=cfg.workdir_root))
    except OSError as exc:
        raise SandboxError(f"cannot create sandbox workdir: {exc}") from exc
    output_path = workdir / cfg.output_filename
    manifest = {
        "data_sources": {s.name: str(Path(s.path).resolve()) for s in task.data_sources},
        "output_path": str(output_path),
        "key_columns": list(task.output_contract.key_columns),
        "value_column": task.output_contract.value_column,
    }
    manifest_path = workdir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    runner_source = cfg.runner_template
    if CODE_JSON_PLACEHOLDER in runner_source:
        runner_source = runner_source.replace(CODE_JSON_PLACEHOLDER, json.dumps(code))
    runner_source = runner_source.replace(CODE_PLACEHOLDER, code)
    runner_path = workdir / cfg.runner_filename
    runner_path.write_text(runner_source, encoding="utf-8")
    return workdir, runner_path, manifest_path


def execute(code: str, task: TaskSpec, cfg: SandboxConfig) -> tuple[ExecutionOutcome, Path, Path]:
    """Run one candidate attempt; returns (outcome, output path, workdir).

    The output path is where the contract says the file belongs; it may not
    exist when the attempt failed. The caller owns cleanup of the returned
    workdir (see :func:`cleanup`).
    """
    workdir, runner_path, manifest_path = materialize(code, task, cfg)
    env = {name: os.environ[name] for name in cfg.env_allowlist if name in os.environ}
    env[MANIFEST_ENV_VAR] = str(manifest_path)
    argv = [*cfg.interpreter_command, str(runner_path), str(manifest_path)]

    started = time.monotonic()
    timed_out = False
    try:
        completed = subprocess.run(
            argv,
            cwd=workdir,
            env=env,
            capture_output=True,
            timeout=cfg.timeout,
        )
        exit_code = completed.returncode
        stdout_bytes, stderr_bytes = completed.stdout, completed.stderr
    except subprocess.TimeoutExpired as exc:
        timed_out = True
        exit_code = -1
        stdout_bytes = exc.stdout or b""
        stderr_bytes = exc.stderr or b""
    except OSError as exc:
        cleanup(workdir, keep_artifacts=cfg.keep_artifacts)
        raise SandboxError(f"cannot launch interpreter {cfg.interpreter_command[0]!r}: {exc}") from exc
    wall_time = time.monotonic() - started

    outcome = ExecutionOutcome(
        exit_code=exit_code,
        timed_out=timed_out,
        stdout=_truncate(stdout_bytes),
        stderr=_truncate(stderr_bytes),
        wall_time=wall_time,
    )
    return outcome, workdir / cfg.output_filename, workdir


def cleanup(workdir: str | Path, keep_artifacts: bool = False) -> None:
    """Remove a sandbox workdir; idempotent and non-fatal on IO trouble."""
    if keep_artifacts:
        return
    shutil.rmtree(workdir, ignore_errors=True)


def _truncate(raw: bytes) -> str:
    text = raw.decode("utf-8", errors="replace")
    if len(text) > STREAM_LIMIT:
        return text[:STREAM_LIMIT] + TRUNCATION_MARKER
    return text
