"""Parse and render the scheduler's Mermaid dependency diagrams.

The grammar is a deliberate subset of Mermaid flowchart syntax: a
``graph TD`` / ``flowchart TD`` header, node declarations ``ID[label]``, and
edges ``A --> B`` or ``A -->|rationale| B``. LLM output is noisy, so
anything else becomes a warning rather than a failure, and edges that would
close a cycle are dropped in file order. The one unrecoverable condition is
the absence of any recognizable diagram header.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence


class MermaidHeaderError(ValueError):
    """No fenced block or raw text starts with a recognized diagram header."""


class CycleError(ValueError):
    """Defensive: a TaskDag was constructed or traversed with a cycle."""


_ID = r"[A-Za-z0-9_.\-]+"
_HEADER_RE = re.compile(r"^(graph|flowchart)\s+TD\b")
_NODE_RE = re.compile(rf"^({_ID})\s*\[(.*)\]\s*;?$")
_EDGE_RE = re.compile(rf"^({_ID})\s*-->\s*(?:\|([^|]*)\|\s*)?({_ID})\s*;?$")
_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class DagEdge:
    """A directed dependency: do ``src`` before ``dst``."""

    src: str
    dst: str
    rationale: str | None = None

    def __post_init__(self) -> None:
        if self.rationale is not None:
            if not self.rationale or self.rationale != self.rationale.strip():
                raise ValueError("edge rationale must be stripped and nonempty, or None")
            if "|" in self.rationale or "\n" in self.rationale:
                raise ValueError("edge rationale must not contain '|' or newlines")


@dataclass(frozen=True)
class TaskDag:
    """An acyclic dependency graph over task ids.

    ``nodes`` is stored sorted so structural equality is order-insensitive
    for nodes while edge order (and rationale text) is preserved exactly.
    """

    nodes: tuple[str, ...]
    edges: tuple[DagEdge, ...] = ()

    def __post_init__(self) -> None:
        if sorted(self.nodes) != list(self.nodes):
            object.__setattr__(self, "nodes", tuple(sorted(self.nodes)))
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node ids")
        node_set = set(self.nodes)
        seen_pairs: set[tuple[str, str]] = set()
        for edge in self.edges:
            if edge.src == edge.dst:
                raise ValueError(f"self-edge on {edge.src!r}")
            if (edge.src, edge.dst) in seen_pairs:
                raise ValueError(f"duplicate edge {edge.src!r} -> {edge.dst!r}")
            seen_pairs.add((edge.src, edge.dst))
            if edge.src not in node_set or edge.dst not in node_set:
                raise ValueError(f"edge endpoint outside node set: {edge.src!r} -> {edge.dst!r}")
        if _has_cycle(self.nodes, self.edges):
            raise ValueError("graph contains a cycle")

    def successors(self, node: str) -> list[str]:
        return [e.dst for e in self.edges if e.src == node]

    def subgraph(self, keep: Iterable[str]) -> "TaskDag":
        """Restrict to a node subset; edges with a lost endpoint drop out."""
        kept = set(keep) & set(self.nodes)
        return TaskDag(
            nodes=tuple(sorted(kept)),
            edges=tuple(e for e in self.edges if e.src in kept and e.dst in kept),
        )


def _has_cycle(nodes: Sequence[str], edges: Sequence[DagEdge]) -> bool:
    adjacency: dict[str, list[str]] = {n: [] for n in nodes}
    indegree: dict[str, int] = {n: 0 for n in nodes}
    for e in edges:
        adjacency[e.src].append(e.dst)
        indegree[e.dst] += 1
    ready = [n for n in nodes if indegree[n] == 0]
    consumed = 0
    while ready:
        n = ready.pop()
        consumed += 1
        for m in adjacency[n]:
            indegree[m] -= 1
            if indegree[m] == 0:
                ready.append(m)
    return consumed != len(nodes)


def _reaches(adjacency: dict[str, set[str]], start: str, goal: str) -> bool:
    stack = [start]
    seen = {start}
    while stack:
        n = stack.pop()
        if n == goal:
            return True
        for m in adjacency.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def parse_mermaid(text: str) -> tuple[TaskDag, list[str]]:
    """Extract a dependency DAG from raw LLM output.

    Picks the first fenced block whose first meaningful line is a recognized
    header, falling back to the whole text. Unknown lines, self-edges,
    duplicate edges, and cycle-closing edges (in file order) all degrade to
    warnings.
    """
    body = _select_diagram_body(text)
    if body is None:
        raise MermaidHeaderError("no-mermaid-header: no 'graph TD'/'flowchart TD' diagram found")

    warnings: list[str] = []
    declared: list[str] = []
    edges: list[DagEdge] = []
    pairs: set[tuple[str, str]] = set()
    adjacency: dict[str, set[str]] = {}

    lines = body.splitlines()
    header_seen = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("%%"):
            continue
        if not header_seen:
            # _select_diagram_body guarantees this first meaningful line
            # matches the header.
            header_seen = True
            continue
        node_match = _NODE_RE.match(line)
        if node_match:
            node_id = node_match.group(1)
            if node_id not in declared:
                declared.append(node_id)
            continue
        edge_match = _EDGE_RE.match(line)
        if edge_match:
            src, rationale, dst = edge_match.group(1), edge_match.group(2), edge_match.group(3)
            rationale = rationale.strip() if rationale else None
            rationale = rationale or None
            for endpoint in (src, dst):
                if endpoint not in declared:
                    declared.append(endpoint)
            if src == dst:
                warnings.append(f"line {lineno}: dropped self-edge on {src!r}")
                continue
            if (src, dst) in pairs:
                warnings.append(f"line {lineno}: dropped duplicate edge {src!r} -> {dst!r}")
                continue
            if _reaches(adjacency, dst, src):
                warnings.append(f"line {lineno}: dropped cycle-closing edge {src!r} -> {dst!r}")
                continue
            pairs.add((src, dst))
            adjacency.setdefault(src, set()).add(dst)
            edges.append(DagEdge(src, dst, rationale))
            continue
        warnings.append(f"line {lineno}: unrecognized line {line!r}")

    return TaskDag(nodes=tuple(sorted(declared)), edges=tuple(edges)), warnings


def _select_diagram_body(text: str) -> str | None:
    candidates = [match.group(1) for match in _FENCE_RE.finditer(text)]
    candidates.append(text)
    for candidate in candidates:
        first = _first_meaningful_line(candidate)
        if first is not None and _HEADER_RE.match(first):
            return candidate
    return None


def _first_meaningful_line(text: str) -> str | None:
    for raw in text.splitlines():
        line = raw.strip()
        if line and not line.startswith("%%"):
            return line
    return None


def topological_order(dag: TaskDag, tie_break: Callable[[str], object] = lambda task_id: task_id) -> list[str]:
    """Kahn's algorithm, choosing the minimal ready node by ``tie_break``.

    Greedily taking the smallest ready node yields the unique topological
    order that is lexicographically minimal in the key sequence, which makes
    scheduling deterministic and lets callers encode priorities as keys.
    """
    indegree: dict[str, int] = {n: 0 for n in dag.nodes}
    adjacency: dict[str, list[str]] = {n: [] for n in dag.nodes}
    for e in dag.edges:
        adjacency[e.src].append(e.dst)
        indegree[e.dst] += 1
    ready = sorted((n for n in dag.nodes if indegree[n] == 0), key=tie_break)
    order: list[str] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        changed = False
        for m in adjacency[node]:
            indegree[m] -= 1
            if indegree[m] == 0:
                ready.append(m)
                changed = True
        if changed:
            ready.sort(key=tie_break)
    if len(order) != len(dag.nodes):
        raise CycleError("cycle detected during topological ordering")
    return order


def render_mermaid(dag: TaskDag) -> str:
    """Render a DAG so that :func:`parse_mermaid` reproduces it exactly."""
    lines = ["graph TD"]
    for node in dag.nodes:
        lines.append(f"    {node}[{node}]")
    for e in dag.edges:
        if e.rationale is None:
            lines.append(f"    {e.src} --> {e.dst}")
        else:
            lines.append(f"    {e.src} -->|{e.rationale}| {e.dst}")
    return "\n".join(lines) + "\n"
