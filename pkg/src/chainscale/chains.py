"""Call graphs built from spans and latency-weighted critical chains."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import CyclicGraphError, DomainError, TraceParseError

SPAN_COLUMNS = ("trace_id", "parent_service", "service", "processing_time_ms")

# latency sums closer than this are ties
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class Span:
    trace_id: str
    parent_service: str | None
    service: str
    processing_time: float

    def __post_init__(self):
        if not self.processing_time >= 0:
            raise DomainError(f"processing_time must be >= 0, got {self.processing_time}")


@dataclass
class CallGraph:
    nodes: set[str] = field(default_factory=set)
    # (parent, child) -> mean latency in ms
    edges: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for (u, v), w in self.edges.items():
            if w < 0:
                raise DomainError(f"edge {u}->{v} has negative weight {w}")
            self.nodes.update((u, v))
        self._children: dict[str, list[str]] = defaultdict(list)
        self._parents: dict[str, list[str]] = defaultdict(list)
        for u, v in self.edges:
            self._children[u].append(v)
            self._parents[v].append(u)
        for kids in self._children.values():
            kids.sort()
        self._order = _topological_order(self.nodes, self._children, self._parents)

    @property
    def roots(self) -> list[str]:
        return sorted(n for n in self.nodes if not self._parents.get(n))

    @property
    def sinks(self) -> list[str]:
        return sorted(n for n in self.nodes if not self._children.get(n))

    def children(self, node: str) -> list[str]:
        return list(self._children.get(node, ()))

    def weight(self, u: str, v: str) -> float:
        return self.edges[(u, v)]

    def topological_order(self) -> list[str]:
        return list(self._order)


@dataclass(frozen=True)
class Chain:
    nodes: tuple[str, ...]
    total_latency: float

    def __len__(self):
        return len(self.nodes)


def _find_cycle(nodes, children):
    color = dict.fromkeys(nodes, 0)
    for start in sorted(nodes):
        if color[start]:
            continue
        stack = [(start, iter(sorted(children.get(start, ()))))]
        path = [start]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = 2
            elif color[nxt] == 1:
                return path[path.index(nxt):] + [nxt]
            elif color[nxt] == 0:
                color[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(sorted(children.get(nxt, ())))))
    return None


def _topological_order(nodes, children, parents):
    indegree = {n: len(parents.get(n, ())) for n in nodes}
    ready = sorted(n for n, d in indegree.items() if d == 0)
    order = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for child in children.get(node, ()):
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
        ready.sort()
    if len(order) != len(nodes):
        raise CyclicGraphError(_find_cycle(nodes, children))
    return order


def build_call_graph(spans: Iterable[Span]) -> CallGraph:
    """One node per service; each edge weighs the mean processing time of its spans."""
    totals: dict[tuple[str, str], list[float]] = {}
    nodes: set[str] = set()
    count = 0
    for span in spans:
        count += 1
        nodes.add(span.service)
        if span.parent_service is None:
            continue
        nodes.add(span.parent_service)
        acc = totals.setdefault((span.parent_service, span.service), [0.0, 0])
        acc[0] += span.processing_time
        acc[1] += 1
    if count == 0:
        raise DomainError("cannot build a call graph from zero spans")
    edges = {pair: total / n for pair, (total, n) in totals.items()}
    return CallGraph(nodes, edges)


def _better(lat_a, path_a, lat_b, path_b):
    """True when (lat_a, path_a) beats (lat_b, path_b): longer, or tie and lexicographically smaller."""
    if lat_a > lat_b + _TIE_TOL * max(1.0, abs(lat_b)):
        return True
    if lat_b > lat_a + _TIE_TOL * max(1.0, abs(lat_a)):
        return False
    return path_a < path_b


def critical_chain(graph: CallGraph) -> Chain:
    """Longest root-to-sink path by summed edge weight.

    Dynamic programming over reverse topological order; equal-latency paths
    resolve to the lexicographically smallest node sequence.
    """
    if not graph.nodes:
        raise DomainError("critical_chain needs a non-empty graph")
    best: dict[str, tuple[float, tuple[str, ...]]] = {}
    for node in reversed(graph.topological_order()):
        kids = graph.children(node)
        if not kids:
            best[node] = (0.0, (node,))
            continue
        choice = None
        for child in kids:
            lat = graph.weight(node, child) + best[child][0]
            path = (node,) + best[child][1]
            if choice is None or _better(lat, path, *choice):
                choice = (lat, path)
        best[node] = choice
    winner = None
    for root in graph.roots:
        if winner is None or _better(*best[root], *winner):
            winner = best[root]
    latency, path = winner
    # re-sum along the path in root-to-sink order
    total = math.fsum(graph.weight(u, v) for u, v in zip(path, path[1:]))
    return Chain(path, total)


def all_root_to_sink_paths(graph: CallGraph) -> list[Chain]:
    """Exhaustive enumeration; exponential, meant for small graphs and checks."""
    out = []

    def walk(path):
        kids = graph.children(path[-1])
        if not kids:
            total = math.fsum(graph.weight(u, v) for u, v in zip(path, path[1:]))
            out.append(Chain(tuple(path), total))
            return
        for child in kids:
            walk(path + [child])

    for root in graph.roots:
        walk([root])
    return out


def load_spans(path) -> list[Span]:
    """Read spans from CSV; an empty ``parent_service`` marks a root span."""
    spans = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise TraceParseError("empty span file", 1)
        missing = [c for c in SPAN_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise TraceParseError(f"header is missing columns {missing}", 1)
        for line_no, row in enumerate(reader, start=2):
            try:
                latency = float(row["processing_time_ms"])
            except (TypeError, ValueError):
                raise TraceParseError(
                    f"bad processing_time_ms {row['processing_time_ms']!r}", line_no
                ) from None
            if not (latency >= 0 and math.isfinite(latency)):
                raise TraceParseError(f"processing_time_ms must be finite and >= 0", line_no)
            parent = (row["parent_service"] or "").strip() or None
            service = (row["service"] or "").strip()
            if not service:
                raise TraceParseError("service is empty", line_no)
            spans.append(Span(row["trace_id"], parent, service, latency))
    return spans


def write_spans(spans: Iterable[Span], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SPAN_COLUMNS)
        for s in spans:
            writer.writerow([s.trace_id, s.parent_service or "", s.service, repr(s.processing_time)])
