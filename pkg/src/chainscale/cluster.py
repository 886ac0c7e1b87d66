"""Interval-synchronous simulation of a microservice cluster.

Each interval, external requests enter the root services and fan out along
call edges with per-edge branch probabilities. A deployment serves at most
``replicas * per_replica_rate * allocation_factor`` requests per interval,
where ``allocation_factor = cpu_per_replica / reference_cpu``. Leftover work
queues up to ``queue_capacity``; the rest is dropped and counted as failed.

Hop latency is ``base_service_time / allocation_factor`` plus the time the
backlog needs to drain at the current service rate. A request waits for its
slowest downstream call, so the end-to-end response time is the largest sum
of hop latencies along any root-to-sink chain.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .chains import CallGraph, Span
from .errors import ActionSpaceTooLargeError, ConfigurationError, DomainError

RESOURCES = ("cpu", "mem")
DEFAULT_ACTION_CAP = 100_000


@dataclass(frozen=True)
class Machine:
    id: int
    cpu_cores: float
    mem_units: float
    util_threshold: float = 0.7

    def __post_init__(self):
        if self.cpu_cores <= 0 or self.mem_units <= 0:
            raise ConfigurationError(f"machine {self.id}: capacities must be positive")
        if not 0.0 < self.util_threshold <= 1.0:
            raise ConfigurationError(f"machine {self.id}: util_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class ServiceSpec:
    """Static description of one microservice in a topology file."""

    id: str
    base_service_time_ms: float
    per_replica_rate: float
    replicas: int
    cpu_per_replica: float
    mem_per_replica: float
    machine: int
    queue_capacity: int = 0
    max_replicas: int = 10
    min_replicas: int = 1
    reference_cpu: float | None = None
    min_cpu: float = 0.25
    max_cpu: float | None = None
    min_mem: float = 64.0
    entry_share: float | None = None

    @property
    def ref_cpu(self) -> float:
        return self.reference_cpu if self.reference_cpu is not None else self.cpu_per_replica

    @property
    def cpu_ceiling(self) -> float:
        return self.max_cpu if self.max_cpu is not None else 4.0 * self.ref_cpu


@dataclass(frozen=True)
class Topology:
    services: tuple[ServiceSpec, ...]
    # (from, to, branch_probability)
    edges: tuple[tuple[str, str, float], ...]
    interval_seconds: float = 60.0
    idle_util: float = 0.05
    mem_idle_util: float = 0.4
    critical_queue_factor: float = 2.0

    def __post_init__(self):
        ids = [s.id for s in self.services]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate service ids", "services")
        if not ids:
            raise ConfigurationError("topology needs at least one service", "services")
        known = set(ids)
        object.__setattr__(self, "_specs", {s.id: s for s in self.services})
        for u, v, p in self.edges:
            if u not in known or v not in known:
                raise ConfigurationError(f"edge {u}->{v} references an unknown service", "edges")
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"edge {u}->{v}: branch_probability {p} outside [0, 1]", "edges")
        if self.interval_seconds <= 0:
            raise ConfigurationError("must be positive", "interval_seconds")
        # raises CyclicGraphError on cycles
        graph = CallGraph(set(ids), {(u, v): 0.0 for u, v, _ in self.edges})
        object.__setattr__(self, "_order", tuple(graph.topological_order()))
        object.__setattr__(self, "_roots", tuple(graph.roots))
        children: dict[str, list[tuple[str, float]]] = {i: [] for i in ids}
        for u, v, p in sorted(self.edges):
            children[u].append((v, p))
        object.__setattr__(self, "_children", {k: tuple(v) for k, v in children.items()})
        shares = [self.spec(r).entry_share for r in self._roots]
        if any(s is None for s in shares):
            shares = [1.0 / len(self._roots)] * len(self._roots)
        total = sum(shares)
        if total <= 0:
            raise ConfigurationError("root entry shares must sum to a positive value", "entry_share")
        object.__setattr__(self, "_entry_shares", tuple(s / total for s in shares))

    @property
    def order(self) -> tuple[str, ...]:
        return self._order

    @property
    def roots(self) -> tuple[str, ...]:
        return self._roots

    @property
    def entry_shares(self) -> tuple[float, ...]:
        return self._entry_shares

    def children(self, service: str) -> tuple[tuple[str, float], ...]:
        return self._children[service]

    def spec(self, service: str) -> ServiceSpec:
        return self._specs[service]


@dataclass
class ServiceDeployment:
    service: str
    replicas: int
    cpu_per_replica: float
    mem_per_replica: float
    base_service_time: float
    per_replica_rate: float
    queue: int = 0
    queue_capacity: int = 0
    machine: int = 0
    # observations from the last interval
    cpu_util: float = 0.0
    mem_util: float = 0.0
    demand_util: float = 0.0
    latency: float = 0.0
    queue_delay: float = 0.0

    def allocation_factor(self, reference_cpu: float) -> float:
        return self.cpu_per_replica / reference_cpu

    def capacity(self, reference_cpu: float) -> int:
        """Requests the deployment can finish in one interval (at least 1)."""
        raw = self.replicas * self.per_replica_rate * self.cpu_per_replica / reference_cpu
        return max(1, int(math.floor(raw + 1e-9)))


@dataclass
class ClusterState:
    topology: Topology
    machines: tuple[Machine, ...]
    services: dict[str, ServiceDeployment]
    seed: int = 0
    interval: int = 0
    # per machine: {"cpu": u, "mem": u}
    machine_util: list[dict[str, float]] = field(default_factory=list)

    def copy(self) -> "ClusterState":
        return ClusterState(
            self.topology,
            self.machines,
            {k: replace(v) for k, v in self.services.items()},
            self.seed,
            self.interval,
            [dict(u) for u in self.machine_util],
        )

    @property
    def total_queue(self) -> int:
        return sum(d.queue for d in self.services.values())

    def machine_pressure(self) -> list[float]:
        """u_k per machine: the max utilization over resource types."""
        return [max(u.values()) for u in self.machine_util]

    def thresholds(self) -> list[float]:
        return [m.util_threshold for m in self.machines]

    def allocated(self, machine: int, resource: str, exclude: str | None = None) -> float:
        total = 0.0
        for d in self.services.values():
            if d.machine != machine or d.service == exclude:
                continue
            per = d.cpu_per_replica if resource == "cpu" else d.mem_per_replica
            total += d.replicas * per
        return total

    def snapshot(self) -> dict:
        """Plain-data view, convenient for equality checks and logging."""
        return {
            "interval": self.interval,
            "seed": self.seed,
            "services": {
                k: (d.replicas, d.cpu_per_replica, d.mem_per_replica, d.queue, d.cpu_util, d.mem_util, d.latency)
                for k, d in sorted(self.services.items())
            },
            "machine_util": [tuple(sorted(u.items())) for u in self.machine_util],
        }


@dataclass(frozen=True)
class ServiceDelta:
    h: int = 0
    v_cpu: int = 0
    v_mem: int = 0


@dataclass(frozen=True)
class ScalingAction:
    """Replica and allocation deltas keyed by service id.

    Vertical deltas count steps of ``cpu_step`` cores / ``mem_step`` units.
    """

    deltas: Mapping[str, ServiceDelta] = field(default_factory=dict)
    cpu_step: float = 0.5
    mem_step: float = 256.0

    @property
    def is_noop(self) -> bool:
        return all(d == ServiceDelta() for d in self.deltas.values())

    def describe(self) -> str:
        parts = [
            f"{svc}:h{d.h:+d}/c{d.v_cpu:+d}/m{d.v_mem:+d}"
            for svc, d in sorted(self.deltas.items())
            if d != ServiceDelta()
        ]
        return ";".join(parts) if parts else "noop"


NOOP = ScalingAction()


@dataclass(frozen=True)
class IntervalMetrics:
    interval: int
    arrived: int
    processed: int
    failed: int
    queued_before: int
    queued_after: int
    avg_response_time: float
    rps: float
    requests: int = 0
    per_service_latency: Mapping[str, float] = field(default_factory=dict)
    per_service_failed: Mapping[str, int] = field(default_factory=dict)
    spans: tuple[Span, ...] = ()

    @property
    def delta_queued(self) -> int:
        return self.queued_after - self.queued_before


# ---------------------------------------------------------------------------
# configuration


def _require(entry, key, where):
    if key not in entry:
        raise ConfigurationError(f"missing field in {where}", key)
    return entry[key]


def topology_from_dict(data: dict) -> Topology:
    services = []
    for i, raw in enumerate(_require(data, "services", "topology")):
        where = f"services[{i}]"
        try:
            services.append(
                ServiceSpec(
                    id=str(_require(raw, "id", where)),
                    base_service_time_ms=float(_require(raw, "base_service_time_ms", where)),
                    per_replica_rate=float(_require(raw, "per_replica_rate", where)),
                    replicas=int(raw.get("replicas", 1)),
                    cpu_per_replica=float(raw.get("cpu_per_replica", 1.0)),
                    mem_per_replica=float(raw.get("mem_per_replica", 256.0)),
                    machine=int(raw.get("machine", 0)),
                    queue_capacity=int(raw.get("queue_capacity", 0)),
                    max_replicas=int(raw.get("max_replicas", 10)),
                    min_replicas=int(raw.get("min_replicas", 1)),
                    reference_cpu=raw.get("reference_cpu"),
                    min_cpu=float(raw.get("min_cpu", 0.25)),
                    max_cpu=raw.get("max_cpu"),
                    min_mem=float(raw.get("min_mem", 64.0)),
                    entry_share=raw.get("entry_share"),
                )
            )
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc), where) from None
    edges = []
    for i, raw in enumerate(data.get("edges", [])):
        where = f"edges[{i}]"
        edges.append(
            (
                str(_require(raw, "from", where)),
                str(_require(raw, "to", where)),
                float(raw.get("branch_probability", 1.0)),
            )
        )
    settings = {
        k: float(data[k])
        for k in ("interval_seconds", "idle_util", "mem_idle_util", "critical_queue_factor")
        if k in data
    }
    return Topology(tuple(services), tuple(edges), **settings)


def machines_from_dict(data: dict) -> tuple[Machine, ...]:
    machines = []
    for i, raw in enumerate(_require(data, "machines", "machines config")):
        where = f"machines[{i}]"
        machines.append(
            Machine(
                id=int(raw.get("id", i)),
                cpu_cores=float(_require(raw, "cpu_cores", where)),
                mem_units=float(_require(raw, "mem_units", where)),
                util_threshold=float(raw.get("util_threshold", 0.7)),
            )
        )
    if [m.id for m in machines] != list(range(len(machines))):
        raise ConfigurationError("machine ids must be 0..K-1 in order", "machines")
    return tuple(machines)


def load_topology(path) -> Topology:
    return topology_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_machines(path) -> tuple[Machine, ...]:
    return machines_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# simulation


def init_cluster(topology: Topology, machines, seed: int = 0) -> ClusterState:
    machines = tuple(machines)
    if not machines:
        raise ConfigurationError("at least one machine is required", "machines")
    services = {}
    for spec in topology.services:
        if not 0 <= spec.machine < len(machines):
            raise ConfigurationError(f"service {spec.id} placed on unknown machine {spec.machine}", "machine")
        if spec.min_replicas < 1 or not spec.min_replicas <= spec.replicas <= spec.max_replicas:
            raise ConfigurationError(f"service {spec.id}: need 1 <= min_replicas <= replicas <= max_replicas", "replicas")
        if spec.cpu_per_replica <= 0 or spec.mem_per_replica <= 0 or spec.ref_cpu <= 0:
            raise ConfigurationError(f"service {spec.id}: allocations must be positive", "cpu_per_replica")
        if spec.per_replica_rate <= 0 or spec.base_service_time_ms < 0:
            raise ConfigurationError(f"service {spec.id}: invalid rate or service time", "per_replica_rate")
        if spec.queue_capacity < 0:
            raise ConfigurationError(f"service {spec.id}: queue_capacity must be >= 0", "queue_capacity")
        services[spec.id] = ServiceDeployment(
            service=spec.id,
            replicas=spec.replicas,
            cpu_per_replica=spec.cpu_per_replica,
            mem_per_replica=spec.mem_per_replica,
            base_service_time=spec.base_service_time_ms,
            per_replica_rate=spec.per_replica_rate,
            queue=0,
            queue_capacity=spec.queue_capacity,
            machine=spec.machine,
        )
    state = ClusterState(topology, machines, services, seed, 0, [])
    for m in machines:
        for resource, cap in (("cpu", m.cpu_cores), ("mem", m.mem_units)):
            used = state.allocated(m.id, resource)
            if used > cap + 1e-9:
                raise ConfigurationError(
                    f"machine {m.id}: {resource} placement {used:g} exceeds capacity {cap:g}", "machines"
                )
    _observe_idle(state)
    return state


def _observe_idle(state: ClusterState) -> None:
    topo = state.topology
    for d in state.services.values():
        spec = topo.spec(d.service)
        d.cpu_util = topo.idle_util
        d.mem_util = topo.mem_idle_util
        d.demand_util = topo.idle_util
        d.latency = d.base_service_time / d.allocation_factor(spec.ref_cpu)
        d.queue_delay = 0.0
    state.machine_util = _machine_utils(state)


def _machine_utils(state: ClusterState) -> list[dict[str, float]]:
    out = []
    for m in state.machines:
        cpu = mem = 0.0
        for d in state.services.values():
            if d.machine != m.id:
                continue
            cpu += d.replicas * d.cpu_per_replica * d.cpu_util
            mem += d.replicas * d.mem_per_replica * d.mem_util
        out.append({"cpu": min(1.0, cpu / m.cpu_cores), "mem": min(1.0, mem / m.mem_units)})
    return out


def apply_action(state: ClusterState, action: ScalingAction | None) -> ClusterState:
    """Return a copy of ``state`` with ``action`` applied under clamping.

    Replicas are clamped to ``[1, max_replicas]`` and to what the machine can
    still host; per-replica allocations to ``[min, max]`` and machine headroom.
    """
    new = state.copy()
    if action is None:
        return new
    topo = new.topology
    for service, delta in sorted(action.deltas.items()):
        if service not in new.services:
            raise ConfigurationError(f"action targets unknown service {service!r}", "action")
        d = new.services[service]
        spec = topo.spec(service)
        machine = new.machines[d.machine]
        cpu_free = machine.cpu_cores - new.allocated(d.machine, "cpu", exclude=service)
        mem_free = machine.mem_units - new.allocated(d.machine, "mem", exclude=service)

        replicas = min(max(d.replicas + delta.h, spec.min_replicas), spec.max_replicas)
        if replicas > d.replicas:
            fit = int(math.floor(min(cpu_free / d.cpu_per_replica, mem_free / d.mem_per_replica) + 1e-9))
            replicas = max(d.replicas, min(replicas, fit))

        cpu = d.cpu_per_replica
        if delta.v_cpu > 0:
            ceiling = min(spec.cpu_ceiling, cpu_free / replicas)
            cpu = max(cpu, min(cpu + delta.v_cpu * action.cpu_step, ceiling))
        elif delta.v_cpu < 0:
            cpu = min(cpu, max(cpu + delta.v_cpu * action.cpu_step, spec.min_cpu))
        mem = d.mem_per_replica
        if delta.v_mem > 0:
            mem = max(mem, min(mem + delta.v_mem * action.mem_step, mem_free / replicas))
        elif delta.v_mem < 0:
            mem = min(mem, max(mem + delta.v_mem * action.mem_step, spec.min_mem))
        d.replicas = replicas
        d.cpu_per_replica = round(cpu, 9)
        d.mem_per_replica = round(mem, 9)
    return new


def step(state: ClusterState, arrivals: int, action: ScalingAction | None = None):
    """Advance one interval. Returns ``(new_state, IntervalMetrics)``; ``state`` is untouched."""
    if arrivals < 0:
        raise DomainError("arrivals must be >= 0")
    arrivals = int(round(arrivals))
    new = apply_action(state, action)
    topo = new.topology
    rng = np.random.default_rng([new.seed, new.interval])
    interval_ms = topo.interval_seconds * 1000.0

    incoming = dict.fromkeys(topo.order, 0)
    roots = topo.roots
    if len(roots) == 1:
        incoming[roots[0]] = arrivals
    else:
        for root, n in zip(roots, rng.multinomial(arrivals, topo.entry_shares)):
            incoming[root] = int(n)

    queued_before = new.total_queue
    arrived = processed_total = failed_total = 0
    latency: dict[str, float] = {}
    failed_by: dict[str, int] = {}
    idle, mem_idle = topo.idle_util, topo.mem_idle_util
    for name in topo.order:
        d = new.services[name]
        spec_ref = topo.spec(name).ref_cpu
        n_in = incoming[name]
        capacity = d.capacity(spec_ref)
        backlog = d.queue + n_in
        done = min(backlog, capacity)
        remaining = backlog - done
        queue = min(remaining, d.queue_capacity)
        failed = remaining - queue
        d.queue = queue
        arrived += n_in
        processed_total += done
        failed_total += failed
        failed_by[name] = failed

        busy = done / capacity
        d.cpu_util = idle + (1.0 - idle) * busy
        d.mem_util = mem_idle + (1.0 - mem_idle) * busy
        d.demand_util = idle + (1.0 - idle) * backlog / capacity
        d.queue_delay = queue / capacity * interval_ms
        d.latency = d.base_service_time / d.allocation_factor(spec_ref) + d.queue_delay
        latency[name] = d.latency

        for child, p in topo.children(name):
            if p >= 1.0:
                incoming[child] += done
            elif p > 0.0 and done:
                incoming[child] += int(rng.binomial(done, p))

    new.machine_util = _machine_utils(new)
    queued_after = new.total_queue

    # end-to-end latency: slowest chain below each root
    chain_rt: dict[str, float] = {}
    for name in reversed(topo.order):
        below = [chain_rt[c] for c, p in topo.children(name) if p > 0.0]
        chain_rt[name] = latency[name] + (max(below) if below else 0.0)
    if processed_total > 0:
        avg_rt = sum(share * chain_rt[r] for r, share in zip(roots, topo.entry_shares))
    else:
        avg_rt = 0.0

    trace_id = str(new.interval)
    spans = [Span(trace_id, None, r, latency[r]) for r in roots]
    spans.extend(
        Span(trace_id, u, v, latency[v]) for u, v, p in topo.edges if p > 0.0
    )
    metrics = IntervalMetrics(
        interval=new.interval,
        arrived=arrived,
        processed=processed_total,
        failed=failed_total,
        queued_before=queued_before,
        queued_after=queued_after,
        avg_response_time=avg_rt,
        rps=processed_total / topo.interval_seconds,
        requests=arrivals,
        per_service_latency=latency,
        per_service_failed=failed_by,
        spans=tuple(spans),
    )
    new.interval += 1
    return new, metrics


def critical_label(state: ClusterState, service: str, failed: int = 0) -> str:
    """Ground-truth label: queueing delay above ``critical_queue_factor`` times
    the effective service time, or any dropped request."""
    d = state.services[service]
    effective = d.base_service_time / d.allocation_factor(state.topology.spec(service).ref_cpu)
    critical = failed > 0 or d.queue_delay > state.topology.critical_queue_factor * effective
    return "critical" if critical else "non_critical"


# ---------------------------------------------------------------------------
# action space


def _digit_values(bound: int) -> list[int]:
    # no-op first so index 0 (the argmax tie-break) never scales
    values = [0]
    for k in range(1, bound + 1):
        values += [-k, k]
    return values


def action_space(K: int, I: int, n: int, m: int, cap: int = DEFAULT_ACTION_CAP):
    """Enumerate the Cartesian product of per-(machine, resource) sub-actions.

    Each element is a tuple of ``K * I`` pairs ``(h, v)``. The first pair varies
    fastest and, inside a pair, ``h`` varies faster than ``v``. Digit values
    run ``0, -1, +1, -2, +2, ...`` so action 0 is the no-op.
    """
    if K < 1 or I < 1:
        raise DomainError("K and I must be >= 1")
    if n < 0 or m < 0:
        raise DomainError("n and m must be >= 0")
    per = (2 * n + 1) * (2 * m + 1)
    size = per ** (K * I)
    if size > cap:
        raise ActionSpaceTooLargeError(f"|A| = {size} exceeds the cap of {cap}")
    pairs = [(h, v) for v in _digit_values(m) for h in _digit_values(n)]
    out = []
    for combo in itertools.product(pairs, repeat=K * I):
        out.append(tuple(reversed(combo)))
    return out
