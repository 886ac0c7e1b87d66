"""Reference autoscalers: a CPU-threshold horizontal scaler and a history-driven hybrid scaler."""

from __future__ import annotations

import math
from collections import deque
from typing import Mapping, Sequence

from .cluster import ClusterState, ScalingAction, ServiceDelta
from .errors import DomainError


def baseline_threshold(state: ClusterState, cpu_threshold: float = 0.7) -> ScalingAction:
    """Horizontal-only rule: +1 replica above the threshold, -1 below half of it."""
    if not 0.0 < cpu_threshold < 1.0:
        raise DomainError("cpu_threshold must lie in (0, 1)")
    deltas = {}
    for name, d in state.services.items():
        if d.cpu_util > cpu_threshold:
            deltas[name] = ServiceDelta(h=1)
        elif d.cpu_util < cpu_threshold / 2 and d.replicas > 1:
            deltas[name] = ServiceDelta(h=-1)
    return ScalingAction(deltas)


def demand_cores(state: ClusterState) -> dict[str, float]:
    """Offered CPU demand per service in cores (can exceed the allocation)."""
    return {
        name: d.demand_util * d.replicas * d.cpu_per_replica for name, d in state.services.items()
    }


def baseline_hybrid(
    state: ClusterState,
    history: Mapping[str, Sequence[float]],
    margin: float = 0.15,
    hysteresis: float = 0.2,
    m: int = 2,
    cpu_step: float = 0.5,
) -> ScalingAction:
    """Size each deployment to its windowed peak demand plus a safety margin.

    ``history`` maps a service to its recent CPU demand in cores. A service
    whose peak demand exceeds the current allocation is scaled up vertically
    toward ``peak * (1 + margin)``; if ``m`` steps (or the machine) cannot
    cover that, a replica is added instead. Allocations whose margin-padded
    target sits below ``(1 - hysteresis)`` of the current total shrink, first
    by dropping a replica, then by vertical steps.
    """
    if not history:
        raise DomainError("baseline_hybrid needs a non-empty history")
    deltas = {}
    for name, d in state.services.items():
        window = history.get(name)
        if not window:
            continue
        spec = state.topology.spec(name)
        machine = state.machines[d.machine]
        peak = max(window)
        target = peak * (1.0 + margin)
        alloc = d.replicas * d.cpu_per_replica
        if peak > alloc + 1e-9:
            needed = target / d.replicas
            steps = math.ceil((needed - d.cpu_per_replica) / cpu_step - 1e-9)
            headroom = machine.cpu_cores - state.allocated(d.machine, "cpu", exclude=name)
            ceiling = min(spec.cpu_ceiling, headroom / d.replicas)
            if steps <= m and d.cpu_per_replica + steps * cpu_step <= ceiling + 1e-9:
                deltas[name] = ServiceDelta(v_cpu=max(steps, 1))
            else:
                deltas[name] = ServiceDelta(h=1)
        elif target < alloc * (1.0 - hysteresis):
            if d.replicas > 1 and target <= (d.replicas - 1) * d.cpu_per_replica * (1.0 - hysteresis):
                deltas[name] = ServiceDelta(h=-1)
            else:
                spare = math.floor((d.cpu_per_replica - target / d.replicas) / cpu_step + 1e-9)
                spare = min(spare, m, math.floor((d.cpu_per_replica - spec.min_cpu) / cpu_step + 1e-9))
                if spare >= 1:
                    deltas[name] = ServiceDelta(v_cpu=-spare)
    return ScalingAction(deltas, cpu_step=cpu_step)


class HybridAutoscaler:
    """Stateful wrapper keeping the per-service demand window for ``baseline_hybrid``."""

    def __init__(self, window=48, margin=0.15, hysteresis=0.2, m=2, cpu_step=0.5):
        if window < 1:
            raise DomainError("window must be >= 1")
        self.window = window
        self.margin = margin
        self.hysteresis = hysteresis
        self.m = m
        self.cpu_step = cpu_step
        self._history: dict[str, deque] = {}

    def __call__(self, state: ClusterState) -> ScalingAction:
        for name, cores in demand_cores(state).items():
            self._history.setdefault(name, deque(maxlen=self.window)).append(cores)
        return baseline_hybrid(
            state, self._history, self.margin, self.hysteresis, self.m, self.cpu_step
        )


class ThresholdAutoscaler:
    def __init__(self, cpu_threshold=0.7):
        self.cpu_threshold = cpu_threshold

    def __call__(self, state: ClusterState) -> ScalingAction:
        return baseline_threshold(state, self.cpu_threshold)
