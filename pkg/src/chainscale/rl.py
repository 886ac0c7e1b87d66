"""Tabular value learning for the scaler: rewards, update rules, Q-table and experience pool."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, NumericError, TrainingError

QTABLE_HEADER = "# chainscale-qtable v1"
POOL_HEADER = "# chainscale-pool v1"
STATE_FIELDS = ("load_level", "chain_position", "latency_bucket")


class RLState(NamedTuple):
    load_level: int
    chain_position: int
    latency_bucket: int


def latency_bucket(latency: float, rt_max: float, fraction: float = 0.25, n_buckets: int = 8) -> int:
    """Bucket index of width ``fraction * rt_max``, capped at ``n_buckets - 1``."""
    if rt_max <= 0:
        raise DomainError("rt_max must be positive")
    return min(int(max(latency, 0.0) // (fraction * rt_max)), n_buckets - 1)


@dataclass
class AgentConfig:
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 0.1
    epsilon_decay: float = 0.995
    rt_max: float = 200.0
    # None: use each machine's own util_threshold
    util_threshold: float | None = None
    algorithm: str = "sarsa"
    train_every: int = 1
    pool_capacity: int = 10_000
    n: int = 1
    m: int = 2
    cpu_step: float = 0.5
    mem_step: float = 256.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise DomainError("alpha must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError("gamma must lie in [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise DomainError("epsilon must lie in [0, 1]")
        if self.rt_max <= 0:
            raise DomainError("rt_max must be positive")
        if self.util_threshold is not None and not 0.0 < self.util_threshold <= 1.0:
            raise DomainError("util_threshold must lie in (0, 1]")
        if self.algorithm not in ("sarsa", "q_learning"):
            raise DomainError(f"unknown algorithm {self.algorithm!r}")
        if self.train_every < 1 or self.pool_capacity < 1:
            raise DomainError("train_every and pool_capacity must be >= 1")


# ---------------------------------------------------------------------------
# rewards


def reward_util(utils: Sequence[float], thresholds: Sequence[float] | float) -> float:
    """Mean absolute gap between machine utilization and its threshold, plus one."""
    utils = list(utils)
    if not utils:
        raise DomainError("reward_util needs at least one machine")
    if isinstance(thresholds, (int, float)):
        thresholds = [float(thresholds)] * len(utils)
    if len(thresholds) != len(utils):
        raise DomainError("utils and thresholds differ in length")
    for u, cap in zip(utils, thresholds):
        if not (0.0 <= u <= 1.0 and 0.0 <= cap <= 1.0):
            raise DomainError("utilizations and thresholds must lie in [0, 1]")
    return math.fsum(abs(cap - u) for u, cap in zip(utils, thresholds)) / len(utils) + 1.0


def reward_rt(rt: float, rt_max: float) -> float:
    """1 inside the response-time budget, Gaussian decay beyond it."""
    if rt_max <= 0:
        raise DomainError("rt_max must be positive")
    if rt < 0:
        raise DomainError("response time must be >= 0")
    if rt <= rt_max:
        return 1.0
    return math.exp(-(((rt - rt_max) / rt_max) ** 2))


def reward_total(r_q: float, r_u: float) -> float:
    if r_u <= 0:
        raise DomainError("utilization reward must be positive")
    return r_q / r_u


# ---------------------------------------------------------------------------
# Q-table and experience


class QTable:
    """Sparse action-value table; unseen (state, action) pairs read as 0.0."""

    def __init__(self, n_actions: int, values: dict | None = None):
        if n_actions < 1:
            raise DomainError("n_actions must be >= 1")
        self.n_actions = n_actions
        self._values: dict[tuple[RLState, int], float] = {}
        for (s, a), v in (values or {}).items():
            self[s, a] = v

    def __getitem__(self, key) -> float:
        return self._values.get(key, 0.0)

    def __setitem__(self, key, value):
        state, action = key
        if not 0 <= action < self.n_actions:
            raise DomainError(f"action {action} outside [0, {self.n_actions})")
        if not math.isfinite(value):
            raise NumericError(f"non-finite Q-value {value} for {key}")
        self._values[(RLState(*state), int(action))] = float(value)

    def __len__(self):
        return len(self._values)

    def __eq__(self, other):
        return isinstance(other, QTable) and self.n_actions == other.n_actions and self._values == other._values

    def row(self, state) -> np.ndarray:
        state = RLState(*state)
        return np.array([self._values.get((state, a), 0.0) for a in range(self.n_actions)])

    def max_value(self, state) -> float:
        return float(self.row(state).max())

    def items(self):
        return sorted(self._values.items())

    def states(self) -> list[RLState]:
        return sorted({s for s, _ in self._values})

    def copy(self) -> "QTable":
        q = QTable(self.n_actions)
        q._values = dict(self._values)
        return q

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(f"{QTABLE_HEADER} n_actions={self.n_actions}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(STATE_FIELDS + ("action", "value"))
        for (s, a), v in self.items():
            writer.writerow([*s, a, repr(v)])
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "QTable":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(QTABLE_HEADER):
            raise TrainingError("not a chainscale Q-table file (bad header)")
        try:
            n_actions = int(lines[0].split("n_actions=")[1])
        except (IndexError, ValueError):
            raise TrainingError("Q-table header lacks n_actions") from None
        q = cls(n_actions)
        for row in csv.DictReader(lines[1:]):
            state = RLState(*(int(row[f]) for f in STATE_FIELDS))
            q[state, int(row["action"])] = float(row["value"])
        return q

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "QTable":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


class Transition(NamedTuple):
    state: RLState
    action: int
    reward: float
    next_state: RLState
    next_action: int


class ExperiencePool:
    """Bounded FIFO of transitions; the oldest entry is evicted first."""

    def __init__(self, capacity: int = 10_000, transitions: Iterable[Transition] = ()):
        if capacity < 1:
            raise DomainError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)
        for t in transitions:
            self.append(t)

    def append(self, transition: Transition) -> None:
        s, a, r, s2, a2 = transition
        self._items.append(Transition(RLState(*s), int(a), float(r), RLState(*s2), int(a2)))

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(f"{POOL_HEADER} capacity={self.capacity}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            STATE_FIELDS + ("action", "reward") + tuple(f"next_{f}" for f in STATE_FIELDS) + ("next_action",)
        )
        for s, a, r, s2, a2 in self._items:
            writer.writerow([*s, a, repr(r), *s2, a2])
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "ExperiencePool":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(POOL_HEADER):
            raise TrainingError("not a chainscale experience-pool file (bad header)")
        try:
            capacity = int(lines[0].split("capacity=")[1])
        except (IndexError, ValueError):
            raise TrainingError("pool header lacks capacity") from None
        pool = cls(capacity)
        for row in csv.DictReader(lines[1:]):
            pool.append(
                Transition(
                    RLState(*(int(row[f]) for f in STATE_FIELDS)),
                    int(row["action"]),
                    float(row["reward"]),
                    RLState(*(int(row[f"next_{f}"]) for f in STATE_FIELDS)),
                    int(row["next_action"]),
                )
            )
        return pool

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperiencePool":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# update rules


def _check_rates(alpha, gamma, *values):
    if not 0.0 < alpha <= 1.0:
        raise DomainError("alpha must lie in (0, 1]")
    if not 0.0 <= gamma <= 1.0:
        raise DomainError("gamma must lie in [0, 1]")
    if not all(math.isfinite(v) for v in values):
        raise NumericError("non-finite reward or value in update")


def sarsa_update(q: QTable, transition: Transition, alpha: float, gamma: float) -> QTable:
    """On-policy TD step: bootstrap from the action actually chosen in the next state.

    Mutates and returns ``q``; only the ``(s, a)`` cell changes.
    """
    s, a, r, s2, a2 = transition
    current = q[RLState(*s), a]
    target = q[RLState(*s2), a2]
    _check_rates(alpha, gamma, r, current, target)
    q[s, a] = current + alpha * (r + gamma * target - current)
    return q


def q_learning_update(q: QTable, s, a: int, reward: float, s2, alpha: float, gamma: float) -> QTable:
    """Off-policy TD step bootstrapping from the greedy value of the next state."""
    current = q[RLState(*s), a]
    best = q.max_value(s2)
    _check_rates(alpha, gamma, reward, current, best)
    q[s, a] = current + alpha * (reward + gamma * best - current)
    return q


def select_action(q: QTable, state, n_actions: int | Sequence, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice; greedy ties go to the lowest action index."""
    n = n_actions if isinstance(n_actions, int) else len(n_actions)
    if n < 1:
        raise DomainError("action set is empty")
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(n))
    row = q.row(state)[:n]
    return int(np.argmax(row))


def offline_train(pool: ExperiencePool, q: QTable, alpha: float, gamma: float, epochs: int = 1) -> QTable:
    """Replay the pool through ``sarsa_update`` in insertion order, ``epochs`` times."""
    if len(pool) == 0:
        raise TrainingError("experience pool is empty")
    if epochs < 1:
        raise TrainingError("epochs must be >= 1")
    for _ in range(epochs):
        for transition in pool:
            sarsa_update(q, transition, alpha, gamma)
    return q
