"""The scaling control loop: predict, locate the critical node, act, learn."""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from .chains import Chain, build_call_graph, critical_chain
from .cluster import ClusterState, IntervalMetrics, ScalingAction, ServiceDelta, action_space, critical_label, step
from .errors import DomainError
from .predictor import LevelPredictor
from .rl import (
    AgentConfig,
    ExperiencePool,
    QTable,
    RLState,
    Transition,
    latency_bucket,
    offline_train,
    q_learning_update,
    reward_rt,
    reward_total,
    reward_util,
    sarsa_update,
    select_action,
)
from .trace import DEFAULT_NUM_LEVELS, WorkloadTrace, discretize
from .tree import CRITICAL, CriticalNodeClassifier, NodeFeatures, check_retrain


class ChainAnalyzer:
    """Runtime side of critical-chain analysis.

    Spans from the last ``span_window`` intervals feed the call graph. Labeled
    feature records stay in per-service stores and are pooled only when the
    tree is (re)trained. Every ``check_every`` intervals the tree is scored on
    the freshest ``check_size`` records and retrained if its error exceeds
    ``error_threshold``.
    """

    def __init__(
        self,
        span_window=1,
        max_depth=3,
        error_threshold=0.05,
        check_every=50,
        check_size=100,
        min_train=50,
        store_size=400,
        chain_period=1,
    ):
        self.span_window = span_window
        self.max_depth = max_depth
        self.error_threshold = error_threshold
        self.check_every = check_every
        self.check_size = check_size
        self.min_train = min_train
        self.store_size = store_size
        self.chain_period = chain_period
        self.tree: CriticalNodeClassifier | None = None
        self.retrain_count = 0
        self._spans: deque = deque(maxlen=span_window)
        self._store: dict[str, deque] = {}
        self._recent: deque = deque(maxlen=check_size)
        self._seen = 0
        self._chain: Chain | None = None
        self._chain_age = 0

    def observe(self, state: ClusterState, metrics: IntervalMetrics) -> None:
        self._spans.append(metrics.spans)
        for name, d in state.services.items():
            record = (
                NodeFeatures(d.latency, d.cpu_util, d.mem_util),
                critical_label(state, name, metrics.per_service_failed.get(name, 0)),
            )
            self._store.setdefault(name, deque(maxlen=self.store_size)).append(record)
            self._recent.append(record)
        self._seen += 1
        if self.tree is None:
            if self._seen >= self.min_train:
                self.retrain()
        elif self._seen % self.check_every == 0 and self._recent:
            if check_retrain(self.tree, list(self._recent), self.error_threshold) == "retrain":
                self.retrain()

    def retrain(self) -> None:
        data = [rec for store in self._store.values() for rec in store]
        if not data:
            return
        X = np.array([f.as_array() for f, _ in data])
        y = np.array([label for _, label in data])
        self.tree = CriticalNodeClassifier(max_depth=self.max_depth).fit(X, y)
        self.retrain_count += 1

    def chain(self) -> Chain | None:
        if not self._spans:
            return None
        if self._chain is None or self._chain_age >= self.chain_period:
            spans = [s for batch in self._spans for s in batch]
            self._chain = critical_chain(build_call_graph(spans))
            self._chain_age = 0
        self._chain_age += 1
        return self._chain

    def locate(self, state: ClusterState) -> tuple[Chain, str, int]:
        """Critical chain, the node to provision on it, and that node's index."""
        chain = self.chain()
        if chain is None:
            root = state.topology.roots[0]
            return Chain((root,), 0.0), root, 0
        latencies = [state.services[n].latency for n in chain.nodes]
        candidates = range(len(chain.nodes))
        if self.tree is not None:
            X = np.array(
                [[state.services[n].latency, state.services[n].cpu_util, state.services[n].mem_util] for n in chain.nodes]
            )
            flagged = [i for i, label in enumerate(self.tree.predict(X)) if label == CRITICAL]
            if flagged:
                candidates = flagged
        # highest latency wins; the earliest chain position breaks ties
        position = max(candidates, key=lambda i: (latencies[i], -i))
        return chain, chain.nodes[position], position


@dataclass
class LoopResult:
    metrics: list[IntervalMetrics]
    actions: list[str]
    q: QTable | None
    pool: ExperiencePool | None
    final_state: ClusterState
    analyzer: ChainAnalyzer | None = None
    retrain_count: int = 0
    trigger_count: int = 0
    rewards: list[float] = field(default_factory=list)


def trace_levels(trace: WorkloadTrace, peak_rate: float | None = None, num_levels: int = DEFAULT_NUM_LEVELS) -> list[int]:
    rates = trace.request_rates
    peak = peak_rate if peak_rate is not None else float(rates.max())
    if peak <= 0:
        return [0] * len(rates)
    return [discretize(min(r / peak, 1.0), num_levels).level for r in rates]


def _reward(state: ClusterState, metrics: IntervalMetrics, config: AgentConfig) -> float:
    thresholds = config.util_threshold if config.util_threshold is not None else state.thresholds()
    r_u = reward_util(state.machine_pressure(), thresholds)
    r_q = reward_rt(metrics.avg_response_time, config.rt_max)
    return reward_total(r_q, r_u)


def run_control_loop(
    sim: ClusterState,
    trace: WorkloadTrace,
    config: AgentConfig,
    q: QTable | None = None,
    predictor: LevelPredictor | None = None,
    analyzer: ChainAnalyzer | None = None,
    T: int | None = None,
    mode: str = "train",
    seed: int = 0,
    actions: list | None = None,
    pool: ExperiencePool | None = None,
    peak_rate: float | None = None,
    num_levels: int = DEFAULT_NUM_LEVELS,
) -> LoopResult:
    """Drive ``sim`` through ``T`` trace intervals under the learned scaler.

    At interval ``t`` the observed level of interval ``t - 1`` is compared with
    the forecast for ``t``; only when they differ is the critical node located
    and an action chosen and applied. In ``train`` mode the transition's reward
    updates the table (SARSA, or Q-learning if configured); every taken action's
    transition is appended to the experience pool in both modes.

    ``actions`` is the list of ``(h, v)`` pairs applied to the critical node;
    it defaults to the single-node action space for ``config.n``/``config.m``.
    Inputs are not mutated: the table, predictor and analyzer are copied.
    """
    if mode not in ("train", "evaluate"):
        raise DomainError(f"mode must be 'train' or 'evaluate', got {mode!r}")
    T = len(trace) if T is None else T
    if T < 1 or T > len(trace):
        raise DomainError(f"T must lie in [1, {len(trace)}]")
    if actions is None:
        actions = [combo[0] for combo in action_space(1, 1, config.n, config.m)]
    q = QTable(len(actions)) if q is None else q.copy()
    if q.n_actions != len(actions):
        raise DomainError("Q-table width differs from the action set")
    pool = ExperiencePool(config.pool_capacity) if pool is None else copy.deepcopy(pool)
    analyzer = ChainAnalyzer() if analyzer is None else copy.deepcopy(analyzer)
    levels = trace_levels(trace, peak_rate, num_levels)
    if predictor is None:
        predictor = LevelPredictor("markov", num_levels=num_levels).fit(levels[:1] * 2)
    else:
        predictor = copy.deepcopy(predictor)

    rng = np.random.default_rng(seed)
    epsilon = config.epsilon if mode == "train" else 0.0
    interval_s = trace.interval_seconds
    state = sim
    last_rt = 0.0
    pending: tuple[RLState, int] | None = None
    result = LoopResult([], [], q, pool, sim)
    taken = 0

    def observe_state(forecast: int) -> tuple[RLState, str]:
        _, node, position = analyzer.locate(state)
        return RLState(forecast, position, latency_bucket(last_rt, config.rt_max)), node

    for t in range(T):
        action = None
        label = "none"
        decision = None
        if t > 0:
            forecast = predictor.predict_next(levels[:t])
            if forecast != levels[t - 1]:
                s, node = observe_state(forecast)
                if pending is not None and pending[0] == s:
                    a = pending[1]
                else:
                    a = select_action(q, s, len(actions), epsilon, rng)
                h, v = actions[a]
                action = ScalingAction({node: ServiceDelta(h=h, v_cpu=v)}, config.cpu_step, config.mem_step)
                label = f"{node}:h{h:+d}/c{v:+d}"
                decision = (s, a)
                result.trigger_count += 1
        pending = None
        state, metrics = step(state, trace.records[t].request_rate * interval_s, action)
        last_rt = metrics.avg_response_time
        if t > 0:
            predictor.observe(levels[t - 1], levels[t])
        analyzer.observe(state, metrics)
        result.metrics.append(metrics)
        result.actions.append(label)

        if decision is not None:
            s, a = decision
            reward = _reward(state, metrics, config)
            result.rewards.append(reward)
            next_forecast = predictor.predict_next(levels[: t + 1])
            s2, _ = observe_state(next_forecast)
            a2 = select_action(q, s2, len(actions), epsilon, rng)
            pending = (s2, a2)
            taken += 1
            if mode == "train" and taken % config.train_every == 0:
                if config.algorithm == "sarsa":
                    sarsa_update(q, Transition(s, a, reward, s2, a2), config.alpha, config.gamma)
                else:
                    q_learning_update(q, s, a, reward, s2, config.alpha, config.gamma)
            pool.append(Transition(s, a, reward, s2, a2))

    result.final_state = state
    result.analyzer = analyzer
    result.retrain_count = analyzer.retrain_count
    return result


def run_policy(
    sim: ClusterState,
    trace: WorkloadTrace,
    policy: Callable[[ClusterState], ScalingAction] | None,
    T: int | None = None,
) -> LoopResult:
    """Run a stateless-per-interval autoscaler (or none) over the trace.

    The policy sees the state observed at the end of the previous interval and
    its action takes effect at the start of the next one, so the first
    interval runs unchanged (nothing has been observed yet).
    """
    T = len(trace) if T is None else T
    if T < 1 or T > len(trace):
        raise DomainError(f"T must lie in [1, {len(trace)}]")
    state = sim
    result = LoopResult([], [], None, None, sim)
    for t in range(T):
        action = policy(state) if policy is not None and t > 0 else None
        state, metrics = step(state, trace.records[t].request_rate * trace.interval_seconds, action)
        result.metrics.append(metrics)
        result.actions.append(action.describe() if action is not None else "none")
    result.final_state = state
    return result


class ChainScaler(BaseEstimator):
    """Estimator-style wrapper: ``fit`` trains over episodes, ``evaluate`` runs greedily.

    ``fit(trace, sim)`` keeps the learned table in ``q_``, the pooled
    experience in ``pool_`` and a markov predictor warmed on the trace levels
    in ``predictor_``.
    """

    def __init__(
        self,
        alpha=0.1,
        gamma=0.9,
        epsilon=0.1,
        epsilon_decay=0.995,
        rt_max=200.0,
        util_threshold=None,
        algorithm="sarsa",
        n=1,
        m=2,
        cpu_step=0.5,
        mem_step=256.0,
        episodes=20,
        replay_epochs=0,
        train_every=1,
        pool_capacity=10_000,
        num_levels=DEFAULT_NUM_LEVELS,
        peak_rate=None,
        random_state=0,
    ):
        self.alpha = alpha
        self.gamma = gamma
        self.epsilon = epsilon
        self.epsilon_decay = epsilon_decay
        self.rt_max = rt_max
        self.util_threshold = util_threshold
        self.algorithm = algorithm
        self.n = n
        self.m = m
        self.cpu_step = cpu_step
        self.mem_step = mem_step
        self.episodes = episodes
        self.replay_epochs = replay_epochs
        self.train_every = train_every
        self.pool_capacity = pool_capacity
        self.num_levels = num_levels
        self.peak_rate = peak_rate
        self.random_state = random_state

    def agent_config(self, epsilon=None) -> AgentConfig:
        return AgentConfig(
            alpha=self.alpha,
            gamma=self.gamma,
            epsilon=self.epsilon if epsilon is None else epsilon,
            epsilon_decay=self.epsilon_decay,
            rt_max=self.rt_max,
            util_threshold=self.util_threshold,
            algorithm=self.algorithm,
            train_every=self.train_every,
            pool_capacity=self.pool_capacity,
            n=self.n,
            m=self.m,
            cpu_step=self.cpu_step,
            mem_step=self.mem_step,
        )

    def _predictor(self, trace):
        levels = trace_levels(trace, self.peak_rate, self.num_levels)
        history = levels if len(levels) >= 2 else levels * 2
        return LevelPredictor("markov", num_levels=self.num_levels).fit(history)

    def fit(self, trace: WorkloadTrace, sim: ClusterState, q: QTable | None = None, T=None):
        self.predictor_ = self._predictor(trace)
        q = q.copy() if q is not None else None
        pool = None
        analyzer = ChainAnalyzer()
        epsilon = self.epsilon
        self.episode_rewards_ = []
        for episode in range(self.episodes):
            sim_e = copy.copy(sim)
            sim_e.seed = sim.seed + 1000 * (episode + 1)
            result = run_control_loop(
                sim_e,
                trace,
                self.agent_config(epsilon),
                q=q,
                predictor=self.predictor_,
                analyzer=analyzer,
                T=T,
                mode="train",
                seed=self.random_state + episode,
                pool=pool,
                peak_rate=self.peak_rate,
                num_levels=self.num_levels,
            )
            q, pool, analyzer = result.q, result.pool, result.analyzer
            if self.replay_epochs and len(pool):
                offline_train(pool, q, self.alpha, self.gamma, self.replay_epochs)
            self.episode_rewards_.append(float(np.mean(result.rewards)) if result.rewards else 0.0)
            epsilon *= self.epsilon_decay
        if q is None:
            q = QTable((2 * self.n + 1) * (2 * self.m + 1))
        self.q_ = q
        self.pool_ = pool
        self.analyzer_ = analyzer
        return self

    def evaluate(self, trace: WorkloadTrace, sim: ClusterState, T=None) -> LoopResult:
        predictor = getattr(self, "predictor_", None) or self._predictor(trace)
        q = getattr(self, "q_", None)
        return run_control_loop(
            sim,
            trace,
            self.agent_config(0.0),
            q=q,
            predictor=predictor,
            analyzer=getattr(self, "analyzer_", None),
            T=T,
            mode="evaluate",
            seed=self.random_state,
            peak_rate=self.peak_rate,
            num_levels=self.num_levels,
        )
