"""Small simulated environments shared by the control and acceptance tests."""

from __future__ import annotations

from chainscale.cluster import ScalingAction, ServiceDelta, init_cluster, machines_from_dict, step, topology_from_dict
from chainscale.control import _reward, run_control_loop, trace_levels
from chainscale.predictor import LevelPredictor
from chainscale.rl import AgentConfig, QTable, RLState, latency_bucket
from chainscale.trace import synth_workload

from oracles import value_iteration

# a single service on a small machine: one replica is swamped by the high
# load, two replicas are not
TWO_STATE_TOPOLOGY = {
    "interval_seconds": 1,
    "services": [
        {
            "id": "app",
            "base_service_time_ms": 10,
            "per_replica_rate": 100,
            "replicas": 1,
            "cpu_per_replica": 1.0,
            "queue_capacity": 1000,
            "max_replicas": 4,
        }
    ],
}
TWO_STATE_MACHINES = {"machines": [{"id": 0, "cpu_cores": 4, "mem_units": 4096, "util_threshold": 0.7}]}
LOW, HIGH = 30.0, 150.0
ACTIONS = [(0, 0), (1, 0)]  # no-op, one more replica
NOOP, SCALE_UP = 0, 1


def two_state_env(seed=0):
    topo = topology_from_dict(TWO_STATE_TOPOLOGY)
    sim = init_cluster(topo, machines_from_dict(TWO_STATE_MACHINES), seed=seed)
    trace = synth_workload("replay", {"rates": [LOW, HIGH]}, 2, interval_seconds=1)
    levels = trace_levels(trace)
    predictor = LevelPredictor("markov").fit(levels * 3)
    # a wide latency budget keeps the latency bucket identical across outcomes
    config = AgentConfig(alpha=0.1, gamma=0.9, epsilon=0.3, rt_max=4000.0)
    return sim, trace, predictor, config


def train_two_state(intervals=500, seed=0):
    """Episodic training: the cluster resets every two intervals."""
    sim, trace, predictor, config = two_state_env(seed)
    q = QTable(len(ACTIONS))
    pool = None
    for episode in range(intervals // len(trace)):
        result = run_control_loop(
            sim, trace, config, q=q, predictor=predictor, mode="train", seed=episode, actions=ACTIONS, pool=pool
        )
        q, pool = result.q, result.pool
    return q, pool


def two_state_oracle(seed=0):
    """Brute-force the MDP by simulating each action from the reset state,
    then solve it by value iteration."""
    sim, trace, predictor, config = two_state_env(seed)
    levels = trace_levels(trace)
    state, first = step(sim, LOW)
    s_high = RLState(predictor.predict_next(levels[:1]), 0, latency_bucket(first.avg_response_time, config.rt_max))
    P, R = {s_high: {}}, {s_high: {}}
    for a, (h, v) in enumerate(ACTIONS):
        after, m = step(state, HIGH, ScalingAction({"app": ServiceDelta(h, v)}))
        s_next = RLState(predictor.predict_next(levels[:2]), 0, latency_bucket(m.avg_response_time, config.rt_max))
        P[s_high][a] = {s_next: 1.0}
        R[s_high][a] = _reward(after, m, config)
        # the episode ends in s_next: absorbing, nothing more is earned
        P.setdefault(s_next, {b: {s_next: 1.0} for b in range(len(ACTIONS))})
        R.setdefault(s_next, {b: 0.0 for b in range(len(ACTIONS))})
    return value_iteration(P, R, config.gamma), s_high, P
