"""Independent reference implementations used by the tests.

Nothing here imports the algorithms under test; they only share data types.
"""

from __future__ import annotations

import itertools
import math
import random


def random_dag(seed: int, max_nodes: int = 12, max_edges: int = 20, integer_weights: bool | None = None):
    """Seeded random DAG as (nodes, {(u, v): w}).

    Node names are shuffled against the hidden topological order so that
    lexicographic and topological order disagree. Integer weights make
    latency ties common, which exercises the tie rule.
    """
    rng = random.Random(seed)
    n = rng.randint(1, max_nodes)
    names = [f"s{i:02d}" for i in range(n)]
    rng.shuffle(names)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    k = rng.randint(0, min(max_edges, len(pairs)))
    if integer_weights is None:
        integer_weights = rng.random() < 0.5
    edges = {}
    for i, j in rng.sample(pairs, k):
        w = rng.randint(0, 4) if integer_weights else rng.uniform(0.0, 50.0)
        edges[(names[i], names[j])] = float(w)
    return set(names), edges


def brute_force_longest(nodes, edges, tol=1e-9):
    """Enumerate every root-to-sink path; longest wins, ties go to the smallest node tuple."""
    children = {n: sorted(v for (u, v) in edges if u == n) for n in nodes}
    has_parent = {v for (_, v) in edges}
    roots = [n for n in nodes if n not in has_parent]
    paths = []

    def walk(path):
        kids = children[path[-1]]
        if not kids:
            paths.append(tuple(path))
        for k in kids:
            walk(path + [k])

    for r in roots:
        walk([r])
    scored = [(math.fsum(edges[(a, b)] for a, b in zip(p, p[1:])), p) for p in paths]
    top = max(s for s, _ in scored)
    tied = sorted(p for s, p in scored if top - s <= tol * max(1.0, abs(top)))
    return tied[0], top


def random_topology_dict(seed: int, max_services: int = 8):
    """Random layered service DAG in the JSON topology layout, plus matching machines."""
    rng = random.Random(seed)
    n = rng.randint(1, max_services)
    n_machines = rng.randint(1, 3)
    services = []
    for i in range(n):
        rate = rng.choice([5, 20, 50, 200])
        services.append(
            {
                "id": f"svc{i}",
                "base_service_time_ms": rng.uniform(1.0, 40.0),
                "per_replica_rate": rate,
                "replicas": rng.randint(1, 3),
                "cpu_per_replica": rng.choice([0.5, 1.0, 2.0]),
                "mem_per_replica": 256,
                "machine": rng.randrange(n_machines),
                "queue_capacity": rng.choice([0, rate, 10 * rate]),
                "max_replicas": 6,
            }
        )
    edges = []
    for i in range(1, n):
        # every non-root gets at least one parent; a few extra fan-ins
        parents = rng.sample(range(i), rng.randint(1, min(i, 2)))
        if i < 2 and rng.random() < 0.3:
            continue  # a second root now and then
        for p in parents:
            edges.append({"from": f"svc{p}", "to": f"svc{i}", "branch_probability": rng.choice([0.3, 0.5, 1.0])})
    machines = [
        {"id": k, "cpu_cores": 64, "mem_units": 1 << 16, "util_threshold": 0.7} for k in range(n_machines)
    ]
    return {"services": services, "edges": edges}, {"machines": machines}


def value_iteration(P, R, gamma, tol=1e-12, max_iter=100_000):
    """Q* for a finite MDP. ``P[s][a]`` maps next-state -> prob, ``R[s][a]`` is the expected reward."""
    states = sorted(P)
    actions = {s: sorted(P[s]) for s in states}
    V = dict.fromkeys(states, 0.0)
    for _ in range(max_iter):
        Q = {
            (s, a): R[s][a] + gamma * sum(p * V[s2] for s2, p in P[s][a].items())
            for s in states
            for a in actions[s]
        }
        new = {s: max(Q[(s, a)] for a in actions[s]) for s in states}
        if max(abs(new[s] - V[s]) for s in states) < tol:
            V = new
            break
        V = new
    return {(s, a): R[s][a] + gamma * sum(p * V[s2] for s2, p in P[s][a].items()) for s in states for a in actions[s]}


def odometer(values, k):
    """All k-tuples over ``values`` with the first position varying fastest."""
    return [tuple(reversed(t)) for t in itertools.product(values, repeat=k)]


def synthetic_node_set(seed: int, n: int, noise: float = 0.0):
    """3-feature (latency ms, cpu, mem) samples labeled by an axis-aligned rule.

    Returns (X, y_observed, y_clean); ``noise`` is the fraction of flipped labels.
    """
    import numpy as np

    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(0, 200, n), rng.uniform(0, 1, n), rng.uniform(0, 1, n)])
    clean = np.where((X[:, 0] > 120) | ((X[:, 0] > 60) & (X[:, 1] > 0.7)), "critical", "non_critical")
    flip = rng.random(n) < noise
    observed = clean.copy()
    observed[flip] = np.where(clean[flip] == "critical", "non_critical", "critical")
    return X, observed, clean


def naive_best_gain(X, y):
    """Best Gini gain over every midpoint of every feature, by direct counting."""
    labels = sorted(set(y))

    def impurity(subset):
        if not subset:
            return 0.0
        return 1.0 - sum((subset.count(c) / len(subset)) ** 2 for c in labels)

    y = list(y)
    parent = impurity(y)
    best = 0.0
    for f in range(len(X[0])):
        values = sorted({row[f] for row in X})
        for a, b in zip(values, values[1:]):
            t = (a + b) / 2
            left = [lab for row, lab in zip(X, y) if row[f] < t]
            right = [lab for row, lab in zip(X, y) if row[f] >= t]
            child = (len(left) * impurity(left) + len(right) * impurity(right)) / len(y)
            best = max(best, parent - child)
    return best
