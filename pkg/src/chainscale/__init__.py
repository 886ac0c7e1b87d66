"""Chain-latency-aware autoscaling for simulated microservice clusters."""

__version__ = "0.1.0"

from .baselines import baseline_hybrid, baseline_threshold
from .chains import Span, build_call_graph, critical_chain
from .cluster import (
    ScalingAction,
    ServiceDelta,
    action_space,
    apply_action,
    init_cluster,
    load_machines,
    load_topology,
    step,
)
from .control import ChainAnalyzer, ChainScaler, run_control_loop, run_policy
from .experiment import ExperimentConfig, compare, run_experiment
from .predictor import LevelPredictor
from .rl import AgentConfig, ExperiencePool, QTable, RLState, offline_train, sarsa_update
from .trace import LevelDiscretizer, discretize, level_series, load_trace, synth_workload
from .tree import CriticalNodeClassifier, check_retrain, classify_node, train_tree
