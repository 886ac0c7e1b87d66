"""Reproducible experiment runs: config, per-interval metrics CSV, summary and manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
from dataclasses import asdict, dataclass, field
from importlib.resources import files
from pathlib import Path
from typing import Sequence

import numpy as np
import sklearn

from . import __version__
from .baselines import HybridAutoscaler, ThresholdAutoscaler
from .cluster import init_cluster, load_machines, load_topology
from .control import ChainScaler, LoopResult, run_control_loop, run_policy
from .errors import ConfigurationError
from .rl import QTable
from .trace import WorkloadTrace, load_trace, synth_workload

POLICIES = ("chainsformer", "threshold", "hybrid", "none")
METRICS_HEADER = ("interval", "arrived", "processed", "failed", "avg_rt_ms", "rps", "action_taken")
SUMMARY_HEADER = ("period", "mean_rps", "total_failures", "mean_rt_ms")
DEFAULT_PERIODS = (1000, 2000, 3000, 4000, 5000)
OUTPUT_ENV = "CHAINSCALE_OUTPUT_DIR"
# fields that must agree between configs placed side by side in a comparison
ENVIRONMENT_FIELDS = ("trace_file", "synth", "topology", "machines", "seed", "horizon", "interval_seconds")


def packaged_config(name: str) -> str:
    return str(files("chainscale") / "configs" / name)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run.

    Exactly one trace source is given: ``trace_file`` (CSV) or ``synth``, a
    mapping with ``pattern``, ``params`` and optionally ``seed``. ``agent``
    holds ``ChainScaler`` parameters for the learned policy; ``q_table``
    points to a pretrained table, in which case training is skipped.
    """

    policy: str = "chainsformer"
    trace_file: str | None = None
    synth: dict | None = None
    topology: str = field(default_factory=lambda: packaged_config("sockshop_topology.json"))
    machines: str = field(default_factory=lambda: packaged_config("sockshop_machines.json"))
    seed: int = 0
    horizon: int | None = None
    interval_seconds: float = 60.0
    output_dir: str = "runs"
    threshold: float = 0.7
    agent: dict = field(default_factory=dict)
    q_table: str | None = None
    periods: tuple = DEFAULT_PERIODS

    def __post_init__(self):
        self.periods = tuple(int(p) for p in self.periods)
        self.agent = dict(self.agent)

    def validate(self) -> "ExperimentConfig":
        if self.policy not in POLICIES:
            raise ConfigurationError(f"policy must be one of {', '.join(POLICIES)}", "policy")
        if (self.trace_file is None) == (self.synth is None):
            raise ConfigurationError("give exactly one of trace_file and synth", "trace_file")
        if self.synth is not None and "pattern" not in self.synth:
            raise ConfigurationError("synth spec needs a pattern", "synth")
        for name in ("trace_file", "topology", "machines", "q_table"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigurationError(f"file not found: {path}", name)
        if self.horizon is not None and self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1", "horizon")
        if self.interval_seconds <= 0:
            raise ConfigurationError("interval_seconds must be positive", "interval_seconds")
        if not self.periods or min(self.periods) < 1:
            raise ConfigurationError("periods must be positive interval counts", "periods")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)", "threshold")
        unknown = set(self.agent) - set(ChainScaler().get_params())
        if unknown:
            raise ConfigurationError(f"unknown agent parameters: {sorted(unknown)}", "agent")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["periods"] = list(self.periods)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigurationError(f"unknown config fields: {sorted(extra)}", sorted(extra)[0])
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Load a JSON config. A run manifest is accepted too (its ``config`` entry is used)."""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}", "config") from exc
        if "config" in data and "config_hash" in data:
            data = data["config"]
        base = Path(path).parent
        for name in ("trace_file", "topology", "machines", "q_table"):
            value = data.get(name)
            if value is not None and not Path(value).is_absolute() and (base / value).is_file():
                data[name] = str(base / value)
        return cls.from_dict(data)

    def environment(self) -> dict:
        return {k: getattr(self, k) for k in ENVIRONMENT_FIELDS}

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config: ExperimentConfig) -> str:
    """Hash of the config plus the contents of every file it references."""
    payload = {k: v for k, v in config.to_dict().items() if k != "output_dir"}
    payload["files"] = {
        name: _file_digest(getattr(config, name))
        for name in ("trace_file", "topology", "machines", "q_table")
        if getattr(config, name) is not None
    }
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def build_trace(config: ExperimentConfig) -> WorkloadTrace:
    if config.trace_file is not None:
        trace = load_trace(config.trace_file, config.interval_seconds)
    else:
        spec = config.synth
        horizon = spec.get("horizon", config.horizon)
        if horizon is None:
            raise ConfigurationError("a synth trace needs a horizon", "horizon")
        trace = synth_workload(
            spec["pattern"],
            spec.get("params", {}),
            int(horizon),
            seed=int(spec.get("seed", config.seed)),
            interval_seconds=config.interval_seconds,
        )
    if config.horizon is not None and config.horizon > len(trace):
        raise ConfigurationError(f"horizon {config.horizon} exceeds trace length {len(trace)}", "horizon")
    return trace


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    loop: LoopResult
    summary: list[dict]
    output_dir: Path
    config_hash: str


def run_policy_on(config: ExperimentConfig, trace: WorkloadTrace) -> LoopResult:
    topology = load_topology(config.topology)
    machines = load_machines(config.machines)
    sim = init_cluster(topology, machines, seed=config.seed)
    T = config.horizon or len(trace)
    if config.policy == "none":
        return run_policy(sim, trace, None, T)
    if config.policy == "threshold":
        return run_policy(sim, trace, ThresholdAutoscaler(config.threshold), T)
    if config.policy == "hybrid":
        return run_policy(sim, trace, HybridAutoscaler(), T)
    scaler = ChainScaler(**{"random_state": config.seed, **config.agent})
    if config.q_table is not None:
        q = QTable.load(config.q_table)
        return run_control_loop(
            sim, trace, scaler.agent_config(0.0), q=q, predictor=scaler._predictor(trace), T=T,
            mode="evaluate", seed=scaler.random_state, peak_rate=scaler.peak_rate, num_levels=scaler.num_levels,
        )
    scaler.fit(trace, sim, T=T)
    return scaler.evaluate(trace, sim, T=T)


def summarize(metrics, periods: Sequence[int] = DEFAULT_PERIODS) -> list[dict]:
    """One row per period prefix that fits in the run (the full run if none does).

    ``mean_rt_ms`` weights each interval's response time by its processed
    count, so it is a per-request mean.
    """
    T = len(metrics)
    prefixes = sorted({p for p in periods if p <= T}) or [T]
    rows = []
    for p in prefixes:
        head = metrics[:p]
        processed = np.array([m.processed for m in head], dtype=float)
        rt = np.array([m.avg_response_time for m in head])
        total = processed.sum()
        rows.append(
            {
                "period": p,
                "mean_rps": float(np.mean([m.rps for m in head])),
                "total_failures": int(sum(m.failed for m in head)),
                "mean_rt_ms": float((rt * processed).sum() / total) if total > 0 else 0.0,
            }
        )
    return rows


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def metrics_csv(result: LoopResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for m, action in zip(result.metrics, result.actions):
        writer.writerow([m.interval, m.arrived, m.processed, m.failed, _fmt(m.avg_response_time), _fmt(m.rps), action])
    return buf.getvalue()


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_HEADER)
    for r in rows:
        writer.writerow([r["period"], _fmt(r["mean_rps"]), r["total_failures"], _fmt(r["mean_rt_ms"])])
    return buf.getvalue()


def manifest(config: ExperimentConfig, digest: str) -> dict:
    return {
        "config_hash": digest,
        "seed": config.seed,
        "config": config.to_dict(),
        "versions": {
            "chainscale": __version__,
            "numpy": np.__version__,
            "scikit-learn": sklearn.__version__,
            "python": platform.python_version(),
        },
    }


def run_experiment(config: ExperimentConfig, output_dir=None) -> ExperimentResult:
    """Run one configured experiment and write ``metrics.csv``, ``summary.csv``
    and ``manifest.json`` (plus ``qtable.csv`` for the learned policy)."""
    config.validate()
    out = Path(output_dir) if output_dir is not None else config.resolved_output_dir()
    trace = build_trace(config)
    loop = run_policy_on(config, trace)
    summary = summarize(loop.metrics, config.periods)
    digest = config_hash(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(loop), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv(summary), encoding="utf-8")
    (out / "manifest.json").write_text(json.dumps(manifest(config, digest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if loop.q is not None:
        loop.q.save(out / "qtable.csv")
    return ExperimentResult(config, loop, summary, out, digest)


def _delta(value: float, reference: float) -> float:
    if reference == 0:
        return 0.0 if value == 0 else math.copysign(math.inf, value)
    return 100.0 * (value - reference) / reference


def comparison_rows(results: Sequence[ExperimentResult]) -> list[dict]:
    reference = {row["period"]: row for row in results[0].summary}
    rows = []
    for res in results:
        for row in res.summary:
            ref = reference[row["period"]]
            rows.append(
                {
                    "policy": res.config.policy,
                    **row,
                    "rps_delta_pct": _delta(row["mean_rps"], ref["mean_rps"]),
                    "failures_delta_pct": _delta(row["total_failures"], ref["total_failures"]),
                    "rt_delta_pct": _delta(row["mean_rt_ms"], ref["mean_rt_ms"]),
                }
            )
    return rows


def check_comparable(configs: Sequence[ExperimentConfig]) -> None:
    if len(configs) < 2:
        raise ConfigurationError("a comparison needs at least two configs", "configs")
    first = configs[0].environment()
    for i, cfg in enumerate(configs[1:], start=1):
        env = cfg.environment()
        for key in ENVIRONMENT_FIELDS:
            if env[key] != first[key]:
                raise ConfigurationError(f"config {i} differs from config 0 in {key}", key)
        if tuple(cfg.periods) != tuple(configs[0].periods):
            raise ConfigurationError(f"config {i} differs from config 0 in periods", "periods")


def compare(configs: Sequence[ExperimentConfig], output_dir=None) -> list[dict]:
    """Run each config into its own subdirectory and tabulate them against the first.

    Writes ``comparison.csv`` next to the per-run directories and returns its rows.
    """
    check_comparable(configs)
    for cfg in configs:
        cfg.validate()
    out = Path(output_dir) if output_dir is not None else configs[0].resolved_output_dir()
    results = [run_experiment(cfg, out / f"{i}-{cfg.policy}") for i, cfg in enumerate(configs)]
    rows = comparison_rows(results)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    columns = list(rows[0])
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(v) if isinstance(v, float) else v for v in (r[c] for c in columns)])
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(buf.getvalue(), encoding="utf-8")
    return rows
