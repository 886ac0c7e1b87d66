"""Command-line entry point: ``chainscale {run,compare,train,analyze}``."""

from __future__ import annotations

import argparse
import json
import sys

from .chains import build_call_graph, critical_chain, load_spans
from .errors import ChainscaleError, ConfigurationError
from .experiment import OUTPUT_ENV, POLICIES, ExperimentConfig, compare, run_experiment
from .rl import ExperiencePool, QTable, offline_train


def _agent_pair(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _add_config_flags(p: argparse.ArgumentParser, with_policy=True):
    p.add_argument("--config", help="JSON experiment config or a run manifest; flags override its fields")
    if with_policy:
        p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--trace-file", help="CSV trace (timestamp_s,request_rate,cpu_util,mem_util)")
    p.add_argument("--synth-pattern", choices=("constant", "sinusoid", "step", "replay"))
    p.add_argument("--synth-params", type=json.loads, help='JSON object, e.g. \'{"base": 100}\'')
    p.add_argument("--topology")
    p.add_argument("--machines")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--interval-seconds", type=float)
    p.add_argument("--output-dir", help=f"overridden by ${OUTPUT_ENV} when set")
    p.add_argument("--threshold", type=float, help="CPU threshold of the threshold baseline")
    p.add_argument("--agent", type=_agent_pair, action="append", default=[], metavar="KEY=VALUE",
                   help="learned-policy parameter, repeatable (e.g. episodes=20)")
    p.add_argument("--q-table", help="pretrained Q-table; skips training")
    p.add_argument("--periods", type=int, nargs="+")


def build_config(args, policy=None) -> ExperimentConfig:
    data = ExperimentConfig.from_file(args.config).to_dict() if args.config else {}
    if args.synth_pattern is not None:
        data["synth"] = {"pattern": args.synth_pattern, "params": args.synth_params or {}}
        data["trace_file"] = None
    elif args.synth_params is not None:
        if not data.get("synth"):
            raise ConfigurationError("--synth-params needs --synth-pattern", "synth")
        data["synth"] = {**data["synth"], "params": args.synth_params}
    if args.trace_file is not None:
        data["trace_file"] = args.trace_file
        data["synth"] = None
    for name in ("topology", "machines", "seed", "horizon", "interval_seconds", "output_dir", "threshold", "q_table", "periods"):
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    if args.agent:
        data["agent"] = {**data.get("agent", {}), **dict(args.agent)}
    chosen = policy or getattr(args, "policy", None)
    if chosen is not None:
        data["policy"] = chosen
    return ExperimentConfig.from_dict(data)


def _print_summary(rows, out=None):
    out = out or sys.stdout
    print(f"{'period':>8} {'mean_rps':>12} {'failures':>10} {'mean_rt_ms':>12}", file=out)
    for r in rows:
        print(f"{r['period']:>8} {r['mean_rps']:>12.3f} {r['total_failures']:>10} {r['mean_rt_ms']:>12.3f}", file=out)


def cmd_run(args) -> int:
    result = run_experiment(build_config(args))
    _print_summary(result.summary)
    print(f"wrote {result.output_dir} (config {result.config_hash[:12]})")
    return 0


def cmd_compare(args) -> int:
    if args.configs:
        configs = [ExperimentConfig.from_file(path) for path in args.configs]
    else:
        configs = [build_config(args, policy) for policy in args.policies]
    rows = compare(configs, args.output_dir)
    print(f"{'policy':>14} {'period':>7} {'rps':>10} {'failures':>10} {'rt_ms':>10} {'d_rps%':>8} {'d_fail%':>8} {'d_rt%':>8}")
    for r in rows:
        print(
            f"{r['policy']:>14} {r['period']:>7} {r['mean_rps']:>10.2f} {r['total_failures']:>10} "
            f"{r['mean_rt_ms']:>10.2f} {r['rps_delta_pct']:>8.2f} {r['failures_delta_pct']:>8.2f} {r['rt_delta_pct']:>8.2f}"
        )
    return 0


def cmd_train(args) -> int:
    pool = ExperiencePool.load(args.pool)
    if args.q_in:
        q = QTable.load(args.q_in)
    else:
        width = args.n_actions or 1 + max(max(t.action, t.next_action) for t in pool)
        q = QTable(width)
    offline_train(pool, q, args.alpha, args.gamma, args.epochs)
    q.save(args.out)
    print(f"trained on {len(pool)} transitions x {args.epochs} epochs; {len(q)} entries -> {args.out}")
    return 0


def cmd_analyze(args) -> int:
    graph = build_call_graph(load_spans(args.spans))
    chain = critical_chain(graph)
    print(f"services: {len(graph.nodes)}  calls: {len(graph.edges)}")
    print("critical chain: " + " -> ".join(chain.nodes))
    print(f"chain latency: {chain.total_latency:.3f} ms")
    for u, v in zip(chain.nodes, chain.nodes[1:]):
        print(f"  {u} -> {v}: {graph.weight(u, v):.3f} ms")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainscale", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and write metrics, summary and manifest")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several policies on one environment and tabulate deltas")
    p.add_argument("configs", nargs="*", help="config files (alternative to --policies)")
    p.add_argument("--policies", nargs="+", choices=POLICIES, default=["threshold", "chainsformer"])
    _add_config_flags(p, with_policy=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("train", help="offline Q-table training from an experience-pool file")
    p.add_argument("--pool", required=True)
    p.add_argument("--q-in", help="starting Q-table (default: empty)")
    p.add_argument("--n-actions", type=int, help="table width when starting empty")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="critical-chain report from a span CSV")
    p.add_argument("spans", help="CSV with trace_id,parent_service,service,processing_time_ms")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"chainscale: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ChainscaleError, OSError) as exc:
        print(f"chainscale {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
