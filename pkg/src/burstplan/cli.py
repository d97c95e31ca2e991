"""Command-line front end.

Subcommands:

    profile-gen   emit a synthetic model+profile file (and optionally a
                  sample-efficiency curve) from a parametric family
    plan          search a burst-parallel training plan for a model file
    analyze       weak/strong/batch-optimal time-to-accuracy sweeps
    simulate      run the cluster simulator for a dp / bp / bp+col scenario
    sweep         pareto sweep of collocation operating points against
                  static cluster partitions

Every command writes a ``<out>.manifest.json`` next to its primary output
recording the exact command, input hashes, parameters, tool version, and
wall time; re-running the recorded command reproduces the outputs byte for
byte.  All randomness flows from ``--seed`` (default 0).

Exit status: 0 on success, 2 for unreadable or malformed inputs, 3 for
infeasible planning instances, 4 for unsupported graph topologies, 5 for a
simulation deadlock.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time

from . import __version__
from .errors import (BurstplanError, CurveDomainError, DeadlockError,
                     GraphFormatError, InfeasiblePlanError,
                     UnsupportedTopologyError)
from .graph import load_graph, save_graph
from .planner import load_plan, plan, save_plan
from .scaling import (STRATEGIES, estimates_to_table, load_curve, save_curve,
                      speedup_curve)
from .simulator import (SimConfig, compile_timeline,
                        default_interference, forced_plan, load_interference,
                        pareto_sweep, pareto_to_table, run_two_phase,
                        simulate)
from . import synth

EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_TOPOLOGY = 4
EXIT_DEADLOCK = 5


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path: str, args: argparse.Namespace,
                    inputs: list[str], started: float) -> None:
    manifest = {
        "command": sys.argv,
        "tool_version": __version__,
        "inputs": {p: _sha256(p) for p in inputs},
        "parameters": {k: v for k, v in sorted(vars(args).items())
                       if k != "func"},
        "wall_time_s": round(time.time() - started, 6),
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def _parse_counts(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_profile_gen(args) -> int:
    started = time.time()
    params = {}
    if args.global_batch:
        params["global_batch"] = args.global_batch
    if args.bandwidth:
        params["bandwidth"] = args.bandwidth
    if args.delay is not None:
        params["delay_us"] = args.delay
    graph = synth.generate(args.family, seed=args.seed, **params)
    save_graph(graph, args.out)
    print(f"{args.family}: {sum(1 for l in graph.layers if not l.is_virtual)}"
          f" layers, {graph.total_params_bytes() // 4:,} parameters"
          f" -> {args.out}")
    if args.curve_out:
        save_curve(synth.make_curve(), args.curve_out)
        print(f"sample-efficiency curve -> {args.curve_out}")
    _write_manifest(args.out, args, [], started)
    return 0


def cmd_plan(args) -> int:
    started = time.time()
    graph = load_graph(args.graph)
    t0 = time.perf_counter()
    result = plan(graph, args.gpus, args.amp_limit,
                  global_batch=args.global_batch)
    search_s = time.perf_counter() - t0
    save_plan(result, args.out, graph)
    print(f"{'layer':24s} {'g':>5s} {'comp_us':>12s} {'sync_us':>10s} {'amp':>7s}")
    by_id = {c.layer_id: c for c in result.layer_costs}
    for lid, g in result.assignments:
        layer = graph.layer(lid)
        if layer.is_virtual:
            continue
        c = by_id[lid]
        print(f"{layer.name:24s} {g:5d} {c.comp_us:12.1f} {c.sync_us:10.1f}"
              f" {c.amp:7.2f}")
    print(f"predicted iteration: {result.predicted_iteration_us:.1f} us"
          f"  (amp limit {args.amp_limit:g}, search {search_s:.3f} s)")
    if result.fallback_layers:
        print(f"warning: amplification limit not met for layers"
              f" {list(result.fallback_layers)}")
    args.search_wall_s = round(search_s, 6)
    _write_manifest(args.out, args, [args.graph], started)
    return 0


def cmd_analyze(args) -> int:
    started = time.time()
    graph = load_graph(args.graph)
    curve = load_curve(args.curve)
    network = graph.network
    if args.bandwidth or args.delay is not None:
        from .graph import NetworkProfile
        network = NetworkProfile(
            args.bandwidth or network.per_gpu_bandwidth_bytes_per_sec,
            args.delay if args.delay is not None else network.propagation_delay_us)
    counts = _parse_counts(args.gpu_counts)
    strategies = list(STRATEGIES) if args.strategy == "all" else [args.strategy]
    rows = []
    for strategy in strategies:
        rows.extend(speedup_curve(strategy, graph, curve, counts, network,
                                  args.base_batch))
    table = estimates_to_table(rows)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    _write_manifest(args.out, args, [args.graph, args.curve], started)
    return 0


def _load_sim_config(args) -> SimConfig:
    base = {}
    if args.sim_config:
        with open(args.sim_config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    overrides = {
        "launch_pace_limit": args.pace_limit,
        "graph_split_size": args.graph_split,
        "bg_batch_size": args.bg_batch,
        "slowdown_ban_threshold": args.ban_threshold,
        "rng_seed": args.seed,
    }
    if getattr(args, "no_priority", False):
        overrides["priority_scheduling_enabled"] = False
    base.update({k: v for k, v in overrides.items() if v is not None})
    return SimConfig(**base)


def _scenario_timeline(args, config: SimConfig):
    graph = load_graph(args.graph)
    inputs = [args.graph]
    if args.scenario == "dp":
        the_plan = forced_plan(graph, args.gpus, args.gpus)
    elif args.plan:
        the_plan = load_plan(args.plan)
        inputs.append(args.plan)
    else:
        the_plan = plan(graph, args.gpus, args.amp_limit)
    bg_graph = None
    if args.scenario == "bp+col":
        if args.bg_graph:
            bg_graph = load_graph(args.bg_graph)
            inputs.append(args.bg_graph)
        else:
            bg_graph = synth.small_bg_model(seed=args.seed)
    timeline = compile_timeline(the_plan, graph, args.gpus, bg_graph, config)
    return timeline, the_plan, inputs


def cmd_simulate(args) -> int:
    started = time.time()
    config = _load_sim_config(args)
    interference = (load_interference(args.interference)
                    if args.interference else default_interference())
    timeline, the_plan, inputs = _scenario_timeline(args, config)
    if args.interference:
        inputs.append(args.interference)
    if args.scenario == "bp+col":
        trace, metrics, flags = run_two_phase(
            timeline, config, interference, args.iterations,
            baseline_fg_iteration_us=timeline.predicted_fg_iteration_us)
        if flags:
            print(f"slowdown feedback flagged {len(flags)} op(s)")
    else:
        trace, metrics = simulate(
            timeline, config, interference, args.iterations,
            baseline_fg_iteration_us=timeline.predicted_fg_iteration_us)
    trace.save(args.out + ".trace.tsv")
    metrics.save(args.out + ".metrics.json")
    print(f"scenario {args.scenario}: fg iteration"
          f" {metrics.fg_iteration_time_us_mean:.1f} us (p99"
          f" {metrics.fg_iteration_time_us_p99:.1f}), QoS degradation"
          f" {metrics.qos_degradation:.3f}")
    print(f"throughput: fg {metrics.fg_throughput_samples_per_s:.1f}"
          f" + bg {metrics.bg_throughput_samples_per_s:.1f}"
          f" = {metrics.cluster_total_throughput_samples_per_s:.1f} samples/s")
    _write_manifest(args.out, args, inputs, started)
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    graph = load_graph(args.graph)
    bg_graph = (load_graph(args.bg_graph) if args.bg_graph
                else synth.small_bg_model(seed=args.seed))
    configs = []
    for pace in _parse_counts(args.pace_limits):
        for bgb in _parse_counts(args.bg_batches):
            configs.append(SimConfig(launch_pace_limit=pace, bg_batch_size=bgb,
                                     graph_split_size=args.graph_split,
                                     rng_seed=args.seed))
    rows = pareto_sweep(graph, args.gpus, _parse_floats(args.amp_limits),
                        configs, bg_graph=bg_graph,
                        iterations=args.iterations,
                        partition_sizes=_parse_counts(args.partitions))
    table = pareto_to_table(rows)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    inputs = [args.graph] + ([args.bg_graph] if args.bg_graph else [])
    _write_manifest(args.out, args, inputs, started)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="burstplan",
                                 description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("profile-gen", help="emit synthetic model+profile files")
    g.add_argument("--family", required=True, choices=synth.FAMILIES)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--global-batch", type=int, default=None)
    g.add_argument("--bandwidth", type=float, default=None,
                   help="per-GPU bandwidth, bytes/sec")
    g.add_argument("--delay", type=float, default=None,
                   help="propagation delay, us")
    g.add_argument("--curve-out", default=None,
                   help="also write the default sample-efficiency curve here")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_profile_gen)

    p = sub.add_parser("plan", help="search a burst-parallel training plan")
    p.add_argument("--graph", required=True)
    p.add_argument("--gpus", type=int, required=True)
    p.add_argument("--amp-limit", type=float, default=2.0)
    p.add_argument("--global-batch", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    a = sub.add_parser("analyze", help="scaling strategy time-to-accuracy sweep")
    a.add_argument("--graph", required=True)
    a.add_argument("--curve", required=True)
    a.add_argument("--strategy", default="all",
                   choices=list(STRATEGIES) + ["all"])
    a.add_argument("--gpu-counts", default="1,2,4,8,16,32,64,128,256")
    a.add_argument("--base-batch", type=int, default=256)
    a.add_argument("--bandwidth", type=float, default=None)
    a.add_argument("--delay", type=float, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="simulate a collocation scenario")
    s.add_argument("--graph", required=True)
    s.add_argument("--plan", default=None,
                   help="plan file (bp/bp+col; computed if omitted)")
    s.add_argument("--scenario", default="bp+col",
                   choices=["dp", "bp", "bp+col"])
    s.add_argument("--gpus", type=int, default=8)
    s.add_argument("--amp-limit", type=float, default=2.0)
    s.add_argument("--iterations", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bg-graph", default=None,
                   help="background model file (default: built-in small job)")
    s.add_argument("--sim-config", default=None,
                   help="JSON file of simulator settings; flags override it")
    s.add_argument("--pace-limit", type=int, default=None)
    s.add_argument("--graph-split", type=int, default=None)
    s.add_argument("--bg-batch", type=int, default=None)
    s.add_argument("--ban-threshold", type=float, default=None)
    s.add_argument("--no-priority", action="store_true",
                   help="disable priority scheduling at context assignment")
    s.add_argument("--interference", default=None,
                   help="interference table file (default: built-in)")
    s.add_argument("--out", required=True,
                   help="output prefix for .trace.tsv and .metrics.json")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="pareto sweep vs cluster partitions")
    w.add_argument("--graph", required=True)
    w.add_argument("--gpus", type=int, default=8)
    w.add_argument("--amp-limits", default="1.5,2,3")
    w.add_argument("--pace-limits", default="2")
    w.add_argument("--bg-batches", default="4,8")
    w.add_argument("--graph-split", type=int, default=32)
    w.add_argument("--partitions", default="1,2,4,8")
    w.add_argument("--iterations", type=int, default=4)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--bg-graph", default=None)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UnsupportedTopologyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOPOLOGY
    except InfeasiblePlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DeadlockError as exc:
        print(f"error: {exc}\n{exc.snapshot}", file=sys.stderr)
        return EXIT_DEADLOCK
    except (GraphFormatError, CurveDomainError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BurstplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
