"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with the measured value next to its threshold.

Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import random
import time
from collections import defaultdict

import pytest

from burstplan import synth
from burstplan.errors import InfeasiblePlanError
from burstplan.graph import NetworkProfile
from burstplan.planner import brute_force_plan, plan
from burstplan.scaling import estimate
from burstplan.simulator import (SimConfig, compile_timeline, forced_plan,
                                 pareto_sweep, run_two_phase, simulate)

from conftest import random_chain_graph, random_sp_graph


def report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


AMP_CHOICES = (1.0, 1.1, 1.3, 1.5, 2.0, 4.0, 16.0, 1e9)


def test_criterion_1_planner_oracle_equivalence_100_chains():
    rng = random.Random(1001)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        g = random_chain_graph(rng, max_layers=6)
        amp = rng.choice(AMP_CHOICES)
        p = plan(g, 4, amp, candidates=(1, 2, 4))
        bf = brute_force_plan(g, 4, amp, candidates=(1, 2, 4))
        if p.predicted_iteration_us != bf.predicted_iteration_us:
            mismatches += 1
    elapsed = time.perf_counter() - t0
    report(1, mismatches == 0 and elapsed < 60.0,
           f"100 random chains, {mismatches} mismatches,"
           f" {elapsed:.1f} s (< 60 s)")


def test_criterion_2_multichain_oracle_equivalence_50_dags():
    rng = random.Random(2002)
    mismatches = 0
    infeasible = 0
    for i in range(50):
        g = random_sp_graph(rng, max_layers=6, nested=(i % 2 == 0))
        amp = rng.choice(AMP_CHOICES)
        p = plan(g, 4, amp, candidates=(1, 2, 4))
        try:
            bf = brute_force_plan(g, 4, amp, candidates=(1, 2, 4))
        except InfeasiblePlanError:
            infeasible += 1
            if not p.fallback_layers:
                mismatches += 1
            continue
        if p.predicted_iteration_us != bf.predicted_iteration_us:
            mismatches += 1
    report(2, mismatches == 0,
           f"50 random series-parallel DAGs, {mismatches} mismatches"
           f" ({infeasible} infeasible handled by fallback)")


def test_criterion_3_amplification_soundness_1000_instances():
    rng = random.Random(3003)
    violations = 0
    fallback_errors = 0
    for i in range(1000):
        if i % 2 == 0:
            g = random_chain_graph(rng, max_layers=6)
        else:
            g = random_sp_graph(rng, max_layers=6, nested=(i % 4 == 1))
        amp = rng.choice(AMP_CHOICES)
        p = plan(g, 4, amp, candidates=(1, 2, 4))
        for cost in p.layer_costs:
            if cost.layer_id not in p.fallback_layers and cost.amp > amp:
                violations += 1
        if i % 5 == 0:  # oracle cross-check on a fifth of the instances
            try:
                brute_force_plan(g, 4, amp, candidates=(1, 2, 4))
                oracle_feasible = True
            except InfeasiblePlanError:
                oracle_feasible = False
            if oracle_feasible and p.fallback_layers:
                fallback_errors += 1
    report(3, violations == 0 and fallback_errors == 0,
           f"1000 random instances: {violations} amp violations outside"
           f" fallback, {fallback_errors} spurious fallbacks")


def test_criterion_4_planner_scalability_inception_1024():
    g = synth.inception_like(seed=0)
    t0 = time.perf_counter()
    plan(g, 8, 2.0)
    t8 = time.perf_counter() - t0
    t0 = time.perf_counter()
    plan(g, 1024, 2.0)
    t1024 = time.perf_counter() - t0
    growth = t1024 / t8
    report(4, t1024 < 30.0 and growth < 50.0,
           f"inception_like search: {t1024:.2f} s at 1024 GPUs (< 30 s),"
           f" growth 8->1024 = {growth:.1f}x (< 50x)")


def test_criterion_5_scaling_analysis_structure():
    t0 = time.perf_counter()
    g = synth.vgg_like(seed=0)
    curve = synth.make_curve()
    base = 256
    counts = (1, 2, 4, 8, 16, 32, 64, 128, 256)
    default_net = g.network
    fast = NetworkProfile(125e9, 10.0)    # 1 Tbps
    slow = NetworkProfile(1.25e9, 10.0)   # 10 Gbps

    dominance = True
    for net in (default_net, fast, slow):
        for n in counts:
            es = {s: estimate(s, g, curve, n, net, base)
                  for s in ("weak", "strong", "batch_optimal")}
            if es["batch_optimal"].time_to_accuracy_s > min(
                    es["weak"].time_to_accuracy_s,
                    es["strong"].time_to_accuracy_s):
                dominance = False

    w64 = estimate("weak", g, curve, 64, fast, base).speedup_vs_1gpu
    w256 = estimate("weak", g, curve, 256, fast, base).speedup_vs_1gpu
    plateau = w256 / w64

    ranking = all(
        estimate("strong", g, curve, n, fast, base).speedup_vs_1gpu
        > estimate("weak", g, curve, n, fast, base).speedup_vs_1gpu
        for n in (64, 128, 256))
    reversal = all(
        estimate("weak", g, curve, n, slow, base).speedup_vs_1gpu
        > estimate("strong", g, curve, n, slow, base).speedup_vs_1gpu
        for n in (64, 128, 256))

    per_gpu = [estimate("batch_optimal", g, curve, n, default_net, base)
               .per_gpu_batch for n in counts]
    monotone = all(a >= b for a, b in zip(per_gpu, per_gpu[1:]))

    elapsed = time.perf_counter() - t0
    report(5, dominance and plateau < 1.2 and ranking and reversal
           and monotone and elapsed < 10.0,
           f"(a) dominance={dominance} (b) plateau={plateau:.3f} (< 1.2)"
           f" (c) 1Tbps ranking={ranking}, 10Gbps reversal={reversal}"
           f" (d) per-GPU batch nonincreasing={monotone};"
           f" {elapsed:.1f} s (< 10 s)")


def _collect_workloads():
    """The simulated workloads the conservation criterion sweeps."""
    out = []
    vgg = synth.vgg_like(seed=0)
    p = plan(vgg, 8, 2.0)
    bg = synth.small_bg_model()
    cfg = SimConfig(launch_pace_limit=2, bg_batch_size=8, rng_seed=5)
    out.append(("vgg bp+col", compile_timeline(p, vgg, 8, bg, cfg), cfg))
    cfg_dp = SimConfig(rng_seed=5)
    out.append(("vgg dp", compile_timeline(forced_plan(vgg, 8, 8), vgg, 8,
                                           None, cfg_dp), cfg_dp))
    fg, bgh = _heavy_workload()
    pfg = plan(fg, 8, 4.0)
    cfg_h = SimConfig(launch_pace_limit=0, priority_scheduling_enabled=False,
                      bg_batch_size=8, graph_split_size=8, rng_seed=5)
    out.append(("heavy unprotected",
                compile_timeline(pfg, fg, 8, bgh, cfg_h), cfg_h))
    return out


def test_criterion_6_simulator_conservation_and_determinism():
    ok = True
    details = []
    for name, timeline, cfg in _collect_workloads():
        trace, metrics = simulate(timeline, cfg, iterations=3)
        trace2, _ = simulate(timeline, cfg, iterations=3)
        deterministic = trace.lines() == trace2.lines()

        starts = {}
        intervals = defaultdict(list)
        preempted = False
        for t, gpu, task, op, kind in trace.events:
            if kind == "start":
                if (gpu, op) in starts:
                    preempted = True
                starts[(gpu, op)] = t
            elif kind == "end":
                if (gpu, op) not in starts:
                    preempted = True
                    continue
                intervals[gpu].append((starts.pop((gpu, op)), t))
        conserved = True
        for gpu, ivals in trace.busy.items():
            event_sum = sum(e - s for s, e in intervals[gpu])
            busy_sum = sum(e - s for s, e in ivals)
            if event_sum != busy_sum:
                conserved = False
        if not (deterministic and conserved and not preempted):
            ok = False
        details.append(f"{name}: deterministic={deterministic}"
                       f" conserved={conserved} preempted={preempted}")
    report(6, ok, "; ".join(details))


def _heavy_workload():
    """Foreground dominated by long kernels with short collectives; the
    background issues medium kernels in multi-op groups."""
    fg = synth.custom(seed=2, n_layers=10, per_sample_us=120.0, knee=1,
                      params_per_layer=1_000_000, act_bytes=200_000,
                      global_batch=32)
    bg = synth.custom(seed=3, n_layers=16, per_sample_us=12.0, knee=8,
                      params_per_layer=0, act_bytes=0, global_batch=8)
    return fg, bg


def test_criterion_7_multiplexing_mechanism_reproduction():
    t0 = time.perf_counter()
    fg, bg = _heavy_workload()
    p = plan(fg, 8, 4.0)

    unprotected = SimConfig(launch_pace_limit=0,
                            priority_scheduling_enabled=False,
                            bg_batch_size=8, graph_split_size=8)
    tl = compile_timeline(p, fg, 8, bg, unprotected)
    _, m_off = simulate(tl, unprotected, iterations=4)

    protected = SimConfig(launch_pace_limit=2,
                          priority_scheduling_enabled=True,
                          bg_batch_size=8, graph_split_size=8)
    tl_on = compile_timeline(p, fg, 8, bg, protected)
    _, m_on = simulate(tl_on, protected, iterations=4)

    _, m_fb, flags = run_two_phase(tl_on, protected, iterations=4)

    elapsed = time.perf_counter() - t0
    ok = (m_off.qos_degradation >= 2.0
          and m_on.qos_degradation <= 1.25
          and m_fb.qos_degradation < m_on.qos_degradation
          and elapsed < 60.0)
    report(7, ok,
           f"degradation: unbounded+no-priority {m_off.qos_degradation:.2f}x"
           f" (>= 2.0), pacing2+priority {m_on.qos_degradation:.3f}x"
           f" (<= 1.25), +feedback {m_fb.qos_degradation:.3f}x (strictly"
           f" lower, {len(flags)} op(s) banned); {elapsed:.1f} s (< 60 s)")


def test_criterion_8_cluster_throughput_direction():
    vgg = synth.vgg_like(seed=0)
    p = plan(vgg, 8, 2.0)
    bg = synth.small_bg_model()

    cfg = SimConfig(launch_pace_limit=2, bg_batch_size=8)
    _, m_bp = simulate(compile_timeline(p, vgg, 8, None, cfg), cfg,
                       iterations=4)
    tl_col = compile_timeline(p, vgg, 8, bg, cfg)
    _, m_col, _ = run_two_phase(tl_col, cfg, iterations=4)
    _, m_dp = simulate(compile_timeline(forced_plan(vgg, 8, 8), vgg, 8,
                                        None, cfg), cfg, iterations=4)

    ratio = (m_col.cluster_total_throughput_samples_per_s
             / m_dp.cluster_total_throughput_samples_per_s)
    inflation = (m_col.fg_iteration_time_us_mean
                 / m_bp.fg_iteration_time_us_mean)
    report(8, ratio >= 1.2 and inflation <= 1.18,
           f"BP+Col cluster throughput = {ratio:.2f}x DP (>= 1.2x),"
           f" foreground iteration inflation = {inflation:.3f}x over BP"
           f" (<= 1.18x)")


def test_criterion_9_pareto_dominance():
    vgg = synth.vgg_like(seed=0)
    bg = synth.small_bg_model()
    configs = [SimConfig(launch_pace_limit=2, bg_batch_size=b)
               for b in (4, 8)]
    rows = pareto_sweep(vgg, 8, [1.5, 2.0, 3.0], configs, bg_graph=bg,
                        iterations=3, partition_sizes=(1, 2, 4, 8))
    bp = [r for r in rows if r["scenario"] == "bp+col"]
    parts = [r for r in rows if r["scenario"] == "partition"]
    dominating = [
        (r["label"], q["label"]) for r in bp for q in parts
        if r["fg_speedup"] > q["fg_speedup"]
        and r["cluster_throughput"] >= q["cluster_throughput"]
    ]
    report(9, bool(dominating),
           f"{len(dominating)} BP+Col point(s) dominate a Cluster Partition"
           f" point (e.g. {dominating[0] if dominating else 'none'})")
