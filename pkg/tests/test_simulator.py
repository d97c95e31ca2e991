import math
from collections import defaultdict

import pytest

from burstplan import synth
from burstplan.costs import CostModel, make_context
from burstplan.errors import GraphFormatError
from burstplan.planner import TrainingPlan, plan
from burstplan.simulator import (FG_TASK, InterferenceTable, OpRecord,
                                 SimConfig, SimTrace, TICKS_PER_US, Timeline,
                                 compile_timeline, default_interference,
                                 feedback_update, forced_plan,
                                 isolated_bg_iteration_us, latency_bucket,
                                 load_interference, op_class, pareto_sweep,
                                 run_two_phase, save_interference, simulate)

from conftest import chain_graph, flat_profile, linear_profile


def small_fg():
    g = chain_graph([linear_profile(40.0, knee=1), flat_profile(900.0)],
                    params=[2_000_000, 8_000_000],
                    acts=[100_000, 0], global_batch=8,
                    bandwidth=600e9, delay_us=5.0)
    return g


def burst_plan_2gpu(graph):
    """Hand-built plan: layer 0 on 2 GPUs, layer 1 on 1."""
    from burstplan.costs import LayerCost
    cm = CostModel(make_context(graph, 2))
    rows = (LayerCost(0, 2, cm.comp(0, 2), cm.sync(0, 2), 1.0),
            LayerCost(1, 1, cm.comp(1, 1), cm.sync(1, 1), 1.0))
    total = (cm.comp(0, 2) + cm.sync(0, 2) + cm.transfer(0, 1, 2, 1)
             + cm.comp(1, 1) + cm.sync(1, 1))
    return TrainingPlan(model=graph.name, total_gpus=2, amp_limit=math.inf,
                        global_batch=graph.global_batch,
                        assignments=((0, 2), (1, 1)),
                        predicted_iteration_us=total, layer_costs=rows,
                        fallback_layers=())


def events_by_kind(trace, kind):
    return [e for e in trace.events if e[4] == kind]


# ---------------------------------------------------------------------------
# Timeline compilation


def test_single_gpu_timeline_duration_is_compute_sum():
    g = chain_graph([flat_profile(120.0), flat_profile(300.0)], global_batch=8)
    p = plan(g, 1, 2.0)
    cfg = SimConfig()
    tl = compile_timeline(p, g, 1, None, cfg)
    _, m = simulate(tl, cfg, iterations=3)
    assert m.fg_iteration_time_us_mean == pytest.approx(420.0, abs=0.5)
    assert m.qos_degradation == pytest.approx(1.0, abs=0.01)


def test_burst_plan_leaves_gap_on_released_gpu():
    g = small_fg()
    p = burst_plan_2gpu(g)
    cfg = SimConfig()
    tl = compile_timeline(p, g, 2, None, cfg)
    trace, m = simulate(tl, cfg, iterations=3)
    cm = CostModel(make_context(g, 2))
    busy = {gpu: sum(e - s for s, e in ivals)
            for gpu, ivals in trace.busy.items()}
    # gpu 1 idles while layer 1 runs on gpu 0; the difference per iteration
    # is comp(L2, 1) plus its allreduce-free tail, within the transfer slack
    gap_us = (busy[0] - busy[1]) / TICKS_PER_US / 3
    expected = cm.comp(1, 1) + cm.sync(1, 1)
    assert gap_us == pytest.approx(expected, rel=0.05)


def test_timeline_op_counts_match_plan_multiplicities():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    tl = compile_timeline(p, g, 8, None, SimConfig())
    per_gpu_compute = defaultdict(int)
    for rec in tl.fg_ops:
        if rec.kind == "compute":
            for gpu in rec.participants:
                per_gpu_compute[gpu] += 1
    for lid, gg in p.assignments:
        if g.layer(lid).is_virtual:
            continue
    # every gpu < g of a layer sees exactly the layers assigned to it
    expected = defaultdict(int)
    for lid, gg in p.assignments:
        if g.layer(lid).is_virtual or tl is None:
            continue
        cm = CostModel(make_context(g, 8))
        if cm.comp(lid, gg) > 0:
            for gpu in range(gg):
                expected[gpu] += 1
    assert per_gpu_compute == expected


def test_plan_wider_than_cluster_rejected():
    g = small_fg()
    p = burst_plan_2gpu(g)
    with pytest.raises(GraphFormatError, match="GPUs"):
        compile_timeline(p, g, 1, None, SimConfig())


# ---------------------------------------------------------------------------
# Core execution invariants


def fg_only_setup(iterations=3):
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    cfg = SimConfig()
    tl = compile_timeline(p, g, 8, None, cfg)
    trace, m = simulate(tl, cfg, iterations=iterations)
    return g, p, cfg, tl, trace, m


def test_foreground_alone_matches_cost_model():
    _, p, _, tl, _, m = fg_only_setup()
    assert tl.predicted_fg_iteration_us == pytest.approx(
        p.predicted_iteration_us)
    assert m.qos_degradation == pytest.approx(1.0, abs=0.01)


def test_non_preemption_single_start_and_end():
    *_, trace, _ = fg_only_setup()
    starts = defaultdict(int)
    ends = defaultdict(int)
    for t, gpu, task, op, kind in trace.events:
        if kind == "start":
            starts[(gpu, op)] += 1
        elif kind == "end":
            ends[(gpu, op)] += 1
    assert starts == ends
    assert all(v == 1 for v in starts.values())


def test_busy_conservation_and_context_bound():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    cfg = SimConfig(bg_batch_size=8)
    bg = synth.small_bg_model()
    tl = compile_timeline(p, g, 8, bg, cfg)
    trace, _ = simulate(tl, cfg, iterations=3)
    for gpu, intervals in trace.busy.items():
        # conservation: busy interval lengths are exactly the effective
        # durations recorded for that gpu
        assert all(e > s for s, e in intervals)
        # concurrency never exceeds the context count
        points = sorted([(s, 1) for s, _ in intervals]
                        + [(e, -1) for _, e in intervals])
        depth = 0
        peak = 0
        for _, d in points:
            depth += d
            peak = max(peak, depth)
        assert peak <= cfg.contexts


def test_two_runs_identical_traces():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    bg = synth.small_bg_model()
    cfg = SimConfig(rng_seed=7, bg_batch_size=8)
    tl = compile_timeline(p, g, 8, bg, cfg)
    t1, _ = simulate(tl, cfg, iterations=3)
    t2, _ = simulate(tl, cfg, iterations=3)
    assert t1.lines() == t2.lines()


def test_different_seed_changes_background_phase():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    bg = synth.small_bg_model()
    tl1 = compile_timeline(p, g, 8, bg, SimConfig(rng_seed=1))
    tl2 = compile_timeline(p, g, 8, bg, SimConfig(rng_seed=2))
    t1, _ = simulate(tl1, SimConfig(rng_seed=1), iterations=2)
    t2, _ = simulate(tl2, SimConfig(rng_seed=2), iterations=2)
    assert t1.lines() != t2.lines()


def test_allreduce_starts_after_all_participants_backward():
    g, p, _, tl, trace, _ = fg_only_setup()
    gpus_of = {}
    for rec in tl.fg_ops:
        if rec.kind == "allreduce":
            name = rec.op_id.split(".allreduce.")[1]
            gpus_of[name] = set(rec.participants)
    comp_end = {}
    for t, gpu, task, op, kind in trace.events:
        if kind == "end" and ".compute." in op:
            name, it = op.split(".compute.")[1].split("#")
            comp_end[(name, int(it), gpu)] = t
    checked = 0
    for t, gpu, task, op, kind in trace.events:
        if kind == "start" and ".allreduce." in op:
            name, it = op.split(".allreduce.")[1].split("#")
            deps = [comp_end[(name, int(it), g2)] for g2 in gpus_of[name]
                    if (name, int(it), g2) in comp_end]
            assert deps, op
            assert t >= max(deps), op
            checked += 1
    assert checked > 0


def test_background_monotonicity():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    cfg = SimConfig(bg_batch_size=8)
    tl_alone = compile_timeline(p, g, 8, None, cfg)
    _, m_alone = simulate(tl_alone, cfg, iterations=3)
    bg = synth.small_bg_model()
    tl_col = compile_timeline(p, g, 8, bg, cfg)
    _, m_col = simulate(tl_col, cfg, iterations=3)
    assert m_col.bg_throughput_samples_per_s >= 0.0
    assert m_col.cluster_total_throughput_samples_per_s >= \
        m_alone.fg_throughput_samples_per_s * 0.99


def test_priority_scheduling_never_hurts_foreground():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    bg = synth.small_bg_model()
    for bg_batch in (4, 8):
        on = SimConfig(launch_pace_limit=2, priority_scheduling_enabled=True,
                       bg_batch_size=bg_batch)
        off = SimConfig(launch_pace_limit=2, priority_scheduling_enabled=False,
                        bg_batch_size=bg_batch)
        _, m_on = simulate(compile_timeline(p, g, 8, bg, on), on, iterations=3)
        _, m_off = simulate(compile_timeline(p, g, 8, bg, off), off,
                            iterations=3)
        assert m_on.qos_degradation <= m_off.qos_degradation + 1e-9


# ---------------------------------------------------------------------------
# Interference classes and table


def test_latency_buckets():
    assert latency_bucket(50.0) == "short"
    assert latency_bucket(500.0) == "medium"
    assert latency_bucket(5000.0) == "long"
    assert op_class("compute", 50.0) == "math.short"
    assert op_class("allreduce", 5000.0) == "mem.long"


def test_default_table_pairwise_structure():
    table = default_interference()
    # short high-priority ops suffer most under long low-priority ops
    assert table.factor("math.short", "math.long") > \
        table.factor("math.medium", "math.long") > \
        table.factor("math.long", "math.long")
    assert table.factor("math.long", "math.short") < 1.1
    # communication kernels are extra sensitive: more than doubles
    assert table.factor("mem.medium", "math.long") > 2.0
    # no pair speeds up under collocation
    assert all(f >= 1.0 for f in table.factors.values())


def test_interference_table_roundtrip(tmp_path):
    table = default_interference()
    path = tmp_path / "interference.json"
    save_interference(table, str(path))
    loaded = load_interference(str(path))
    assert loaded.factors == table.factors


def test_interference_table_rejects_speedups():
    with pytest.raises(GraphFormatError):
        InterferenceTable({("math.short", "math.long"): 0.5})


# ---------------------------------------------------------------------------
# Feedback loop


def make_trace(measurements):
    trace = SimTrace()
    for key, (isolated, measured) in measurements.items():
        trace.op_isolated[key] = isolated
        trace.op_durations[key] = measured
    return trace


def test_feedback_flags_above_threshold():
    cfg = SimConfig(slowdown_ban_threshold=2.0)
    trace = make_trace({"op_a": (100.0, [250.0]), "op_b": (100.0, [150.0])})
    assert feedback_update(trace, cfg) == frozenset({"op_a"})


def test_feedback_no_flags_below_threshold():
    cfg = SimConfig(slowdown_ban_threshold=2.0)
    trace = make_trace({"op_a": (100.0, [110.0]), "op_b": (100.0, [105.0])})
    assert feedback_update(trace, cfg) == frozenset()


def test_feedback_is_idempotent_union():
    cfg = SimConfig(slowdown_ban_threshold=2.0)
    trace = make_trace({"op_a": (100.0, [110.0])})
    flags = feedback_update(trace, cfg, current={"op_z"})
    assert flags == frozenset({"op_z"})
    assert feedback_update(trace, cfg, current=flags) == flags


def test_feedback_reaches_fixed_point_quickly():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    bg = synth.small_bg_model()
    cfg = SimConfig(launch_pace_limit=2, bg_batch_size=8)
    tl = compile_timeline(p, g, 8, bg, cfg)
    flags = frozenset()
    for round_no in range(5):
        trace, _ = simulate(tl, cfg, iterations=3, sensitive=flags)
        new_flags = feedback_update(trace, cfg, flags)
        if new_flags == flags:
            break
        flags = new_flags
    else:
        pytest.fail("sensitivity flags did not stabilize within 5 rounds")


def test_banned_allreduce_returns_near_isolation():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    bg = synth.small_bg_model()
    cfg = SimConfig(launch_pace_limit=2, bg_batch_size=8)
    tl = compile_timeline(p, g, 8, bg, cfg)
    trace1, _ = simulate(tl, cfg, iterations=4)
    flags = feedback_update(trace1, cfg)
    flagged_ars = [k for k in flags if ".allreduce." in k]
    assert flagged_ars, "expected at least one flagged allreduce"
    trace2, _ = simulate(tl, cfg, iterations=4, sensitive=flags)
    for key in flagged_ars:
        isolated = trace2.op_isolated[key]
        steady = trace2.op_durations[key][cfg.warmup_iterations:]
        mean = sum(steady) / len(steady)
        assert mean / isolated <= 1.10, key


# ---------------------------------------------------------------------------
# Scenario-level behavior


def test_run_two_phase_strictly_improves_under_collocation():
    g = synth.vgg_like(seed=0)
    p = plan(g, 8, 2.0)
    bg = synth.small_bg_model()
    cfg = SimConfig(launch_pace_limit=2, bg_batch_size=8)
    tl = compile_timeline(p, g, 8, bg, cfg)
    _, before = simulate(tl, cfg, iterations=4,
                         baseline_fg_iteration_us=tl.predicted_fg_iteration_us)
    _, after, flags = run_two_phase(
        tl, cfg, iterations=4,
        baseline_fg_iteration_us=tl.predicted_fg_iteration_us)
    assert flags
    assert after.qos_degradation < before.qos_degradation
    assert after.bg_throughput_samples_per_s > 0.0


def test_forced_plan_is_uniform_data_parallel():
    g = synth.vgg_like(seed=0)
    p = forced_plan(g, 8, 8)
    assert all(gg == 8 for lid, gg in p.assignments
               if not g.layer(lid).is_virtual)


def test_isolated_bg_iteration_floor():
    bg = synth.small_bg_model()
    cfg = SimConfig(bg_batch_size=8, graph_split_size=4)
    val = isolated_bg_iteration_us(bg, cfg)
    comp = sum(sum(v) for l in bg.layers if not l.is_virtual
               for b, v in [(8, bg.profiles[l.id].entries.get(8))])
    assert val >= cfg.launch_overhead_us


def test_pareto_sweep_partition_rows():
    g = synth.vgg_like(seed=0)
    bg = synth.small_bg_model()
    rows = pareto_sweep(g, 8, [2.0], [SimConfig(launch_pace_limit=2)],
                        bg_graph=bg, iterations=2, partition_sizes=(1, 8))
    parts = {r["label"]: r for r in rows if r["scenario"] == "partition"}
    # k=8: all gpus to the foreground, nothing left for background work
    assert parts["partition k=8"]["bg_throughput"] == 0.0
    # k=1: foreground on one gpu runs at single-gpu speed
    assert parts["partition k=1"]["fg_speedup"] == pytest.approx(1.0, abs=0.05)
    assert parts["partition k=1"]["bg_throughput"] > 0.0
    bp = [r for r in rows if r["scenario"] == "bp+col"]
    assert len(bp) == 1


def test_metrics_utilization_in_unit_range():
    *_, m = fg_only_setup()
    assert all(0.0 <= u <= 1.0 for u in m.per_gpu_utilization)


def test_sim_config_validation():
    with pytest.raises(GraphFormatError):
        SimConfig(slowdown_ban_threshold=1.0)
    with pytest.raises(GraphFormatError):
        SimConfig(graph_split_size=0)
    with pytest.raises(GraphFormatError):
        SimConfig(contexts=0)


def test_deadlock_detected_with_queue_snapshot():
    from burstplan.errors import DeadlockError
    # a barrier op naming a GPU outside the simulated cluster can never
    # start everywhere, so the run must end in deadlock detection
    rec = OpRecord(op_id="fg000.allreduce.bad", task_id=FG_TASK,
                   kind="allreduce", isolated_duration_us=10.0,
                   stream_priority="high", group_id=0,
                   participants=(0, 5), barrier=True)
    tl = Timeline(n_gpus=1, global_batch=8, fg_ops=(rec,), bg_ops=(),
                  bg_batch=0, predicted_fg_iteration_us=10.0)
    with pytest.raises(DeadlockError) as err:
        simulate(tl, SimConfig(), iterations=1)
    assert "gpu0" in err.value.snapshot
