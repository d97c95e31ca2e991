"""Deterministic discrete-event simulator of a multi-GPU node running a
burst-parallel foreground job collocated with per-GPU background jobs.

Device model, per GPU:

* a shared FIFO transmission queue that launch groups from every task pass
  through in arrival order regardless of priority (the head-of-line blocking
  pathology priorities alone cannot fix);
* one in-order stream per task accepting at most ``stream_depth`` decoded
  groups whose ops have not all issued yet; ops within a stream execute
  strictly serially, so a large low-priority group drains at execution
  speed and, while its stream is full, parks every later launch in the
  shared FIFO behind it;
* a fixed number of execution contexts; a free context picks among stream
  heads (highest priority first when priority scheduling is on, otherwise
  delivery order) and runs the op to completion, never preempting it.

Hosts submit launch groups per (task, gpu) stream, paying a fixed dispatch
latency per group and keeping at most ``launch_pace_limit`` groups
outstanding (0 = unbounded).  Grouping ops amortizes dispatch cost; pacing
shortens the shared FIFO, which is exactly why it protects the foreground.

While a high-priority op shares a GPU with running low-priority ops its
remaining work progresses slower by the interference table's factor for the
(high class, low class) pair; low-priority ops are never stretched (they
contend by occupying a context).  Collectives (transfer, allreduce) occupy
their context from the start but make no progress until every participant
has started, so peer delay shows up in their measured duration, which is
what the slowdown feedback loop keys on.

All times are integer ticks of 0.1 us; durations round up.  A simulation is
a pure function of (timeline, config, interference table, iterations,
sensitive set), so identical seeds give byte-identical traces.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .costs import CostModel, make_context
from .errors import DeadlockError, GraphFormatError
from .graph import CompGraph, ceil_div, comp_at_batch
from .planner import TrainingPlan
from .scaling import iteration_time

TICKS_PER_US = 10

FG_TASK = "fg"
HIGH = "high"
LOW = "low"


def us_to_ticks(us: float) -> int:
    return max(0, math.ceil(us * TICKS_PER_US))


def ticks_to_us(ticks: int) -> float:
    return ticks / TICKS_PER_US


# ---------------------------------------------------------------------------
# Configuration and interference


@dataclass(frozen=True)
class SimConfig:
    launch_pace_limit: int = 2          # outstanding groups per task (0 = unbounded)
    graph_split_size: int = 32          # max ops per low-priority launch group
    bg_batch_size: int = 8
    slowdown_ban_threshold: float = 1.5
    priority_scheduling_enabled: bool = True
    rng_seed: int = 0
    contexts: int = 2
    stream_depth: int = 2
    launch_overhead_us: float = 5.0
    warmup_iterations: int = 1

    def __post_init__(self):
        if self.slowdown_ban_threshold <= 1:
            raise GraphFormatError("slowdown_ban_threshold must be > 1")
        if self.graph_split_size < 1:
            raise GraphFormatError("graph_split_size must be >= 1")
        if self.launch_pace_limit < 0 or self.contexts < 1 or self.stream_depth < 1:
            raise GraphFormatError("invalid simulator configuration")


INTENSITIES = ("math", "mem")
LATENCIES = ("short", "medium", "long")


def latency_bucket(duration_us: float) -> str:
    if duration_us < 100.0:
        return "short"
    if duration_us < 1000.0:
        return "medium"
    return "long"


def op_class(kind: str, duration_us: float) -> str:
    intensity = "math" if kind == "compute" else "mem"
    return f"{intensity}.{latency_bucket(duration_us)}"


@dataclass(frozen=True)
class InterferenceTable:
    """Multiplicative slowdown for a high-priority op overlapping a
    low-priority op, per (high class, low class) pair."""

    factors: dict  # (high_class, low_class) -> float >= 1

    def __post_init__(self):
        for pair, f in self.factors.items():
            if f < 1.0:
                raise GraphFormatError(f"interference factor {pair} below 1")

    def factor(self, high_class: str, low_class: str) -> float:
        return self.factors.get((high_class, low_class), 1.0)


_BASE_SLOWDOWN = {
    # (high latency, low latency): stream priorities are largely effective
    # except for short high-priority ops under long-running low-priority
    # ops, where the non-preemptive device scheduler cannot help.
    ("short", "short"): 1.1, ("short", "medium"): 1.8, ("short", "long"): 3.2,
    ("medium", "short"): 1.05, ("medium", "medium"): 1.3, ("medium", "long"): 1.8,
    ("long", "short"): 1.02, ("long", "medium"): 1.08, ("long", "long"): 1.25,
}


def default_interference() -> InterferenceTable:
    """Synthetic pairwise table: communication kernels are extra sensitive,
    so an all-reduce under a long collocated kernel more than doubles."""
    factors = {}
    for hi_int in INTENSITIES:
        for hi_lat in LATENCIES:
            for lo_int in INTENSITIES:
                for lo_lat in LATENCIES:
                    f = _BASE_SLOWDOWN[(hi_lat, lo_lat)]
                    if hi_int == "mem":
                        f = round(f * 1.35, 4)
                    factors[(f"{hi_int}.{hi_lat}", f"{lo_int}.{lo_lat}")] = f
    return InterferenceTable(factors)


def save_interference(table: InterferenceTable, path: str) -> None:
    labels = sorted({c for pair in table.factors for c in pair})
    matrix = [[table.factor(h, l) for l in labels] for h in labels]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"labels": labels, "matrix": matrix}, fh, indent=1)
        fh.write("\n")


def load_interference(path: str) -> InterferenceTable:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    labels = doc["labels"]
    factors = {}
    for i, h in enumerate(labels):
        for j, l in enumerate(labels):
            factors[(h, l)] = float(doc["matrix"][i][j])
    return InterferenceTable(factors)


# ---------------------------------------------------------------------------
# Timeline compilation


@dataclass(frozen=True)
class OpRecord:
    """One operation in a task's per-iteration program."""

    op_id: str                      # stable key across iterations
    task_id: str
    kind: str                       # compute | allreduce | transfer
    isolated_duration_us: float
    stream_priority: str            # high | low
    group_id: int
    participants: tuple[int, ...]   # gpu ids; compute runs per-gpu unsynchronized
    barrier: bool                   # progress waits for all participants
    payload_bytes: int = 0
    sensitive: bool = False

    @property
    def dur_ticks(self) -> int:
        return us_to_ticks(self.isolated_duration_us)

    @property
    def clazz(self) -> str:
        return op_class(self.kind, self.isolated_duration_us)


@dataclass(frozen=True)
class Timeline:
    """Per-iteration foreground program plus the background template."""

    n_gpus: int
    global_batch: int
    fg_ops: tuple[OpRecord, ...]          # one iteration, in issue order
    bg_ops: tuple[OpRecord, ...]          # one background iteration (per gpu)
    bg_batch: int
    predicted_fg_iteration_us: float


def compile_timeline(plan: TrainingPlan, graph: CompGraph, n_gpus: int,
                     bg_graph: Optional[CompGraph] = None,
                     config: Optional[SimConfig] = None) -> Timeline:
    """Expand a training plan into per-GPU op sequences for one iteration.

    Layers run in plan order on GPUs [0, g); sample redistribution between
    differently-scaled neighbors becomes a transfer barrier over the union
    of both GPU sets; gradient synchronization becomes one allreduce per
    parameterized layer, in reverse layer order after the compute sequence.
    Branch interiors execute serialized in plan order (concurrent-branch
    overlap is a planner-side cost notion, priced conservatively here).
    """
    config = config or SimConfig()
    peak = plan.max_gpus_used()
    if peak > n_gpus:
        raise GraphFormatError(
            f"plan uses {peak} GPUs but only {n_gpus} are simulated")
    ctx = make_context(graph, max(peak, 1),
                       candidates=sorted({g for _, g in plan.assignments}
                                         | {1}))
    cm = CostModel(ctx)

    fg: list[OpRecord] = []
    group_seq = 0
    prev: Optional[tuple[int, int]] = None
    seq = 0
    predicted = 0.0
    for lid, g in plan.assignments:
        layer = graph.layer(lid)
        if layer.is_virtual:
            continue
        if prev is not None:
            tr = cm.transfer(prev[0], lid, prev[1], g)
            if tr > 0:
                group_seq += 1
                fg.append(OpRecord(
                    op_id=f"fg{seq:03d}.transfer.{layer.name}", task_id=FG_TASK,
                    kind="transfer", isolated_duration_us=tr,
                    stream_priority=HIGH, group_id=group_seq,
                    participants=tuple(range(max(prev[1], g))), barrier=True,
                    payload_bytes=0))
                seq += 1
            predicted += tr
        comp = cm.comp(lid, g)
        if comp > 0:
            fg.append(OpRecord(
                op_id=f"fg{seq:03d}.compute.{layer.name}", task_id=FG_TASK,
                kind="compute", isolated_duration_us=comp,
                stream_priority=HIGH, group_id=group_seq,
                participants=tuple(range(g)), barrier=False))
            seq += 1
        predicted += comp
        prev = (lid, g)
    for lid, g in reversed(plan.assignments):
        layer = graph.layer(lid)
        if layer.is_virtual or layer.params_bytes == 0:
            continue
        sync = cm.sync(lid, g)
        if sync > 0:
            group_seq += 1
            fg.append(OpRecord(
                op_id=f"fg{seq:03d}.allreduce.{layer.name}", task_id=FG_TASK,
                kind="allreduce", isolated_duration_us=sync,
                stream_priority=HIGH, group_id=group_seq,
                participants=tuple(range(g)), barrier=True,
                payload_bytes=layer.params_bytes))
            seq += 1
        predicted += sync

    bg: list[OpRecord] = []
    bg_batch = config.bg_batch_size
    if bg_graph is not None:
        for i, layer in enumerate(bg_graph.layers):
            if layer.is_virtual:
                continue
            dur = comp_at_batch(bg_graph, layer.id, bg_batch)
            if dur <= 0:
                continue
            bg.append(OpRecord(
                op_id=f"bg{i:03d}.compute.{layer.name}", task_id="bg",
                kind="compute", isolated_duration_us=dur,
                stream_priority=LOW,
                group_id=i // config.graph_split_size,
                participants=(), barrier=False))

    return Timeline(n_gpus=n_gpus, global_batch=graph.global_batch,
                    fg_ops=tuple(fg), bg_ops=tuple(bg), bg_batch=bg_batch,
                    predicted_fg_iteration_us=predicted)


# ---------------------------------------------------------------------------
# Trace and metrics


@dataclass
class SimTrace:
    events: list = field(default_factory=list)     # (tick, gpu, task, op, kind)
    op_durations: dict = field(default_factory=dict)  # key -> [measured us]
    op_isolated: dict = field(default_factory=dict)   # key -> isolated us
    iteration_ticks: list = field(default_factory=list)  # fg completion ticks
    bg_completions: list = field(default_factory=list)   # (tick, gpu)
    busy: dict = field(default_factory=dict)       # gpu -> [(start, end)]
    stop_tick: int = 0

    def lines(self) -> list[str]:
        out = ["tick\tgpu\ttask\top\tevent"]
        out.extend(f"{t}\t{g}\t{task}\t{op}\t{kind}"
                   for t, g, task, op, kind in self.events)
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.lines()) + "\n")


@dataclass(frozen=True)
class SimMetrics:
    fg_iteration_time_us_mean: float
    fg_iteration_time_us_p99: float
    fg_throughput_samples_per_s: float
    bg_throughput_samples_per_s: float
    cluster_total_throughput_samples_per_s: float
    per_gpu_utilization: tuple[float, ...]
    qos_degradation: float

    def to_dict(self) -> dict:
        return {
            "fg_iteration_time_us_mean": self.fg_iteration_time_us_mean,
            "fg_iteration_time_us_p99": self.fg_iteration_time_us_p99,
            "fg_throughput_samples_per_s": self.fg_throughput_samples_per_s,
            "bg_throughput_samples_per_s": self.bg_throughput_samples_per_s,
            "cluster_total_throughput_samples_per_s":
                self.cluster_total_throughput_samples_per_s,
            "per_gpu_utilization": list(self.per_gpu_utilization),
            "qos_degradation": self.qos_degradation,
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Simulation core


class _Run:
    __slots__ = ("op", "gpu", "state", "work", "rate", "last_t", "gen",
                 "start_t", "end_t", "group", "seq")

    def __init__(self, op, gpu, group):
        self.op = op
        self.gpu = gpu
        self.group = group
        self.state = "pending"         # pending -> ready -> running -> done
        self.work = Fraction(op.rec.dur_ticks)
        self.rate = Fraction(0)
        self.last_t = 0
        self.gen = 0
        self.start_t = -1
        self.end_t = -1
        self.seq = -1                  # delivery order stamp


class _Op:
    """One logical op instance (template op x iteration)."""

    __slots__ = ("rec", "iteration", "inst_id", "runs", "started", "done",
                 "deps_left", "dependents", "sensitive")

    def __init__(self, rec: OpRecord, iteration: int, inst_id: str,
                 sensitive: bool):
        self.rec = rec
        self.iteration = iteration
        self.inst_id = inst_id
        self.runs: list[_Run] = []
        self.started = 0
        self.done = 0
        self.deps_left = 0
        self.dependents: list[_Op] = []
        self.sensitive = sensitive

    @property
    def complete(self) -> bool:
        return self.done == len(self.runs)


class _Group:
    __slots__ = ("task", "gpu", "runs", "unstarted", "remaining", "gid",
                 "closes_iteration", "iteration")

    def __init__(self, task, gpu, runs, gid, iteration=0):
        self.task = task
        self.gpu = gpu
        self.runs = runs
        self.unstarted = len(runs)
        self.remaining = len(runs)
        self.gid = gid
        self.closes_iteration = False
        self.iteration = iteration


class GpuSim:
    """Per-GPU device state: the shared transmission FIFO that launch groups
    from every task pass through, per-task in-order device streams, and the
    execution contexts.  Per-task outstanding-launch counters live with the
    host streams; the busy timeline accumulates in the trace."""

    __slots__ = ("gpu_id", "contexts", "device_queue", "streams",
                 "stream_groups", "stream_busy", "running", "sensitive_active")

    def __init__(self, gpu_id: int, contexts: int):
        self.gpu_id = gpu_id
        self.contexts = contexts
        self.device_queue: deque = deque()   # shared FIFO of launch groups
        self.streams: dict = {}              # task -> deque of ready runs
        self.stream_groups: dict = {}        # task -> decoded, not fully issued
        self.stream_busy: dict = {}          # task -> an op is executing
        self.running: list = []              # runs holding a context
        self.sensitive_active = 0


class _HostStream:
    """Host-side submission state for one (task, gpu) pair."""

    __slots__ = ("task", "gpu", "groups", "next_group", "outstanding",
                 "host_free", "submitting", "bg_cycle")

    def __init__(self, task, gpu, host_free=0):
        self.task = task
        self.gpu = gpu
        self.groups: list[_Group] = []
        self.next_group = 0
        self.outstanding = 0
        self.host_free = host_free
        self.submitting = False
        self.bg_cycle = None           # callable creating the next bg group


def simulate(timeline: Timeline, config: SimConfig,
             interference: Optional[InterferenceTable] = None,
             iterations: int = 4,
             sensitive: Iterable[str] = (),
             baseline_fg_iteration_us: Optional[float] = None
             ) -> tuple[SimTrace, SimMetrics]:
    """Run the cluster model for a number of foreground iterations.

    The simulation ends when the last foreground iteration completes;
    background work in flight at that point is discarded.  Returns the
    event trace and aggregate metrics (warmup iterations excluded).
    """
    if iterations < 1:
        raise GraphFormatError("iterations must be >= 1")
    interference = interference or default_interference()
    sensitive = frozenset(sensitive)
    baseline = baseline_fg_iteration_us or timeline.predicted_fg_iteration_us
    n_gpus = timeline.n_gpus
    launch_ticks = us_to_ticks(config.launch_overhead_us)
    rng = random.Random(config.rng_seed)

    trace = SimTrace()
    for rec in timeline.fg_ops:
        trace.op_isolated[rec.op_id] = rec.isolated_duration_us
        trace.op_durations.setdefault(rec.op_id, [])
    for rec in timeline.bg_ops:
        trace.op_isolated[rec.op_id] = rec.isolated_duration_us
        trace.op_durations.setdefault(rec.op_id, [])

    # --- instantiate foreground work -------------------------------------
    fg_ops_by_iter: list[list[_Op]] = []
    iter_remaining: list[int] = []
    fence_open = [False] * iterations
    fence_open[0] = True
    hosts: dict[tuple[str, int], _HostStream] = {}
    for gpu in range(n_gpus):
        hosts[(FG_TASK, gpu)] = _HostStream(FG_TASK, gpu)

    for it in range(iterations):
        ops: list[_Op] = []
        last_on_gpu: dict[int, _Op] = {}
        for rec in timeline.fg_ops:
            op = _Op(rec, it, f"{rec.op_id}#{it}", rec.op_id in sensitive)
            if rec.barrier:
                # a collective may not start anywhere before every
                # participant finished its preceding op
                deps = {id(last_on_gpu[p]): last_on_gpu[p]
                        for p in rec.participants if p in last_on_gpu}
                for dep in deps.values():
                    dep.dependents.append(op)
                    op.deps_left += 1
            for p in rec.participants:
                last_on_gpu[p] = op
            ops.append(op)
        fg_ops_by_iter.append(ops)
        iter_remaining.append(sum(max(len(o.rec.participants), 1)
                                  for o in ops))

    # pack fg runs into per-gpu launch groups: consecutive compute ops share
    # a group, collectives go alone (matching their template group ids)
    for gpu in range(n_gpus):
        host = hosts[(FG_TASK, gpu)]
        gid = 0
        for it in range(iterations):
            pending: list[_Run] = []
            for op in fg_ops_by_iter[it]:
                if gpu not in op.rec.participants:
                    continue
                run = _Run(op, gpu, None)
                op.runs.append(run)
                if op.rec.barrier:
                    if pending:
                        host.groups.append(_Group(FG_TASK, gpu, pending, gid, it))
                        gid += 1
                        pending = []
                    host.groups.append(_Group(FG_TASK, gpu, [run], gid, it))
                    gid += 1
                else:
                    pending.append(run)
            if pending:
                host.groups.append(_Group(FG_TASK, gpu, pending, gid, it))
                gid += 1
        for grp in host.groups:
            for run in grp.runs:
                run.group = grp

    fg_runs_done = 0

    # --- background streams ----------------------------------------------
    if timeline.bg_ops:
        for gpu in range(n_gpus):
            task = f"bg{gpu}"
            host = _HostStream(task, gpu,
                               host_free=rng.randrange(0, launch_ticks + 1))
            cycle = {"idx": 0, "iter": 0, "gid": 0}

            def make_bg_group(host=host, cycle=cycle, gpu=gpu, task=task):
                recs = timeline.bg_ops
                start = cycle["idx"]
                stop = min(start + config.graph_split_size, len(recs))
                runs = []
                grp = _Group(task, gpu, runs, cycle["gid"])
                for k in range(start, stop):
                    op = _Op(recs[k], cycle["iter"],
                             f"{recs[k].op_id}#{task}.{cycle['iter']}", False)
                    run = _Run(op, gpu, grp)
                    op.runs.append(run)
                    runs.append(run)
                grp.remaining = len(runs)
                grp.unstarted = len(runs)
                cycle["gid"] += 1
                if stop == len(recs):
                    cycle["idx"] = 0
                    cycle["iter"] += 1
                    grp.closes_iteration = True
                else:
                    cycle["idx"] = stop
                return grp

            host.bg_cycle = make_bg_group
            hosts[(task, gpu)] = host

    # --- device state ------------------------------------------------------
    gpus = [GpuSim(g, config.contexts) for g in range(n_gpus)]
    deliver_seq = 0
    heap: list = []
    seq_counter = 0
    now = 0
    # hosts never queue unboundedly even with pacing off; this cap only
    # bounds event volume, the FIFO it feeds is still long enough to starve
    # the foreground
    effective_pace = config.launch_pace_limit or 64

    def push(tick, tag, payload):
        nonlocal seq_counter
        heapq.heappush(heap, (tick, seq_counter, tag, payload))
        seq_counter += 1

    def emit(tick, gpu, task, op, kind):
        trace.events.append((tick, gpu, task, op, kind))

    def try_submit(host: _HostStream):
        """Schedule the next group submission if pacing allows.  The
        foreground host submits one iteration's launches at a time (training
        loops synchronize on the previous step before issuing the next)."""
        if host.submitting:
            return
        if host.outstanding >= effective_pace:
            return
        grp = None
        if host.bg_cycle is not None:
            grp = host.bg_cycle()
        elif host.next_group < len(host.groups):
            grp = host.groups[host.next_group]
            # the host queues at most one iteration ahead of the one the
            # device is executing
            if grp.iteration > 0 and not fence_open[grp.iteration - 1]:
                return
            host.next_group += 1
        if grp is None:
            return
        host.submitting = True
        host.outstanding += 1
        start = max(now, host.host_free)
        done = start + launch_ticks
        host.host_free = done
        push(done, "arrive", (host, grp))

    def refresh_sensitive(gpu: int):
        """Collocation pauses while a sensitive foreground op is running or
        is next to run in the foreground stream (the host stops feeding the
        background just before the fragile op executes)."""
        dev = gpus[gpu]
        count = sum(1 for r in dev.running
                    if r.op.sensitive and r.op.rec.task_id == FG_TASK)
        stream = dev.streams.get(FG_TASK)
        if stream and stream[0].op.sensitive:
            count += 1
        dev.sensitive_active = count

    def effective_rate(run: _Run) -> Fraction:
        op = run.op
        if op.rec.barrier and op.started < len(op.runs):
            return Fraction(0)
        if op.rec.stream_priority == HIGH:
            worst = 1.0
            for other in gpus[run.gpu].running:
                if other.op.rec.stream_priority == LOW:
                    worst = max(worst, interference.factor(
                        op.rec.clazz, other.op.rec.clazz))
            if worst > 1.0:
                return 1 / Fraction(worst)
        return Fraction(1)

    def reprice(gpu: int):
        """Re-evaluate progress rates on a GPU, rescheduling the end events
        of runs whose rate changed."""
        for run in gpus[gpu].running:
            new_rate = effective_rate(run)
            if new_rate == run.rate:
                continue
            elapsed = now - run.last_t
            if elapsed > 0 and run.rate > 0:
                run.work -= run.rate * elapsed
            run.last_t = now
            run.rate = new_rate
            run.gen += 1
            if run.rate > 0:
                remaining = max(0, math.ceil(run.work / run.rate))
                push(now + remaining, "end", (run, run.gen))

    def deliver(gpu: int):
        """Decode launch groups from the shared FIFO into per-task device
        streams.  A stream accepts at most ``stream_depth`` decoded groups
        whose ops have not all issued yet; a blocked head group parks every
        later launch behind it regardless of priority."""
        nonlocal deliver_seq
        dev = gpus[gpu]
        q = dev.device_queue
        while q:
            grp = q[0]
            if dev.stream_groups.get(grp.task, 0) >= config.stream_depth:
                break
            q.popleft()
            dev.stream_groups[grp.task] = dev.stream_groups.get(grp.task, 0) + 1
            stream = dev.streams.setdefault(grp.task, deque())
            for run in grp.runs:
                run.state = "ready"
                run.seq = deliver_seq
                deliver_seq += 1
                stream.append(run)
                emit(now, gpu, grp.task, run.op.inst_id, "ready")
        refresh_sensitive(gpu)

    def eligible(run: _Run) -> bool:
        op = run.op
        if op.rec.task_id == FG_TASK:
            if not fence_open[op.iteration]:
                return False
            if op.deps_left > 0:
                return False
            if op.sensitive and any(
                    r.op.rec.stream_priority == LOW
                    for r in gpus[run.gpu].running):
                # hold a fragile op until collocated work drains; the engine
                # deliberately under-utilizes the GPU to protect it
                return False
        elif gpus[run.gpu].sensitive_active > 0:
            return False
        return True

    def dispatch(gpu: int) -> bool:
        dev = gpus[gpu]
        started_any = False
        while len(dev.running) < dev.contexts:
            cands = []
            for task, stream in dev.streams.items():
                if not stream or dev.stream_busy.get(task):
                    continue  # ops within one stream execute strictly in order
                head = stream[0]
                if eligible(head):
                    prio = 0 if head.op.rec.stream_priority == HIGH else 1
                    key = (prio, head.seq) if config.priority_scheduling_enabled \
                        else (head.seq,)
                    cands.append((key, task, head))
            if not cands:
                break
            cands.sort(key=lambda c: c[0])
            _, task, run = cands[0]
            dev.streams[task].popleft()
            dev.stream_busy[task] = True
            run.state = "running"
            run.start_t = now
            run.last_t = now
            dev.running.append(run)
            run.op.started += 1
            run.group.unstarted -= 1
            if run.group.unstarted == 0:
                dev.stream_groups[task] -= 1
            refresh_sensitive(gpu)
            emit(now, gpu, task, run.op.inst_id, "start")
            if run.op.rec.barrier and run.op.started == len(run.op.runs):
                for peer in run.op.runs:
                    if peer is not run:
                        reprice(peer.gpu)
            reprice(gpu)
            started_any = True
        return started_any

    def pump():
        moved = True
        while moved:
            moved = False
            for gpu in range(n_gpus):
                deliver(gpu)
                if dispatch(gpu):
                    moved = True

    def finish(run: _Run):
        nonlocal fg_runs_done
        gpu = run.gpu
        op = run.op
        task = op.rec.task_id if op.rec.task_id == FG_TASK else run.group.task
        run.state = "done"
        run.end_t = now
        gpus[gpu].running.remove(run)
        gpus[gpu].stream_busy[task] = False
        refresh_sensitive(gpu)
        emit(now, gpu, task, op.inst_id, "end")
        trace.busy.setdefault(gpu, []).append((run.start_t, run.end_t))
        op.done += 1
        if op.complete:
            trace.op_durations[op.rec.op_id].append(
                ticks_to_us(run.end_t - min(r.start_t for r in op.runs)))
            for dep in op.dependents:
                dep.deps_left -= 1
        grp = run.group
        grp.remaining -= 1
        if grp.remaining == 0:
            host = hosts[(grp.task, gpu)]
            host.outstanding -= 1
            if grp.closes_iteration:
                trace.bg_completions.append((now, gpu))
            try_submit(host)
        if op.rec.task_id == FG_TASK:
            fg_runs_done += 1
            iter_remaining[op.iteration] -= 1
            if iter_remaining[op.iteration] == 0:
                trace.iteration_ticks.append(now)
                if op.iteration + 1 < iterations:
                    fence_open[op.iteration + 1] = True
                    for g in range(n_gpus):
                        try_submit(hosts[(FG_TASK, g)])
        reprice(gpu)

    # --- main loop ----------------------------------------------------------
    for host in hosts.values():
        try_submit(host)

    total_fg_runs = sum(iter_remaining)
    while fg_runs_done < total_fg_runs:
        if not heap:
            raise DeadlockError("no runnable work but the foreground job is"
                                " incomplete", _snapshot(gpus))
        now, _, tag, payload = heapq.heappop(heap)
        if tag == "arrive":
            host, grp = payload
            host.submitting = False
            gpus[host.gpu].device_queue.append(grp)
            emit(now, host.gpu, grp.task, f"group{grp.gid}", "submit")
            try_submit(host)
        elif tag == "end":
            run, gen = payload
            if run.gen != gen or run.state != "running":
                continue
            elapsed = now - run.last_t
            run.work -= run.rate * elapsed
            run.last_t = now
            if run.work > 0:  # defensive: reschedule rather than dropping
                run.gen += 1
                push(now + max(1, math.ceil(run.work / run.rate)),
                     "end", (run, run.gen))
                continue
            finish(run)
        pump()
    trace.stop_tick = now

    metrics = _metrics_from_trace(trace, timeline, config, iterations, baseline)
    return trace, metrics


def _snapshot(gpus) -> str:
    lines = []
    for dev in gpus:
        q = [f"{g.task}/g{g.gid}({g.remaining})" for g in dev.device_queue]
        heads = {task: [r.op.inst_id for r in s][:3]
                 for task, s in dev.streams.items() if s}
        runs = [r.op.inst_id for r in dev.running]
        lines.append(f"gpu{dev.gpu_id}: fifo={q} streams={heads}"
                     f" running={runs}")
    return "\n".join(lines)


def _percentile(sorted_vals: Sequence[float], q: float) -> float:
    if not sorted_vals:
        return 0.0
    idx = min(len(sorted_vals) - 1, max(0, math.ceil(q * len(sorted_vals)) - 1))
    return sorted_vals[idx]


def _metrics_from_trace(trace: SimTrace, timeline: Timeline, config: SimConfig,
                        iterations: int, baseline_us: float) -> SimMetrics:
    warmup = min(config.warmup_iterations, iterations - 1)
    ticks = trace.iteration_ticks
    bounds = [0] + ticks
    iter_times = [ticks_to_us(b - a) for a, b in zip(bounds, bounds[1:])]
    measured = iter_times[warmup:]
    window_start = bounds[warmup]
    window_end = bounds[-1]
    window_ticks = max(1, window_end - window_start)
    window_s = ticks_to_us(window_ticks) / 1e6

    mean = sum(measured) / len(measured)
    p99 = _percentile(sorted(measured), 0.99)
    fg_thr = timeline.global_batch * len(measured) / window_s

    bg_done = sum(1 for t, _ in trace.bg_completions
                  if window_start < t <= window_end)
    bg_thr = bg_done * timeline.bg_batch / window_s

    utils = []
    for gpu in range(timeline.n_gpus):
        ivals = sorted(trace.busy.get(gpu, []))
        covered = 0
        cur_s, cur_e = None, None
        for s, e in ivals:
            s, e = max(s, window_start), min(e, window_end)
            if e <= s:
                continue
            if cur_s is None:
                cur_s, cur_e = s, e
            elif s <= cur_e:
                cur_e = max(cur_e, e)
            else:
                covered += cur_e - cur_s
                cur_s, cur_e = s, e
        if cur_s is not None:
            covered += cur_e - cur_s
        utils.append(covered / window_ticks)

    return SimMetrics(
        fg_iteration_time_us_mean=mean,
        fg_iteration_time_us_p99=p99,
        fg_throughput_samples_per_s=fg_thr,
        bg_throughput_samples_per_s=bg_thr,
        cluster_total_throughput_samples_per_s=fg_thr + bg_thr,
        per_gpu_utilization=tuple(utils),
        qos_degradation=mean / baseline_us if baseline_us > 0 else 1.0,
    )


# ---------------------------------------------------------------------------
# Feedback loop


def feedback_update(trace: SimTrace, config: SimConfig,
                    current: Iterable[str] = ()) -> frozenset:
    """Flag ops whose mean measured duration exceeded the ban threshold
    relative to isolation.  Returns the union with the current flags, so
    repeated simulate/update rounds reach a fixed point."""
    flags = set(current)
    for key, measured in trace.op_durations.items():
        if not measured:
            continue
        isolated = trace.op_isolated.get(key, 0.0)
        if isolated < 1.0:
            continue  # below measurement resolution; ratios are noise
        mean = sum(measured) / len(measured)
        if mean / isolated > config.slowdown_ban_threshold:
            flags.add(key)
    return frozenset(flags)


# ---------------------------------------------------------------------------
# Scenario helpers and the pareto sweep


def forced_plan(graph: CompGraph, g: int, total_gpus: int) -> TrainingPlan:
    """Plain data-parallel assignment: every layer on g GPUs."""
    from .costs import LayerCost
    ctx = make_context(graph, max(g, 1), candidates=sorted({1, g}))
    cm = CostModel(ctx)
    assignments = []
    rows = []
    total = 0.0
    prev = None
    for blk_id in graph.topo_order():
        layer = graph.layer(blk_id)
        gi = 1 if layer.is_virtual else g
        tr = cm.transfer(prev, blk_id, g, gi) if prev is not None else 0.0
        cost = (tr + cm.comp(blk_id, gi)) + cm.sync(blk_id, gi)
        total += cost
        assignments.append((blk_id, gi))
        rows.append(LayerCost(blk_id, gi, cm.comp(blk_id, gi),
                              cm.sync(blk_id, gi),
                              cm.amp_of(blk_id, gi, cost)))
        prev = blk_id
    return TrainingPlan(model=graph.name, total_gpus=total_gpus,
                        amp_limit=math.inf, global_batch=graph.global_batch,
                        assignments=tuple(assignments),
                        predicted_iteration_us=total,
                        layer_costs=tuple(rows), fallback_layers=())


def isolated_bg_iteration_us(bg_graph: CompGraph, config: SimConfig) -> float:
    """Steady-state single-GPU background iteration time: compute plus the
    host dispatch floor when tiny groups cannot be submitted fast enough."""
    total = 0.0
    n_ops = 0
    for layer in bg_graph.layers:
        if layer.is_virtual:
            continue
        total += comp_at_batch(bg_graph, layer.id, config.bg_batch_size)
        n_ops += 1
    n_groups = ceil_div(n_ops, config.graph_split_size)
    return max(total, n_groups * config.launch_overhead_us)


def run_two_phase(timeline: Timeline, config: SimConfig,
                  interference: Optional[InterferenceTable] = None,
                  iterations: int = 4,
                  feedback_rounds: int = 1,
                  baseline_fg_iteration_us: Optional[float] = None
                  ) -> tuple[SimTrace, SimMetrics, frozenset]:
    """Simulate, apply the slowdown feedback loop, and simulate again with
    the flagged ops pausing collocation."""
    flags: frozenset = frozenset()
    trace, metrics = simulate(timeline, config, interference, iterations,
                              flags, baseline_fg_iteration_us)
    for _ in range(feedback_rounds):
        new_flags = feedback_update(trace, config, flags)
        if new_flags == flags:
            break
        flags = new_flags
        trace, metrics = simulate(timeline, config, interference, iterations,
                                  flags, baseline_fg_iteration_us)
    return trace, metrics, flags


PARETO_HEADER = ("label", "scenario", "amp_limit", "fg_speedup",
                 "fg_iteration_us", "cluster_throughput", "bg_throughput")


def pareto_sweep(graph: CompGraph, total_gpus: int,
                 amp_limits: Sequence[float], configs: Sequence[SimConfig],
                 bg_graph: Optional[CompGraph] = None,
                 interference: Optional[InterferenceTable] = None,
                 iterations: int = 4,
                 partition_sizes: Sequence[int] = (1, 2, 4, 8),
                 feedback_rounds: int = 1) -> list[dict]:
    """Evaluate burst-parallel collocation operating points against static
    cluster-partition baselines.  Rows are plot-ready dicts sorted by label.
    """
    from .planner import plan as plan_fn

    bg_graph = bg_graph or graph
    one_gpu_us = iteration_time(graph, 1, graph.global_batch)
    rows: list[dict] = []

    for amp_limit in amp_limits:
        p = plan_fn(graph, total_gpus, amp_limit)
        for cfg in configs:
            timeline = compile_timeline(p, graph, total_gpus, bg_graph, cfg)
            _, metrics, _ = run_two_phase(
                timeline, cfg, interference, iterations,
                feedback_rounds=feedback_rounds,
                baseline_fg_iteration_us=p.predicted_iteration_us)
            rows.append({
                "label": f"bp+col amp={amp_limit:g} pace={cfg.launch_pace_limit}"
                         f" bg={cfg.bg_batch_size}",
                "scenario": "bp+col",
                "amp_limit": amp_limit,
                "fg_speedup": one_gpu_us / metrics.fg_iteration_time_us_mean,
                "fg_iteration_us": metrics.fg_iteration_time_us_mean,
                "cluster_throughput":
                    metrics.cluster_total_throughput_samples_per_s,
                "bg_throughput": metrics.bg_throughput_samples_per_s,
            })

    base_cfg = configs[0] if configs else SimConfig()
    for k in partition_sizes:
        if k > total_gpus:
            continue
        p = forced_plan(graph, k, total_gpus)
        timeline = compile_timeline(p, graph, k, None, base_cfg)
        _, metrics = simulate(timeline, base_cfg, interference, iterations,
                              baseline_fg_iteration_us=p.predicted_iteration_us)
        fg_thr = metrics.fg_throughput_samples_per_s
        bg_thr = 0.0
        if bg_graph is not None and k < total_gpus:
            bg_iter = isolated_bg_iteration_us(bg_graph, base_cfg)
            bg_thr = (total_gpus - k) * base_cfg.bg_batch_size / (bg_iter / 1e6)
        rows.append({
            "label": f"partition k={k}",
            "scenario": "partition",
            "amp_limit": float("nan"),
            "fg_speedup": one_gpu_us / metrics.fg_iteration_time_us_mean,
            "fg_iteration_us": metrics.fg_iteration_time_us_mean,
            "cluster_throughput": fg_thr + bg_thr,
            "bg_throughput": bg_thr,
        })

    rows.sort(key=lambda r: r["label"])
    return rows


def pareto_to_table(rows: Sequence[dict]) -> str:
    lines = ["\t".join(PARETO_HEADER)]
    for r in rows:
        lines.append("\t".join([
            r["label"], r["scenario"], f"{r['amp_limit']:g}",
            f"{r['fg_speedup']:.4f}", f"{r['fg_iteration_us']:.3f}",
            f"{r['cluster_throughput']:.3f}", f"{r['bg_throughput']:.3f}",
        ]))
    return "\n".join(lines) + "\n"
