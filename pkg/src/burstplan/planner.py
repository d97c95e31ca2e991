"""Burst-parallel training planner.

Finds the per-layer GPU assignment that minimizes predicted iteration time
subject to a per-layer GPU-sec amplification limit.  A dynamic program over
(layer, gpu count) solves linear chains; branch/join regions are reduced
innermost-first to single edges whose costs come from entry-constrained
chain searches merged at the joining layer.

The admissibility rule is pairwise-exact: a layer's amplification is a
function of its own GPU count and its predecessor's (through the transition
cost), so the DP filters each candidate edge by the amplification it would
give the layer being placed.  Every finite table entry therefore corresponds
to a fully admissible prefix, and the search provably returns the same
optimum as exhaustive enumeration (brute_force_plan, the test oracle).

Deliberate semantics for branch/join regions, shared by the planner and the
oracle:

* A chain's serial duration includes the transfer from the branching layer,
  its interior costs, and the transfer into the joining layer.
* The critical chain is the one with the largest serial duration (ties break
  to the lowest chain index).  Non-critical chains run serially after it by
  default; a chain is promoted to run concurrently on disjoint GPUs only if
  (a) the peak GPU usage of all concurrent chains stays within the cluster,
  (b) its concurrent duration, which pays full-batch moves on entry and
  exit, fits inside the critical chain's window, and (c) neither its first
  layer's amplification under the full-batch entry move nor the joining
  layer's under the full-batch exit move overshoots the limit.
* Empty chains (a direct branch->join edge) and chains ending in a nested
  block that lands directly on the join always run serially.
* The joining layer's amplification charges the largest single incoming
  transfer, not the whole block interior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence

from .costs import CostContext, CostModel, LayerCost, make_context
from .errors import InfeasiblePlanError
from .graph import BranchJoin, CompGraph, SingleLayer, decompose

INF = math.inf


@dataclass(frozen=True)
class TrainingPlan:
    """A per-layer GPU assignment with its predicted cost breakdown."""

    model: str
    total_gpus: int
    amp_limit: float
    global_batch: int
    assignments: tuple[tuple[int, int], ...]  # (layer_id, g) in execution order
    predicted_iteration_us: float
    layer_costs: tuple[LayerCost, ...]
    fallback_layers: tuple[int, ...]

    def gpus_for(self, layer_id: int) -> int:
        for lid, g in self.assignments:
            if lid == layer_id:
                return g
        raise KeyError(layer_id)

    def max_gpus_used(self) -> int:
        return max(g for _, g in self.assignments)


@dataclass
class PlanTables:
    """DP tables of a linear search: S (shortest cumulative time), T (time
    spent on the layer within the S-optimal path) and the predecessor count
    achieving S.  Row 0 is the virtual start (all zeros); row i corresponds
    to the i-th chain layer."""

    layer_ids: tuple[int, ...]
    candidates: tuple[int, ...]
    S: list[dict[int, float]]
    T: list[dict[int, float]]
    choice: list[dict[int, Optional[int]]]
    amp: list[dict[int, float]]
    _cm: CostModel = None
    _edges: dict = field(default_factory=dict)
    _entry_g: Optional[int] = None


# ---------------------------------------------------------------------------
# Core chain DP


def _cell_edge(cm: CostModel, lid: int, g: int, tr: float, amp_tr: float):
    """Edge cost into (lid, g) plus the amplification that edge implies."""
    comp = cm.comp(lid, g)
    sync = cm.sync(lid, g)
    time = (tr + comp) + sync
    amp = cm.amp_of(lid, g, (amp_tr + comp) + sync)
    return time, amp


def _chain_dp(layer_ids: Sequence[int], cm: CostModel, amp_limit: float, *,
              entry_tr: Optional[Callable[[int], tuple[float, float]]] = None,
              first_candidates: Optional[Sequence[int]] = None,
              exempt_first: bool = False,
              block_edges: Optional[dict] = None,
              relax: bool = True) -> PlanTables:
    """Generalized linear search.

    entry_tr(g) -> (tr, amp_tr) gives the transit into the first layer (zero
    when the chain starts the whole model).  block_edges maps a position i to
    the _BlockEdge standing between layer i-1 and layer i.  With relax on, a
    position where no candidate satisfies the amplification limit is re-run
    admitting every edge and taking the minimum-amplification one, so the
    search always completes; the violations surface in fallback_layers.
    """
    cands = cm.candidates
    block_edges = block_edges or {}
    n = len(layer_ids)
    S: list[dict[int, float]] = [dict.fromkeys(cands, 0.0)]
    T: list[dict[int, float]] = [dict.fromkeys(cands, 0.0)]
    choice: list[dict[int, Optional[int]]] = [dict.fromkeys(cands, None)]
    amps: list[dict[int, float]] = [dict.fromkeys(cands, 0.0)]

    for i, lid in enumerate(layer_ids):
        row_cands = tuple(first_candidates) if (i == 0 and first_candidates) else cands
        rowS: dict[int, float] = {g: INF for g in cands}
        rowT: dict[int, float] = {g: INF for g in cands}
        rowC: dict[int, Optional[int]] = {g: None for g in cands}
        rowA: dict[int, float] = {g: INF for g in cands}

        def relax_row(enforce_limit: bool) -> bool:
            found = False
            for g in row_cands:
                if i == 0:
                    tr, amp_tr = entry_tr(g) if entry_tr else (0.0, 0.0)
                    time, amp = _cell_edge(cm, lid, g, tr, amp_tr)
                    if time == INF:
                        continue
                    if enforce_limit and not exempt_first and amp > amp_limit:
                        continue
                    rowS[g], rowT[g], rowA[g], rowC[g] = time, time, amp, None
                    found = True
                    continue
                bestS = INF
                bestT = INF
                bestA = INF
                bestH: Optional[int] = None
                be = block_edges.get(i)
                for h in cands:
                    prevS = S[i][h]
                    if prevS == INF:
                        continue
                    if be is not None:
                        tr = be.time.get((h, g), INF)
                        amp_tr = be.amp_tr.get((h, g), INF)
                    else:
                        tr = cm.transfer(layer_ids[i - 1], lid, h, g)
                        amp_tr = tr
                    if tr == INF:
                        continue
                    tcost, amp = _cell_edge(cm, lid, g, tr, amp_tr)
                    if enforce_limit and amp > amp_limit:
                        continue
                    total = prevS + tcost
                    # relaxed rows take the minimum-amplification edge
                    cand = (total,) if enforce_limit else (amp, total)
                    best = (bestS,) if enforce_limit else (bestA, bestS)
                    if cand < best:
                        bestS, bestT, bestA, bestH = total, tcost, amp, h
                if bestH is not None:
                    rowS[g], rowT[g], rowA[g], rowC[g] = bestS, bestT, bestA, bestH
                    found = True
            return found

        found = relax_row(enforce_limit=True)
        if not found:
            if not relax:
                # leave the row infeasible; caller treats downstream as inf
                pass
            else:
                relax_row(enforce_limit=False)
        S.append(rowS)
        T.append(rowT)
        choice.append(rowC)
        amps.append(rowA)

    return PlanTables(layer_ids=tuple(layer_ids), candidates=cands,
                      S=S, T=T, choice=choice, amp=amps, _cm=cm,
                      _edges=dict(block_edges),
                      _entry_g=(first_candidates[0] if first_candidates else None))


def search_linear(chain: Sequence[int], ctx: CostContext, amp_limit: float,
                  entry_constraint: Optional[int] = None) -> PlanTables:
    """Linear search over a chain of layer ids.

    With entry_constraint set, only that GPU count is enabled for the first
    layer (used by branch searches, where the branching layer's scale is
    fixed by the enclosing search; that layer is then exempt from the
    amplification filter here because the outer search owns it).
    """
    if not chain:
        raise InfeasiblePlanError("chain must be non-empty")
    if amp_limit < 1:
        raise InfeasiblePlanError("amplification limit below 1 is infeasible")
    cm = CostModel(ctx)
    first = [entry_constraint] if entry_constraint is not None else None
    if first and entry_constraint not in ctx.candidate_gpu_counts:
        raise InfeasiblePlanError(
            f"entry constraint {entry_constraint} not in candidate set")
    return _chain_dp(list(chain), cm, amp_limit, first_candidates=first,
                     exempt_first=entry_constraint is not None)


def backtrace(tables: PlanTables, amp_limit: float) -> TrainingPlan:
    """Select the best admissible final column and follow the choice
    pointers back to the first layer; ties prefer the smaller GPU count."""
    cm = tables._cm
    n = len(tables.layer_ids)
    bestG = None
    bestS = INF
    for g in tables.candidates:
        s = tables.S[n][g]
        if s < bestS:
            bestS, bestG = s, g
    if bestG is None:
        raise InfeasiblePlanError("no feasible assignment found")
    gs: list[int] = [0] * n
    g = bestG
    for i in range(n, 0, -1):
        gs[i - 1] = g
        g = tables.choice[i][g] if tables.choice[i][g] is not None else g

    assignments: list[tuple[int, int]] = []
    rows: list[LayerCost] = []
    fallback: list[int] = []
    for i, lid in enumerate(tables.layer_ids):
        gi = gs[i]
        amp = tables.amp[i + 1][gi]
        be = tables._edges.get(i)
        if be is not None:
            interior = be.interior[(gs[i - 1], gi)]
            assignments.extend(interior.assignments)
            rows.extend(interior.rows)
            fallback.extend(interior.fallback)
        assignments.append((lid, gi))
        rows.append(LayerCost(lid, gi, cm.comp(lid, gi), cm.sync(lid, gi), amp))
        if amp > amp_limit:
            fallback.append(lid)
    graph = cm.graph
    return TrainingPlan(model=graph.name, total_gpus=cm.ctx.total_gpus,
                        amp_limit=amp_limit, global_batch=graph.global_batch,
                        assignments=tuple(assignments),
                        predicted_iteration_us=bestS,
                        layer_costs=tuple(rows), fallback_layers=tuple(fallback))


# ---------------------------------------------------------------------------
# Branch/join reduction


@dataclass
class _Interior:
    """Reconstruction payload for one (g_branch, g_join) block edge choice."""

    assignments: tuple[tuple[int, int], ...] = ()
    rows: tuple[LayerCost, ...] = ()
    fallback: tuple[int, ...] = ()
    decisions: tuple[str, ...] = ()


@dataclass
class _BlockEdge:
    """A reduced branch/join region: per (g_branch, g_join) the interior
    time, the transfer charged to the joining layer's amplification, the
    peak concurrent GPU usage, and the interior assignment."""

    branch_id: int
    join_id: int
    time: dict[tuple[int, int], float] = field(default_factory=dict)
    amp_tr: dict[tuple[int, int], float] = field(default_factory=dict)
    peak: dict[tuple[int, int], int] = field(default_factory=dict)
    interior: dict[tuple[int, int], _Interior] = field(default_factory=dict)


@dataclass
class _ChainSolution:
    """One chain's contribution to a block merge at fixed (g_branch, g_join)."""

    duration: float                     # serial duration incl. entry/exit moves
    exit_amp: float                     # transfer charged to the join (serial)
    peak: int
    assignments: tuple[tuple[int, int], ...]
    rows: tuple[LayerCost, ...]
    fallback: tuple[int, ...]
    conc_duration: Optional[float]      # duration on a disjoint GPU set
    conc_exit_amp: Optional[float]
    conc_first_amp: Optional[float]     # first layer amp under full entry move
    conc_rows: tuple[LayerCost, ...] = ()


def _merge_chains(solutions: Sequence[_ChainSolution], total_gpus: int,
                  amp_limit: float, join_amp_of: Callable[[float], float]):
    """Apply the documented concurrency rules to merged chain durations.

    join_amp_of(tr) prices the joining layer's amplification were tr its
    incoming transfer; promotion to concurrent execution is refused when the
    full-batch exit move would push that amplification past the limit.
    Returns (block_time, join_amp_tr, block_peak, decisions).  Used by both
    the planner reduction and the brute-force oracle so the two sides price
    identical decisions identically.
    """
    crit = 0
    for i, sol in enumerate(solutions):
        if sol.duration > solutions[crit].duration:
            crit = i
    critD = solutions[crit].duration
    interior = critD
    budget = solutions[crit].peak
    join_amp = solutions[crit].exit_amp
    block_peak = solutions[crit].peak
    decisions = ["critical" if i == crit else "" for i in range(len(solutions))]
    for i, sol in enumerate(solutions):
        if i == crit:
            continue
        concurrent = (
            sol.conc_duration is not None
            and budget + sol.peak <= total_gpus
            and sol.conc_duration <= critD
            and sol.conc_first_amp <= amp_limit
            and join_amp_of(max(join_amp, sol.conc_exit_amp)) <= amp_limit
        )
        if concurrent:
            decisions[i] = "concurrent"
            budget += sol.peak
            block_peak = max(block_peak, budget)
            join_amp = max(join_amp, sol.conc_exit_amp)
        else:
            decisions[i] = "serial"
            interior = interior + sol.duration
            block_peak = max(block_peak, sol.peak)
            join_amp = max(join_amp, sol.exit_amp)
    return interior, join_amp, block_peak, decisions


@dataclass
class _ReducedChain:
    layer_ids: list[int]
    block_edges: dict[int, _BlockEdge]   # position -> edge into that position
    exit_block: Optional[_BlockEdge]     # trailing block landing on the join


def _reduce_blocks(blocks: Sequence, cm: CostModel, amp_limit: float,
                   total_gpus: int) -> _ReducedChain:
    layer_ids: list[int] = []
    block_edges: dict[int, _BlockEdge] = {}
    pending: Optional[_BlockEdge] = None
    for blk in blocks:
        if isinstance(blk, SingleLayer):
            if pending is not None:
                block_edges[len(layer_ids)] = pending
                pending = None
            layer_ids.append(blk.layer_id)
        else:
            pending = _block_edge(blk, cm, amp_limit, total_gpus)
    return _ReducedChain(layer_ids, block_edges, pending)


def _walk_chain_cost(cm: CostModel, steps: Sequence[tuple[float, int, int]]) -> float:
    """Accumulate ((tr + comp) + sync) left to right; shared by the DP
    backtrace re-pricing and the oracle so floats agree bit for bit."""
    acc = 0.0
    for tr, lid, g in steps:
        acc = acc + ((tr + cm.comp(lid, g)) + cm.sync(lid, g))
    return acc


def _join_amp_fn(cm: CostModel, join_id: int, h: int) -> Callable[[float], float]:
    def join_amp_of(tr: float) -> float:
        return cm.amp_of(join_id, h,
                         (tr + cm.comp(join_id, h)) + cm.sync(join_id, h))
    return join_amp_of


def _solve_chain(chain_blocks: Sequence, branch_id: int, join_id: int,
                 cm: CostModel, amp_limit: float, total_gpus: int
                 ) -> dict[tuple[int, int], Optional[_ChainSolution]]:
    """Optimal serial interior per (g_branch, g_join), plus the data the
    merge needs to consider running the chain concurrently.

    Exit choices whose transfer alone would push the joining layer's
    amplification past the limit are inadmissible here, so a chain never
    trades a slower-but-clean exit for one that poisons the join.
    """
    cands = cm.candidates
    out: dict[tuple[int, int], Optional[_ChainSolution]] = {}

    if not chain_blocks:  # direct branch->join edge
        for ga in cands:
            for h in cands:
                tr = cm.transfer(branch_id, join_id, ga, h)
                out[(ga, h)] = _ChainSolution(
                    duration=tr, exit_amp=tr, peak=0, assignments=(), rows=(),
                    fallback=(), conc_duration=None, conc_exit_amp=None,
                    conc_first_amp=None)
        return out

    rc = _reduce_blocks(chain_blocks, cm, amp_limit, total_gpus)
    ids = rc.layer_ids
    tail = ids[-1]
    first = ids[0]

    for ga in cands:
        def entry(g: int, _ga=ga) -> tuple[float, float]:
            tr = cm.transfer(branch_id, first, _ga, g)
            return tr, tr

        tables = _chain_dp(ids, cm, amp_limit, entry_tr=entry,
                           block_edges=rc.block_edges, relax=False)
        n = len(ids)
        for h in cands:
            join_amp_of = _join_amp_fn(cm, join_id, h)
            bestD = INF
            bestGT = None
            for gt in cands:
                s = tables.S[n][gt]
                if s == INF:
                    continue
                if rc.exit_block is not None:
                    ex = rc.exit_block.time.get((gt, h), INF)
                    ex_amp = rc.exit_block.amp_tr.get((gt, h), INF)
                else:
                    ex = cm.transfer(tail, join_id, gt, h)
                    ex_amp = ex
                if ex == INF or join_amp_of(ex_amp) > amp_limit:
                    continue
                d = s + ex
                if d < bestD:
                    bestD, bestGT = d, gt
            if bestGT is None:
                out[(ga, h)] = None
                continue

            # backtrace the chain's own assignment
            gs: list[int] = [0] * n
            g = bestGT
            for i in range(n, 0, -1):
                gs[i - 1] = g
                g = tables.choice[i][g] if tables.choice[i][g] is not None else g
            assignments: list[tuple[int, int]] = []
            rows: list[LayerCost] = []
            fallback: list[int] = []
            peak = 0
            steps: list[tuple[float, int, int]] = []
            prev = None
            for i, lid in enumerate(ids):
                gi = gs[i]
                be = rc.block_edges.get(i)
                if be is not None:
                    inner = be.interior[(gs[i - 1], gi)]
                    assignments.extend(inner.assignments)
                    rows.extend(inner.rows)
                    fallback.extend(inner.fallback)
                    peak = max(peak, be.peak[(gs[i - 1], gi)])
                    tr = be.time[(gs[i - 1], gi)]
                elif i == 0:
                    tr = cm.transfer(branch_id, first, ga, gi)
                else:
                    tr = cm.transfer(ids[i - 1], lid, prev, gi)
                amp = tables.amp[i + 1][gi]
                assignments.append((lid, gi))
                rows.append(LayerCost(lid, gi, cm.comp(lid, gi),
                                      cm.sync(lid, gi), amp))
                if amp > amp_limit:
                    fallback.append(lid)
                peak = max(peak, gi)
                steps.append((tr, lid, gi))
                prev = gi

            if rc.exit_block is not None:
                inner = rc.exit_block.interior[(bestGT, h)]
                assignments.extend(inner.assignments)
                rows = rows + list(inner.rows)
                fallback.extend(inner.fallback)
                peak = max(peak, rc.exit_block.peak[(bestGT, h)])
                exit_tr = rc.exit_block.time[(bestGT, h)]
                exit_amp = rc.exit_block.amp_tr[(bestGT, h)]
                conc = None  # lands directly on the join; serial only
            else:
                exit_tr = cm.transfer(tail, join_id, bestGT, h)
                exit_amp = exit_tr
                conc = True

            duration = _walk_chain_cost(cm, steps) + exit_tr

            conc_duration = conc_exit = conc_first = None
            conc_rows: tuple[LayerCost, ...] = ()
            if conc:
                entry_full = cm.full_transfer(branch_id)
                exit_full = cm.full_transfer(tail)
                csteps = [(entry_full, ids[0], gs[0])] + steps[1:]
                conc_duration = _walk_chain_cost(cm, csteps) + exit_full
                conc_exit = exit_full
                conc_first = cm.amp_of(
                    first, gs[0],
                    (entry_full + cm.comp(first, gs[0])) + cm.sync(first, gs[0]))
                crows = [LayerCost(first, gs[0], cm.comp(first, gs[0]),
                                   cm.sync(first, gs[0]), conc_first)]
                conc_rows = tuple(crows + rows[1:])

            out[(ga, h)] = _ChainSolution(
                duration=duration, exit_amp=exit_amp, peak=peak,
                assignments=tuple(assignments), rows=tuple(rows),
                fallback=tuple(fallback), conc_duration=conc_duration,
                conc_exit_amp=conc_exit, conc_first_amp=conc_first,
                conc_rows=conc_rows)
    return out


def _block_edge(bj: BranchJoin, cm: CostModel, amp_limit: float,
                total_gpus: int) -> _BlockEdge:
    edge = _BlockEdge(bj.branch_id, bj.join_id)
    solved = [_solve_chain(chain, bj.branch_id, bj.join_id, cm, amp_limit,
                           total_gpus) for chain in bj.chains]
    for ga in cm.candidates:
        for h in cm.candidates:
            sols = [s[(ga, h)] for s in solved]
            if any(s is None for s in sols) or any(s.fallback for s in sols):
                # an interior that cannot meet the limit makes this scale
                # pair inadmissible rather than silently violating it
                edge.time[(ga, h)] = INF
                edge.amp_tr[(ga, h)] = INF
                continue

            def join_amp_of(tr: float, _h=h) -> float:
                return cm.amp_of(bj.join_id, _h,
                                 (tr + cm.comp(bj.join_id, _h))
                                 + cm.sync(bj.join_id, _h))

            time, join_amp, peak, decisions = _merge_chains(
                sols, total_gpus, amp_limit, join_amp_of)
            assignments: list[tuple[int, int]] = []
            rows: list[LayerCost] = []
            fallback: list[int] = []
            for sol, dec in zip(sols, decisions):
                assignments.extend(sol.assignments)
                rows.extend(sol.conc_rows if dec == "concurrent" else sol.rows)
                fallback.extend(sol.fallback)
            edge.time[(ga, h)] = time
            edge.amp_tr[(ga, h)] = join_amp
            edge.peak[(ga, h)] = peak
            edge.interior[(ga, h)] = _Interior(tuple(assignments), tuple(rows),
                                               tuple(fallback), tuple(decisions))
    return edge


def reduce_multichain(graph: CompGraph, ctx: CostContext,
                      amp_limit: float) -> TrainingPlan:
    """Plan a general branch/join graph by reducing blocks innermost-first
    and running the linear search on the resulting chain."""
    if amp_limit < 1:
        raise InfeasiblePlanError("amplification limit below 1 is infeasible")
    decomp = decompose(graph)
    cm = CostModel(ctx)
    rc = _reduce_blocks(decomp.blocks, cm, amp_limit, ctx.total_gpus)
    assert rc.exit_block is None  # top level always ends on a layer
    tables = _chain_dp(rc.layer_ids, cm, amp_limit,
                       block_edges=rc.block_edges, relax=True)
    return backtrace(tables, amp_limit)


# ---------------------------------------------------------------------------
# Entry points


def plan(graph: CompGraph, total_gpus: int, amp_limit: float,
         global_batch: Optional[int] = None,
         candidates: Optional[Sequence[int]] = None) -> TrainingPlan:
    """Top-level planner entry: power-of-two candidates by default."""
    if total_gpus < 1:
        raise InfeasiblePlanError("total_gpus must be >= 1")
    if global_batch is not None and global_batch != graph.global_batch:
        from dataclasses import replace
        graph = replace(graph, global_batch=int(global_batch))
    ctx = make_context(graph, total_gpus, candidates)
    return reduce_multichain(graph, ctx, amp_limit)


def brute_force_plan(graph: CompGraph, total_gpus: int, amp_limit: float,
                     global_batch: Optional[int] = None,
                     candidates: Optional[Sequence[int]] = None) -> TrainingPlan:
    """Exhaustive oracle: enumerate every assignment of the chain layers,
    price each one with the identical cost-model calls and block-merge
    rules, filter by the per-layer amplification limit, and return the
    optimum.

    Branch/join interiors follow the model semantics (each chain runs its
    shortest admissible serial schedule for the given endpoint scales) but
    are found here by exhaustive enumeration rather than the planner's DP.
    Only meant for tests; guarded to small instances.
    """
    if total_gpus < 1:
        raise InfeasiblePlanError("total_gpus must be >= 1")
    if amp_limit < 1:
        raise InfeasiblePlanError("amplification limit below 1 is infeasible")
    if global_batch is not None and global_batch != graph.global_batch:
        from dataclasses import replace
        graph = replace(graph, global_batch=int(global_batch))
    ctx = make_context(graph, total_gpus, candidates)
    cm = CostModel(ctx)
    decomp = decompose(graph)
    all_ids = decomp.layer_ids()
    n_assign = len(ctx.candidate_gpu_counts) ** len(all_ids)
    if len(all_ids) > 10 or n_assign > 10 ** 6:
        raise InfeasiblePlanError(
            f"instance too large for brute force: {len(all_ids)} layers,"
            f" {n_assign} assignments")

    rc = _oracle_reduce(decomp.blocks, cm, amp_limit, total_gpus)
    assert rc.exit_block is None
    top_ids = rc.layer_ids
    # virtual endpoints are cost-free, so pinning them to one GPU loses nothing
    per_layer = [(1,) if graph.layer(lid).is_virtual else ctx.candidate_gpu_counts
                 for lid in top_ids]

    best_time = INF
    best_combo: Optional[tuple[int, ...]] = None
    for combo in product(*per_layer):
        total = 0.0
        feasible = True
        for i, lid in enumerate(top_ids):
            g = combo[i]
            be = rc.block_edges.get(i)
            if i == 0:
                tr, amp_tr = 0.0, 0.0
            elif be is not None:
                tr = be.time.get((combo[i - 1], g), INF)
                amp_tr = be.amp_tr.get((combo[i - 1], g), INF)
            else:
                tr = cm.transfer(top_ids[i - 1], lid, combo[i - 1], g)
                amp_tr = tr
            if tr == INF:
                feasible = False
                break
            time, amp = _cell_edge(cm, lid, g, tr, amp_tr)
            if amp > amp_limit:
                feasible = False
                break
            total = total + time
        if feasible and total < best_time:
            best_time = total
            best_combo = combo
    if best_combo is None:
        raise InfeasiblePlanError("no admissible assignment exists")

    assignments: list[tuple[int, int]] = []
    rows: list[LayerCost] = []
    for i, lid in enumerate(top_ids):
        g = best_combo[i]
        be = rc.block_edges.get(i)
        if i == 0:
            tr = amp_tr = 0.0
        elif be is not None:
            inner = be.interior[(best_combo[i - 1], g)]
            assignments.extend(inner.assignments)
            rows.extend(inner.rows)
            tr = be.time[(best_combo[i - 1], g)]
            amp_tr = be.amp_tr[(best_combo[i - 1], g)]
        else:
            tr = cm.transfer(top_ids[i - 1], lid, best_combo[i - 1], g)
            amp_tr = tr
        _, amp = _cell_edge(cm, lid, g, tr, amp_tr)
        assignments.append((lid, g))
        rows.append(LayerCost(lid, g, cm.comp(lid, g), cm.sync(lid, g), amp))
    return TrainingPlan(model=graph.name, total_gpus=total_gpus,
                        amp_limit=amp_limit, global_batch=graph.global_batch,
                        assignments=tuple(assignments),
                        predicted_iteration_us=best_time,
                        layer_costs=tuple(rows), fallback_layers=())


def _oracle_reduce(blocks: Sequence, cm: CostModel, amp_limit: float,
                   total_gpus: int) -> _ReducedChain:
    """Like _reduce_blocks but block edges come from exhaustive interior
    enumeration instead of the DP."""
    layer_ids: list[int] = []
    block_edges: dict[int, _BlockEdge] = {}
    pending: Optional[_BlockEdge] = None
    for blk in blocks:
        if isinstance(blk, SingleLayer):
            if pending is not None:
                block_edges[len(layer_ids)] = pending
                pending = None
            layer_ids.append(blk.layer_id)
        else:
            pending = _oracle_block_edge(blk, cm, amp_limit, total_gpus)
    return _ReducedChain(layer_ids, block_edges, pending)


def _oracle_block_edge(bj: BranchJoin, cm: CostModel, amp_limit: float,
                       total_gpus: int) -> _BlockEdge:
    edge = _BlockEdge(bj.branch_id, bj.join_id)
    solved = [_oracle_solve_chain(chain, bj.branch_id, bj.join_id, cm,
                                  amp_limit, total_gpus)
              for chain in bj.chains]
    for ga in cm.candidates:
        for h in cm.candidates:
            sols = [s[(ga, h)] for s in solved]
            if any(s is None for s in sols):
                edge.time[(ga, h)] = INF
                edge.amp_tr[(ga, h)] = INF
                continue

            def join_amp_of(tr: float, _h=h) -> float:
                return cm.amp_of(bj.join_id, _h,
                                 (tr + cm.comp(bj.join_id, _h))
                                 + cm.sync(bj.join_id, _h))

            time, join_amp, peak, decisions = _merge_chains(
                sols, total_gpus, amp_limit, join_amp_of)
            assignments: list[tuple[int, int]] = []
            rows: list[LayerCost] = []
            for sol, dec in zip(sols, decisions):
                assignments.extend(sol.assignments)
                rows.extend(sol.conc_rows if dec == "concurrent" else sol.rows)
            edge.time[(ga, h)] = time
            edge.amp_tr[(ga, h)] = join_amp
            edge.peak[(ga, h)] = peak
            edge.interior[(ga, h)] = _Interior(tuple(assignments), tuple(rows),
                                               (), tuple(decisions))
    return edge


def _oracle_solve_chain(chain_blocks: Sequence, branch_id: int, join_id: int,
                        cm: CostModel, amp_limit: float, total_gpus: int
                        ) -> dict[tuple[int, int], Optional[_ChainSolution]]:
    """Exhaustive counterpart of _solve_chain: enumerate every admissible
    interior assignment for each endpoint scale pair and keep the shortest
    serial duration (ties broken toward reverse-lexicographically smaller
    assignments, matching the DP's backward tie-breaking)."""
    cands = cm.candidates
    out: dict[tuple[int, int], Optional[_ChainSolution]] = {}

    if not chain_blocks:
        for ga in cands:
            for h in cands:
                tr = cm.transfer(branch_id, join_id, ga, h)
                out[(ga, h)] = _ChainSolution(
                    duration=tr, exit_amp=tr, peak=0, assignments=(), rows=(),
                    fallback=(), conc_duration=None, conc_exit_amp=None,
                    conc_first_amp=None)
        return out

    rc = _oracle_reduce(chain_blocks, cm, amp_limit, total_gpus)
    ids = rc.layer_ids
    first, tail = ids[0], ids[-1]
    per_layer = [(1,) if cm.graph.layer(lid).is_virtual else cands
                 for lid in ids]

    for ga in cands:
        for h in cands:
            join_amp_of = _join_amp_fn(cm, join_id, h)
            best_key = None
            best_payload = None
            for combo in product(*per_layer):
                feasible = True
                steps: list[tuple[float, int, int]] = []
                amps: list[float] = []
                peak = 0
                for i, lid in enumerate(ids):
                    g = combo[i]
                    be = rc.block_edges.get(i)
                    if i == 0:
                        tr = cm.transfer(branch_id, first, ga, g)
                        amp_tr = tr
                    elif be is not None:
                        tr = be.time.get((combo[i - 1], g), INF)
                        amp_tr = be.amp_tr.get((combo[i - 1], g), INF)
                        if tr != INF:
                            peak = max(peak, be.peak[(combo[i - 1], g)])
                    else:
                        tr = cm.transfer(ids[i - 1], lid, combo[i - 1], g)
                        amp_tr = tr
                    if tr == INF:
                        feasible = False
                        break
                    _, amp = _cell_edge(cm, lid, g, tr, amp_tr)
                    if amp > amp_limit:
                        feasible = False
                        break
                    steps.append((tr, lid, g))
                    amps.append(amp)
                    peak = max(peak, g)
                if not feasible:
                    continue
                if rc.exit_block is not None:
                    exit_tr = rc.exit_block.time.get((combo[-1], h), INF)
                    exit_amp = rc.exit_block.amp_tr.get((combo[-1], h), INF)
                    if exit_tr == INF or join_amp_of(exit_amp) > amp_limit:
                        continue
                    peak = max(peak, rc.exit_block.peak[(combo[-1], h)])
                else:
                    exit_tr = cm.transfer(tail, join_id, combo[-1], h)
                    exit_amp = exit_tr
                    if join_amp_of(exit_amp) > amp_limit:
                        continue
                duration = _walk_chain_cost(cm, steps) + exit_tr
                key = (duration, tuple(reversed(combo)))
                if best_key is None or key < best_key:
                    best_key = key
                    best_payload = (combo, steps, amps, peak, exit_tr, exit_amp)
            if best_payload is None:
                out[(ga, h)] = None
                continue
            combo, steps, amps, peak, exit_tr, exit_amp = best_payload
            duration = best_key[0]
            assignments: list[tuple[int, int]] = []
            rows: list[LayerCost] = []
            for i, lid in enumerate(ids):
                g = combo[i]
                be = rc.block_edges.get(i)
                if be is not None:
                    inner = be.interior[(combo[i - 1], g)]
                    assignments.extend(inner.assignments)
                    rows.extend(inner.rows)
                assignments.append((lid, g))
                rows.append(LayerCost(lid, g, cm.comp(lid, g),
                                      cm.sync(lid, g), amps[i]))
            conc_rows: tuple[LayerCost, ...] = ()
            if rc.exit_block is not None:
                inner = rc.exit_block.interior[(combo[-1], h)]
                assignments.extend(inner.assignments)
                rows.extend(inner.rows)
                conc_duration = conc_exit = conc_first = None
            else:
                entry_full = cm.full_transfer(branch_id)
                exit_full = cm.full_transfer(tail)
                csteps = [(entry_full, steps[0][1], steps[0][2])] + steps[1:]
                conc_duration = _walk_chain_cost(cm, csteps) + exit_full
                conc_exit = exit_full
                conc_first = cm.amp_of(
                    first, combo[0],
                    (entry_full + cm.comp(first, combo[0]))
                    + cm.sync(first, combo[0]))
                conc_rows = (LayerCost(first, combo[0], cm.comp(first, combo[0]),
                                       cm.sync(first, combo[0]), conc_first),
                             ) + tuple(rows[1:])
            out[(ga, h)] = _ChainSolution(
                duration=duration, exit_amp=exit_amp, peak=peak,
                assignments=tuple(assignments), rows=tuple(rows), fallback=(),
                conc_duration=conc_duration, conc_exit_amp=conc_exit,
                conc_first_amp=conc_first, conc_rows=conc_rows)
    return out


# ---------------------------------------------------------------------------
# Serialization


def plan_to_dict(p: TrainingPlan) -> dict:
    by_id = {lc.layer_id: lc for lc in p.layer_costs}
    return {
        "model": p.model,
        "total_gpus": p.total_gpus,
        "amp_limit": p.amp_limit,
        "global_batch": p.global_batch,
        "predicted_iteration_us": p.predicted_iteration_us,
        "fallback_layers": list(p.fallback_layers),
        "layers": [
            {
                "layer_id": lid,
                "name": "",
                "g": g,
                "comp_us": by_id[lid].comp_us,
                "sync_us": by_id[lid].sync_us,
                "amp": by_id[lid].amp,
            }
            for lid, g in p.assignments
        ],
    }


def plan_to_json(p: TrainingPlan, graph: Optional[CompGraph] = None) -> str:
    doc = plan_to_dict(p)
    if graph is not None:
        for row in doc["layers"]:
            row["name"] = graph.layer(row["layer_id"]).name
    return json.dumps(doc, indent=1) + "\n"


def save_plan(p: TrainingPlan, path: str, graph: Optional[CompGraph] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(plan_to_json(p, graph))


def load_plan(path: str) -> TrainingPlan:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    rows = tuple(LayerCost(r["layer_id"], r["g"], r["comp_us"], r["sync_us"],
                           r["amp"]) for r in doc["layers"])
    return TrainingPlan(
        model=doc["model"], total_gpus=doc["total_gpus"],
        amp_limit=doc["amp_limit"], global_batch=doc["global_batch"],
        assignments=tuple((r["layer_id"], r["g"]) for r in doc["layers"]),
        predicted_iteration_us=doc["predicted_iteration_us"],
        layer_costs=rows, fallback_layers=tuple(doc["fallback_layers"]))
