"""Per-layer cost primitives: compute, sample-redistribution traffic,
gradient synchronization, and the GPU-sec amplification metric.

All functions are pure; CostModel adds memoization over one immutable graph
so planner searches and simulations can share cached values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

from .errors import GraphFormatError
from .graph import CompGraph, Layer, NetworkProfile, ceil_div, comp_at_batch


def power_of_two_candidates(total_gpus: int) -> tuple[int, ...]:
    """Default candidate GPU counts: powers of two up to the cluster size."""
    if total_gpus < 1:
        raise ValueError("total_gpus must be >= 1")
    out = []
    g = 1
    while g <= total_gpus:
        out.append(g)
        g *= 2
    return tuple(out)


@dataclass(frozen=True)
class CostContext:
    """Everything the planner needs to price a candidate assignment."""

    graph: CompGraph
    network: NetworkProfile
    candidate_gpu_counts: tuple[int, ...]
    total_gpus: int
    interpolate: bool = True

    def __post_init__(self):
        cands = self.candidate_gpu_counts
        if not cands:
            raise GraphFormatError("candidate GPU counts must be non-empty")
        if list(cands) != sorted(set(cands)):
            raise GraphFormatError("candidate GPU counts must be sorted and unique")
        if cands[0] != 1:
            raise GraphFormatError("candidate GPU counts must contain 1")
        if cands[-1] > self.total_gpus:
            raise GraphFormatError("candidate GPU count exceeds total GPUs")


def make_context(graph: CompGraph, total_gpus: int,
                 candidates: Optional[Sequence[int]] = None,
                 interpolate: bool = True) -> CostContext:
    cands = tuple(candidates) if candidates is not None \
        else power_of_two_candidates(total_gpus)
    return CostContext(graph=graph, network=graph.network,
                       candidate_gpu_counts=cands, total_gpus=total_gpus,
                       interpolate=interpolate)


@dataclass(frozen=True)
class LayerCost:
    """Planner report row for one layer of a finished plan."""

    layer_id: int
    g: int
    comp_us: float
    sync_us: float
    amp: float


# ---------------------------------------------------------------------------
# Primitives


def comm_time(payload_bytes: float, network: NetworkProfile) -> float:
    """Payload over per-GPU bandwidth plus the propagation delay, in us."""
    if payload_bytes < 0:
        raise ValueError("payload must be non-negative")
    return payload_bytes / network.per_gpu_bandwidth_bytes_per_sec * 1e6 \
        + network.propagation_delay_us


@lru_cache(maxsize=None)
def moved_samples(global_batch: int, g: int, h: int) -> int:
    """Number of samples whose owning device changes when B contiguously
    block-partitioned samples are re-split from g to h devices.

    Device k owns samples [k*ceil(B/g), (k+1)*ceil(B/g)) so the partition
    matches the ceiling per-device batch used for compute.
    """
    if g == h:
        return 0
    cg = ceil_div(global_batch, g)
    ch = ceil_div(global_batch, h)
    bounds = sorted(set(range(0, global_batch, cg))
                    | set(range(0, global_batch, ch))
                    | {global_batch})
    moved = 0
    for a, b in zip(bounds, bounds[1:]):
        if a // cg != a // ch:
            moved += b - a
    return moved


def activation_transfer(src: Layer, dst: Layer, g: int, h: int,
                        network: NetworkProfile, global_batch: int) -> float:
    """Time to redistribute the batch between two adjacent layers scaled to
    g and h devices: forward activations plus backward gradients (gradients
    have the same tensor shape, hence the factor two).  Zero when nothing
    moves, including edges to or from virtual layers."""
    if g == h or src.is_virtual or dst.is_virtual:
        return 0.0
    bytes_moved = moved_samples(global_batch, g, h) * src.activation_bytes_per_sample
    if bytes_moved == 0:
        return 0.0
    return 2.0 * comm_time(bytes_moved, network)


def full_activation_transfer(src: Layer, network: NetworkProfile,
                             global_batch: int) -> float:
    """Transfer cost when every sample must move, used when a branch is
    relocated to a disjoint GPU set for concurrent execution."""
    if src.is_virtual or src.activation_bytes_per_sample == 0:
        return 0.0
    return 2.0 * comm_time(global_batch * src.activation_bytes_per_sample, network)


def sync_time(layer: Layer, g: int, network: NetworkProfile) -> float:
    """Gradient synchronization time for one layer replicated on g devices.

    Uses the bandwidth-optimal ring all-reduce volume 2*N*(g-1)/g.  Charged
    serially after the backward pass (no overlap).  Layers without trainable
    parameters synchronize nothing.
    """
    if g <= 1 or layer.params_bytes == 0:
        return 0.0
    payload = 2.0 * layer.params_bytes * (g - 1) / g
    return comm_time(payload, network)


def amplification(total_time_us: float, g: int, comp_single_us: float) -> float:
    """GPU-sec amplification: scaled aggregate GPU time over the layer's
    single-GPU compute time.  Communication inside total_time_us counts."""
    if comp_single_us <= 0:
        raise ValueError("single-GPU compute time must be positive")
    return total_time_us * g / comp_single_us


def transition_time(src: Layer, dst: Layer, g: int, h: int,
                    network: NetworkProfile, global_batch: int,
                    block_cost: Optional[float] = None) -> float:
    """Cost of moving from one block of the reduced chain to the next.

    Identical to activation_transfer for directly adjacent layers; for an
    edge that stands in for a reduced branch/join block the planner supplies
    the block's merged interior cost.
    """
    if block_cost is not None:
        return block_cost
    return activation_transfer(src, dst, g, h, network, global_batch)


# ---------------------------------------------------------------------------
# Memoizing wrapper


@dataclass
class CostModel:
    """Caches cost primitives for one (graph, network, batch) combination."""

    ctx: CostContext
    _comp: dict = field(default_factory=dict)
    _sync: dict = field(default_factory=dict)
    _tr: dict = field(default_factory=dict)
    _full_tr: dict = field(default_factory=dict)

    @property
    def graph(self) -> CompGraph:
        return self.ctx.graph

    @property
    def candidates(self) -> tuple[int, ...]:
        return self.ctx.candidate_gpu_counts

    def comp(self, layer_id: int, g: int) -> float:
        key = (layer_id, g)
        if key not in self._comp:
            layer = self.graph.layer(layer_id)
            if layer.is_virtual:
                self._comp[key] = 0.0
            else:
                self._comp[key] = comp_at_batch(
                    self.graph, layer_id,
                    ceil_div(self.graph.global_batch, g), self.ctx.interpolate)
        return self._comp[key]

    def sync(self, layer_id: int, g: int) -> float:
        key = (layer_id, g)
        if key not in self._sync:
            self._sync[key] = sync_time(self.graph.layer(layer_id), g,
                                        self.ctx.network)
        return self._sync[key]

    def transfer(self, src_id: int, dst_id: int, g: int, h: int) -> float:
        key = (src_id, dst_id, g, h)
        if key not in self._tr:
            self._tr[key] = activation_transfer(
                self.graph.layer(src_id), self.graph.layer(dst_id), g, h,
                self.ctx.network, self.graph.global_batch)
        return self._tr[key]

    def full_transfer(self, src_id: int) -> float:
        if src_id not in self._full_tr:
            self._full_tr[src_id] = full_activation_transfer(
                self.graph.layer(src_id), self.ctx.network,
                self.graph.global_batch)
        return self._full_tr[src_id]

    def node_cost(self, layer_id: int, g: int) -> float:
        """comp + sync, the g-dependent self cost of a layer."""
        return self.comp(layer_id, g) + self.sync(layer_id, g)

    def edge_cost(self, src_id: Optional[int], src_g: int,
                  dst_id: int, dst_g: int,
                  transit_override: Optional[float] = None) -> float:
        """Transit into dst plus dst's self cost; src None means chain start."""
        if transit_override is not None:
            tr = transit_override
        elif src_id is None:
            tr = 0.0
        else:
            tr = self.transfer(src_id, dst_id, src_g, dst_g)
        return (tr + self.comp(dst_id, dst_g)) + self.sync(dst_id, dst_g)

    def amp_of(self, layer_id: int, g: int, time_us: float) -> float:
        """Amplification of a layer given the time attributed to it; layers
        with zero single-GPU compute (virtual endpoints) are exempt and
        report the neutral value 1."""
        c1 = self.comp(layer_id, 1)
        if c1 <= 0:
            return 1.0
        return amplification(time_us, g, c1)
