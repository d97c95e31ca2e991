"""Computation-graph data model: layers, cost profiles, ingestion and
series-parallel decomposition.

A model description file is a single JSON document with four sections::

    model     {name, global_batch, input_shape?}
    layers    [{id, name, kind, params_bytes, activation_bytes_per_sample,
                predecessors, successors}]
    profiles  [{layer_id, entries: [{batch, fwd_us, bwd_us}]}]
    network   {bandwidth_bytes_per_sec, propagation_delay_us}

Times are microseconds, sizes are bytes.  Graphs are immutable after load and
safe to share across concurrent planner or simulator runs.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

from .errors import GraphFormatError, MissingProfileError, UnsupportedTopologyError

VIRTUAL_KIND = "virtual"


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class Layer:
    """One operator in the model's execution graph."""

    id: int
    name: str
    kind: str
    params_bytes: int
    activation_bytes_per_sample: int
    predecessors: tuple[int, ...]
    successors: tuple[int, ...]

    @property
    def is_virtual(self) -> bool:
        return self.kind == VIRTUAL_KIND


@dataclass(frozen=True)
class LayerProfile:
    """Measured forward+backward compute time per per-device sample count."""

    layer_id: int
    entries: Mapping[int, tuple[float, float]]  # batch -> (fwd_us, bwd_us)

    def batches(self) -> list[int]:
        return sorted(self.entries)


@dataclass(frozen=True)
class NetworkProfile:
    """Full bi-section network model: one bandwidth figure for all pairs."""

    per_gpu_bandwidth_bytes_per_sec: float
    propagation_delay_us: float


@dataclass(frozen=True)
class SingleLayer:
    layer_id: int


@dataclass(frozen=True)
class BranchJoin:
    """A branch/join region reduced to a single edge by the planner.

    ``chains`` holds only the interior blocks; the branching and joining
    layers themselves are owned by the adjacent SingleLayer blocks, so that
    concatenating blocks in order yields every layer exactly once (this also
    lets a joining layer immediately open the next block, as in
    inception-style module stacks).
    """

    branch_id: int
    join_id: int
    chains: tuple[tuple["Block", ...], ...]


Block = Union[SingleLayer, BranchJoin]


@dataclass(frozen=True)
class BlockDecomposition:
    blocks: tuple[Block, ...]

    def layer_ids(self) -> list[int]:
        """All layer ids in block order, interiors included."""
        out: list[int] = []

        def walk(blocks: Iterable[Block]) -> None:
            for b in blocks:
                if isinstance(b, SingleLayer):
                    out.append(b.layer_id)
                else:
                    for chain in b.chains:
                        walk(chain)

        walk(self.blocks)
        return out


@dataclass(frozen=True)
class CompGraph:
    """A static DAG of layers plus their cost profiles."""

    name: str
    global_batch: int
    layers: tuple[Layer, ...]
    profiles: Mapping[int, LayerProfile]
    network: NetworkProfile
    input_shape: tuple[int, ...] = ()
    by_id: Mapping[int, Layer] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "by_id", {l.id: l for l in self.layers})

    def layer(self, layer_id: int) -> Layer:
        return self.by_id[layer_id]

    def source(self) -> Layer:
        return next(l for l in self.layers if not l.predecessors)

    def sink(self) -> Layer:
        return next(l for l in self.layers if not l.successors)

    def topo_order(self) -> list[int]:
        return _topo_order({l.id: l.successors for l in self.layers},
                           {l.id: len(l.predecessors) for l in self.layers})

    def total_params_bytes(self) -> int:
        return sum(l.params_bytes for l in self.layers)


def _topo_order(succ: Mapping[int, Sequence[int]], indeg: dict[int, int]) -> list[int]:
    indeg = dict(indeg)
    ready = sorted(i for i, d in indeg.items() if d == 0)
    order: list[int] = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        inserted = False
        for s in succ[v]:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
                inserted = True
        if inserted:
            ready.sort()
    if len(order) != len(indeg):
        raise GraphFormatError("cycle detected in layer graph")
    return order


# ---------------------------------------------------------------------------
# Construction and validation


def build_graph(name: str, global_batch: int, layers: Sequence[Layer],
                profiles: Mapping[int, LayerProfile], network: NetworkProfile,
                input_shape: Sequence[int] = ()) -> CompGraph:
    """Validate the pieces, add virtual source/sink layers if needed, and
    return an immutable CompGraph."""
    if global_batch < 1:
        raise GraphFormatError("global_batch must be >= 1")
    ids = [l.id for l in layers]
    if len(set(ids)) != len(ids):
        raise GraphFormatError("duplicate layer ids")
    known = set(ids)
    for l in layers:
        for ref in list(l.predecessors) + list(l.successors):
            if ref not in known:
                raise GraphFormatError(f"missing layer {ref} referenced by layer {l.id}")
        if l.params_bytes < 0 or l.activation_bytes_per_sample < 0:
            raise GraphFormatError(f"layer {l.id} has negative byte size")
    by_id = {l.id: l for l in layers}
    for l in layers:
        for p in l.predecessors:
            if l.id not in by_id[p].successors:
                raise GraphFormatError(
                    f"edge {p}->{l.id} missing from successors of layer {p}")
        for s in l.successors:
            if l.id not in by_id[s].predecessors:
                raise GraphFormatError(
                    f"edge {l.id}->{s} missing from predecessors of layer {s}")
    _topo_order({l.id: l.successors for l in layers},
                {l.id: len(l.predecessors) for l in layers})

    layers = _with_virtual_endpoints(list(layers))

    for l in layers:
        if l.is_virtual:
            continue
        prof = profiles.get(l.id)
        if prof is None or not prof.entries:
            raise MissingProfileError(f"missing profile entry for layer {l.id}")
        for b, (fwd, bwd) in prof.entries.items():
            if b < 1:
                raise GraphFormatError(f"profile batch {b} for layer {l.id} must be >= 1")
            if fwd <= 0 or bwd <= 0:
                raise GraphFormatError(f"non-positive time in profile of layer {l.id}")
    if network.per_gpu_bandwidth_bytes_per_sec <= 0:
        raise GraphFormatError("network bandwidth must be positive")
    if network.propagation_delay_us < 0:
        raise GraphFormatError("propagation delay must be non-negative")

    return CompGraph(name=name, global_batch=global_batch, layers=tuple(layers),
                     profiles=dict(profiles), network=network,
                     input_shape=tuple(input_shape))


def _with_virtual_endpoints(layers: list[Layer]) -> list[Layer]:
    """Insert zero-cost virtual source/sink layers so the graph has exactly
    one of each.  Virtual layers have no profile, no parameters and no
    activation; all costs involving them are zero."""
    sources = [l.id for l in layers if not l.predecessors]
    sinks = [l.id for l in layers if not l.successors]
    if not sources or not sinks:
        raise GraphFormatError("graph has no source or no sink")
    next_id = max(l.id for l in layers) + 1
    by_id = {l.id: l for l in layers}

    def relink(lid: int, preds=None, succs=None) -> None:
        old = by_id[lid]
        by_id[lid] = Layer(old.id, old.name, old.kind, old.params_bytes,
                           old.activation_bytes_per_sample,
                           tuple(preds) if preds is not None else old.predecessors,
                           tuple(succs) if succs is not None else old.successors)

    extra: list[Layer] = []
    if len(sources) > 1:
        vid = next_id
        next_id += 1
        extra.append(Layer(vid, "_source", VIRTUAL_KIND, 0, 0, (), tuple(sources)))
        for s in sources:
            relink(s, preds=(vid,))
    if len(sinks) > 1:
        vid = next_id
        next_id += 1
        extra.append(Layer(vid, "_sink", VIRTUAL_KIND, 0, 0, tuple(sinks), ()))
        for s in sinks:
            relink(s, succs=(vid,))
    return [by_id[l.id] for l in layers] + extra


# ---------------------------------------------------------------------------
# File I/O


def load_graph(path: str) -> CompGraph:
    """Parse and validate a model description file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"cannot parse {path}: {exc}") from exc
    return graph_from_dict(doc)


def graph_from_dict(doc: dict) -> CompGraph:
    try:
        model = doc["model"]
        raw_layers = doc["layers"]
        raw_profiles = doc["profiles"]
        raw_net = doc["network"]
    except (KeyError, TypeError) as exc:
        raise GraphFormatError(f"missing section in graph file: {exc}") from exc
    try:
        layers = [
            Layer(int(l["id"]), str(l["name"]), str(l["kind"]),
                  int(l["params_bytes"]), int(l["activation_bytes_per_sample"]),
                  tuple(int(p) for p in l["predecessors"]),
                  tuple(int(s) for s in l["successors"]))
            for l in raw_layers
        ]
        profiles = {
            int(p["layer_id"]): LayerProfile(
                int(p["layer_id"]),
                {int(e["batch"]): (float(e["fwd_us"]), float(e["bwd_us"]))
                 for e in p["entries"]})
            for p in raw_profiles
        }
        network = NetworkProfile(float(raw_net["bandwidth_bytes_per_sec"]),
                                 float(raw_net["propagation_delay_us"]))
        name = str(model["name"])
        global_batch = int(model["global_batch"])
        input_shape = tuple(int(x) for x in model.get("input_shape", ()))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"malformed graph file field: {exc}") from exc
    return build_graph(name, global_batch, layers, profiles, network, input_shape)


def graph_to_dict(graph: CompGraph) -> dict:
    """Inverse of graph_from_dict; virtual layers are not written out."""
    return {
        "model": {
            "name": graph.name,
            "global_batch": graph.global_batch,
            **({"input_shape": list(graph.input_shape)} if graph.input_shape else {}),
        },
        "layers": [
            {
                "id": l.id,
                "name": l.name,
                "kind": l.kind,
                "params_bytes": l.params_bytes,
                "activation_bytes_per_sample": l.activation_bytes_per_sample,
                "predecessors": [p for p in l.predecessors
                                 if not graph.layer(p).is_virtual],
                "successors": [s for s in l.successors
                               if not graph.layer(s).is_virtual],
            }
            for l in graph.layers if not l.is_virtual
        ],
        "profiles": [
            {
                "layer_id": lid,
                "entries": [
                    {"batch": b, "fwd_us": fwd, "bwd_us": bwd}
                    for b, (fwd, bwd) in sorted(prof.entries.items())
                ],
            }
            for lid, prof in sorted(graph.profiles.items())
            if lid in graph.by_id and not graph.layer(lid).is_virtual
        ],
        "network": {
            "bandwidth_bytes_per_sec": graph.network.per_gpu_bandwidth_bytes_per_sec,
            "propagation_delay_us": graph.network.propagation_delay_us,
        },
    }


def save_graph(graph: CompGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(graph), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Profile lookup


def comp_at_batch(graph: CompGraph, layer_id: int, batch: int,
                  interpolate: bool = True) -> float:
    """Forward+backward time of a layer at a per-device sample count.

    Exact profile entries are preferred; otherwise the value is linearly
    interpolated between the bracketing entries and clamped at the extremes.
    With interpolation disabled a missing entry is an error.
    """
    layer = graph.layer(layer_id)
    if layer.is_virtual:
        return 0.0
    prof = graph.profiles.get(layer_id)
    if prof is None or not prof.entries:
        raise MissingProfileError(f"missing profile entry for layer {layer_id}")
    if batch in prof.entries:
        fwd, bwd = prof.entries[batch]
        return fwd + bwd
    if not interpolate:
        raise MissingProfileError(
            f"layer {layer_id} has no profile entry at batch {batch}"
            " and interpolation is disabled")
    batches = prof.batches()
    if batch <= batches[0]:
        fwd, bwd = prof.entries[batches[0]]
        return fwd + bwd
    if batch >= batches[-1]:
        fwd, bwd = prof.entries[batches[-1]]
        return fwd + bwd
    hi = bisect.bisect_left(batches, batch)
    b0, b1 = batches[hi - 1], batches[hi]
    t0 = sum(prof.entries[b0])
    t1 = sum(prof.entries[b1])
    frac = (batch - b0) / (b1 - b0)
    return t0 + (t1 - t0) * frac


def profile_lookup(graph: CompGraph, layer_id: int, gpus: int,
                   interpolate: bool = True) -> float:
    """Compute time of a layer when its global batch is split over ``gpus``
    devices: the per-device batch is the ceiling split ceil(B/g)."""
    if gpus < 1:
        raise ValueError("gpus must be >= 1")
    return comp_at_batch(graph, layer_id, ceil_div(graph.global_batch, gpus),
                         interpolate)


# ---------------------------------------------------------------------------
# Series-parallel decomposition


def postdominators(graph: CompGraph) -> dict[int, set[int]]:
    """postdom[v] = set of layers (including v) on every path from v to the sink."""
    order = graph.topo_order()
    post: dict[int, set[int]] = {}
    for v in reversed(order):
        succs = graph.layer(v).successors
        if not succs:
            post[v] = {v}
            continue
        acc = set(post[succs[0]])
        for s in succs[1:]:
            acc &= post[s]
        acc.add(v)
        post[v] = acc
    return post


def immediate_postdominator(graph: CompGraph, post: dict[int, set[int]],
                            topo_pos: dict[int, int], v: int) -> Optional[int]:
    cands = post[v] - {v}
    if not cands:
        return None
    return min(cands, key=lambda x: topo_pos[x])


def decompose(graph: CompGraph) -> BlockDecomposition:
    """Reduce the graph to an ordered chain of blocks.

    Every layer with out-degree >= 2 must rejoin at its immediate
    postdominator, and everything between must itself reduce the same way;
    anything else is rejected as an unsupported topology, naming the layers
    involved.
    """
    post = postdominators(graph)
    topo = graph.topo_order()
    topo_pos = {v: i for i, v in enumerate(topo)}

    def parse_chain(start: int, stop: Optional[int]) -> tuple[Block, ...]:
        blocks: list[Block] = []
        cur: Optional[int] = start
        while cur is not None and cur != stop:
            blocks.append(SingleLayer(cur))
            succs = graph.layer(cur).successors
            if not succs:
                if stop is not None:
                    raise UnsupportedTopologyError(
                        f"layer {cur} dead-ends before rejoining at layer {stop}",
                        layers=(cur, stop))
                cur = None
            elif len(succs) == 1:
                nxt = succs[0]
                if nxt != stop and len(graph.layer(nxt).predecessors) > 1:
                    raise UnsupportedTopologyError(
                        f"layer {nxt} joins paths that do not share a single"
                        f" branching layer (reached from layer {cur})",
                        layers=(cur, nxt))
                cur = nxt
            else:
                join = immediate_postdominator(graph, post, topo_pos, cur)
                if join is None:
                    raise UnsupportedTopologyError(
                        f"branches of layer {cur} never rejoin", layers=(cur,))
                if stop is not None and topo_pos[join] > topo_pos[stop]:
                    raise UnsupportedTopologyError(
                        f"branch at layer {cur} rejoins at layer {join}, outside"
                        f" its enclosing region ending at layer {stop}",
                        layers=(cur, join, stop))
                chains = []
                for s in sorted(succs):
                    if s == join:
                        chains.append(())  # direct edge
                    else:
                        if len(graph.layer(s).predecessors) > 1:
                            raise UnsupportedTopologyError(
                                f"layer {s} has predecessors outside the block"
                                f" branching at layer {cur}", layers=(cur, s))
                        chains.append(parse_chain(s, join))
                blocks.append(BranchJoin(cur, join, tuple(chains)))
                cur = join
        return tuple(blocks)

    blocks = parse_chain(graph.source().id, None)
    decomp = BlockDecomposition(blocks)
    covered = decomp.layer_ids()
    if sorted(covered) != sorted(l.id for l in graph.layers):
        missing = set(l.id for l in graph.layers) - set(covered)
        raise UnsupportedTopologyError(
            f"decomposition did not cover layers {sorted(missing)}",
            layers=sorted(missing))
    return decomp
