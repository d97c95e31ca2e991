"""Shared fixtures and generators for randomized oracle tests."""

import random

import pytest

from burstplan.graph import (CompGraph, Layer, LayerProfile, NetworkProfile,
                             build_graph)


def chain_graph(comp_entries, params=None, acts=None, global_batch=8,
                bandwidth=1e9, delay_us=5.0, name="chain"):
    """Build a chain graph from per-layer profile dicts.

    comp_entries: list of {batch: (fwd, bwd)} or {batch: total} (bwd=total/2
    shortcut not used; pass explicit tuples).
    """
    n = len(comp_entries)
    params = params or [0] * n
    acts = acts or [0] * n
    layers = []
    profiles = {}
    for i, entries in enumerate(comp_entries):
        preds = (i - 1,) if i > 0 else ()
        succs = (i + 1,) if i < n - 1 else ()
        layers.append(Layer(i, f"l{i}", "conv", params[i], acts[i], preds, succs))
        profiles[i] = LayerProfile(i, {b: v for b, v in entries.items()})
    return build_graph(name, global_batch, layers, profiles,
                       NetworkProfile(bandwidth, delay_us))


def flat_profile(total_us, batches=(1, 2, 4, 8, 16, 32)):
    """Profile where compute does not shrink with smaller batches."""
    return {b: (total_us / 3.0, 2.0 * total_us / 3.0) for b in batches}


def linear_profile(per_sample_us, batches=(1, 2, 4, 8, 16, 32), knee=1):
    """Profile linear in batch above a knee, flat below."""
    return {b: (per_sample_us * max(b, knee) / 3.0,
                2.0 * per_sample_us * max(b, knee) / 3.0)
            for b in batches}


def random_chain_graph(rng: random.Random, max_layers=6, global_batch=8):
    """Random chain with heterogeneous scalability, used by oracle tests."""
    n = rng.randint(1, max_layers)
    entries = []
    params = []
    acts = []
    for _ in range(n):
        per_sample = rng.uniform(1.0, 200.0)
        knee = rng.choice([1, 1, 2, 4, 8])
        batches = (1, 2, 4, 8, 16, 32)
        entries.append({b: (per_sample * max(b, knee),
                            2.0 * per_sample * max(b, knee))
                        for b in batches})
        params.append(rng.choice([0, rng.randint(10_000, 50_000_000)]))
        acts.append(rng.choice([0, rng.randint(1_000, 5_000_000)]))
    bandwidth = rng.choice([1e9, 25e9, 600e9])
    delay = rng.choice([0.0, 2.0, 10.0])
    return chain_graph(entries, params, acts, global_batch=global_batch,
                       bandwidth=bandwidth, delay_us=delay)


def random_sp_graph(rng: random.Random, max_layers=6, global_batch=8,
                    nested=False):
    """Random series-parallel DAG built by the branch/join grammar.  With
    nested=True, a chain inside a block may itself contain a block."""
    layers = []
    profiles = {}
    edges = []

    def new_layer(preds, param_ok=True):
        lid = len(layers)
        per_sample = rng.uniform(1.0, 100.0)
        knee = rng.choice([1, 2, 4])
        batches = (1, 2, 4, 8, 16, 32)
        layers.append((lid, rng.choice([0, rng.randint(10_000, 10_000_000)])
                       if param_ok else 0,
                       rng.choice([0, rng.randint(1_000, 2_000_000)])))
        profiles[lid] = {b: (per_sample * max(b, knee),
                             2.0 * per_sample * max(b, knee)) for b in batches}
        for p in preds:
            edges.append((p, lid))
        return lid

    budget = rng.randint(3, max_layers)
    head = new_layer([])
    used = 1

    def grow_chain(head, length):
        """Grow `length` layers; may spend some of them on a nested block."""
        nonlocal used
        made = 0
        while made < length:
            left = length - made
            if nested and left >= 3 and rng.random() < 0.4:
                a = new_layer([head])
                t1 = new_layer([a])
                j = new_layer([t1, a], param_ok=False)
                head = j
                made += 3
            else:
                head = new_layer([head])
                made += 1
        return head

    while used < budget:
        remaining = budget - used
        if remaining >= 3 and rng.random() < 0.5:
            # branch/join block: two chains (one may be a direct edge)
            n1 = rng.randint(1, min(4 if nested else 2, remaining - 1))
            n2 = rng.randint(0, min(1, remaining - 1 - n1))
            c1 = grow_chain(head, n1)
            c2 = head
            for _ in range(n2):
                c2 = new_layer([c2])
            join_preds = [c1, c2] if c2 != head else [c1, head]
            head = new_layer(join_preds, param_ok=False)
            used += n1 + n2 + 1
        else:
            head = new_layer([head])
            used += 1

    preds = {lid: [] for lid, _, _ in layers}
    succs = {lid: [] for lid, _, _ in layers}
    for a, b in edges:
        preds[b].append(a)
        succs[a].append(b)
    built = [Layer(lid, f"l{lid}", "conv", p, a,
                   tuple(preds[lid]), tuple(succs[lid]))
             for lid, p, a in layers]
    profs = {lid: LayerProfile(lid, profiles[lid]) for lid, _, _ in layers}
    bandwidth = rng.choice([1e9, 25e9, 600e9])
    delay = rng.choice([0.0, 2.0, 10.0])
    return build_graph("sp", global_batch, built, profs,
                       NetworkProfile(bandwidth, delay))


@pytest.fixture
def simple_net():
    return NetworkProfile(600e9, 10.0)
