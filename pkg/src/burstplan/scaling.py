"""Time-to-accuracy estimates for weak, strong, and batch-optimal scaling.

Combines a data-parallel iteration-time estimate (profiles plus the network
model) with a user-supplied sample-efficiency curve mapping global batch
size to the number of steps needed to reach a target error.  Sample
efficiency curves are always inputs, never measured here.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import CurveDomainError, GraphFormatError
from .graph import CompGraph, NetworkProfile, ceil_div, comp_at_batch
from .costs import sync_time

STRATEGIES = ("weak", "strong", "batch_optimal")


@dataclass(frozen=True)
class SampleEfficiencyCurve:
    """Global batch size -> steps to reach the target error.

    Queries between grid points interpolate linearly in log-log space;
    queries outside the measured domain are errors rather than guesses.
    """

    target_error: float
    points: tuple[tuple[int, float], ...]  # (batch, steps), batch ascending

    def __post_init__(self):
        batches = [b for b, _ in self.points]
        steps = [s for _, s in self.points]
        if len(batches) < 1:
            raise GraphFormatError("curve needs at least one point")
        if batches != sorted(set(batches)):
            raise GraphFormatError("curve batch sizes must be strictly increasing")
        if any(s <= 0 for s in steps):
            raise GraphFormatError("curve steps must be positive")
        for a, b in zip(steps, steps[1:]):
            if b > a:
                raise GraphFormatError(
                    "steps_to_target_error must be nonincreasing in batch size")

    @property
    def min_batch(self) -> int:
        return self.points[0][0]

    @property
    def max_batch(self) -> int:
        return self.points[-1][0]

    def steps(self, global_batch: int) -> float:
        if global_batch < self.min_batch or global_batch > self.max_batch:
            raise CurveDomainError(
                f"batch {global_batch} outside curve domain"
                f" [{self.min_batch}, {self.max_batch}]")
        batches = [b for b, _ in self.points]
        i = bisect.bisect_left(batches, global_batch)
        if batches[i] == global_batch:
            return self.points[i][1]
        (b0, s0), (b1, s1) = self.points[i - 1], self.points[i]
        frac = (math.log(global_batch) - math.log(b0)) / (math.log(b1) - math.log(b0))
        return math.exp(math.log(s0) + (math.log(s1) - math.log(s0)) * frac)

    def search_grid(self) -> list[int]:
        """Measured batches plus one geometric midpoint per gap; the domain
        the batch-optimal strategy scans."""
        grid: set[int] = set(b for b, _ in self.points)
        for (b0, _), (b1, _) in zip(self.points, self.points[1:]):
            mid = round(math.sqrt(b0 * b1))
            if b0 < mid < b1:
                grid.add(mid)
        return sorted(grid)


def load_curve(path: str) -> SampleEfficiencyCurve:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"cannot parse {path}: {exc}") from exc
    try:
        points = tuple(sorted((int(p["batch"]), float(p["steps"]))
                              for p in doc["points"]))
        return SampleEfficiencyCurve(float(doc["target_error"]), points)
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"malformed curve file: {exc}") from exc


def save_curve(curve: SampleEfficiencyCurve, path: str) -> None:
    doc = {
        "target_error": curve.target_error,
        "points": [{"batch": b, "steps": s} for b, s in curve.points],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


@dataclass(frozen=True)
class ScalingEstimate:
    strategy: str
    n_gpus: int
    chosen_global_batch: int
    per_gpu_batch: int
    iteration_time_us: float
    steps: float
    time_to_accuracy_s: float
    speedup_vs_1gpu: float


def iteration_time(graph: CompGraph, n_gpus: int, global_batch: int,
                   network: Optional[NetworkProfile] = None) -> float:
    """Pure data-parallel iteration estimate: every layer on n_gpus devices
    at per-device batch ceil(B/n), plus per-layer gradient sync."""
    if n_gpus < 1:
        raise ValueError("n_gpus must be >= 1")
    net = network or graph.network
    b = ceil_div(global_batch, n_gpus)
    total = 0.0
    for layer in graph.layers:
        if layer.is_virtual:
            continue
        total += comp_at_batch(graph, layer.id, b)
        total += sync_time(layer, n_gpus, net)
    return total


def estimate(strategy: str, graph: CompGraph, curve: SampleEfficiencyCurve,
             n_gpus: int, network: Optional[NetworkProfile] = None,
             base_batch: Optional[int] = None) -> ScalingEstimate:
    """Time-to-accuracy of one strategy at one cluster size.

    weak holds the per-GPU batch at base_batch, strong holds the global
    batch at base_batch, batch_optimal scans the curve's grid (plus the two
    batches the other strategies would use, so it dominates them by
    construction).  Speedups are normalized to one GPU at base_batch.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    net = network or graph.network
    base = base_batch if base_batch is not None else graph.global_batch

    baseline_tta = curve.steps(base) * iteration_time(graph, 1, base, net)

    if strategy == "weak":
        chosen = base * n_gpus
        steps = curve.steps(chosen)
        iter_us = iteration_time(graph, n_gpus, chosen, net)
    elif strategy == "strong":
        chosen = base
        steps = curve.steps(chosen)
        iter_us = iteration_time(graph, n_gpus, chosen, net)
    else:
        grid = set(curve.search_grid())
        grid.add(base)
        weak_b = base * n_gpus
        if curve.min_batch <= weak_b <= curve.max_batch:
            grid.add(weak_b)
        best = None
        for b in sorted(grid):
            s = curve.steps(b)
            it = iteration_time(graph, n_gpus, b, net)
            tta = s * it
            if best is None or tta < best[0]:
                best = (tta, b, s, it)
        _, chosen, steps, iter_us = best

    tta_s = steps * iter_us / 1e6
    speedup = (baseline_tta / 1e6) / tta_s if tta_s > 0 else 0.0
    return ScalingEstimate(strategy=strategy, n_gpus=n_gpus,
                           chosen_global_batch=chosen,
                           per_gpu_batch=ceil_div(chosen, n_gpus),
                           iteration_time_us=iter_us, steps=steps,
                           time_to_accuracy_s=tta_s, speedup_vs_1gpu=speedup)


def speedup_curve(strategy: str, graph: CompGraph,
                  curve: SampleEfficiencyCurve, gpu_counts: Sequence[int],
                  network: Optional[NetworkProfile] = None,
                  base_batch: Optional[int] = None) -> list[ScalingEstimate]:
    return [estimate(strategy, graph, curve, n, network, base_batch)
            for n in gpu_counts]


TABLE_HEADER = ("n_gpus", "strategy", "batch", "iter_us", "steps", "tta_s",
                "speedup")


def estimates_to_table(rows: Sequence[ScalingEstimate]) -> str:
    """Tab-separated table with a header row, one line per estimate."""
    lines = ["\t".join(TABLE_HEADER)]
    for r in rows:
        lines.append("\t".join([
            str(r.n_gpus), r.strategy, str(r.chosen_global_batch),
            f"{r.iteration_time_us:.3f}", f"{r.steps:.3f}",
            f"{r.time_to_accuracy_s:.6f}", f"{r.speedup_vs_1gpu:.4f}",
        ]))
    return "\n".join(lines) + "\n"
