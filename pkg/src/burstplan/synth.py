"""Synthetic model graphs, cost profiles, and sample-efficiency curves.

Real layer profiles come from hardware measurements; these parametric
families stand in for them in tests and demos.  Cost shapes follow the usual
GPU behavior: convolution time is linear in the per-device batch above a
per-layer knee and flat below it (the device runs out of work to
parallelize), dense layers are nearly flat in batch, pooling and
element-wise layers are cheap and parameter-free.  Backward time is modeled
as twice forward.

Everything is deterministic in the seed: the same (family, seed, params)
always emits byte-identical files.
"""

from __future__ import annotations

import math
import random

from .errors import GraphFormatError
from .graph import CompGraph, Layer, LayerProfile, NetworkProfile, build_graph
from .scaling import SampleEfficiencyCurve

FAMILIES = ("vgg_like", "wideresnet_like", "inception_like", "custom")

DEFAULT_BANDWIDTH = 600e9      # bytes/sec per GPU, NVSwitch-class
DEFAULT_DELAY_US = 10.0

_PROFILE_BATCHES_SMALL = [2 ** k for k in range(11)]       # 1 .. 1024
_PROFILE_BATCHES_WIDE = [2 ** k for k in range(18)]        # 1 .. 131072


class _Builder:
    def __init__(self, seed: int, batches):
        self.rng = random.Random(seed)
        self.batches = batches
        self.layers: list[Layer] = []
        self.profiles: dict[int, LayerProfile] = {}
        self._edges: list[tuple[int, int]] = []

    def add(self, name: str, kind: str, params: int, act_bytes: int,
            per_sample_us: float, knee: int, preds: list[int]) -> int:
        lid = len(self.layers)
        jitter = self.rng.uniform(0.95, 1.05)
        rate = per_sample_us * jitter
        entries = {}
        for b in self.batches:
            fwd = rate * max(b, knee)
            entries[b] = (fwd, 2.0 * fwd)
        self.layers.append(Layer(lid, name, kind, params * 4, act_bytes,
                                 (), ()))
        self.profiles[lid] = LayerProfile(lid, entries)
        for p in preds:
            self._edges.append((p, lid))
        return lid

    def build(self, name: str, global_batch: int,
              bandwidth: float, delay_us: float,
              input_shape=()) -> CompGraph:
        preds: dict[int, list[int]] = {l.id: [] for l in self.layers}
        succs: dict[int, list[int]] = {l.id: [] for l in self.layers}
        for a, b in self._edges:
            preds[b].append(a)
            succs[a].append(b)
        layers = [
            Layer(l.id, l.name, l.kind, l.params_bytes,
                  l.activation_bytes_per_sample,
                  tuple(preds[l.id]), tuple(succs[l.id]))
            for l in self.layers
        ]
        return build_graph(name, global_batch, layers, self.profiles,
                           NetworkProfile(bandwidth, delay_us), input_shape)


def _conv_knee(spatial: int) -> int:
    # more spatial positions -> more intra-sample parallelism -> lower knee
    if spatial >= 10000:
        return 1
    if spatial >= 2500:
        return 2
    if spatial >= 600:
        return 8
    return 32


def vgg_like(seed: int = 0, global_batch: int = 32,
             bandwidth: float = DEFAULT_BANDWIDTH,
             delay_us: float = DEFAULT_DELAY_US) -> CompGraph:
    """21-layer chain (13 conv, 5 pool, 3 dense), 132 M parameters total,
    with the heavy dense parameters concentrated at the tail."""
    b = _Builder(seed, _PROFILE_BATCHES_WIDE)
    plan = [
        # (blocks of (out_channels, n_convs)), input 3 x 224 x 224
        (64, 2), (128, 2), (256, 3), (512, 3), (512, 3),
    ]
    spatial = 224
    in_ch = 3
    prev: list[int] = []
    us_per_gflop = 8.0
    for bi, (out_ch, n_convs) in enumerate(plan):
        for ci in range(n_convs):
            flops_g = 2 * 9 * in_ch * out_ch * spatial * spatial / 1e9
            lid = b.add(f"conv{bi + 1}_{ci + 1}", "conv",
                        9 * in_ch * out_ch,
                        out_ch * spatial * spatial * 4,
                        flops_g * us_per_gflop, _conv_knee(spatial * spatial),
                        prev)
            prev = [lid]
            in_ch = out_ch
        spatial //= 2
        lid = b.add(f"pool{bi + 1}", "pool", 0,
                    out_ch * spatial * spatial * 4,
                    0.02, 1, prev)
        prev = [lid]
    dense_sizes = [96_416_320, 16_777_216, 4_096_000]
    for di, params in enumerate(dense_sizes):
        out_feats = 1000 if di == 2 else 4096
        flops_g = 2 * params / 1e9
        lid = b.add(f"fc{di + 1}", "dense", params, out_feats * 4,
                    flops_g * us_per_gflop, 128, prev)
        prev = [lid]
    return b.build("vgg_like", global_batch, bandwidth, delay_us,
                   input_shape=(3, 224, 224))


def wideresnet_like(seed: int = 0, global_batch: int = 16,
                    bandwidth: float = DEFAULT_BANDWIDTH,
                    delay_us: float = DEFAULT_DELAY_US) -> CompGraph:
    """105 layers: a stem conv, 34 residual diamonds (two convs against an
    identity edge, merged by a parameter-free add), pool and classifier.
    Convolution-heavy, 127 M parameters."""
    b = _Builder(seed, _PROFILE_BATCHES_SMALL)
    us_per_gflop = 8.0
    spatial = 100
    width_plan = [(128, 11), (256, 11), (512, 12)]
    stem = b.add("stem", "conv", 9 * 3 * 64, 64 * spatial * spatial * 4,
                 2 * 9 * 3 * 64 * spatial * spatial / 1e9 * us_per_gflop,
                 _conv_knee(spatial * spatial), [])
    prev = stem
    in_ch = 64
    n_block = 0
    conv_params_total = 9 * 3 * 64
    for out_ch, n_blocks in width_plan:
        for _ in range(n_blocks):
            n_block += 1
            flops_g = 2 * 9 * in_ch * out_ch * spatial * spatial / 1e9
            c1 = b.add(f"res{n_block}_conv1", "conv", 9 * in_ch * out_ch,
                       out_ch * spatial * spatial * 4,
                       flops_g * us_per_gflop, _conv_knee(spatial * spatial),
                       [prev])
            flops_g = 2 * 9 * out_ch * out_ch * spatial * spatial / 1e9
            c2 = b.add(f"res{n_block}_conv2", "conv", 9 * out_ch * out_ch,
                       out_ch * spatial * spatial * 4,
                       flops_g * us_per_gflop, _conv_knee(spatial * spatial),
                       [c1])
            add = b.add(f"res{n_block}_add", "add", 0,
                        out_ch * spatial * spatial * 4, 0.01, 1, [c2, prev])
            conv_params_total += 9 * in_ch * out_ch + 9 * out_ch * out_ch
            prev = add
            in_ch = out_ch
        spatial = max(spatial // 2, 13)
    pool = b.add("pool", "pool", 0, in_ch * 4, 0.01, 1, [prev])
    fc_params = 127_000_000 - conv_params_total
    if fc_params <= 0:
        raise GraphFormatError("wideresnet parameter budget underflow")
    b.add("fc", "dense", fc_params, 1000 * 4,
          2 * fc_params / 1e9 * 8.0, 128, [pool])
    return b.build("wideresnet_like", global_batch, bandwidth, delay_us,
                   input_shape=(3, 400, 400))


def inception_like(seed: int = 0, global_batch: int = 32,
                   bandwidth: float = DEFAULT_BANDWIDTH,
                   delay_us: float = DEFAULT_DELAY_US) -> CompGraph:
    """119 layers: a 7-layer stem followed by 14 branch/join modules with
    four parallel towers each.  Kernels are light and evenly scalable, so
    burst plans tend to collapse toward plain data parallelism."""
    b = _Builder(seed, _PROFILE_BATCHES_SMALL)
    us_per_gflop = 8.0
    spatial = 35
    ch = 64

    def conv(name, in_ch, out_ch, preds, kernel=9):
        flops_g = 2 * kernel * in_ch * out_ch * spatial * spatial / 1e9
        return b.add(name, "conv", kernel * in_ch * out_ch,
                     out_ch * spatial * spatial * 4,
                     max(flops_g * us_per_gflop, 0.4), 2, preds)

    prev = []
    for i in range(4):
        prev = [conv(f"stem_conv{i + 1}", 3 if i == 0 else ch, ch, prev)]
    prev = [b.add("stem_pool", "pool", 0, ch * spatial * spatial * 4,
                  0.01, 1, prev)]
    prev = [conv("stem_conv5", ch, ch, prev)]

    for m in range(14):
        head = prev[0]
        t1 = conv(f"m{m + 1}_t1_1x1", ch, ch // 2, [head], kernel=1)
        t2a = conv(f"m{m + 1}_t2_1x1", ch, ch // 2, [head], kernel=1)
        t2b = conv(f"m{m + 1}_t2_3x3", ch // 2, ch // 2, [t2a])
        t3a = conv(f"m{m + 1}_t3_1x1", ch, ch // 2, [head], kernel=1)
        t3b = conv(f"m{m + 1}_t3_3x3", ch // 2, ch // 2, [t3a])
        t3c = conv(f"m{m + 1}_t3_3x3b", ch // 2, ch // 2, [t3b])
        t4 = b.add(f"m{m + 1}_pool_proj", "pool", 0,
                   (ch // 2) * spatial * spatial * 4, 0.01, 1, [head])
        concat = b.add(f"m{m + 1}_concat", "concat", 0,
                       2 * ch * spatial * spatial * 4, 0.01, 1,
                       [t1, t2b, t3c, t4])
        prev = [concat]
        if m in (4, 9):
            spatial = max(spatial // 2, 8)

    # scale conv parameters to a 24 M total
    raw = sum(l.params_bytes // 4 for l in b.layers)
    target = 24_000_000
    scale = (target - 1000 * 2048) / raw
    b.layers = [
        Layer(l.id, l.name, l.kind, int(l.params_bytes // 4 * scale) * 4,
              l.activation_bytes_per_sample, l.predecessors, l.successors)
        for l in b.layers
    ]
    fc_params = target - sum(l.params_bytes // 4 for l in b.layers)
    b.add("fc", "dense", fc_params, 1000 * 4,
          2 * fc_params / 1e9 * us_per_gflop, 64, prev)
    return b.build("inception_like", global_batch, bandwidth, delay_us,
                   input_shape=(3, 299, 299))


def custom(seed: int = 0, global_batch: int = 32, n_layers: int = 8,
           params_per_layer: int = 1_000_000, act_bytes: int = 1_000_000,
           per_sample_us: float = 10.0, knee: int = 4,
           bandwidth: float = DEFAULT_BANDWIDTH,
           delay_us: float = DEFAULT_DELAY_US) -> CompGraph:
    """A plain chain with uniform layers; the knobs cover the cost shapes
    the other families exercise."""
    if n_layers < 1:
        raise GraphFormatError("custom family needs at least one layer")
    b = _Builder(seed, _PROFILE_BATCHES_SMALL)
    prev: list[int] = []
    for i in range(n_layers):
        lid = b.add(f"layer{i}", "conv", params_per_layer, act_bytes,
                    per_sample_us, knee, prev)
        prev = [lid]
    return b.build("custom", global_batch, bandwidth, delay_us)


def small_bg_model(seed: int = 1, global_batch: int = 8,
                   bandwidth: float = DEFAULT_BANDWIDTH,
                   delay_us: float = DEFAULT_DELAY_US) -> CompGraph:
    """Default background job: a small architecture-test model whose short
    kernels collocate gently, per the intended use of background slots."""
    return custom(seed=seed, global_batch=global_batch, n_layers=12,
                  params_per_layer=2_000_000, act_bytes=500_000,
                  per_sample_us=3.0, knee=1, bandwidth=bandwidth,
                  delay_us=delay_us)


def generate(family: str, seed: int = 0, **params) -> CompGraph:
    if family == "vgg_like":
        return vgg_like(seed, **params)
    if family == "wideresnet_like":
        return wideresnet_like(seed, **params)
    if family == "inception_like":
        return inception_like(seed, **params)
    if family == "custom":
        return custom(seed, **params)
    raise GraphFormatError(f"unknown family {family!r};"
                           f" expected one of {FAMILIES}")


def make_curve(a: float = 163840.0, c: float = 64.0,
               min_batch: int = 32, max_batch: int = 131072,
               target_error: float = 0.35) -> SampleEfficiencyCurve:
    """Saturating sample-efficiency curve steps(B) = ceil(a/B + c).

    Steps fall almost inversely with batch size until the a/B term drops
    under the floor c, after which bigger batches buy nothing; that knee is
    what makes weak scaling stall.
    """
    points = []
    bsz = min_batch
    while bsz <= max_batch:
        points.append((bsz, float(math.ceil(a / bsz + c))))
        bsz *= 2
    return SampleEfficiencyCurve(target_error, tuple(points))
