import math

import pytest

from burstplan import synth
from burstplan.costs import sync_time
from burstplan.errors import CurveDomainError, GraphFormatError
from burstplan.graph import NetworkProfile, comp_at_batch
from burstplan.scaling import (SampleEfficiencyCurve, estimate,
                               estimates_to_table, iteration_time, load_curve,
                               save_curve, speedup_curve)

from conftest import chain_graph, flat_profile, linear_profile

GPU_COUNTS = (1, 2, 4, 8, 16, 32, 64, 128, 256)


@pytest.fixture(scope="module")
def vgg():
    return synth.vgg_like(seed=0)


@pytest.fixture(scope="module")
def curve():
    return synth.make_curve()


# ---------------------------------------------------------------------------
# Curve


def test_curve_rejects_increasing_steps():
    with pytest.raises(GraphFormatError):
        SampleEfficiencyCurve(0.3, ((32, 10.0), (64, 20.0)))


def test_curve_rejects_duplicate_batches():
    with pytest.raises(GraphFormatError):
        SampleEfficiencyCurve(0.3, ((32, 10.0), (32, 9.0)))


def test_curve_log_log_interpolation():
    c = SampleEfficiencyCurve(0.3, ((16, 100.0), (64, 25.0)))
    # halfway in log space between 16 and 64 is 32; log-linear steps give
    # sqrt(100 * 25) = 50
    assert c.steps(32) == pytest.approx(50.0)
    assert c.steps(16) == 100.0
    assert c.steps(64) == 25.0


def test_curve_domain_errors():
    c = SampleEfficiencyCurve(0.3, ((16, 100.0), (64, 25.0)))
    with pytest.raises(CurveDomainError):
        c.steps(8)
    with pytest.raises(CurveDomainError):
        c.steps(65)


def test_curve_roundtrip(tmp_path, curve):
    path = tmp_path / "curve.json"
    save_curve(curve, str(path))
    loaded = load_curve(str(path))
    assert loaded == curve


def test_synthetic_curve_is_saturating_ceil_form():
    c = synth.make_curve(a=1000.0, c=10.0, min_batch=32, max_batch=256)
    for b, s in c.points:
        assert s == math.ceil(1000.0 / b + 10.0)
    steps = [s for _, s in c.points]
    assert steps == sorted(steps, reverse=True)


# ---------------------------------------------------------------------------
# iteration_time


def test_iteration_time_single_gpu_is_compute_only():
    g = chain_graph([flat_profile(300.0), linear_profile(10.0)],
                    params=[50_000_000, 0], global_batch=32)
    expected = comp_at_batch(g, 0, 32) + comp_at_batch(g, 1, 32)
    assert iteration_time(g, 1, 32) == pytest.approx(expected)


def test_iteration_time_two_gpus_hand_computed():
    g = chain_graph([linear_profile(10.0)], params=[100_000_000],
                    global_batch=32, bandwidth=600e9, delay_us=10.0)
    # comp at per-device batch 16 plus one ring all-reduce of 100 MB
    expected = comp_at_batch(g, 0, 16) + sync_time(g.layer(0), 2, g.network)
    assert iteration_time(g, 2, 32) == pytest.approx(expected)


def test_iteration_time_nonincreasing_in_bandwidth(vgg):
    times = [iteration_time(vgg, 16, 256, NetworkProfile(bw, 10.0))
             for bw in (1e9, 10e9, 100e9, 1000e9)]
    assert times == sorted(times, reverse=True)


# ---------------------------------------------------------------------------
# estimate


def test_single_gpu_baseline_speedup_is_one(vgg, curve):
    for strategy in ("weak", "strong"):
        e = estimate(strategy, vgg, curve, 1, base_batch=256)
        assert e.speedup_vs_1gpu == pytest.approx(1.0)
        assert e.chosen_global_batch == 256


def test_strong_scaling_preserves_steps(vgg, curve):
    base = estimate("strong", vgg, curve, 1, base_batch=256)
    for n in (4, 32, 256):
        e = estimate("strong", vgg, curve, n, base_batch=256)
        assert e.steps == base.steps
        assert e.chosen_global_batch == 256


def test_weak_scaling_holds_per_gpu_batch(vgg, curve):
    for n in (2, 8, 64):
        e = estimate("weak", vgg, curve, n, base_batch=256)
        assert e.per_gpu_batch == 256
        assert e.chosen_global_batch == 256 * n


def test_batch_optimal_dominates_both(vgg, curve):
    for n in GPU_COUNTS:
        es = {s: estimate(s, vgg, curve, n, base_batch=256)
              for s in ("weak", "strong", "batch_optimal")}
        assert es["batch_optimal"].time_to_accuracy_s <= \
            min(es["weak"].time_to_accuracy_s, es["strong"].time_to_accuracy_s)


def test_network_speed_flips_strategy_ranking(vgg, curve):
    fast = NetworkProfile(125e9, 10.0)    # 1 Tbps per GPU
    slow = NetworkProfile(1.25e9, 10.0)   # 10 Gbps per GPU
    for n in (64, 128, 256):
        w_fast = estimate("weak", vgg, curve, n, fast, 256).speedup_vs_1gpu
        s_fast = estimate("strong", vgg, curve, n, fast, 256).speedup_vs_1gpu
        assert s_fast > w_fast
        w_slow = estimate("weak", vgg, curve, n, slow, 256).speedup_vs_1gpu
        s_slow = estimate("strong", vgg, curve, n, slow, 256).speedup_vs_1gpu
        assert w_slow > s_slow


def test_weak_scaling_speedup_plateaus(vgg, curve):
    net = NetworkProfile(125e9, 10.0)
    s64 = estimate("weak", vgg, curve, 64, net, 256).speedup_vs_1gpu
    s256 = estimate("weak", vgg, curve, 256, net, 256).speedup_vs_1gpu
    assert s256 / s64 < 1.2


def test_batch_optimal_per_gpu_batch_nonincreasing(vgg, curve):
    batches = [estimate("batch_optimal", vgg, curve, n, base_batch=256)
               .per_gpu_batch for n in GPU_COUNTS]
    assert all(a >= b for a, b in zip(batches, batches[1:]))


def test_estimate_curve_domain_exhausted(vgg):
    small = SampleEfficiencyCurve(0.35, ((32, 100.0), (64, 60.0)))
    with pytest.raises(CurveDomainError):
        estimate("weak", vgg, small, 8, base_batch=32)  # needs batch 256


def test_speedup_curve_table_output(vgg, curve):
    rows = speedup_curve("weak", vgg, curve, (1, 4), base_batch=256)
    table = estimates_to_table(rows)
    lines = table.strip().split("\n")
    assert lines[0].split("\t") == ["n_gpus", "strategy", "batch", "iter_us",
                                    "steps", "tta_s", "speedup"]
    assert len(lines) == 3
    assert lines[1].split("\t")[0] == "1"
    assert lines[1].split("\t")[1] == "weak"
