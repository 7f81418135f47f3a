import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import enumerate_flops, naive_conv3d, random_conv_case, random_plan
from adaprune3d import _kernel
from adaprune3d.aap import PruningPlan, apply_plan
from adaprune3d.errors import ConfigurationError
from adaprune3d.models import Model, ModelConfig
from adaprune3d.sparse import (LayerFlopReport, RunReport, axis_coverage, bench, flop_count_dense,
                               flop_count_pruned, forced_plan, sparse_conv3d)
from adaprune3d.tensor import ConvSpec, Tensor4D, conv3d_dense


def max_sparse_dense_gap(seed: int, cases: int = 100) -> float:
    """Largest |sparse(x, plan) - dense(apply_plan(x, plan))| over random cases."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        x, spec = random_conv_case(rng)
        plan = random_plan(rng, x.shape)
        got = sparse_conv3d(x, plan, spec).data
        ref = conv3d_dense(apply_plan(x, plan), spec).data
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst


def max_all_true_gap(seed: int, cases: int = 100) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        x, spec = random_conv_case(rng)
        got = sparse_conv3d(x, PruningPlan.full(*x.shape), spec).data
        worst = max(worst, float(np.abs(got - conv3d_dense(x, spec).data).max()))
    return worst


def test_sparse_equals_dense_on_pruned_input():
    assert max_sparse_dense_gap(0) < 1e-5


def test_all_true_plan_is_bit_exact():
    assert max_all_true_gap(1) == 0.0


def test_sparse_matches_nested_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        x, spec = random_conv_case(rng)
        plan = random_plan(rng, x.shape)
        ref = naive_conv3d(apply_plan(x, plan).data, spec.weights, spec.bias, spec.stride, spec.padding)
        np.testing.assert_allclose(sparse_conv3d(x, plan, spec).data, ref, atol=2e-5, rtol=1e-5)


@pytest.mark.parametrize("density", [0.04, 0.1])
def test_compaction_and_row_skip_paths(density, monkeypatch):
    """Low retention forces channel compaction (sparse channels) and row skipping (sparse features)."""
    calls = {"channels": 0, "rows": 0}

    def spy(name, fn):
        def wrapped(*a, **kw):
            calls[name] += 1
            return fn(*a, **kw)
        return wrapped

    monkeypatch.setattr(_kernel, "_blocks_channels", spy("channels", _kernel._blocks_channels))
    monkeypatch.setattr(_kernel, "_blocks_rows", spy("rows", _kernel._blocks_rows))
    rng = np.random.default_rng(int(density * 100))
    for i in range(40):
        x = Tensor4D(rng.standard_normal((4, 8, 6, 6)))
        spec = ConvSpec(rng.standard_normal((5, 8, 3, 3, 3)).astype(np.float32), np.zeros(5, np.float32),
                        stride=(1, int(rng.integers(1, 3)), 1), padding=1)
        ch = rng.random((4, 8)) < density if i % 2 else np.ones((4, 8), bool)
        fe = rng.random((4, 36)) < density if i % 2 == 0 else np.ones((4, 36), bool)
        plan = PruningPlan(np.ones(4, bool), ch, fe, 6, 6)
        ref = conv3d_dense(apply_plan(x, plan), spec).data
        np.testing.assert_allclose(sparse_conv3d(x, plan, spec).data, ref, atol=1e-5)
    assert calls["channels"] > 0 and calls["rows"] > 0


def test_fully_pruned_frames_read_as_bias():
    x = Tensor4D(np.ones((3, 1, 2, 2)))
    spec = ConvSpec(np.ones((1, 1, 1, 1, 1), np.float32), np.array([0.5], np.float32))
    plan = PruningPlan([True, False, True], np.ones((3, 1)), np.ones((3, 4)), 2, 2)
    out = sparse_conv3d(x, plan, spec).data
    assert out[1].tolist() == [[[0.5, 0.5], [0.5, 0.5]]]
    assert out[0, 0, 0, 0] == 1.5


def test_plan_dims_must_match():
    x, spec = random_conv_case(np.random.default_rng(3))
    t, c, h, w = x.shape
    with pytest.raises(ConfigurationError):
        sparse_conv3d(x, PruningPlan.full(t + 1, c, h, w), spec)


def test_dense_flop_closed_form():
    # 4x2x8x8 input, 3x3x3 kernel, pad 1, C_out 3: 2 * (27 * 2) * 3 * (4 * 8 * 8)
    spec = ConvSpec(np.zeros((3, 2, 3, 3, 3), np.float32), None, padding=1)
    assert flop_count_dense((4, 2, 8, 8), spec) == 2 * 54 * 3 * 4 * 8 * 8 == 82_944
    assert enumerate_flops((4, 2, 8, 8), np.ones((4, 2, 8, 8), bool), spec) == 82_944
    assert flop_count_dense((1, 1, 1, 1), ConvSpec(np.ones((1, 1, 1, 1, 1)), None)) == 2
    doubled = ConvSpec(np.zeros((6, 2, 3, 3, 3), np.float32), None, padding=1)
    assert flop_count_dense((4, 2, 8, 8), doubled) == 2 * 82_944


def test_pruned_ratio_approaches_retained_fraction():
    rng = np.random.default_rng(9)
    spec = ConvSpec(np.zeros((2, 2, 3, 3, 3), np.float32), None)
    r = 0.4
    plan = PruningPlan(np.ones(4, bool), np.ones((4, 2), bool), rng.random((4, 1024)) < r, 32, 32)
    ratio = flop_count_pruned((4, 2, 32, 32), plan, spec) / flop_count_dense((4, 2, 32, 32), spec)
    assert abs(ratio - r) < 0.05 * r


def flop_mismatches(seed: int, cases: int = 50) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        x, spec = random_conv_case(rng)
        plan = random_plan(rng, x.shape)
        if flop_count_pruned(x.shape, plan, spec) != enumerate_flops(x.shape, plan.element_mask(), spec):
            bad += 1
    return bad


def test_pruned_flops_match_enumeration():
    assert flop_mismatches(4) == 0


def test_all_true_plan_charges_dense_flops():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x, spec = random_conv_case(rng)
        assert flop_count_pruned(x.shape, PruningPlan.full(*x.shape), spec) == flop_count_dense(x.shape, spec)


@settings(max_examples=60, deadline=None)
@given(size=st.integers(1, 9), kernel=st.integers(1, 4), stride=st.integers(1, 3), padding=st.integers(0, 3))
def test_axis_coverage_matches_windows(size, kernel, stride, padding):
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        return
    cov = axis_coverage(size, kernel, stride, padding)
    ref = np.zeros(size, int)
    for o in range(out):
        for k in range(kernel):
            i = o * stride + k - padding
            if 0 <= i < size:
                ref[i] += 1
    assert cov.tolist() == ref.tolist()


def test_flops_monotone_in_mask():
    rng = np.random.default_rng(6)
    x, spec = random_conv_case(rng)
    plan = random_plan(rng, x.shape, density=0.6)
    fewer = PruningPlan(plan.frame_mask, plan.channel_mask & (rng.random(plan.channel_mask.shape) < 0.5),
                        plan.feature_mask, plan.height, plan.width)
    assert flop_count_pruned(x.shape, fewer, spec) <= flop_count_pruned(x.shape, plan, spec)


def test_run_report_serialization():
    rep = RunReport([LayerFlopReport(1, 100, 100), LayerFlopReport(2, 300, 100, 0.5, 1.0, 0.8)],
                    controller_flops=50, ava_flops=50)
    assert rep.pruning_rate == pytest.approx(400 / 300)
    d = json.loads(rep.to_json())
    assert d["schema_version"] == 1 and d["layers"][1]["retained"]["frame"] == 0.5
    assert rep.to_csv().splitlines()[0].startswith("layer,dense_flops,actual_flops")


@pytest.mark.parametrize("dim", ["frame", "channel", "feature"])
def test_forced_plan_fraction(dim):
    x = Tensor4D(np.random.default_rng(7).standard_normal((8, 4, 4, 4)))
    plan = forced_plan(x, 0.5, dim)
    assert plan.retained_fractions()[dim] == pytest.approx(0.5)
    assert forced_plan(x, 1.0, dim) == PruningPlan.full(8, 4, 4, 4)
    with pytest.raises(ConfigurationError):
        forced_plan(x, 0.5, "pixel")


def test_bench_report_shape():
    model = Model(ModelConfig.tiny_c3d(), seed=0)
    clips = np.random.default_rng(8).random((2, 8, 1, 16, 16)).astype(np.float32)
    res = bench(model, clips, repetitions=1, fractions=(1.0, 0.5))
    assert [r["retained_fraction"] for r in res["sweep"]] == [1.0, 0.5]
    assert all(r["speedup"] > 0 for r in res["sweep"])
    assert res["dimension"] == "frame"
