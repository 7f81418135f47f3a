import numpy as np
import pytest

from adaprune3d import autodiff as ad
from adaprune3d.aap import ControllerOutput, GateConfig
from adaprune3d.errors import ConfigurationError, UsageError
from adaprune3d.models import (LayerConfig, Model, ModelConfig, build_graph, forward_eval, forward_train_step2,
                               load_checkpoint, save_checkpoint)
from adaprune3d.tensor import Tensor4D


@pytest.fixture(scope="module")
def clips():
    return np.random.default_rng(0).random((3, 8, 1, 16, 16)).astype(np.float32)


@pytest.fixture(scope="module", params=["vgg3d", "residual_2plus1d"])
def model(request):
    m = Model(ModelConfig.for_family(request.param), seed=1, theta_init=(0.1, 0.01, 0.002))
    # perturb the AVA weights away from ones so the stages do real work
    rng = np.random.default_rng(2)
    for k in m.group("ava"):
        m.params[k] *= rng.uniform(0.5, 1.5, m.params[k].shape).astype(np.float32)
    return m


def test_activation_shapes_and_validation():
    cfg = ModelConfig.tiny_c3d()
    assert cfg.activation_shapes() == [(8, 1, 16, 16), (8, 8, 16, 16), (8, 16, 8, 8), (8, 32, 8, 8), (8, 32, 8, 8)]
    assert cfg.pruned_layers == (2, 3, 4)
    with pytest.raises(ConfigurationError):
        ModelConfig("vgg3d", [LayerConfig(4)], pruned_layers=(1,))
    with pytest.raises(ConfigurationError):
        ModelConfig("vgg3d", [LayerConfig(4), LayerConfig(4)], ava_layers=(2,))
    with pytest.raises(ConfigurationError):
        ModelConfig("resnet", [LayerConfig(4)])
    with pytest.raises(ConfigurationError):
        ModelConfig("vgg3d", [LayerConfig(4), LayerConfig(8, skip_from=1)])
    with pytest.raises(ConfigurationError):
        ModelConfig.tiny_c3d(dims=("pixel",))
    r21 = ModelConfig.tiny_r2plus1d()
    assert r21.layers[2].skip_from == 1 and len(r21.layers) == 7


def test_unpruned_eval_matches_graph(model, clips):
    tape = ad.Tape(np.float64)
    logits, var_f, thetas = build_graph(model, clips, tape, trainable=())
    assert thetas is None and var_f.shape == (3,)
    for i, clip in enumerate(clips):
        res = forward_eval(model, clip, prune=False)
        np.testing.assert_allclose(res.logits, logits.value[i], rtol=1e-4, atol=1e-5)
        var = sum(p.var_ava for p in res.profiles.values())
        assert var == pytest.approx(var_f.value[i], rel=1e-4)


def test_gated_graph_matches_executor(model, clips):
    """Eval-mode gates in the graph produce the same logits as the sparse executor."""
    gates = {d: GateConfig(tau=0.1) for d in ("frame", "channel", "feature")}
    tape = ad.Tape(np.float64)
    logits, _, thetas = build_graph(model, clips, tape, trainable=(), gates=gates)
    for i, clip in enumerate(clips):
        res = forward_eval(model, clip)
        assert res.theta.theta_fr == pytest.approx(thetas["frame"].value[i], rel=1e-5)
        np.testing.assert_allclose(res.logits, logits.value[i], rtol=1e-4, atol=1e-5)


def test_layer_one_is_never_pruned(model, clips):
    for clip in clips:
        rep = forward_eval(model, clip, theta=ControllerOutput(0.9, 0.9, 0.9)).report
        assert rep.layers[0].actual_flops == rep.layers[0].dense_flops
        assert all(l.actual_flops < l.dense_flops for l in rep.layers[1:] if l.layer in model.config.pruned_layers)


def test_zero_threshold_only_drops_dead_activations(model, clips):
    for clip in clips:
        dense = forward_eval(model, clip, prune=False)
        pruned = forward_eval(model, clip, theta=ControllerOutput(0.0, 0.0, 0.0))
        np.testing.assert_allclose(pruned.logits, dense.logits, rtol=1e-5, atol=1e-5)
        assert pruned.report.pruning_rate <= dense.report.dense_flops / dense.report.actual_flops


def test_eval_is_bit_deterministic(model, clips):
    a = forward_eval(model, clips[0])
    b = forward_eval(model, Tensor4D(clips[0]))
    np.testing.assert_array_equal(a.logits, b.logits)
    assert a.plans.keys() == b.plans.keys() and all(a.plans[k] == b.plans[k] for k in a.plans)
    assert a.report.to_dict() == b.report.to_dict()


def test_eval_rejects_wrong_clip_shape(model):
    with pytest.raises(ConfigurationError):
        forward_eval(model, np.zeros((4, 1, 16, 16), np.float32))


def test_set_controller_bias(model, clips):
    m = model.copy()
    m.set_controller_bias((0.3, 0.2, 0.1))
    assert forward_eval(m, clips[0]).theta.as_tuple() == pytest.approx((0.3, 0.2, 0.1), rel=1e-6)


def test_step2_requires_step1():
    m = Model(ModelConfig.tiny_c3d())
    with pytest.raises(UsageError):
        forward_train_step2(m, np.zeros((1, 8, 1, 16, 16), np.float32), {}, step1_done=False)


def test_checkpoint_roundtrip(model, clips, tmp_path):
    save_checkpoint(model, tmp_path / "ck", {"step": 1})
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"step": 1}
    assert loaded.config == model.config
    assert loaded.checksum(("backbone", "ava", "controller")) == model.checksum(("backbone", "ava", "controller"))
    np.testing.assert_array_equal(forward_eval(loaded, clips[1]).logits, forward_eval(model, clips[1]).logits)
    with pytest.raises(UsageError):
        load_checkpoint(tmp_path / "none")


def test_overhead_accounting(model):
    assert model.ava_flops() == sum(6 * np.prod(model.shapes[i]) for i in model.config.ava_layers)
    assert model.copy().params is not model.params
