import numpy as np
import pytest

from _oracles import simplex
from adaprune3d import autodiff as ad
from adaprune3d.ava import (AvaParams, ImportanceProfile, ava_forward, ava_graph, ava_loss, compute_l_ch,
                            compute_l_fe, compute_l_fr, hoyer, l1_normalize)
from adaprune3d.errors import ConfigurationError, UsageError
from adaprune3d.tensor import Tensor4D

DIMS = (2, 4, 8, 16, 64)


def std_squared_identity_error(rng, d, n=1000):
    xs = np.array([simplex(rng, d) for _ in range(n)])
    lhs = xs.std(axis=1) ** 2
    rhs = (xs**2).sum(axis=1) / d - 1.0 / d**2
    return float(np.abs(lhs - rhs).max())


def rank_agreement(rng, d, n=1000):
    xs = [simplex(rng, d) for _ in range(n)]
    by_std = np.argsort([x.std() for x in xs], kind="stable")
    by_hoyer = np.argsort([hoyer(x) for x in xs], kind="stable")
    return bool(np.array_equal(by_std, by_hoyer))


@pytest.mark.parametrize("d", DIMS)
def test_simplex_variance_identity(d):
    assert std_squared_identity_error(np.random.default_rng(d), d) < 1e-12


@pytest.mark.parametrize("d", DIMS)
def test_std_and_hoyer_rank_agree(d):
    assert rank_agreement(np.random.default_rng(100 + d), d)


@pytest.mark.parametrize("d", DIMS)
def test_hoyer_endpoints(d):
    one_hot = np.zeros(d)
    one_hot[d // 2] = 1
    assert hoyer(one_hot) == 1.0
    assert hoyer(np.full(d, 1.0 / d)) == 0.0


def test_hoyer_rejects_non_simplex():
    with pytest.raises(UsageError):
        hoyer([1.0])
    with pytest.raises(UsageError):
        hoyer([0.7, 0.7])
    with pytest.raises(UsageError):
        hoyer([1.5, -0.5])


def test_l1_normalize_zero_is_uniform():
    np.testing.assert_array_equal(l1_normalize(np.zeros(4)), np.full(4, 0.25))
    np.testing.assert_allclose(l1_normalize([1.0, 3.0]), [0.25, 0.75])


def _loop_importances(x: np.ndarray, w_fr, w_ch, w_fe):
    """Per-element loops: mean |activation| of each slice times |weight|."""
    t, c, h, w = x.shape
    l_fr = np.array([abs(w_fr[i]) * np.abs(x[i]).sum() / (c * h * w) for i in range(t)])
    l_ch = np.array([[abs(w_ch[k]) * np.abs(x[i, k]).sum() / (h * w) for k in range(c)] for i in range(t)])
    l_fe = np.array([[abs(w_fe[j]) * np.abs(x[i, :, j // w, j % w]).sum() / c for j in range(h * w)]
                     for i in range(t)])
    return l_fr, l_ch, l_fe


def test_importances_match_loops():
    rng = np.random.default_rng(0)
    x = Tensor4D(rng.standard_normal((3, 4, 2, 3)))
    w_fr, w_ch, w_fe = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(6)
    ref = _loop_importances(x.data, w_fr, w_ch, w_fe)
    np.testing.assert_allclose(compute_l_fr(x.flat(), w_fr), ref[0], rtol=1e-6)
    np.testing.assert_allclose(compute_l_ch(x.flat(), w_ch), ref[1], rtol=1e-6)
    np.testing.assert_allclose(compute_l_fe(x.flat(), w_fe), ref[2], rtol=1e-6)
    with pytest.raises(ConfigurationError):
        compute_l_fr(x.flat(), np.ones(2))


def test_ava_stages_chain():
    rng = np.random.default_rng(1)
    x = Tensor4D(rng.standard_normal((3, 2, 2, 2)))
    p = AvaParams(rng.standard_normal(3).astype(np.float32), rng.standard_normal(2).astype(np.float32),
                  rng.standard_normal(4).astype(np.float32))
    out, prof = ava_forward(x, p)
    x_fr = np.maximum(x.data * p.w_fr[:, None, None, None], 0)
    x_ch = np.maximum(x_fr * p.w_ch[None, :, None, None], 0)
    x_fe = np.maximum(x_ch * p.w_fe.reshape(1, 1, 2, 2), 0)
    np.testing.assert_allclose(out.data, x_fe, rtol=1e-6)
    ref = _loop_importances(x.data, p.w_fr, p.w_ch, p.w_fe)
    np.testing.assert_allclose(prof.l_fr, ref[0], rtol=1e-5)
    np.testing.assert_allclose(prof.l_ch, _loop_importances(x_fr, p.w_fr, p.w_ch, p.w_fe)[1], rtol=1e-5)
    np.testing.assert_allclose(prof.l_fe, _loop_importances(x_ch, p.w_fr, p.w_ch, p.w_fe)[2], rtol=1e-5)
    assert abs(prof.n_ch.sum() - 1) < 1e-12 and abs(prof.n_fe.sum() - 1) < 1e-12
    assert prof.var_ava == pytest.approx(prof.n_fr.var() + prof.n_ch.var() + prof.n_fe.var())


def test_ones_weights_are_identity_on_nonnegative_input():
    x = Tensor4D(np.abs(np.random.default_rng(2).standard_normal((2, 3, 2, 2))))
    out, _ = ava_forward(x, AvaParams.ones(2, 3, 2, 2))
    assert out == x


def test_graph_matches_executor():
    rng = np.random.default_rng(3)
    batch = np.abs(rng.standard_normal((2, 3, 2, 2, 3)))
    p = AvaParams(rng.uniform(0.5, 2, 3), rng.uniform(0.5, 2, 2), rng.uniform(0.5, 2, 6))
    tape = ad.Tape(np.float64)
    x_fe, normalized, var = ava_graph(tape.const(batch), tape.const(p.w_fr), tape.const(p.w_ch), tape.const(p.w_fe))
    for i in range(2):
        out, prof = ava_forward(Tensor4D(batch[i], dtype=np.float64), p)
        np.testing.assert_allclose(x_fe.value[i], out.data, rtol=1e-12)
        np.testing.assert_allclose(normalized["frame"].value[i], prof.n_fr, rtol=1e-12)
        np.testing.assert_allclose(normalized["channel"].value[i], prof.n_ch.reshape(-1), rtol=1e-12)
        np.testing.assert_allclose(normalized["feature"].value[i], prof.n_fe.reshape(-1), rtol=1e-12)
        assert var.value[i] == pytest.approx(prof.var_ava, rel=1e-12)


def test_profile_variance_is_bounded_on_simplex():
    prof = ImportanceProfile(np.array([1.0, 0, 0]), np.ones((3, 2)), np.zeros((3, 4)))
    assert prof.var_fr == pytest.approx(1 / 3 - 1 / 9)
    assert prof.var_ch == 0 and prof.var_fe == 0


def test_ava_loss():
    assert ava_loss(1.0, 0.25, 2.0) == 0.5
    with pytest.raises(ConfigurationError):
        ava_loss(1.0, 0.1, 0.0)
    with pytest.raises(ConfigurationError):
        AvaParams.ones(2, 2, 2, 2).check(3, 2, 4)
