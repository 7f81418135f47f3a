import numpy as np
import pytest

from _oracles import naive_conv3d, random_conv_case
from adaprune3d.errors import ConfigurationError, ValidationError
from adaprune3d.tensor import (ConvSpec, Tensor4D, affine, avgpool3d_global, conv3d_dense, load_tensor,
                               read_array, save_tensor, write_array)


def test_tensor_is_immutable_copy():
    src = np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2)
    x = Tensor4D(src)
    src[0, 0, 0, 0] = 99
    assert x.data[0, 0, 0, 0] == 0
    with pytest.raises(ValueError):
        x.data[0, 0, 0, 0] = 1


@pytest.mark.parametrize("bad", [np.zeros((2, 2, 2)), np.zeros((0, 1, 2, 2)), np.full((1, 1, 1, 1), np.nan)])
def test_tensor_rejects_bad_input(bad):
    with pytest.raises(ValidationError):
        Tensor4D(bad)


def test_flat_view_offsets_match_buffer():
    rng = np.random.default_rng(0)
    x = Tensor4D(rng.standard_normal((3, 4, 2, 5)))
    flat = x.flat()
    assert flat.shape == (3, 10, 4)
    buf = x.data.reshape(-1)
    for t in range(3):
        m = flat.frame(t)
        for j in range(10):
            for k in range(4):
                assert flat[t, j, k] == buf[((t * 4 + k) * 2 + j // 5) * 5 + j % 5] == m[j, k]
    np.testing.assert_array_equal(flat.matrix()[1], flat.frame(1))


def test_conv_spec_validation():
    with pytest.raises(ConfigurationError):
        ConvSpec(np.zeros((2, 1, 3, 3)), None)
    with pytest.raises(ConfigurationError):
        ConvSpec(np.zeros((2, 1, 3, 3, 3)), np.zeros(3))
    with pytest.raises(ConfigurationError):
        ConvSpec(np.zeros((2, 1, 3, 3, 3)), None, stride=0)
    spec = ConvSpec(np.zeros((2, 1, 3, 3, 3)), None, stride=2, padding=1)
    assert spec.stride == (2, 2, 2) and spec.padding == (1, 1, 1)
    with pytest.raises(ConfigurationError):
        ConvSpec(np.zeros((2, 1, 3, 3, 3)), None).output_dims(1, 2, 2)


def test_conv_channel_mismatch():
    spec = ConvSpec(np.zeros((2, 3, 1, 1, 1), np.float32), None)
    with pytest.raises(ConfigurationError):
        conv3d_dense(Tensor4D.zeros(2, 2, 2, 2), spec)


def test_conv_dense_matches_nested_loops():
    rng = np.random.default_rng(11)
    for _ in range(60):
        x, spec = random_conv_case(rng)
        got = conv3d_dense(x, spec).data
        ref = naive_conv3d(x.data, spec.weights, spec.bias, spec.stride, spec.padding)
        assert got.shape == ref.shape
        np.testing.assert_allclose(got, ref, atol=2e-5, rtol=1e-5)


def test_conv_identity_kernel():
    x = Tensor4D(np.random.default_rng(1).standard_normal((3, 2, 4, 4)))
    w = np.zeros((2, 2, 3, 3, 3), np.float32)
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1
    out = conv3d_dense(x, ConvSpec(w, None, padding=1))
    np.testing.assert_array_equal(out.data, x.data)


def test_pool_and_affine():
    x = Tensor4D(np.arange(16, dtype=float).reshape(2, 2, 2, 2))
    np.testing.assert_allclose(avgpool3d_global(x), [5.5, 9.5])
    np.testing.assert_allclose(affine([1.0, 2.0], [[1, 0], [1, 1]], [0.5, 0.0]), [1.5, 3.0])
    with pytest.raises(ConfigurationError):
        affine([1.0], [[1, 0]], [0.0])


def test_binary_roundtrip(tmp_path):
    x = Tensor4D(np.random.default_rng(2).standard_normal((2, 3, 4, 5)))
    save_tensor(tmp_path / "x.bin", x)
    assert load_tensor(tmp_path / "x.bin") == x
    write_array(tmp_path / "m.bin", np.ones((2, 3)))
    arr, header = read_array(tmp_path / "m.bin")
    assert header["layout"] == "row-major" and arr.shape == (2, 3)
    with pytest.raises(ValidationError):
        load_tensor(tmp_path / "m.bin")
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-4])
    with pytest.raises(ValidationError):
        read_array(tmp_path / "trunc.bin")
