import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ara_vos import autodiff as ad
from ara_vos import serial
from ara_vos.autodiff import Tensor

from gradcheck import OPS, gradcheck, leaf
from oracles import naive_bilinear, naive_conv2d


# -- conv2d ------------------------------------------------------------------
def test_conv_sum_of_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w, Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 1, 5, 5)))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), None)
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3 if stride == 1 else 4, 3 if stride == 1 else 4))
    b = rng.standard_normal(4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, padding), atol=1e-6)


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ad.ShapeError, match="channel"):
        ad.conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ad.ShapeError, match="non-integer"):
        ad.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), stride=2, padding=1)
    with pytest.raises(ad.ShapeError, match="does not fit"):
        ad.conv2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((2, 3, 3, 3))))


# -- pointwise ---------------------------------------------------------------
def test_sigmoid_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    low = ad.sigmoid(Tensor(-100.0)).item()
    assert 0.0 < low <= 1e-30 and not math.isnan(low)
    assert abs(ad.sigmoid(Tensor(1.0, dtype=np.float64)).item() - 1 / (1 + math.exp(-1))) < 1e-12


def test_sigmoid_never_reaches_bounds():
    out = ad.sigmoid(Tensor(np.array([-1e4, -800.0, 0.0, 40.0, 800.0]))).data
    assert np.all(out > 0) and np.all(out < 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_sign_values(vals):
    out = ad.sign(Tensor(np.array(vals))).data
    assert set(np.unique(out)) <= {-1.0, 0.0, 1.0}
    np.testing.assert_array_equal(out[np.array(vals) == 0], 0.0)


def test_binary_ce_examples():
    assert ad.binary_ce(Tensor([1.0]), np.array([1.0]), "literal").data[0] == pytest.approx(0.0, abs=1e-6)
    assert ad.binary_ce(Tensor([0.2]), np.array([0.0]), "literal").data[0] == 0.0
    got = ad.binary_ce(Tensor([0.3], dtype=np.float64), np.array([1.0]), "literal").data[0]
    assert got == pytest.approx(-math.log(0.3), abs=1e-12)
    full = ad.binary_ce(Tensor([0.2], dtype=np.float64), np.array([0.0]), "full").data[0]
    assert full == pytest.approx(-math.log(0.8), abs=1e-12)


def test_binary_ce_clamps_log_zero():
    out = ad.binary_ce(Tensor([0.0, 1.0]), np.array([1.0, 0.0]), "full").data
    assert np.all(np.isfinite(out))


# -- resampling ----------------------------------------------------------------
def test_upsample_constant_and_identity():
    const = Tensor(np.full((1, 2, 3, 5), 3.0))
    np.testing.assert_allclose(ad.bilinear_upsample(const, 7, 11).data, 3.0, rtol=1e-6)
    rng = np.random.default_rng(2)
    x = Tensor(rng.random((1, 1, 4, 4)))
    np.testing.assert_allclose(ad.bilinear_upsample(x, 4, 4).data, x.data, atol=1e-7)


def test_upsample_matches_pixel_oracle():
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    got = ad.bilinear_upsample(Tensor(grid[None, None], dtype=np.float64), 4, 4).data[0, 0]
    np.testing.assert_allclose(got, naive_bilinear(grid, 4, 4), atol=1e-6)
    rng = np.random.default_rng(3)
    img = rng.random((5, 3))
    got = ad.bilinear_upsample(Tensor(img[None, None], dtype=np.float64), 20, 12).data[0, 0]
    np.testing.assert_allclose(got, naive_bilinear(img, 20, 12), atol=1e-6)


def test_upsample_rejects_downsampling():
    with pytest.raises(ad.ShapeError):
        ad.bilinear_upsample(Tensor(np.zeros((1, 1, 4, 4))), 2, 4)


# -- backward ------------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(4).random((3, 4, 2)), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))


def test_backward_half_square_gives_x():
    x = Tensor(np.random.default_rng(5).standard_normal((5, 3)), requires_grad=True, dtype=np.float64)
    (ad.sum(x * x) * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GraphError):
        (x * 2.0).backward()
    loss = ad.sum(x * 2.0)
    loss.backward()
    with pytest.raises(ad.GraphError):
        loss.backward()


def test_leaf_grads_accumulate_until_reset():
    x = Tensor(np.ones(2), requires_grad=True)
    ad.sum(x).backward()
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    y = x * x
    ad.sum(y + y).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_broadcast_beyond_scalar():
    with pytest.raises(ad.ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    out = Tensor(np.ones((2, 3))) + Tensor(2.0)
    np.testing.assert_array_equal(out.data, 3.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(6)
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    w = rng.random((4, 3, 3, 3)).astype(np.float32)

    def run():
        return ad.sigmoid(ad.conv2d(Tensor(x), Tensor(w), None, 1, 1)).data

    assert run().tobytes() == run().tobytes()


# -- per-op gradient checks ------------------------------------------------------


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    a, b = leaf(24, rng), leaf(24, rng)
    # keep relu/clamp kinks away from the FD stencil
    a.data[np.abs(a.data) < 1e-2] += 0.05
    a.data[np.abs(np.abs(a.data) - 0.5) < 1e-2] += 0.05
    gradcheck(lambda: OPS[name](a, b), [a, b], rng, samples=10)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    x, w, b = leaf((2, 3, 8, 8), rng), leaf((4, 3, 4, 4), rng, 0.3), leaf(4, rng)
    gradcheck(lambda: ad.sum(ad.sigmoid(ad.conv2d(x, w, b, 2, 1))), [x, w, b], rng, samples=15)


def test_three_layer_conv_sigmoid_network():
    rng = np.random.default_rng(8)
    x = leaf((1, 3, 8, 8), rng)
    w1, b1 = leaf((4, 3, 3, 3), rng, 0.4), leaf(4, rng, 0.1)
    w2, b2 = leaf((4, 4, 4, 4), rng, 0.3), leaf(4, rng, 0.1)
    w3, b3 = leaf((1, 4, 3, 3), rng, 0.3), leaf(1, rng, 0.1)

    def net():
        h = ad.sigmoid(ad.conv2d(x, w1, b1, 1, 1))
        h = ad.sigmoid(ad.conv2d(h, w2, b2, 2, 1))
        h = ad.sigmoid(ad.conv2d(h, w3, b3, 1, 1))
        return ad.sum(h * h)

    n = gradcheck(net, [w1, b1, w2, b2, w3, b3, x], rng, samples=30)
    assert n >= 100


def test_layernorm_statistics():
    rng = np.random.default_rng(9)
    g = Tensor(rng.standard_normal((16, 16, 3)) * 1e-4 + 3e-5)
    out = ad.layer_normalize_per_channel(g).data.astype(np.float64)
    assert np.all(np.abs(out.mean(axis=(0, 1))) < 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 1)) - 1) < 1e-4)
    flat = ad.layer_normalize_per_channel(Tensor(np.zeros((4, 4, 3)))).data
    np.testing.assert_array_equal(flat, 0.0)


# -- serialisation ---------------------------------------------------------------
def test_tensor_record_round_trip():
    arr = np.random.default_rng(10).random((2, 3, 4)).astype(np.float32)
    blob = serial.tensor_bytes(arr)
    assert blob[:4] == b"ARAT"
    back = serial.read_tensor(io.BytesIO(blob))
    assert back.tobytes() == arr.tobytes() and back.shape == arr.shape


def test_tensor_record_errors():
    blob = serial.tensor_bytes(np.ones(4, dtype=np.float32))
    with pytest.raises(serial.TruncatedError):
        serial.read_tensor(io.BytesIO(blob[:-2]))
    bad = blob[:4] + (9).to_bytes(4, "little") + blob[8:]
    with pytest.raises(serial.VersionError):
        serial.read_tensor(io.BytesIO(bad))
