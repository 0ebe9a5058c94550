import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from camnet.engine import Tensor
from camnet.engine import functional as F
from camnet.errors import ConfigError, ShapeError


def conv_loop(x, k, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    patch = xp[i, :, y * stride:y * stride + kh, xx * stride:xx * stride + kw]
                    out[i, oc, y, xx] = b[oc] + np.sum(patch * k[oc])
    return out


def bilinear_loop(img, coords):
    """Zero-padded bilinear lookup, one point at a time."""
    c, h, w = img.shape
    _, ho, wo = coords.shape
    out = np.zeros((c, ho, wo))
    for y in range(ho):
        for x in range(wo):
            px = ((coords[0, y, x] + 1) * w - 1) / 2
            py = ((coords[1, y, x] + 1) * h - 1) / 2
            # positions within 1e-4 px of a center read that center
            px = round(px) if abs(px - round(px)) < 1e-4 else px
            py = round(py) if abs(py - round(py)) < 1e-4 else py
            x0, y0 = math.floor(px), math.floor(py)
            for yy, wy in ((y0, 1 - (py - y0)), (y0 + 1, py - y0)):
                for xx, wx in ((x0, 1 - (px - x0)), (x0 + 1, px - x0)):
                    if 0 <= yy < h and 0 <= xx < w:
                        out[:, y, x] += wy * wx * img[:, yy, xx]
    return out


def test_identity_kernel_reproduces_input(rng):
    x = rng.standard_normal((3, 5, 5))
    k = np.eye(3).reshape(3, 3, 1, 1)
    out = F.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_constant_input_all_ones_kernel():
    x = np.full((2, 6, 6), 0.5)
    k = np.ones((1, 2, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(k), pad=0)
    np.testing.assert_allclose(out.data, 9 * 2 * 0.5)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (1, 0, 3), (2, 1, 4), (2, 0, 2), (1, 2, 5)])
def test_conv_matches_loop_oracle(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 8, 8))
    kern = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(kern), Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, conv_loop(x, kern, b, stride, pad), atol=1e-10)


def test_conv_small_example_float32(rng):
    x = rng.standard_normal((1, 4, 4)).astype(np.float32)
    k = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    out = F.conv2d(Tensor(x), Tensor(k), pad=0)
    expect = conv_loop(x[None].astype(np.float64), k.astype(np.float64), np.zeros(2), 1, 0)[0]
    np.testing.assert_allclose(out.data, expect, atol=1e-6)


def test_conv_errors():
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ConfigError):
        F.conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))), stride=2, pad=0)


def test_batch_norm_examples(rng):
    x = rng.standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    rm, rv = np.zeros(2), np.ones(2)
    out = F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv)
    np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-5)

    const = np.full((2, 1, 3, 3), 4.0)
    out = F.batch_norm(Tensor(const), Tensor(np.ones(1)), Tensor(np.full(1, 0.3)), np.zeros(1), np.ones(1))
    np.testing.assert_allclose(out.data, 0.3)


def test_batch_norm_statistics_and_running_update(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 3 + 1
    gamma, beta = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    rm, rv = np.zeros(3), np.ones(3)
    out = F.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, momentum=0.1).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), gamma, atol=1e-4)
    m = 2 * 4 * 4
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    ev = F.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training=False).data
    expect = (x - rm[:, None, None]) / np.sqrt(rv[:, None, None] + 1e-5) * gamma[:, None, None] + beta[:, None, None]
    np.testing.assert_allclose(ev, expect, rtol=1e-10)


def test_batch_norm_zero_extent():
    with pytest.raises(ShapeError):
        F.batch_norm(Tensor(np.zeros((1, 2, 0, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     np.zeros(2), np.ones(2))


def test_activation_examples():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert F.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert F.leaky_relu(Tensor([-2.0]), 0.1).data[0] == pytest.approx(-0.2)
    assert F.activation(Tensor([-2.0]), "leaky_relu", 0.1).data[0] == pytest.approx(-0.2)
    with pytest.raises(ValueError):
        F.activation(Tensor([1.0]), "tanh")


def test_sigmoid_is_stable_at_extremes():
    out = F.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(F.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3])
    np.testing.assert_allclose(F.softmax(Tensor([1.0, 0.0]), temperature=1e-4).data, [1, 0], atol=1e-12)
    with pytest.raises(ValueError):
        F.softmax(Tensor([1.0]), temperature=0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.01, 10))
def test_softmax_sums_to_one(values, temperature):
    out = F.softmax(Tensor(np.array(values)), temperature=temperature).data
    assert out.sum() == pytest.approx(1.0)
    assert np.all(out >= 0)


def test_l2_normalize_examples():
    np.testing.assert_allclose(F.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    np.testing.assert_allclose(F.l2_normalize(Tensor([2.0, 0.0])).data, [1, 0])
    np.testing.assert_array_equal(F.l2_normalize(Tensor([0.0, 0.0]), epsilon=1e-8).data, [0, 0])


def test_coordinate_grid_2x2():
    g = F.coordinate_grid(2, 2)
    np.testing.assert_array_equal(g[0], [[-0.5, 0.5], [-0.5, 0.5]])
    np.testing.assert_array_equal(g[1], [[-0.5, -0.5], [0.5, 0.5]])


def test_identity_sampling_is_exact(rng):
    img = rng.uniform(size=(3, 7, 9)).astype(np.float32)
    out = F.bilinear_sample(Tensor(img), Tensor(F.coordinate_grid(7, 9)))
    np.testing.assert_array_equal(out.data, img)


def test_midpoint_sample():
    img = np.array([[[0.0, 1.0]]])
    out = F.bilinear_sample(Tensor(img), Tensor(np.array([[[0.0]], [[0.0]]])))
    assert out.data.item() == pytest.approx(0.5)


def test_outside_coords_sample_zero(rng):
    img = rng.uniform(size=(2, 4, 4))
    coords = np.stack([np.full((3, 3), 1.5), np.full((3, 3), -2.0)])
    np.testing.assert_array_equal(F.bilinear_sample(Tensor(img), Tensor(coords)).data, 0)


def test_border_padding_clamps(rng):
    img = rng.uniform(size=(1, 4, 4))
    coords = np.stack([np.full((1, 1), 5.0), np.full((1, 1), -5.0)])
    out = F.bilinear_sample(Tensor(img), Tensor(coords), padding="border")
    assert out.data.item() == pytest.approx(img[0, 0, 3])


@given(st.integers(0, 2 ** 31))
@example(3905)  # a coordinate inside the snap band of an outside center
def test_bilinear_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((2, 5, 6))
    coords = rng.uniform(-1.3, 1.3, size=(2, 3, 4))
    out = F.bilinear_sample(Tensor(img), Tensor(coords)).data
    np.testing.assert_allclose(out, bilinear_loop(img, coords), atol=1e-9)


def test_upsample_reproduces_affine_fields(rng):
    a, b, c = rng.standard_normal(3)
    g = F.coordinate_grid(4, 5, np.float64)
    coarse = a * g[0] + b * g[1] + c
    fine_grid = F.coordinate_grid(16, 20, np.float64)
    up = F.upsample_linear(Tensor(coarse[None]), 16, 20).data[0]
    np.testing.assert_allclose(up, a * fine_grid[0] + b * fine_grid[1] + c, atol=1e-12)


def test_upsample_identity_size(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    np.testing.assert_allclose(F.upsample_linear(Tensor(x), 4, 4).data, x)
