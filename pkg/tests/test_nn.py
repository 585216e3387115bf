import math

import numpy as np
import pytest

from liwt import nn
from liwt.autodiff import Tensor, backward, default_dtype, slice_, sum_
from liwt.coords import grid_centers, nearest_index


def _conv_params(w, b):
    return nn.Conv2dParams(Tensor(w), Tensor(b))


def conv_oracle(x, w, b):
    """Six nested loops, zero padding, stride 1."""
    H, W, cin = x.shape
    k, _, _, cout = w.shape
    r = k // 2
    out = np.zeros((H, W, cout))
    for i in range(H):
        for j in range(W):
            for o in range(cout):
                acc = b[o]
                for di in range(k):
                    for dj in range(k):
                        ii, jj = i + di - r, j + dj - r
                        if 0 <= ii < H and 0 <= jj < W:
                            for c in range(cin):
                                acc += x[ii, jj, c] * w[di, dj, c, o]
                out[i, j, o] = acc
    return out


def test_conv_identity_1x1():
    x = np.random.default_rng(0).standard_normal((5, 4, 3))
    p = _conv_params(np.eye(3).reshape(1, 1, 3, 3), np.zeros(3))
    assert np.array_equal(nn.conv2d(Tensor(x), p).data, x)


def test_conv_ones_kernel_interior():
    x = np.full((6, 6, 1), 0.7)
    p = _conv_params(np.ones((3, 3, 1, 1)), np.zeros(1))
    out = nn.conv2d(Tensor(x), p).data[..., 0]
    assert np.allclose(out[1:-1, 1:-1], 9 * 0.7)
    assert out[0, 0] == pytest.approx(4 * 0.7)


def test_conv_against_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 8, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    with default_dtype(np.float64):
        out = nn.conv2d(Tensor(x), _conv_params(w, b)).data
    assert np.max(np.abs(out - conv_oracle(x, w, b))) < 1e-5


def test_conv_stride2_odd_raises_and_even_halves():
    p = _conv_params(np.ones((2, 2, 1, 1)), np.zeros(1))
    assert nn.conv2d(Tensor(np.ones((6, 4, 1))), p, stride=2, padding="none").shape == (3, 2, 1)
    with pytest.raises(ValueError):
        nn.conv2d(Tensor(np.ones((5, 4, 1))), p, stride=2, padding="none")


def maxpool_oracle(x):
    H, W, C = x.shape
    out = np.empty_like(x)
    for i in range(H):
        for j in range(W):
            for c in range(C):
                out[i, j, c] = max(
                    x[min(max(i + di, 0), H - 1), min(max(j + dj, 0), W - 1), c]
                    for di in (-1, 0, 1) for dj in (-1, 0, 1)
                )
    return out


def test_maxpool_examples_and_oracle():
    const = np.full((4, 5, 2), 3.0)
    assert np.array_equal(nn.maxpool2d(Tensor(const)).data, const)

    spike = np.zeros((6, 6, 1))
    spike[2, 3, 0] = 5.0
    out = nn.maxpool2d(Tensor(spike)).data[..., 0]
    expect = np.zeros((6, 6))
    expect[1:4, 2:5] = 5.0
    assert np.array_equal(out, expect)

    x = np.random.default_rng(2).standard_normal((7, 5, 3))
    assert np.array_equal(nn.maxpool2d(Tensor(x)).data, maxpool_oracle(x))


def test_maxpool_gradient_routes_to_first_argmax():
    x = Tensor(np.ones((3, 3, 1)), requires_grad=True, dtype=np.float64)
    out = nn.maxpool2d(x)
    backward(sum_(slice_(out, (1, 1))))
    g = x.grad[..., 0]
    # ties: row-major first element of the 3x3 window centred on (1, 1) is (0, 0)
    assert g[0, 0] == 1.0 and g.sum() == 1.0


def test_linear_examples():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 4))
    ident = nn.LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert np.allclose(nn.linear(Tensor(x), ident).data, x)
    const = nn.LinearParams(Tensor(np.zeros((4, 2))), Tensor([1.5, -2.0]))
    assert np.array_equal(nn.linear(Tensor(x), const).data, np.tile([1.5, -2.0], (5, 1)).astype(np.float32))
    w, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    with default_dtype(np.float64):
        out = nn.linear(Tensor(x), nn.LinearParams(Tensor(w), Tensor(b))).data
    assert np.allclose(out, x @ w + b, atol=1e-12)
    with pytest.raises(ValueError):
        nn.linear(Tensor(np.ones((2, 3))), ident)


def test_global_avg_pool_examples():
    assert np.allclose(nn.global_avg_pool(Tensor(np.full((3, 2, 4), 0.25))).data, 0.25)
    assert nn.global_avg_pool(Tensor([[[1.0], [2.0]], [[3.0], [4.0]]])).data[0] == 2.5
    x = np.random.default_rng(4).standard_normal((5, 6, 3))
    ref = x.reshape(-1, 3).sum(0) / 30
    with default_dtype(np.float64):
        assert np.allclose(nn.global_avg_pool(Tensor(x)).data, ref, atol=1e-12)


def cubic_oracle(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def test_bicubic_row_against_scalar_oracle():
    row = [0.0, 1.0, 2.0, 3.0]
    n_in, n_out = 4, 8
    ref = []
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        base = math.floor(src)
        acc = 0.0
        for k in range(base - 1, base + 3):
            acc += cubic_oracle(src - k) * row[min(max(k, 0), n_in - 1)]
        ref.append(acc)
    x = np.array(row).reshape(1, 4, 1)
    with default_dtype(np.float64):
        out = nn.resample(Tensor(x), 1, 8, "bicubic").data.ravel()
    assert np.max(np.abs(out - ref)) < 1e-6


@pytest.mark.parametrize("mode", ["nearest", "bilinear", "bicubic"])
def test_resample_identity_and_constant(mode):
    x = np.random.default_rng(5).random((6, 7, 2)).astype(np.float32)
    assert np.array_equal(nn.resample(Tensor(x), 6, 7, mode).data, x)
    c = np.full((5, 4, 3), 0.375, np.float32)
    for oh, ow in [(11, 9), (2, 3), (13, 13)]:
        assert np.allclose(nn.resample(Tensor(c), oh, ow, mode).data, 0.375, atol=1e-6)


def test_bicubic_down_up_recovers_smooth_image():
    n = 64
    y, x = np.mgrid[0:n, 0:n] / n
    img = (0.2 + 0.3 * x + 0.2 * y + 0.15 * x * y)[..., None]
    with default_dtype(np.float64):
        lo = nn.resample(Tensor(img), n // 2, n // 2, "bicubic")
        back = nn.resample(lo, n, n, "bicubic").data
    assert np.max(np.abs(back - img)[4:-4, 4:-4]) < 1e-2


def test_sample_at_centres_clamping_and_oracle():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 6, 2)).astype(np.float32)
    centres = grid_centers(5, 6)
    assert np.array_equal(nn.sample_at(Tensor(x), centres).data, x.reshape(30, 2))
    far = np.array([[-50.0, -50.0], [50.0, 50.0], [-50.0, 50.0]])
    got = nn.sample_at(Tensor(x), far).data
    assert np.array_equal(got, np.stack([x[0, 0], x[4, 5], x[0, 5]]))

    pts = rng.uniform(-1.3, 1.3, size=(200, 2))
    ref = []
    for py, px in pts:
        # closest centre by brute force
        i = int(np.argmin([abs(py - (-1 + (2 * k + 1) / 5)) for k in range(5)]))
        j = int(np.argmin([abs(px - (-1 + (2 * k + 1) / 6)) for k in range(6)]))
        ref.append(x[i, j])
    assert np.array_equal(nn.sample_at(Tensor(x), pts).data, np.array(ref))
    assert np.array_equal(nearest_index(pts[:, 0], 5), [np.argmin(np.abs(p - (-1 + (2 * np.arange(5) + 1) / 5))) for p in pts[:, 0]])


def test_bilinear_sample_matches_resample_on_grid():
    x = np.random.default_rng(7).random((4, 6, 3))
    with default_dtype(np.float64):
        pts = grid_centers(8, 12)
        a = nn.sample_at(Tensor(x), pts, "bilinear").data.reshape(8, 12, 3)
        b = nn.resample(Tensor(x), 8, 12, "bilinear").data
    assert np.allclose(a, b, atol=1e-12)


def test_init_bounds():
    rng = np.random.default_rng(8)
    p = nn.Conv2dParams.init(3, 16, 8, rng)
    bound = 1 / math.sqrt(9 * 16)
    assert nn.kaiming_bound(144) == pytest.approx(bound)
    assert np.all(np.abs(p.weight.data) <= bound) and np.all(p.bias.data == 0)
