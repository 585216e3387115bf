import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from liwt import autodiff as ad
from liwt.autodiff import Tensor
from liwt.gradcheck import check_function, check_ops


def test_relu_sigmoid_examples():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_l1_of_identical_is_zero():
    a = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
    assert ad.l1(a, a).item() == 0.0


def test_binary_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_matmul_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ m).data, m.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((5, 7)).astype(np.float32)
    b = rng.standard_normal((7, 3)).astype(np.float32)
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += float(a[i, k]) * float(b[k, j])
    out = ad.matmul(Tensor(a), Tensor(b)).data
    assert out.dtype == np.float32
    assert np.max(np.abs(out - ref)) < 1e-6


def test_softmax_examples():
    assert np.allclose(ad.softmax(Tensor(np.zeros(9))).data, 1 / 9)
    assert np.allclose(ad.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75])
    big = ad.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, 0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 9), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    out = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(-1), 1.0, atol=1e-6)
    assert np.allclose(ad.softmax(Tensor(x + c), axis=-1).data, out, atol=1e-9)


def test_concat_three_bands_and_slices_bit_exact():
    rng = np.random.default_rng(2)
    parts = [rng.standard_normal((4, 5, 6)).astype(np.float32) for _ in range(3)]
    cat = ad.concat([Tensor(p) for p in parts], axis=-1)
    assert cat.shape == (4, 5, 18)
    for i, p in enumerate(parts):
        assert np.array_equal(cat[:, :, 6 * i:6 * (i + 1)].data, p)


def test_reshape_round_trip_and_gather_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((9, 8))
    flat = ad.reshape(Tensor(x), (72,))
    assert np.array_equal(ad.reshape(flat, (9, 8)).data, x)

    idx = rng.integers(0, 9, size=20)
    out = ad.gather_rows(Tensor(x), idx).data
    ref = np.empty((20, 8))
    for r, i in enumerate(idx):
        ref[r] = x[i].copy()
    assert np.array_equal(out, ref)
    with pytest.raises(ValueError):
        ad.gather_rows(Tensor(x), np.array([9]))


def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum_(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0])

    y = Tensor([3.0, -3.0], requires_grad=True)
    ad.backward(ad.l1(y, Tensor(np.zeros(2))))
    assert np.array_equal(y.grad, [1.0, -1.0])


def test_subgradients_at_zero():
    x = Tensor([0.0], requires_grad=True)
    ad.backward(ad.sum_(ad.relu(x)) + ad.sum_(ad.abs_(x)))
    assert x.grad[0] == 0.0


def test_backward_rejects_non_scalar_and_graphless():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * x)
    with pytest.raises(ValueError):
        ad.backward(Tensor(1.0))


def test_reused_tensor_accumulates_within_and_across_calls():
    x = Tensor([2.0], requires_grad=True)
    loss = ad.sum_(x * x + x)  # x used three times
    ad.backward(loss)
    assert x.grad[0] == pytest.approx(5.0)
    ad.backward(ad.sum_(x * x + x))
    assert x.grad[0] == pytest.approx(10.0)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * x
    assert y._op is None
    with pytest.raises(ValueError):
        ad.backward(ad.sum_(y))


def test_default_dtype_switch():
    assert Tensor([1.0]).dtype == np.float32
    with ad.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_every_op_gradient_matches_central_differences():
    errs = check_ops(seed=0)
    assert len(errs) >= 20
    bad = {k: v for k, v in errs.items() if v >= 1e-5}
    assert not bad, bad


def test_composite_graph_f32_tolerance():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((4, 6))
    b = rng.standard_normal((6, 5))

    def f(x, w):
        return ad.softmax(ad.sigmoid(x @ w), axis=-1)

    # f64 reference quality, then the same graph evaluated in f32
    assert check_function(f, [a, b]) < 1e-5
    with ad.default_dtype(np.float32):
        xa = Tensor(a.astype(np.float32), requires_grad=True)
        wb = Tensor(b.astype(np.float32), requires_grad=True)
        r = rng.standard_normal((4, 5)).astype(np.float32)
        ad.backward(ad.sum_(f(xa, wb) * Tensor(r)))
        g32 = xa.grad
    x64 = Tensor(a, requires_grad=True)
    ad.backward(ad.sum_(f(x64, Tensor(b)) * Tensor(r.astype(np.float64))))
    rel = np.max(np.abs(g32 - x64.grad)) / np.max(np.abs(x64.grad))
    assert rel < 1e-3


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_snapshot_round_trip_bit_exact(dtype):
    rng = np.random.default_rng(6)
    arr = rng.standard_normal((3, 1, 4, 2)).astype(dtype)
    buf = io.BytesIO()
    ad.save_tensor(buf, arr)
    assert buf.getvalue()[:4] == ad.SNAPSHOT_MAGIC
    buf.seek(0)
    back = ad.load_tensor(buf)
    assert back.dtype == dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_snapshot_rejects_corruption():
    buf = io.BytesIO()
    ad.save_tensor(buf, np.ones((2, 2), np.float32))
    raw = buf.getvalue()
    with pytest.raises(ad.SnapshotError):
        ad.load_tensor(io.BytesIO(raw[:-1]))
    with pytest.raises(ad.SnapshotError):
        ad.load_tensor(io.BytesIO(b"XXXX" + raw[4:]))
    with pytest.raises(ad.SnapshotError):
        ad.save_tensor(io.BytesIO(), np.ones(2, np.int32))
