import numpy as np

from liwt import autodiff as ad
from liwt.autodiff import Tensor
from liwt.gradcheck import check_function, kink_safe_difference, numeric_grad, rel_error


def test_numeric_grad_of_cubic():
    x = np.array([0.5, -1.0, 2.0])
    g = numeric_grad(lambda: float(np.sum(x**3)), x)
    assert np.allclose(g, 3 * x**2, rtol=1e-5)


def test_check_function_flags_wrong_rule(monkeypatch):
    x = [np.random.default_rng(0).standard_normal((3, 4))]
    assert check_function(ad.sigmoid, x) < 1e-6
    orig = ad.GRADIENTS["sigmoid"]
    monkeypatch.setitem(ad.GRADIENTS, "sigmoid", lambda ctx, g: tuple(-v for v in orig(ctx, g)))
    assert check_function(ad.sigmoid, x) > 0.5


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-9, 0.0) < 1e-2  # tiny absolute gap counts as agreement
    assert rel_error(1.0, 1.1) > 0.04


def test_kink_safe_difference_shrinks_step():
    state = {"x": 0.004}

    def f():
        with ad.kink_trace() as trace:
            y = ad.relu(Tensor(np.array([state["x"]]))).item()
        return y, trace

    def perturb(eps):
        state["x"] = 0.004 + eps

    # h = 1e-2 crosses zero, 1e-3 does not
    assert abs(kink_safe_difference(f, perturb, 1e-2) - 1.0) < 1e-9
    state["x"] = 0.0

    def perturb_at_zero(eps):
        state["x"] = eps

    assert kink_safe_difference(f, perturb_at_zero, 1e-2) is None
