import numpy as np
import pytest

from clvqa import autodiff as ad
from gradcases import ALL_CASES, N_SHAPES, _l_replay, worst_error


@pytest.mark.parametrize("name", list(ALL_CASES))
def test_gradient_matches_central_differences(name):
    assert worst_error(name, N_SHAPES) < 1e-4


def test_relative_error_floor():
    assert ad.relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)
    assert ad.relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_replay_case_exercises_the_gate():
    gated = 0
    for k in range(N_SHAPES):
        rng = np.random.default_rng([0, k, sum(map(ord, "L_replay"))])
        fn, _ = _l_replay(rng)
        gated += int((fn.alphas > 0).any())
    assert gated >= N_SHAPES // 2


def test_gradcheck_detects_a_wrong_gradient():
    x = ad.Tensor(np.array([0.3, -1.2]), requires_grad=True)

    def broken():
        out = ad.sum(ad.square(x))
        return out

    good = ad.gradcheck(broken, [x])
    assert good < 1e-6
    # corrupt the analytic gradient path by scaling after backward
    x.grad = None
    ad.backward(broken())
    assert ad.relative_error(x.grad * 1.01, ad.numerical_grad(broken, x)) > 1e-3
