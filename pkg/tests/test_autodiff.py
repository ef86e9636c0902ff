import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clvqa import autodiff as ad
from clvqa.autodiff import AdamW, ParameterStore, Tensor
from oracles import cross_entropy_loops, matmul_loops, softmax_list


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_annihilation():
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    out = ad.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, matmul_loops(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# -- softmax ----------------------------------------------------------------


@pytest.mark.parametrize("T", [0.5, 1.0, 7.0])
def test_softmax_symmetric(T):
    np.testing.assert_allclose(ad.softmax_temp(Tensor([0.0, 0.0]), T).data, [0.5, 0.5])


def test_softmax_temperature_example():
    p = ad.softmax_temp(Tensor([2.0, 0.0]), 2.0).data
    np.testing.assert_allclose(p, softmax_list([1.0, 0.0]), atol=1e-12)
    np.testing.assert_allclose(p, [0.7311, 0.2689], atol=1e-4)


def test_softmax_high_temperature_flattens():
    p = ad.softmax_temp(Tensor([5.0, 1.0, 1.0]), 100.0).data
    assert p.max() - p.min() < 0.05


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(T):
    with pytest.raises(ad.ContractError):
        ad.softmax_temp(Tensor([1.0, 2.0]), T)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)),
       st.floats(0.2, 20.0))
def test_softmax_rows_sum_to_one_and_positive(z, T):
    p = ad.softmax_temp(Tensor(z), T).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(p > 0)


# -- gather -----------------------------------------------------------------


def test_gather_first_row():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(ad.gather(Tensor(table), [0]).data, table[:1])


def test_gather_repeated_ids_accumulate():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = ad.gather(table, [2, 2])
    np.testing.assert_array_equal(out.data[0], out.data[1])
    ad.backward(ad.sum(out))
    expected = np.zeros((4, 3))
    expected[2] = 2.0
    np.testing.assert_array_equal(table.grad, expected)


def test_gather_matches_copy_loop():
    rng = np.random.default_rng(2)
    table = rng.normal(size=(7, 4))
    ids = rng.integers(0, 7, size=9)
    out = ad.gather(Tensor(table), ids).data
    for i, k in enumerate(ids):
        for j in range(4):
            assert out[i, j] == table[k, j]


def test_gather_out_of_range_names_id():
    with pytest.raises(IndexError, match="9"):
        ad.gather(Tensor(np.ones((3, 2))), [0, 9])


# -- cross entropy ----------------------------------------------------------


def test_cross_entropy_saturated():
    logits = np.zeros((1, 2, 5))
    targets = np.array([[3, 1]])
    logits[0, 0, 3] = logits[0, 1, 1] = 30.0
    # exp(-30) * 4 is about 3.7e-13
    assert ad.masked_cross_entropy(Tensor(logits), targets, np.ones((1, 2))).item() < 1e-9


def test_cross_entropy_uniform():
    loss = ad.masked_cross_entropy(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 3), int), np.ones((2, 3)))
    assert abs(loss.item() - math.log(4)) < 1e-6


def test_cross_entropy_mixed_mask_matches_loop():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(3, 4, 6))
    targets = rng.integers(0, 6, size=(3, 4))
    mask = np.array([[1, 1, 0, 0], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=float)
    got = ad.masked_cross_entropy(Tensor(logits), targets, mask).item()
    assert got == pytest.approx(cross_entropy_loops(logits.tolist(), targets.tolist(), mask.tolist()), abs=1e-12)


def test_cross_entropy_all_masked_is_degenerate():
    with pytest.raises(ad.DegenerateBatchError):
        ad.masked_cross_entropy(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2)))


@given(st.integers(0, 10_000))
def test_cross_entropy_ignores_masked_logits(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 4))
    targets = rng.integers(0, 4, size=(2, 3))
    mask = np.array([[1, 0, 1], [0, 1, 0]], dtype=float)
    other = logits.copy()
    other[mask == 0] = rng.normal(scale=10, size=(int((mask == 0).sum()), 4))
    a = ad.masked_cross_entropy(Tensor(logits), targets, mask).item()
    b = ad.masked_cross_entropy(Tensor(other), targets, mask).item()
    assert a == b


# -- backward ---------------------------------------------------------------


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    ad.backward(ad.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_constant_input_gets_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    ad.backward(ad.sum(ad.mul(x, c)))
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_nonscalar_root_rejected():
    with pytest.raises(ad.ContractError):
        ad.backward(Tensor([1.0, 2.0], requires_grad=True))


def test_softmax_matmul_chain_gradcheck():
    rng = np.random.default_rng(4)
    x, w = leaf(rng, 3, 4), leaf(rng, 4, 5)
    wt = rng.normal(size=(3, 5))
    fn = lambda: ad.sum(ad.mul(ad.softmax_temp(ad.matmul(x, w), 1.5), wt))
    assert ad.gradcheck(fn, [x, w]) < 1e-4


def test_backward_deterministic():
    rng = np.random.default_rng(5)
    x, w = leaf(rng, 2, 3, 4), leaf(rng, 4, 3)
    grads = []
    for _ in range(2):
        x.grad = w.grad = None
        ad.backward(ad.mean(ad.tanh(ad.matmul(x, w))))
        grads.append((x.grad.tobytes(), w.grad.tobytes()))
    assert grads[0] == grads[1]


def test_graph_visits_each_node_once_in_order():
    a = Tensor(2.0, requires_grad=True)
    b = ad.mul(a, a)
    c = ad.add(b, b)
    g = ad.Graph(c)
    ids = [n.id for n in g.nodes]
    assert len(ids) == len(set(ids)) == 3
    assert ids == sorted(ids)


# -- AdamW ------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_identity():
    params = ParameterStore({"w": np.array([1.0, -2.0])})
    params["w"].grad = np.zeros(2)
    AdamW(lr=1e-4, weight_decay=0.0).step(params)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])


def test_adamw_decoupled_decay():
    params = ParameterStore({"w": np.array([1.0, -2.0, 0.5])})
    params["w"].grad = np.zeros(3)
    AdamW(lr=1e-4, weight_decay=0.05).step(params)
    np.testing.assert_allclose(params["w"].data, np.array([1.0, -2.0, 0.5]) * (1 - 1e-4 * 0.05), rtol=0, atol=1e-15)


def test_adamw_scalar_recurrence():
    lr, wd, b1, b2, eps = 1e-2, 0.05, 0.9, 0.999, 1e-8
    grads = [0.5, -1.0, 0.25, 2.0, -0.75]
    params = ParameterStore({"w": np.array(1.5)})
    opt = AdamW(lr, wd, (b1, b2), eps)
    w, m, v = 1.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        params["w"].grad = np.array(g)
        opt.step(params)
        w = w * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert float(params["w"].data) == pytest.approx(w, abs=1e-15)
    assert opt.step_count == len(grads)


def test_adamw_skips_frozen():
    params = ParameterStore({"w": np.ones(2)})
    params.add("f", np.ones(2), frozen=True)
    params["w"].grad = np.ones(2)
    params["f"].grad = np.ones(2)
    AdamW(lr=0.1).step(params)
    np.testing.assert_array_equal(params["f"].data, np.ones(2))
    assert np.all(params["w"].data < 1.0)


def test_adamw_shape_mismatch():
    params = ParameterStore({"w": np.ones(2)})
    params["w"].grad = np.ones(3)
    with pytest.raises(ad.ContractError):
        AdamW().step(params)


def test_snapshot_is_frozen_copy():
    params = ParameterStore({"w": np.ones(2)})
    snap = params.snapshot()
    params["w"].data += 1.0
    np.testing.assert_array_equal(snap["w"].data, np.ones(2))
    assert snap.trainable() == []
    assert snap.digest() != params.digest()
