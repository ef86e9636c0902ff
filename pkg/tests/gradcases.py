"""Randomized gradient-check cases: every differentiable op plus the composite losses.

Each builder takes a generator and returns ``(fn, inputs)`` where ``fn()``
is a scalar Tensor depending on ``inputs``. Non-scalar op outputs are
contracted with a fixed random weight so every output element matters.
"""
from __future__ import annotations

import numpy as np

from clvqa import autodiff as ad
from clvqa.autodiff import ParameterStore, Tensor
from clvqa.distill import DistillConfig, replay_alphas, replay_loss
from clvqa.model import BOS, ModelConfig, decode_logits, embed, init_params, loss_gt
from clvqa.projection import CURRENT, ProjectionBank, pro_loss_total, total_loss

N_SHAPES = 20


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _contract(out: Tensor, rng) -> callable:
    w = rng.normal(size=out.shape)
    return lambda t: ad.sum(ad.mul(t, w))


def _dims(rng, k):
    return tuple(int(d) for d in rng.integers(1, 5, size=k))


def _unary(op):
    def build(rng):
        x = _leaf(rng, _dims(rng, 2))
        c = _contract(op(x), rng)
        return (lambda: c(op(x))), [x]
    return build


def _binary(op, broadcast=False):
    def build(rng):
        shape = _dims(rng, 3)
        a = _leaf(rng, shape)
        b = _leaf(rng, shape[1:] if broadcast else shape)
        c = _contract(op(a, b), rng)
        return (lambda: c(op(a, b))), [a, b]
    return build


def _matmul(rng):
    n, m, k, p = _dims(rng, 4)
    a, b = _leaf(rng, (n, m, k)), _leaf(rng, (k, p))
    c = _contract(ad.matmul(a, b), rng)
    return (lambda: c(ad.matmul(a, b))), [a, b]


def _reshape(rng):
    a = _leaf(rng, _dims(rng, 2) + (2,))
    shape = (2, a.data.size // 2)
    c = _contract(ad.reshape(a, shape), rng)
    return (lambda: c(ad.reshape(a, shape))), [a]


def _concat(rng):
    n = int(rng.integers(1, 4))
    a, b = _leaf(rng, (n, int(rng.integers(1, 4)))), _leaf(rng, (n, int(rng.integers(1, 4))))
    c = _contract(ad.concat([a, b], axis=-1), rng)
    return (lambda: c(ad.concat([a, b], axis=-1))), [a, b]


def _repeat(rng):
    a = _leaf(rng, _dims(rng, 2))
    axis, n = int(rng.integers(0, 3)), int(rng.integers(1, 4))
    c = _contract(ad.repeat_axis(a, axis, n), rng)
    return (lambda: c(ad.repeat_axis(a, axis, n))), [a]


def _sum_axis(rng):
    a = _leaf(rng, _dims(rng, 3))
    axis = int(rng.integers(0, 3))
    c = _contract(ad.sum(a, axis=axis), rng)
    return (lambda: c(ad.sum(a, axis=axis))), [a]


def _mean(rng):
    a = _leaf(rng, _dims(rng, 2))
    return (lambda: ad.mean(a)), [a]


def _gather(rng):
    V, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    table = _leaf(rng, (V, d))
    ids = rng.integers(0, V, size=_dims(rng, 2))
    c = _contract(ad.gather(table, ids), rng)
    return (lambda: c(ad.gather(table, ids))), [table]


def _take_last(rng):
    shape = _dims(rng, 2) + (int(rng.integers(2, 5)),)
    a = _leaf(rng, shape)
    idx = rng.integers(0, shape[-1], size=shape[:-1])
    c = _contract(ad.take_last(a, idx), rng)
    return (lambda: c(ad.take_last(a, idx))), [a]


def _softmax(rng):
    a = _leaf(rng, _dims(rng, 2) + (int(rng.integers(2, 5)),))
    T = float(rng.uniform(0.5, 3.0))
    c = _contract(ad.softmax_temp(a, T), rng)
    return (lambda: c(ad.softmax_temp(a, T))), [a]


def _log_softmax(rng):
    a = _leaf(rng, _dims(rng, 2) + (int(rng.integers(2, 5)),))
    T = float(rng.uniform(0.5, 3.0))
    c = _contract(ad.log_softmax_temp(a, T), rng)
    return (lambda: c(ad.log_softmax_temp(a, T))), [a]


def _mask(rng, shape):
    m = (rng.random(shape) < 0.6).astype(float)
    m.flat[0] = 1.0
    return m


def _masked_mean(rng):
    a = _leaf(rng, _dims(rng, 3))
    m = _mask(rng, a.shape)
    return (lambda: ad.masked_mean(a, m)), [a]


def _token_ce(rng):
    shape = _dims(rng, 2) + (int(rng.integers(2, 6)),)
    a = _leaf(rng, shape)
    t = rng.integers(0, shape[-1], size=shape[:-1])
    m = _mask(rng, shape[:-1])
    c = _contract(ad.token_cross_entropy(a, t, m), rng)
    return (lambda: c(ad.token_cross_entropy(a, t, m))), [a]


def _masked_ce(rng):
    shape = _dims(rng, 2) + (int(rng.integers(2, 6)),)
    a = _leaf(rng, shape)
    t = rng.integers(0, shape[-1], size=shape[:-1])
    m = _mask(rng, shape[:-1])
    return (lambda: ad.masked_cross_entropy(a, t, m)), [a]


# -- composite losses over a tiny model ----------------------------------------


def _tiny_model(rng):
    V = int(rng.integers(5, 9))
    cfg = ModelConfig(d_e=int(rng.integers(2, 4)), d_h=int(rng.integers(2, 5)), max_len=8, init_scale=0.5)
    params = init_params(V, cfg, rng)
    n, L, La = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 4))
    inputs = rng.integers(3, V, size=(n, L))
    is_scene = rng.random((n, L)) < 0.5
    mask = np.ones((n, L))
    mask[:, L - 1] = rng.integers(0, 2, size=n)
    prefix = rng.integers(3, V, size=(n, La))
    prefix[:, 0] = BOS
    targets = rng.integers(0, V, size=(n, La))
    tmask = _mask(rng, (n, La))
    return params, cfg, (inputs, is_scene, mask, prefix, targets, tmask)


def _trainable(params: ParameterStore):
    return [t for _, t in params.trainable()]


def _l_gt(rng):
    params, _, (inputs, is_scene, mask, prefix, targets, tmask) = _tiny_model(rng)

    def fn():
        e = embed(params, inputs, is_scene, mask)
        return loss_gt(decode_logits(e, prefix, params), targets, tmask)
    return fn, _trainable(params)


def _l_replay(rng):
    params, _, (inputs, is_scene, mask, prefix, targets, tmask) = _tiny_model(rng)
    teacher = params.snapshot()
    for _, t in teacher.items():
        t.data += rng.normal(scale=0.5, size=t.shape)
    e_t = embed(teacher, inputs, is_scene, mask)
    # sharpen the teacher so some tokens pass the confidence gate
    t_logits = decode_logits(e_t, prefix, teacher).data * 4.0
    cfg = DistillConfig(temperature=float(rng.uniform(1.0, 3.0)), tau=0.3, alpha_max=0.7)

    def fn():
        e = embed(params, inputs, is_scene, mask)
        return replay_loss(decode_logits(e, prefix, params), t_logits, targets, tmask, cfg)
    fn.alphas = replay_alphas(t_logits, tmask, cfg)
    return fn, _trainable(params)


def _l_gt_pro(rng):
    params, cfg, (inputs, is_scene, mask, prefix, targets, tmask) = _tiny_model(rng)
    bank = ProjectionBank(params, cfg.d_e, d_proj=int(rng.integers(1, 4)))
    for _ in range(int(rng.integers(2, 4))):
        bank.add_task(rng)
    lam = float(rng.uniform(0.01, 1.0))

    def fn():
        e = embed(params, inputs, is_scene, mask)
        l_gt = loss_gt(decode_logits(e, prefix, params), targets, tmask)
        return total_loss(CURRENT, {"L_GT": l_gt, "L_pro": pro_loss_total(bank, e)}, lam)
    return fn, _trainable(params)


OP_CASES = {
    "add": _binary(ad.add),
    "add_broadcast": _binary(ad.add, broadcast=True),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "mul_broadcast": _binary(ad.mul, broadcast=True),
    "scale": _unary(lambda x: ad.scale(x, -1.7)),
    "tanh": _unary(ad.tanh),
    "square": _unary(ad.square),
    "matmul": _matmul,
    "reshape": _reshape,
    "concat": _concat,
    "repeat_axis": _repeat,
    "sum_axis": _sum_axis,
    "mean": _mean,
    "gather": _gather,
    "take_last": _take_last,
    "softmax_temp": _softmax,
    "log_softmax_temp": _log_softmax,
    "masked_mean": _masked_mean,
    "token_cross_entropy": _token_ce,
    "masked_cross_entropy": _masked_ce,
}

LOSS_CASES = {
    "L_GT": _l_gt,
    "L_replay": _l_replay,
    "L_GT+lambda*L_pro": _l_gt_pro,
}

ALL_CASES = {**OP_CASES, **LOSS_CASES}


def worst_error(name: str, n_shapes: int = N_SHAPES, base_seed: int = 0) -> float:
    build = ALL_CASES[name]
    worst = 0.0
    for k in range(n_shapes):
        rng = np.random.default_rng([base_seed, k, sum(map(ord, name))])
        fn, inputs = build(rng)
        worst = max(worst, ad.gradcheck(fn, inputs, eps=1e-5))
    return worst
