"""Random-shape gradient cases for every operator, shared by unit and acceptance tests."""

import numpy as np

from occforge.autodiff import Tensor, ops


def _t(rng, shape, lo=None, hi=None):
    a = rng.uniform(lo, hi, size=shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(a.astype(np.float64), requires_grad=True)


def _shape(rng, nd_lo=1, nd_hi=3):
    return tuple(int(x) for x in rng.integers(1, 5, size=rng.integers(nd_lo, nd_hi + 1)))


def _separated(rng, shape):
    # distinct entries, gaps well above the finite-difference step
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * 0.1 + rng.uniform(0, 0.01, n)
    return Tensor(vals.reshape(shape), requires_grad=True)


def _away_from_zero(rng, shape):
    a = rng.standard_normal(shape)
    a = np.where(np.abs(a) < 0.05, 0.5, a)
    return Tensor(a, requires_grad=True)


def case_matmul(rng):
    lead = tuple(int(x) for x in rng.integers(1, 4, size=rng.integers(0, 2)))
    m, k, n = (int(x) for x in rng.integers(1, 5, size=3))
    b_lead = lead if rng.uniform() < 0.5 else ()
    return ops.matmul, [_t(rng, lead + (m, k)), _t(rng, b_lead + (k, n))]


def case_add(rng):
    s = _shape(rng, 2, 3)
    return ops.add, [_t(rng, s), _t(rng, s[1:])]


def case_sub(rng):
    s = _shape(rng, 2, 3)
    other = tuple(1 if rng.uniform() < 0.5 else d for d in s)
    return ops.sub, [_t(rng, s), _t(rng, other)]


def case_mul(rng):
    s = _shape(rng)
    return ops.mul, [_t(rng, s), _t(rng, s)]


def case_scale(rng):
    c = float(rng.standard_normal())
    return (lambda x: ops.scale(x, c)), [_t(rng, _shape(rng))]


def case_relu(rng):
    return ops.relu, [_away_from_zero(rng, _shape(rng))]


def case_sigmoid(rng):
    return ops.sigmoid, [_t(rng, _shape(rng))]


def case_softmax(rng):
    s = _shape(rng, 2, 3)
    mask = np.where(np.tril(np.ones((s[-1], s[-1])))[: s[-2] if len(s) > 1 else 1, :] > 0, 0.0, -np.inf)
    if mask.shape[0] != s[-2]:
        mask = None
    return (lambda x: ops.softmax(x, mask)), [_t(rng, s)]


def case_layer_norm(rng):
    s = _shape(rng) + (int(rng.integers(2, 6)),)
    return ops.layer_norm, [_t(rng, s)]


def case_concat(rng):
    s = _shape(rng, 1, 2)
    return (lambda a, b: ops.concat([a, b])), [_t(rng, s + (2,)), _t(rng, s + (int(rng.integers(1, 4)),))]


def case_max_reduce(rng):
    s = _shape(rng, 1, 3)
    ax = int(rng.integers(0, len(s)))
    return (lambda x: ops.max_reduce(x, ax)), [_separated(rng, s)]


def case_reshape(rng):
    s = _shape(rng)
    return (lambda x: ops.reshape(x, (-1,))), [_t(rng, s)]


def case_transpose(rng):
    s = _shape(rng, 2, 3)
    axes = tuple(int(a) for a in rng.permutation(len(s)))
    return (lambda x: ops.transpose(x, axes)), [_t(rng, s)]


def case_sum(rng):
    s = _shape(rng, 2, 3)
    ax = int(rng.integers(0, len(s)))
    return (lambda x: ops.sum(x, axis=ax)), [_t(rng, s)]


def case_mean(rng):
    return ops.mean, [_t(rng, _shape(rng))]


def case_broadcast_to(rng):
    s = _shape(rng, 1, 2)
    return (lambda x: ops.broadcast_to(x, (3,) + s)), [_t(rng, s)]


def case_take_last(rng):
    s = _shape(rng, 2, 3)
    return (lambda x: ops.take_last(x, 0)), [_t(rng, s)]


def case_bce(rng):
    s = _shape(rng)
    y = (rng.uniform(size=s) < 0.5).astype(np.float64)
    m = (rng.uniform(size=s) < 0.8).astype(np.float64)
    m.flat[0] = 1.0
    return (lambda p: ops.binary_cross_entropy(p, y, m)), [_t(rng, s, 0.05, 0.95)]


def case_l1(rng):
    s = _shape(rng)
    y = rng.standard_normal(s)
    return (lambda p: ops.l1_loss(p, y)), [Tensor(y + np.where(rng.uniform(size=s) < 0.5, -1, 1) * rng.uniform(0.1, 1, s), requires_grad=True)]


def case_positional_encoding(rng):
    # constant lookup: grads flow through the added operand only
    T, d = int(rng.integers(1, 6)), 2 * int(rng.integers(1, 4))
    pe = ops.positional_encoding(np.arange(T), d)
    return (lambda x: ops.add(x, pe)), [_t(rng, (T, d))]


def case_take_rows(rng):
    s = _shape(rng, 2, 3)
    idx = rng.integers(0, s[0], size=int(rng.integers(1, 6)))
    return (lambda x: ops.take_rows(x, idx)), [_t(rng, s)]


def case_slice_last(rng):
    s = _shape(rng, 1, 2) + (int(rng.integers(2, 7)),)
    a = int(rng.integers(0, s[-1] - 1))
    b = int(rng.integers(a + 1, s[-1] + 1))
    return (lambda x: ops.slice_last(x, a, b)), [_t(rng, s)]


CASES = {
    name[len("case_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("case_") and callable(fn)
}
