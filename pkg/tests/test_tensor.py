import math

import numpy as np
import pytest
from conftest import loop_conv

from emha import tensor as nt
from emha.errors import ConfigError, NonFiniteError, NondeterminismError, ShapeError, UsageError
from emha.tensor import Tape, Tensor, finite_diff_grad, make_rng, max_relative_error


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                c[i, j] += a[i, p] * b[p, j]
    return c


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*ts)
    tape.backward(loss)
    return [t.grad for t in ts]


def fd_check(fn, *arrays):
    """Max relative error of every input gradient against finite differences."""
    analytic = grad_of(fn, *arrays)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(v) for v in arrays]
            args[i] = x
            return fn(*args)
        numeric = finite_diff_grad(f, Tensor(a.copy()))
        worst = max(worst, max_relative_error(analytic[i], numeric))
    return worst


def weighted_sum(y, rng_key=(7,)):
    w = make_rng(*rng_key).standard_normal(y.shape)
    return nt.sum(nt.mul(y, w))


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_analytic():
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nt.matmul(np.eye(2), B).data, B)
    assert np.array_equal(nt.matmul(B, np.ones((2, 1))).data, [[3.0], [7.0]])


def test_matmul_matches_triple_loop():
    rng = make_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert np.abs(nt.matmul(a, b).data - loop_matmul(a, b)).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nt.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = make_rng(2).standard_normal((4, 5, 6))
    w = np.zeros((4, 2, 1, 1))
    for o in range(4):
        w[o, o % 2, 0, 0] = 1.0
    assert np.array_equal(nt.conv2d(x, w, np.zeros(4), groups=2).data, x)


def test_conv_padding_analytic():
    x = np.ones((1, 3, 5))
    out = nt.conv2d(x, np.ones((1, 1, 1, 3))).data[0]
    assert out[1, 2] == 3.0
    assert out[1, 0] == 2.0 and out[1, 4] == 2.0


@pytest.mark.parametrize("trial", range(3))
def test_conv_matches_loop_oracle(trial):
    rng = make_rng(3, trial)
    x = rng.standard_normal((4, 5, 6))
    w = rng.standard_normal((6, 2, 3, 3))
    b = rng.standard_normal(6)
    assert np.abs(nt.conv2d(x, w, b, groups=2).data - loop_conv(x, w, b, 2)).max() < 1e-12


def test_conv_batched_matches_unbatched():
    rng = make_rng(4)
    x = rng.standard_normal((3, 4, 5, 5))
    w = rng.standard_normal((4, 1, 1, 3))
    batched = nt.conv2d(x, w, groups=4).data
    for i in range(3):
        assert np.abs(batched[i] - nt.conv2d(x[i], w, groups=4).data).max() < 1e-12


def test_grouped_equals_block_diagonal_standard():
    rng = make_rng(5)
    g, cpg, opg = 3, 2, 2
    x = rng.standard_normal((g * cpg, 4, 5))
    w = rng.standard_normal((g * opg, cpg, 3, 1))
    full = np.zeros((g * opg, g * cpg, 3, 1))
    for o in range(g * opg):
        grp = o // opg
        full[o, grp * cpg:(grp + 1) * cpg] = w[o]
    assert np.abs(nt.conv2d(x, w, groups=g).data - nt.conv2d(x, full, groups=1).data).max() < 1e-12


def test_conv_errors():
    with pytest.raises(ConfigError):
        nt.conv2d(np.ones((2, 3, 3)), np.ones((2, 2, 2, 1)))
    with pytest.raises(ConfigError):
        nt.conv2d(np.ones((3, 3, 3)), np.ones((2, 1, 1, 1)), groups=2)


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    assert np.allclose(nt.softmax_rows(np.full((1, 4), 2.5)).data, 0.25)
    assert np.allclose(nt.softmax_rows(np.array([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)
    x = make_rng(6).standard_normal((3, 5))
    assert np.allclose(nt.softmax_rows(x).data, nt.softmax_rows(x + 17.3).data, atol=1e-15, rtol=0)


def test_softmax_rows_sum_to_one_and_monotone():
    x = make_rng(7).standard_normal((20, 9)) * 10
    p = nt.softmax_rows(x).data
    assert np.abs(p.sum(axis=-1) - 1).max() < 1e-6
    order = np.argsort(x, axis=-1)
    assert (np.diff(np.take_along_axis(p, order, axis=-1), axis=-1) >= 0).all()


def test_log_softmax_matches_log_of_softmax():
    x = make_rng(8).standard_normal((4, 6))
    assert np.allclose(nt.log_softmax_rows(x).data, np.log(nt.softmax_rows(x).data), atol=1e-14)


# ---------------------------------------------------------------- elementwise

def test_relu_values():
    assert np.array_equal(nt.relu(np.array([-2.0, 3.0])).data, [0.0, 3.0])


def test_layer_norm_constant_row_is_zero():
    out = nt.layer_norm(np.full((2, 5), 3.0), np.ones(5), np.zeros(5)).data
    assert np.array_equal(out, np.zeros((2, 5)))


def test_layer_norm_normalizes():
    out = nt.layer_norm(make_rng(9).standard_normal((3, 16)) * 4 + 2, np.ones(16), np.zeros(16)).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-12
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-3


def test_dropout_behaviour():
    x = make_rng(10).standard_normal((50, 40))
    assert np.array_equal(nt.dropout(x, 0.0, 1, True).data, x)
    assert np.array_equal(nt.dropout(x, 0.5, 1, False).data, x)
    y = nt.dropout(x, 0.25, (3, 4), True).data
    assert np.array_equal(y, nt.dropout(x, 0.25, (3, 4), True).data)
    kept = y != 0
    assert abs(1 - kept.mean() - 0.25) < 0.03
    assert np.allclose(y[kept], x[kept] / 0.75)
    with pytest.raises(ConfigError):
        nt.dropout(x, 1.0, 1, True)


def test_embedding_lookup_rows_and_range():
    table = make_rng(11).standard_normal((5, 3))
    ids = np.array([[0, 4], [2, 2]])
    assert np.array_equal(nt.embedding_lookup(table, ids).data, table[ids])
    with pytest.raises(UsageError):
        nt.embedding_lookup(table, np.array([5]))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        nt.scale(np.array([1e308]), 10.0)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    (g,) = grad_of(nt.sum, make_rng(12).standard_normal((3, 4)))
    assert np.array_equal(g, np.ones((3, 4)))


def test_backward_matmul_analytic():
    rng = make_rng(13)
    x, W = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    _, gW = grad_of(lambda a, b: nt.sum(nt.matmul(a, b)), x, W)
    assert np.allclose(gW, x.T @ np.ones((3, 2)), atol=1e-14)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = nt.scale(x, 2.0)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_backward_is_bitwise_repeatable():
    rng = make_rng(14)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))

    def fn(x, w):
        h = nt.relu(nt.matmul(x, w))
        return nt.sum(nt.mul(nt.softmax_rows(h), h))

    g1, g2 = grad_of(fn, a, b), grad_of(fn, a, b)
    assert all(np.array_equal(p, q) for p, q in zip(g1, g2))


def test_tape_records_in_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        nt.sum(nt.relu(nt.scale(x, 2.0)))
    assert [n.op for n in tape.nodes] == ["scale", "relu", "sum"]


def test_shared_input_accumulates():
    (g,) = grad_of(lambda x: nt.sum(nt.mul(x, x)), np.array([1.0, -2.0, 3.0]))
    assert np.array_equal(g, [2.0, -4.0, 6.0])


# ---------------------------------------------------------------- finite differences

def test_fd_examples():
    x = make_rng(15).standard_normal((2, 3))
    assert np.allclose(finite_diff_grad(nt.sum, Tensor(x)), 1.0, atol=1e-9)
    g = finite_diff_grad(lambda t: nt.sum(nt.mul(t, t)), Tensor(np.array([3.0])))
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_detects_nondeterminism():
    state = {"n": 0}

    def f(t):
        state["n"] += 1
        return float(t.data.sum()) + state["n"]

    with pytest.raises(NondeterminismError):
        finite_diff_grad(f, Tensor(np.ones(2)))


def test_fd_rejects_f32():
    with pytest.raises(UsageError):
        finite_diff_grad(nt.sum, Tensor(np.ones(2, dtype=np.float32)))


OPS = {
    "matmul": (lambda a, b: weighted_sum(nt.matmul(a, b)), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: weighted_sum(nt.matmul(a, b)), [(2, 3, 4), (4, 2)]),
    "conv2d_grouped": (lambda x, w, b: weighted_sum(nt.conv2d(x, w, b, groups=2)), [(4, 3, 4), (4, 2, 3, 3), (4,)]),
    "conv2d_batched": (lambda x, w: weighted_sum(nt.conv2d(x, w)), [(2, 2, 3, 3), (3, 2, 1, 3)]),
    "softmax_rows": (lambda x: weighted_sum(nt.softmax_rows(x)), [(3, 5)]),
    "log_softmax_rows": (lambda x: weighted_sum(nt.log_softmax_rows(x)), [(3, 5)]),
    "relu": (lambda x: weighted_sum(nt.relu(x)), [(4, 5)]),
    "add_broadcast": (lambda a, b: weighted_sum(nt.add(a, b)), [(3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: weighted_sum(nt.mul(a, b)), [(3, 4), (3, 1)]),
    "scale": (lambda x: weighted_sum(nt.scale(x, -1.7)), [(3,)]),
    "layer_norm": (lambda x, g, b: weighted_sum(nt.layer_norm(x, g, b)), [(3, 6), (6,), (6,)]),
    "reshape_swap": (lambda x: weighted_sum(nt.swapaxes(nt.reshape(x, (3, 2, 2)), 0, 2)), [(4, 3)]),
    "take": (lambda x: weighted_sum(nt.take(x, [0, 2, 2], axis=1)), [(2, 3, 2)]),
    "mean": (lambda x: weighted_sum(nt.mean(x, axis=0)), [(4, 3)]),
    "dropout": (lambda x: weighted_sum(nt.dropout(x, 0.3, 5, True)), [(4, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OPS[name]
    worst = 0.0
    for trial in range(20):
        rng = make_rng(16, trial)
        arrays = [rng.standard_normal(s) for s in shapes]
        worst = max(worst, fd_check(fn, *arrays))
    assert worst < 1e-4


def test_embedding_gradient():
    table = make_rng(17).standard_normal((5, 3))
    ids = np.array([[1, 1, 4]])
    assert fd_check(lambda t: weighted_sum(nt.embedding_lookup(t, ids)), table) < 1e-4


def test_renormalize_rows_gradient_and_support():
    rng = make_rng(18)
    x = np.abs(rng.standard_normal((3, 4))) + 0.1
    keep = np.tril(np.ones((3, 4), dtype=bool), 1)
    y = nt.renormalize_rows(x, keep).data
    assert np.allclose(y.sum(axis=-1), 1.0) and (y[~keep] == 0).all()
    assert fd_check(lambda t: weighted_sum(nt.renormalize_rows(t, keep)), x) < 1e-4


def test_renormalize_dead_row_is_uniform_over_support():
    x = np.array([[-1.0, -2.0, -3.0]])
    keep = np.array([[True, True, False]])
    assert np.array_equal(nt.renormalize_rows(x, keep).data, [[0.5, 0.5, 0.0]])


def test_make_rng_is_keyed():
    assert make_rng(1, 2).random() == make_rng(1, 2).random()
    assert make_rng(1, 2).random() != make_rng(2, 1).random()
