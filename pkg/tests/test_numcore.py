import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from difsr import numcore as nc


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    x = rng().standard_normal((2, 3))
    assert np.array_equal((nc.as_value(np.eye(2)) @ nc.as_value(x)).data, x)


def test_matmul_hand_case():
    out = nc.as_value([[1.0, 2.0], [3.0, 4.0]]) @ nc.as_value([[0.0], [1.0]])
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_triple_loop_oracle():
    a, b = rng(1).standard_normal((3, 4)), rng(2).standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs((nc.as_value(a) @ nc.as_value(b)).data - ref)) <= 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nc.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        nc.as_value(np.ones((2, 3))) @ nc.as_value(np.ones((4, 2)))


def test_matmul_backward_rules():
    a, b = nc.parameter(rng(3).standard_normal((3, 4))), nc.parameter(rng(4).standard_normal((4, 2)))
    g = rng(5).standard_normal((3, 2))
    nc.sum(nc.mul(a @ b, g)).backward()
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_batched_matmul_matches_numpy():
    a, b = rng(6).standard_normal((2, 3, 5, 4)), rng(7).standard_normal((2, 3, 4, 6))
    assert np.allclose((nc.as_value(a) @ nc.as_value(b)).data, a @ b, atol=1e-13)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    out = nc.masked_softmax(nc.as_value([[0.0, 0.0, 0.0]])).data
    assert np.allclose(out, 1 / 3, atol=1e-15)


def test_softmax_ln2_row():
    out = nc.masked_softmax(nc.as_value([[math.log(2.0), 0.0]])).data
    assert np.allclose(out, [[2 / 3, 1 / 3]], atol=1e-15)


def test_softmax_naive_oracle():
    x = rng(8).standard_normal((1, 7))
    naive = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(nc.masked_softmax(nc.as_value(x)).data - naive)) <= 1e-12


def test_softmax_masked_entries_exactly_zero():
    x = rng(9).standard_normal((4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    out = nc.masked_softmax(nc.as_value(x), mask).data
    assert np.all(out[~mask] == 0.0)
    assert np.allclose(out.sum(-1), 1.0, atol=1e-9)


def test_softmax_fully_masked_row_raises():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(nc.DegenerateRowError):
        nc.masked_softmax(nc.as_value(np.zeros((2, 2))), mask)


def test_softmax_large_logits_stable():
    out = nc.masked_softmax(nc.as_value([[1000.0, 999.0]])).data
    assert np.all(np.isfinite(out))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    mask = np.ones((3, 5), dtype=bool)
    mask[:, 3:] = False
    a = nc.masked_softmax(nc.as_value(x), mask).data
    b = nc.masked_softmax(nc.as_value(x + c), mask).data
    assert np.allclose(a.sum(-1), 1.0, atol=1e-9)
    assert np.allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row():
    out = nc.layer_norm(nc.as_value(np.full((1, 4), 3.0)), nc.as_value(np.ones(4)), nc.as_value(np.zeros(4)), 1e-12)
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_normalized_row():
    out = nc.layer_norm(nc.as_value([[1.0, -1.0]]), nc.as_value(np.ones(2)), nc.as_value(np.zeros(2)), 1e-300)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-15)


def test_layer_norm_formula_oracle():
    x, g, b = rng(10).standard_normal((3, 6)), rng(11).standard_normal(6), rng(12).standard_normal(6)
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * g + b
    out = nc.layer_norm(nc.as_value(x), nc.as_value(g), nc.as_value(b), 1e-5).data
    assert np.max(np.abs(out - ref)) <= 1e-12


# ---------------------------------------------------------------- gather

def test_gather_repeated_rows_accumulate():
    table = nc.parameter(rng(13).standard_normal((3, 4)))
    out = nc.gather_rows(table, np.array([0, 0]))
    assert np.array_equal(out.data, table.data[[0, 0]])
    nc.sum(out).backward()
    assert np.array_equal(table.grad[0], np.full(4, 2.0))
    assert np.array_equal(table.grad[1:], np.zeros((2, 4)))


def test_gather_identity_permutation():
    t = rng(14).standard_normal((5, 2))
    assert np.array_equal(nc.gather_rows(nc.as_value(t), np.arange(5)).data, t)


def test_gather_loop_oracle():
    t = rng(15).standard_normal((6, 3))
    idx = rng(16).integers(0, 6, 10)
    ref = np.stack([t[i] for i in idx])
    assert np.array_equal(nc.gather_rows(nc.as_value(t), idx).data, ref)


def test_gather_out_of_range_names_value():
    with pytest.raises(IndexError, match="7"):
        nc.gather_rows(nc.as_value(np.zeros((3, 2))), np.array([0, 7]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=12), st.integers(0, 2**31 - 1))
def test_gather_conserves_gradient_mass(idx, seed):
    table = nc.parameter(np.zeros((5, 3)))
    up = np.random.default_rng(seed).standard_normal((len(idx), 3))
    nc.sum(nc.mul(nc.gather_rows(table, np.array(idx)), up)).backward()
    assert math.isclose(table.grad.sum(), up.sum(), abs_tol=1e-10)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = nc.parameter(rng(17).standard_normal((2, 3)))
    nc.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    x = nc.parameter(rng(18).standard_normal((2, 3)))
    nc.sum(x * x).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_non_scalar_root_raises():
    x = nc.parameter(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_twice_forbidden():
    x = nc.parameter(np.ones(3))
    loss = nc.sum(x * x)
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_shared_node_accumulates():
    x = nc.parameter(np.array([1.5, -2.0]))
    y = x * 3.0
    nc.sum(y + y * y).backward()
    assert np.allclose(x.grad, 3.0 + 2 * 9.0 * x.data)


def test_no_grad_builds_no_graph():
    x = nc.parameter(np.ones(2))
    with nc.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_three_layer_composite_finite_difference():
    r = rng(19)
    x = nc.parameter(r.standard_normal((4, 5)))
    w1, w2, w3 = (nc.parameter(r.standard_normal(s) * 0.5) for s in [(5, 6), (6, 6), (6, 3)])

    def f():
        h = nc.gelu(x @ w1)
        h = nc.sigmoid(h @ w2)
        return nc.sum(nc.exp(nc.mul(h @ w3, 0.3)))

    assert nc.finite_difference_check(f, [x, w1, w2, w3]) <= 1e-4


# ---------------------------------------------------------------- rank

def test_rank_identity():
    assert nc.numeric_rank(np.eye(4)).rank == 4


def test_rank_zero():
    assert nc.numeric_rank(np.zeros((3, 3))).rank == 0


def test_rank_outer_product():
    u, v = rng(20).standard_normal(5), rng(21).standard_normal(4)
    assert nc.numeric_rank(np.outer(u, v)).rank == 1


def test_rank_report_invariants():
    rep = nc.numeric_rank(rng(22).standard_normal((6, 4)), 1e-8)
    assert rep.rank <= min(rep.shape)
    assert np.all(rep.singular_values >= 0)
    assert np.all(np.diff(rep.singular_values) <= 0)


@pytest.mark.parametrize("tol", [0.0, 1.0, -1e-3])
def test_rank_tolerance_must_be_in_unit_interval(tol):
    with pytest.raises(ValueError):
        nc.numeric_rank(np.eye(2), tol)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_rank_of_gram_matches(p, q, seed):
    a = np.random.default_rng(seed).standard_normal((p, q))
    assert nc.numeric_rank(a.T @ a, 1e-10).rank == nc.numeric_rank(a, 1e-10).rank
