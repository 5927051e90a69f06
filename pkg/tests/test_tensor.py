import math

import numpy as np
import pytest

from apnlab import tensor as T
from apnlab.tensor import GraphError, NonFiniteError, ShapeError, Tensor, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- forward ops

def test_matmul_shape():
    out = Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 4)))
    assert out.shape == (2, 4)
    np.testing.assert_array_equal(out.data, np.full((2, 4), 3.0))


def test_relu_definition():
    np.testing.assert_array_equal(Tensor([-1.0, 0.0, 2.0]).relu().data, [0.0, 0.0, 2.0])


def test_conv_all_ones_sums_to_nine():
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))


def test_conv_matches_direct_summation(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 2]
                    ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("extent", range(3, 20))
@pytest.mark.parametrize("kernel,stride", [(1, 1), (3, 1), (3, 2), (5, 3), (2, 2)])
def test_conv_extent_formula_without_padding(extent, kernel, stride):
    if kernel > extent:
        pytest.skip("kernel larger than input")
    x = Tensor(np.zeros((1, 1, extent, extent)))
    out = T.conv2d(x, Tensor(np.zeros((1, 1, kernel, kernel))), stride=stride)
    expect = (extent - kernel) // stride + 1
    assert out.shape[2:] == (expect, expect)
    assert T.conv_output_extent(extent, kernel, stride) == expect


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


def test_non_finite_output_names_op():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp(Tensor([1000.0]))


@pytest.mark.parametrize("axis", [0, 1, -1])
def test_softmax_sums_to_one(rng, axis):
    x = Tensor(rng.standard_normal((4, 5)) * 10)
    s = x.softmax(axis=axis).data
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)


def test_log_softmax_is_log_of_softmax(rng):
    x = Tensor(rng.standard_normal((3, 6)) * 5)
    np.testing.assert_allclose(x.log_softmax(1).data, np.log(x.softmax(1).data), atol=1e-12)


def test_logsumexp_stable_at_large_magnitude():
    v = T.logsumexp(Tensor([500.0, 499.0, -500.0]), axis=0).item()
    assert v == pytest.approx(500 + math.log1p(math.exp(-1.0)), abs=1e-12)


def test_logsumexp_mask_empty_row_raises():
    with pytest.raises(ValueError):
        T.logsumexp(Tensor(np.zeros((2, 2))), axis=1, mask=np.array([[True, False], [False, False]]))


def test_l2_normalize_unit_rows(rng):
    z = T.l2_normalize(Tensor(rng.standard_normal((5, 3))), axis=1).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)


def test_masked_select_and_concatenate():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.masked_select(x, x.data > 2).data, [3.0, 4.0, 5.0])
    assert T.concatenate([x, x], axis=1).shape == (2, 6)


def test_permute_and_reshape_round_trip(rng):
    x = rng.standard_normal((2, 3, 4))
    t = Tensor(x).permute(2, 0, 1).reshape(4, 6)
    np.testing.assert_array_equal(t.data, x.transpose(2, 0, 1).reshape(4, 6))


def test_float32_preserved():
    a = Tensor(np.ones(3, dtype=np.float32))
    assert (a * 2.0 + a).dtype == np.float32


# ---------------------------------------------------------------- backward

def test_grad_of_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_grad_of_two_way_log_softmax():
    x = leaf([0.0, 0.0])
    x.log_softmax(0)[0].backward()
    np.testing.assert_allclose(x.grad, [0.5, -0.5], atol=1e-15)


def test_grad_of_independent_loss_is_zero():
    x = leaf([1.0, 2.0])
    y = leaf([3.0])
    loss = (y * y).sum() + (x * 0.0).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_accumulates_until_zeroed():
    x = leaf([1.0, -2.0])
    for _ in range(2):
        (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError, match="scalar"):
        (x * 2.0).backward()
    with pytest.raises(GraphError):
        (x * 2.0).sum().detach().backward()


def test_shared_subexpression_visited_once():
    x = leaf([2.0])
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_array_equal(x.grad, [8.0])


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------- grad_check

UNARY = {
    "exp": lambda t: T.exp(t),
    "log": lambda t: T.log(t * t + 1.0),
    "sqrt": lambda t: T.sqrt(t * t + 0.5),
    "relu": lambda t: T.relu(t + 0.05),  # keep kinks away from sample points
    "pow": lambda t: T.power(t * t + 1.0, 1.5),
    "neg": lambda t: -t,
    "sum_axis": lambda t: t.sum(axis=1),
    "mean_axis": lambda t: t.mean(axis=0, keepdims=True),
    "reshape": lambda t: t.reshape(2, 6) * Tensor(np.arange(12.0).reshape(2, 6)),
    "permute": lambda t: t.permute(1, 0) * Tensor(np.arange(12.0).reshape(4, 3)),
    "getitem": lambda t: t[np.array([0, 2, 2]), 1:],
    "softmax": lambda t: t.softmax(axis=1) * Tensor(np.arange(12.0).reshape(3, 4)),
    "log_softmax": lambda t: t.log_softmax(axis=0) * Tensor(np.arange(12.0).reshape(3, 4)),
    "logsumexp": lambda t: T.logsumexp(t, axis=1, mask=np.arange(12).reshape(3, 4) % 3 != 0),
    "l2_normalize": lambda t: T.l2_normalize(t, axis=1) * Tensor(np.arange(12.0).reshape(3, 4)),
    "masked_select": lambda t: T.masked_select(t, np.arange(12).reshape(3, 4) % 2 == 0) ** 2,
    "concatenate": lambda t: T.concatenate([t, t * t], axis=1),
    "stack": lambda t: T.stack([t, t.exp()], axis=0),
    "where": lambda t: T.where(np.arange(12).reshape(3, 4) % 2 == 0, t * t, t * 3.0),
}

BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b.T,
    "broadcast_add": lambda a, b: a + b[:1],
}


def _random_inputs(seed, n=10):
    g = np.random.default_rng(seed)
    return [g.standard_normal((3, 4)) for _ in range(n)]


@pytest.mark.parametrize("name", sorted(UNARY))
def test_grad_check_unary_ops(name):
    worst = max(grad_check(lambda t: UNARY[name](t).sum(), x) for x in _random_inputs(len(name)))
    assert worst < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_grad_check_binary_ops(name):
    g = np.random.default_rng(7)
    for x in _random_inputs(11):
        other = g.standard_normal((3, 4))
        assert grad_check(lambda t: BINARY[name](t, Tensor(other)).sum(), x) < 1e-4
        assert grad_check(lambda t: BINARY[name](Tensor(other), t).sum(), x) < 1e-4


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 1), (2, 2)])
def test_grad_check_conv2d(stride, padding):
    g = np.random.default_rng(stride * 10 + padding)
    for _ in range(10):
        x = g.standard_normal((2, 2, 5, 6))
        w = g.standard_normal((3, 2, 3, 3))
        b = g.standard_normal(3)
        assert grad_check(lambda t: T.conv2d(t, Tensor(w), Tensor(b), stride, padding).sum(), x) < 1e-4
        assert grad_check(lambda t: T.conv2d(Tensor(x), t, Tensor(b), stride, padding).sum(), w) < 1e-4
        assert grad_check(lambda t: T.conv2d(Tensor(x), Tensor(w), t, stride, padding).sum(), b) < 1e-4


def test_grad_check_examples(rng):
    assert grad_check(lambda t: (t * t).sum(), rng.standard_normal(5), eps=1e-5) < 1e-6
    assert grad_check(lambda t: Tensor(3.0), rng.standard_normal(4)) == 0.0


def test_grad_check_rejects_non_determinism():
    g = np.random.default_rng(0)
    with pytest.raises(ValueError, match="deterministic"):
        grad_check(lambda t: (t * float(g.random())).sum(), np.ones(3))


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda t: t.sum(), np.ones(2), eps=0.0)
