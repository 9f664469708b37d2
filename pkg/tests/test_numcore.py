import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mx2m import numcore as nc
from mx2m.numcore import Tensor

FLOATS = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def test_square_forward_and_grad():
    g = nc.Graph(lambda x: nc.mul(x, x))
    assert g.forward({"x": np.array([3.0])}).item() == 9.0
    assert g.backward()["x"][0] == 6.0


def test_softmax_uniform():
    s = nc.softmax(Tensor(np.full((2, 7), 0.3)))
    np.testing.assert_allclose(s.data, 1 / 7, rtol=0, atol=1e-15)


def test_matmul_ones():
    out = nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_dead_relu_has_zero_grad():
    g = nc.Graph(lambda x: nc.sum(nc.relu(x)))
    g.forward({"x": np.array([-1.0])})
    assert g.backward()["x"][0] == 0.0


def test_backward_before_forward():
    with pytest.raises(nc.UsageError):
        nc.backward(nc.Graph(lambda x: x))


def test_backward_requires_scalar():
    with pytest.raises(nc.UsageError):
        nc.mul(Tensor(np.ones(3), requires_grad=True), 2.0).backward()


def test_shape_error_names_operands():
    a = Tensor(np.ones((2, 3)), name="lhs")
    b = Tensor(np.ones((2, 2)), name="rhs")
    with pytest.raises(nc.ShapeError, match="lhs"):
        nc.add(a, b)
    with pytest.raises(nc.ShapeError, match="matmul"):
        nc.matmul(a, b)


def test_non_finite_is_numeric_error():
    with pytest.raises(nc.NumericError):
        nc.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(nc.NumericError):
        nc.exp(Tensor(np.array([1e4])))


def test_gradient_accumulates_over_reuse():
    g = nc.Graph(lambda x: nc.sum(nc.add(nc.mul(x, x), x)))
    g.forward({"x": np.array([2.0, -1.0])})
    np.testing.assert_array_equal(g.backward()["x"], [5.0, -1.0])


def test_detach_blocks_gradient():
    def f(x, y):
        return nc.sum(nc.add(nc.mul(x.detach(), y), nc.mul(nc.relu(x).detach(), x.detach())))

    g = nc.Graph(f)
    g.forward({"x": np.array([1.0, 2.0]), "y": np.array([3.0, 4.0])})
    grads = g.backward()
    assert np.all(grads["x"] == 0.0)
    np.testing.assert_array_equal(grads["y"], [1.0, 2.0])


def test_gather_rows_zero_padding():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    out = nc.gather_rows(x, [2, -1, 0])
    np.testing.assert_array_equal(out.data, [[4, 5], [0, 0], [0, 1]])


# every differentiable op against central differences on 5-element inputs
rng = np.random.default_rng(12345)
R5 = rng.normal(size=5)
POS5 = rng.uniform(0.5, 2.0, size=5)

OP_CASES = {
    "add": (lambda a, b: nc.sum(nc.mul(nc.add(a, b), nc.add(a, b))), {"a": R5, "b": rng.normal(size=5)}),
    "sub": (lambda a, b: nc.sum(nc.mul(nc.sub(a, b), a)), {"a": R5, "b": rng.normal(size=5)}),
    "mul": (lambda a, b: nc.sum(nc.mul(nc.mul(a, b), b)), {"a": R5, "b": rng.normal(size=5)}),
    "neg_scalar": (lambda a: nc.sum(nc.mul(nc.add(nc.neg(a), 2.0), a)), {"a": R5}),
    "relu": (lambda a: nc.sum(nc.mul(nc.relu(a), a)), {"a": R5}),
    "log": (lambda a: nc.sum(nc.log(a)), {"a": POS5}),
    "exp": (lambda a: nc.sum(nc.exp(a)), {"a": R5}),
    "softmax": (lambda a, w: nc.sum(nc.mul(nc.softmax(a), w)), {"a": R5, "w": rng.normal(size=5)}),
    "log_softmax": (lambda a, w: nc.sum(nc.mul(nc.log_softmax(a), w)), {"a": R5, "w": rng.normal(size=5)}),
    "mean": (lambda a: nc.mul(nc.mean(a), nc.mean(a)), {"a": R5}),
    "sum_axis": (lambda a: nc.sum(nc.mul(nc.sum(a, axis=1), nc.sum(a, axis=1))),
                 {"a": rng.normal(size=(5, 3))}),
    "matmul": (lambda a, b: nc.sum(nc.mul(nc.matmul(a, b), nc.matmul(a, b))),
               {"a": rng.normal(size=(5, 3)), "b": rng.normal(size=(3, 2))}),
    "bmm": (lambda a, b: nc.sum(nc.relu(nc.matmul(a, b))),
            {"a": rng.normal(size=(5, 1, 3)), "b": rng.normal(size=(5, 3, 2))}),
    "bias_add": (lambda a, b: nc.sum(nc.mul(nc.bias_add(a, b), a)),
                 {"a": rng.normal(size=(5, 3)), "b": rng.normal(size=3)}),
    "reshape": (lambda a: nc.sum(nc.mul(nc.reshape(a, (1, 5)), nc.reshape(a, (1, 5)))), {"a": R5}),
    "gather_rows": (lambda a: nc.sum(nc.mul(nc.gather_rows(a, [0, 4, 4, -1, 2]), nc.gather_rows(a, [1, 1, 3, 0, 2]))),
                    {"a": rng.normal(size=(5, 2))}),
    "concat": (lambda a, b: nc.sum(nc.softmax(nc.concat([a, b]))) + nc.sum(nc.mul(nc.concat([a, b]), nc.concat([b, a]))),
               {"a": rng.normal(size=(5, 2)), "b": rng.normal(size=(5, 2))}),
    "segment_mean": (lambda a: nc.sum(nc.mul(nc.segment_mean(a, [0, 1, 0, 2, 1], 3), nc.segment_mean(a, [0, 1, 0, 2, 1], 3))),
                     {"a": rng.normal(size=(5, 2))}),
    "conv3x3": (lambda x, w: nc.sum(nc.mul(nc.conv3x3(x, w), nc.conv3x3(x, w))),
                {"x": rng.normal(size=(2, 4, 5, 2)), "w": rng.normal(size=(18, 3))}),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    fn, inputs = OP_CASES[name]
    errors = nc.gradcheck(fn, inputs, h=1e-6)
    assert max(errors.values()) < 1e-4, errors


def test_conv3x3_matches_direct_sum():
    x = rng.normal(size=(1, 3, 4, 2))
    w = rng.normal(size=(18, 3))
    out = nc.conv3x3(Tensor(x), Tensor(w)).data
    ref = np.zeros((1, 3, 4, 3))
    wk = w.reshape(3, 3, 2, 3)
    for r in range(3):
        for c in range(4):
            for dy in range(3):
                for dx in range(3):
                    rr, cc = r + dy - 1, c + dx - 1
                    if 0 <= rr < 3 and 0 <= cc < 4:
                        ref[0, r, c] += x[0, rr, cc] @ wk[dy, dx]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=FLOATS))
def test_softmax_is_a_distribution(z):
    s = nc.softmax(Tensor(z)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(-1), 1.0, rtol=0, atol=1e-12)


# -------------------------------------------------------------------- Adam

def test_adam_zero_grad_is_identity():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    nc.adam_step([p], [np.zeros(2)], nc.AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
    nc.adam_step([p], [np.array([3.0, -0.2, 50.0])], nc.AdamState(lr=0.01))
    np.testing.assert_allclose(p.data, [0.49, 0.51, 0.49], atol=1e-8)


def test_adam_trajectory_on_square():
    # reference from a scalar hand-rolled recurrence (beta 0.9/0.999, eps 1e-8)
    expected = [0.9000000005, 0.8004122286917928, 0.7015862729460303]
    x = Tensor(np.array([1.0]), requires_grad=True)
    state = nc.AdamState(lr=0.1)
    got = []
    for _ in range(3):
        x.zero_grad()
        nc.mul(x, x).backward()
        nc.adam_step([x], [x.grad], state)
        got.append(x.data[0])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)
    assert state.step == 3


def test_adam_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.adam_step([np.zeros(3)], [np.zeros(2)], nc.AdamState())


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=FLOATS), arrays(np.float64, 4, elements=FLOATS))
def test_adam_lr_zero_is_identity(p0, g):
    p = p0.copy()
    nc.adam_step([p], [g], nc.AdamState(lr=0.0))
    np.testing.assert_array_equal(p, p0)


def test_adam_rejects_bad_betas():
    with pytest.raises(ValueError):
        nc.AdamState(beta1=1.0)


# --------------------------------------------------------------------- RNG

def test_rng_determinism():
    a = nc.seeded_rng(42).random(1000)
    b = nc.seeded_rng(42).random(1000)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, nc.seeded_rng(43).random(1000))
    assert not np.array_equal(a, nc.seeded_rng(42, 1).random(1000))


def test_rng_normal_mean():
    # 100k draws: standard error 0.00316, so (-0.02, 0.02) is > 6 sigma
    z = nc.seeded_rng(7).standard_normal(100_000)
    assert -0.02 < z.mean() < 0.02


def test_rng_degenerate_categorical():
    rng = nc.seeded_rng(3)
    assert set(rng.choice(3, size=500, p=[1.0, 0.0, 0.0]).tolist()) == {0}
