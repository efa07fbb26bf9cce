import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mow import autodiff as ad
from mow.autodiff import ParamVector, backward, evaluate, finite_diff_gradient


def _params(rng, **shapes):
    return ParamVector.from_arrays({k: rng.standard_normal(s) for k, s in shapes.items()})


UNARY = {
    "relu": (ad.relu, lambda v: v),
    "sigmoid": (ad.sigmoid, lambda v: v),
    "tanh": (ad.tanh, lambda v: v),
    "exp": (ad.exp, lambda v: v),
    "log": (ad.log, lambda v: np.abs(v) + 0.5),
    "sqrt": (ad.sqrt, lambda v: np.abs(v) + 0.5),
    "reciprocal": (ad.reciprocal, lambda v: np.abs(v) + 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    op, domain = UNARY[name]
    rng = np.random.default_rng(1)
    base = domain(rng.standard_normal((3, 4)))
    # keep relu away from its kink
    base[np.abs(base) < 0.05] += 0.2
    params = ParamVector.from_arrays({"x": base})

    def program(tape):
        return ad.total(ad.mul(op(tape.param("x")), tape.const(np.arange(12.0).reshape(3, 4))))

    _, tape = evaluate(program, params)
    np.testing.assert_allclose(backward(tape), finite_diff_gradient(program, params, 1e-6), rtol=1e-6, atol=1e-8)


def test_structural_ops_match_finite_differences():
    rng = np.random.default_rng(2)
    params = _params(rng, a=(2, 5, 3), w=(3, 4), b=(4,), c=(6, 4), d=(2, 6, 4))
    mix = rng.standard_normal((4, 4))
    weights = rng.standard_normal((2, 5, 6, 4))

    def program(tape):
        h = ad.tanh(ad.affine(tape.param("a"), tape.param("w"), tape.param("b")))
        h = ad.sort_rows(ad.matmul(h, mix))
        pair = ad.pairwise_sqdiff(h, tape.param("d"))
        flat = ad.concat_rows(ad.sum_axis(h, 0), tape.param("c"))
        return ad.add(ad.total(ad.mul(pair, tape.const(weights))), ad.sqnorm(flat))

    _, tape = evaluate(program, params)
    np.testing.assert_allclose(backward(tape), finite_diff_gradient(program, params, 1e-5, order=4),
                               rtol=1e-6, atol=1e-7)


def test_matmul_weight_gradient():
    rng = np.random.default_rng(3)
    params = _params(rng, w=(3, 2))
    x = rng.standard_normal((4, 3))

    def program(tape, xv):
        return ad.sqnorm(ad.matmul(xv, tape.param("w")))

    _, tape = evaluate(program, params, x)
    np.testing.assert_allclose(backward(tape), 2 * (x.T @ (x @ params.view("w"))).ravel(), rtol=1e-12)


def test_unused_parameters_get_exact_zero():
    params = ParamVector.from_arrays({"used": np.ones(3), "idle": np.full((2, 2), 7.0)})
    _, tape = evaluate(lambda t: ad.sqnorm(t.param("used")), params)
    grad = backward(tape)
    assert np.array_equal(grad[3:], np.zeros(4))
    assert np.array_equal(grad[:3], np.full(3, 2.0))


def test_relu_gradient_is_zero_at_the_kink():
    params = ParamVector.from_arrays({"x": np.array([-1.0, 0.0, 2.0])})
    _, tape = evaluate(lambda t: ad.total(ad.relu(t.param("x"))), params)
    assert backward(tape).tolist() == [0.0, 0.0, 1.0]


def test_reused_parameter_accumulates():
    params = ParamVector.from_arrays({"x": np.array([3.0])})
    _, tape = evaluate(lambda t: ad.total(ad.mul(t.param("x"), t.param("x"))), params)
    assert backward(tape).tolist() == [6.0]


def test_operator_overloads():
    params = ParamVector.from_arrays({"x": np.array([2.0])})
    value, tape = evaluate(lambda t: ad.total(3 * t.param("x") - 1 + (-t.param("x")) * t.param("x")), params)
    assert value == 3 * 2 - 1 - 4
    assert backward(tape).tolist() == [3.0 - 4.0]


def test_root_must_be_scalar():
    params = ParamVector.from_arrays({"x": np.ones(2)})
    with pytest.raises(ad.ShapeError):
        evaluate(lambda t: t.param("x"), params)


def test_program_must_return_its_own_variable():
    params = ParamVector.from_arrays({"x": np.ones(2)})
    with pytest.raises(ad.TapeError):
        evaluate(lambda t: ad.Tape().const(1.0), params)


def test_non_finite_values_are_rejected():
    params = ParamVector.from_arrays({"x": np.array([1000.0])})
    with pytest.raises(ad.NonFiniteError):
        evaluate(lambda t: ad.total(ad.exp(t.param("x"))), params)
    with pytest.raises(ad.NonFiniteError):
        evaluate(lambda t: ad.total(ad.log(ad.scale(t.param("x"), -1.0))), params)


def test_shape_mismatch_is_reported():
    params = ParamVector.from_arrays({"x": np.ones(2), "y": np.ones(3)})
    with pytest.raises(ad.ShapeError):
        evaluate(lambda t: ad.total(ad.add(t.param("x"), t.param("y"))), params)


def test_undeclared_parameter():
    with pytest.raises(KeyError):
        evaluate(lambda t: ad.total(t.param("nope")), ParamVector.from_arrays({"x": np.ones(1)}))


def test_param_vector_segments_must_tile():
    with pytest.raises(ad.ShapeError):
        ParamVector(np.zeros(5), {"a": (0, (2,)), "b": (3, (2,))})
    with pytest.raises(ad.ShapeError):
        ParamVector(np.zeros(5), {"a": (0, (2, 2))})
    pv = ParamVector(np.arange(6.0), {"a": (0, (2,)), "b": (2, (2, 2))})
    assert pv.view("b").tolist() == [[2.0, 3.0], [4.0, 5.0]]


def test_finite_diff_epsilon_bounds():
    params = ParamVector.from_arrays({"x": np.ones(1)})
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda t: ad.total(t.param("x")), params, 1e-2)
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda t: ad.total(t.param("x")), params, 1e-9)


def test_scopes_count_floats():
    params = ParamVector.from_arrays({"x": np.ones((4, 3))})

    def program(tape):
        with tape.scope("a"):
            y = ad.tanh(tape.param("x"))
        return ad.total(y)

    _, tape = evaluate(program, params)
    counts = tape.floats_by_scope()
    assert counts["a"] == 24
    assert counts["default"] == 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_sort_gradient_is_a_permutation(x):
    params = ParamVector.from_arrays({"x": x})
    w = np.arange(x.size, dtype=np.float64).reshape(x.shape)
    _, tape = evaluate(lambda t: ad.total(ad.mul(ad.sort_rows(t.param("x")), t.const(w))), params)
    grad = backward(tape).reshape(x.shape)
    for col in range(x.shape[1]):
        assert sorted(grad[:, col]) == sorted(w[:, col])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10, allow_nan=False)),
       st.floats(-5, 5, allow_nan=False))
def test_gradient_is_linear_in_the_root(x, c):
    params = ParamVector.from_arrays({"x": x})
    _, t1 = evaluate(lambda t: ad.sqnorm(ad.tanh(t.param("x"))), params)
    _, t2 = evaluate(lambda t: ad.scale(ad.sqnorm(ad.tanh(t.param("x"))), c), params)
    np.testing.assert_allclose(backward(t2), c * backward(t1), rtol=1e-12, atol=1e-300)
