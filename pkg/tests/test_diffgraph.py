import numpy as np
import pytest

from diffgraph import OPS, ShapeError, Tape, as_matrix, grad_check, merge_gradients


def test_as_matrix_shapes():
    assert as_matrix(3.0).shape == (1, 1)
    assert as_matrix([1.0, 2.0]).shape == (2, 1)
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((2, 2, 2)))


def test_matmul_dimension_mismatch():
    tape = Tape()
    a = tape.param(np.ones((2, 3)), "a")
    b = tape.const(np.ones((2, 3)))
    with pytest.raises(ShapeError, match="matmul"):
        tape.matmul(a, b)


def test_backward_needs_scalar():
    tape = Tape()
    x = tape.param(np.ones((2, 1)), "x")
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(tape.square(x))


def test_square_sum_gradient():
    tape = Tape()
    x = tape.param(np.array([[1.0, -2.0], [3.0, 0.5]]), "x")
    grads = tape.backward(tape.sum(x ** 2))
    np.testing.assert_array_equal(grads["x"], 2.0 * x.value)


def test_bias_broadcast_reduces_gradient():
    tape = Tape()
    w = tape.const(np.ones((3, 4)))
    b = tape.param(np.zeros((3, 1)), "b")
    grads = tape.backward(tape.sum(tape.add(w, b)))
    np.testing.assert_array_equal(grads["b"], np.full((3, 1), 4.0))


def test_mean_axis_gradient():
    tape = Tape()
    x = tape.param(np.arange(6.0).reshape(2, 3), "x")
    loss = tape.sum(tape.mean(x, axis=1))
    np.testing.assert_allclose(tape.backward(loss)["x"], np.full((2, 3), 1.0 / 3.0))


def test_concat_splits_gradient():
    tape = Tape()
    a = tape.param(np.ones((1, 2)), "a")
    b = tape.param(np.ones((2, 2)), "b")
    stacked = tape.concat([a, b], axis=0)
    loss = tape.sum(tape.mul(stacked, tape.const(np.arange(6.0).reshape(3, 2))))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads["a"], [[0.0, 1.0]])
    np.testing.assert_array_equal(grads["b"], [[2.0, 3.0], [4.0, 5.0]])


def test_concat_rejects_mismatched_widths():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.concat([tape.const(np.ones((1, 2))), tape.const(np.ones((1, 3)))], axis=0)


def test_sigmoid_is_clamped():
    tape = Tape()
    out = tape.sigmoid(tape.const(np.array([[-1e6, 0.0, 1e6]])))
    assert np.all(np.isfinite(out.value))
    np.testing.assert_allclose(out.value, [[0.0, 0.5, 1.0]], atol=1e-200)


def test_constant_subgraph_has_no_gradient_flag():
    tape = Tape()
    c = tape.const(np.ones((2, 2)))
    y = tape.tanh(tape.matmul(c, c))
    assert not y.requires_grad
    x = tape.param(np.ones((2, 1)), "x")
    assert tape.matmul(c, x).requires_grad


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    x = tape.param(np.ones((1, 1)), "x")
    tape.param(np.ones((2, 2)), "unused")
    grads = tape.backward(tape.scale(x, 3.0))
    assert grads["x"][0, 0] == 3.0
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_nodes_from_another_tape_are_rejected():
    a, b = Tape(), Tape()
    x = a.const(1.0)
    y = b.const(1.0)
    with pytest.raises(ShapeError, match="another tape"):
        a.add(x, y)


def test_forward_op_dispatch():
    tape = Tape()
    x = tape.param(np.array([[0.3, -0.2]]), "x")
    assert "leaf" in OPS
    np.testing.assert_allclose(tape.forward_op("tanh", x).value, np.tanh(x.value))
    np.testing.assert_allclose(tape.forward_op("scale", x, arg=2.0).value, 2.0 * x.value)
    assert tape.forward_op("sum", x).value[0, 0] == pytest.approx(0.1)
    with pytest.raises(ShapeError):
        tape.forward_op("relu", x)


def test_merge_gradients_sums_by_name():
    merged = merge_gradients([{"a": np.ones(2)}, {"a": np.ones(2), "b": np.zeros(1)}])
    np.testing.assert_array_equal(merged["a"], [2.0, 2.0])
    assert set(merged) == {"a", "b"}


def test_grad_check_small_recurrent_expression():
    rng = np.random.default_rng(0)
    params = {"W": rng.normal(size=(4, 3)), "U": rng.normal(size=(4, 4)) * 0.3, "b": rng.normal(size=(4, 1))}
    inputs = rng.normal(size=(3, 5))

    def build(tape, nodes):
        h = tape.const(np.zeros((4, 5)))
        total = []
        for _ in range(3):
            h = tape.tanh(nodes["W"] @ tape.const(inputs) + nodes["U"] @ h + nodes["b"])
            total.append(tape.mean(tape.sigmoid(h) * h))
        return tape.sum(tape.concat(total, axis=1))

    assert grad_check(build, params) < 1e-7


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda tape, nodes: tape.sum(nodes["x"]), {"x": np.ones(2)}, h=0.0)


def test_grad_check_exact_quadratic_and_constant():
    quadratic = grad_check(lambda tape, nodes: tape.sum(tape.square(nodes["theta"])), {"theta": np.array([[1.0]])}, h=1e-6)
    assert quadratic <= 1e-8
    constant = grad_check(lambda tape, nodes: tape.sum(tape.const(np.ones((2, 2)))), {"theta": np.array([[1.0]])})
    assert constant == 0.0


def test_grad_check_uses_norm_ratio_per_array():
    theta = np.array([[1.0], [2.0]])
    h = 0.1
    err = grad_check(lambda tape, nodes: tape.sum(tape.square(tape.square(nodes["theta"]))), {"theta": theta}, h=h)
    exact = 4.0 * theta ** 3
    central = exact + 4.0 * theta * h ** 2
    expected = np.linalg.norm(central - exact) / (np.linalg.norm(exact) + np.linalg.norm(central) + np.finfo(float).eps)
    assert err == pytest.approx(expected, rel=1e-6)


def build_small_net(inputs):
    tape = Tape()
    W = tape.param(np.array([[0.5, -0.3], [0.2, 0.8]]), "W")
    b = tape.param(np.array([[0.1], [-0.2]]), "b")
    h = tape.tanh(tape.add(tape.matmul(W, tape.const(inputs)), b))
    loss = tape.mean(tape.square(tape.sigmoid(h)))
    return tape, loss


def test_identical_tapes_give_identical_results():
    inputs = np.array([[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]])
    first_tape, first_loss = build_small_net(inputs)
    second_tape, second_loss = build_small_net(inputs)
    np.testing.assert_array_equal(first_loss.value, second_loss.value)
    first, second = first_tape.backward(first_loss), second_tape.backward(second_loss)
    assert set(first) == set(second) == {"W", "b"}
    for name in first:
        np.testing.assert_array_equal(first[name], second[name])


def test_duplicated_branches_accumulate_gradients():
    value = np.array([[1.5, -0.5], [0.25, 2.0]])
    single = Tape()
    x = single.param(value, "x")
    once = single.backward(single.sum(single.tanh(x)))["x"]

    doubled = Tape()
    x = doubled.param(value, "x")
    left = doubled.sum(doubled.tanh(x))
    right = doubled.sum(doubled.tanh(x))
    twice = doubled.backward(doubled.add(left, right))["x"]
    np.testing.assert_array_equal(twice, 2.0 * once)
