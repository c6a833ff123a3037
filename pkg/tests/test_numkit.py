import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsect.numkit import (
    LinearMap,
    NonFiniteError,
    SgdState,
    as_matrix,
    concat_columns,
    concat_rows,
    finite_diff_grad,
    global_average_pool,
    grid_max_pool,
    linear_backward,
    linear_forward,
    masked_row_softmax,
    matmul,
    max_relative_error,
    row_softmax,
    scalar_scale_add,
    sgd_step,
    soft_threshold,
    transpose,
)

finite = st.floats(-50, 50, allow_nan=False)


def matrices(rows=st.integers(1, 6), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_matmul_and_shapes():
    a = np.arange(6.0).reshape(2, 3)
    b = np.ones((3, 2))
    assert np.array_equal(matmul(a, b), [[3, 3], [12, 12]])
    with pytest.raises(ValueError):
        matmul(a, a)
    assert transpose(a).shape == (3, 2)
    assert concat_columns([a, a]).shape == (2, 6)
    assert concat_rows([a, a]).shape == (4, 3)
    with pytest.raises(ValueError):
        concat_columns([a, b])


def test_non_finite_inputs_are_rejected():
    with pytest.raises(NonFiniteError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(NonFiniteError):
        matmul([[1e308]], [[1e308]])


def test_scalar_scale_add():
    x, y = np.ones((2, 2)), np.full((2, 2), 3.0)
    assert np.array_equal(scalar_scale_add(0.5, x, y), np.full((2, 2), 3.5))
    assert np.array_equal(scalar_scale_add(0.0, x, y), y)


@given(matrices())
def test_row_softmax_rows_are_distributions(x):
    s = row_softmax(x)
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)


@given(matrices(), st.data())
def test_masked_softmax_properties(x, data):
    mask = data.draw(arrays(bool, x.shape))
    s = masked_row_softmax(x, mask)
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)
    live = mask.any(axis=1)
    assert np.all(s[live][~mask[live]] == 0.0)
    assert np.allclose(s[~live], 1.0 / x.shape[1])


def test_masked_softmax_examples():
    assert np.allclose(masked_row_softmax([[5.0, 1.0, 2.0]], [[False, False, False]]), 1 / 3)
    out = masked_row_softmax([[0.3, 0.0, 0.7]], [[True, False, True]])
    assert out[0, 1] == 0.0
    assert np.allclose(out[0, [0, 2]], row_softmax([[0.3, 0.7]])[0])
    full = np.array([[0.1, 0.2, 0.3]])
    assert np.allclose(masked_row_softmax(full, np.ones((1, 3), bool)), row_softmax(full))


@given(matrices(), st.floats(0, 10), st.floats(0, 10))
def test_soft_threshold_shrinks_monotonically(x, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = soft_threshold(x, lo), soft_threshold(x, hi)
    assert np.all(np.abs(a) <= np.abs(x) + 1e-12)
    assert np.all(np.abs(b) <= np.abs(a) + 1e-12)
    assert np.count_nonzero(b) <= np.count_nonzero(a)
    assert np.all(np.sign(a)[a != 0] == np.sign(x)[a != 0])


def test_soft_threshold_values():
    assert np.allclose(soft_threshold([[0.5, -0.2, 0.1]], 0.15), [[0.35, -0.05, 0.0]])
    with pytest.raises(ValueError):
        soft_threshold([[1.0]], -1.0)


def test_grid_max_pool():
    grid = np.arange(16.0).reshape(4, 4, 1)
    assert np.array_equal(grid_max_pool(grid, 2)[..., 0], [[5, 7], [13, 15]])
    # 5x5 drops the trailing row and column
    assert grid_max_pool(np.zeros((5, 5, 3)), 2).shape == (2, 2, 3)
    with pytest.raises(ValueError):
        grid_max_pool(np.zeros((1, 1, 2)), 2)


def test_global_average_pool():
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    assert np.array_equal(global_average_pool(x), [[2.0, 4.0]])


def test_linear_layer_residual_and_gradients(rng):
    layer = LinearMap.init(4, 4, rng)
    assert layer.residual
    x = rng.normal(size=(3, 4))
    assert np.allclose(linear_forward(layer, x), x @ layer.weight + layer.bias + x)
    up = rng.normal(size=(3, 4))
    gx, gw, gb = linear_backward(layer, x, up)

    def f_w(w):
        return float(np.sum(up * linear_forward(LinearMap(w, layer.bias, True), x)))

    def f_x(v):
        return float(np.sum(up * linear_forward(layer, v)))

    assert max_relative_error(gw, finite_diff_grad(f_w, layer.weight)) < 1e-7
    assert max_relative_error(gx, finite_diff_grad(f_x, x)) < 1e-7
    assert np.allclose(gb, up.sum(axis=0))


def test_linear_init_bounds_and_zero(rng):
    layer = LinearMap.init(16, 3, rng)
    assert not layer.residual
    assert np.all(np.abs(layer.weight) <= 1 / 4)
    assert np.all(layer.bias == 0)
    z = LinearMap.init(3, 3, rng, residual=False, zero=True)
    assert not z.weight.any()
    with pytest.raises(ValueError):
        LinearMap(np.zeros((2, 3)), np.zeros(3), residual=True)


def test_finite_diff_on_quadratic():
    theta = np.array([[1.0, -2.0], [0.5, 3.0]])
    grad = finite_diff_grad(lambda t: float(np.sum(t ** 2)), theta)
    assert np.allclose(grad, 2 * theta, atol=1e-8)


def test_max_relative_error_block_scaling():
    assert max_relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert max_relative_error([2.0, 1e-9], [2.0, 0.0]) == pytest.approx(5e-10)
    # an all-zero block is measured against the floor
    assert max_relative_error([0.0], [1e-8]) == pytest.approx(1e-2)


def test_sgd_step_decay_before_momentum():
    p = {"w": np.array([1.0, -2.0])}
    state = SgdState(learning_rate=0.1, momentum=0.9, weight_decay=0.5)
    g = {"w": np.array([0.2, 0.4])}
    sgd_step(p, g, state)
    v1 = g["w"] + 0.5 * np.array([1.0, -2.0])
    w1 = np.array([1.0, -2.0]) - 0.1 * v1
    assert np.allclose(p["w"], w1)
    sgd_step(p, g, state)
    v2 = 0.9 * v1 + g["w"] + 0.5 * w1
    assert np.allclose(p["w"], w1 - 0.1 * v2)


def test_sgd_decay_mask_and_errors():
    p = {"w": np.ones(2), "b": np.ones(2)}
    state = SgdState(1.0, momentum=0.0, weight_decay=1.0)
    sgd_step(p, {"w": np.zeros(2), "b": np.zeros(2)}, state, decay_mask={"b": False})
    assert np.array_equal(p["w"], np.zeros(2))
    assert np.array_equal(p["b"], np.ones(2))
    with pytest.raises(NonFiniteError):
        sgd_step(p, {"w": np.array([np.inf, 0.0])}, state)
    with pytest.raises(ValueError):
        SgdState(0.1, momentum=1.0)
