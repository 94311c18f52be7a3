import math

import numpy as np
import pytest

from histo_ssl.errors import DimensionError, NumericError, ParameterError
from histo_ssl.tensor_kernel import (
    Rng,
    bilinear_matrix,
    bilinear_resize,
    check_finite,
    layer_norm,
    log_softmax_rows,
    matmul,
    rng_fork,
    rng_uniform,
    softmax_rows,
    truncated_normal,
)


def test_matmul():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    b = np.array([[5.0], [6.0]], dtype=np.float32)
    product = matmul(a, b)
    np.testing.assert_array_equal(product, [[17.0], [39.0]])
    assert product.dtype == np.float32


def test_matmul_broadcasts_leading_axes():
    a = np.ones((3, 2, 4))
    b = np.ones((4, 5))
    assert matmul(a, b).shape == (3, 2, 5)


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_rows():
    probs = softmax_rows(np.array([[0.0, math.log(3.0)]]))
    np.testing.assert_allclose(probs, [[0.25, 0.75]], atol=1e-12)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([[1000.0, 1000.0 + math.log(3.0)]])
    np.testing.assert_allclose(softmax_rows(x), [[0.25, 0.75]], atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax_rows(x)), [[0.25, 0.75]], atol=1e-12)


def test_softmax_temperature_must_be_positive():
    with pytest.raises(ParameterError):
        softmax_rows(np.zeros((1, 2)), temp=0.0)


def test_layer_norm():
    np.testing.assert_allclose(layer_norm(np.array([0.0, 2.0])), [-1.0, 1.0], atol=1e-5)


def test_bilinear_resize_upsamples_with_half_pixel_centres():
    row = np.array([[[0.0], [255.0]]])  # 1 x 2 x 1
    resized = bilinear_resize(row, 1, 4)
    np.testing.assert_allclose(resized[0, :, 0], [0.0, 63.75, 191.25, 255.0])


def test_bilinear_resize_same_size_is_a_copy():
    img = np.arange(27, dtype=np.uint8).reshape(3, 3, 3)
    resized = bilinear_resize(img, 3, 3)
    np.testing.assert_array_equal(resized, img)
    assert resized is not img


def test_bilinear_matrix_rows_sum_to_one():
    matrix = bilinear_matrix(7, 3)
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)


def test_check_finite_raises_numeric_error():
    with pytest.raises(NumericError, match="tensor=logits"):
        check_finite(np.array([1.0, np.nan]), "logits")


def test_rng_is_deterministic():
    np.testing.assert_array_equal(Rng(7).normal(size=5), Rng(7).normal(size=5))
    assert not np.array_equal(Rng(7).normal(size=5), Rng(8).normal(size=5))


def test_rng_fork_does_not_depend_on_parent_draws():
    parent = Rng(3)
    before = parent.fork(2).random(4)
    parent.random(1000)
    after = parent.fork(2).random(4)
    np.testing.assert_array_equal(before, after)
    assert not np.array_equal(parent.fork(1).random(4), parent.fork(2).random(4))


def test_rng_uniform_mean():
    values = Rng(0).uniform(0.0, 1.0, size=100_000)
    assert abs(values.mean() - 0.5) < 0.005


def test_rng_uniform_requires_ordered_bounds():
    with pytest.raises(ParameterError):
        Rng(0).uniform(1.0, 1.0)


def test_rng_scalar_helpers():
    value = rng_uniform(Rng(5), 2.0, 3.0)
    assert isinstance(value, float)
    assert 2.0 <= value < 3.0
    assert value == rng_uniform(Rng(5), 2.0, 3.0)
    np.testing.assert_array_equal(rng_fork(Rng(5), 4).random(3), Rng(5).fork(4).random(3))


def test_truncated_normal_stays_within_two_std():
    values = truncated_normal(Rng(0), (2000,), std=0.02)
    assert np.all(np.abs(values) <= 0.04)
    assert values.dtype == np.float32
