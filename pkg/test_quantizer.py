import math

import numpy as np
import pytest

from errors import DegenerateScale
from quantizer import (
    grid_usage,
    grid_values,
    quantize,
    quantize_normalized,
    quantize_ste,
    scale_factor,
    ste_round,
)
from tensor import Tensor, backward, mul, tensor
from tensor import sum as tensor_sum

ALL_N = [2, 3, 4, 5, 8, 9, 16, 17]


@pytest.mark.parametrize("n, expected", [
    (2, [-1.0, 1.0]),
    (3, [-1.0, 0.0, 1.0]),
    (4, [-1.0, -1 / 3, 1 / 3, 1.0]),
    (5, [-1.0, -0.5, 0.0, 0.5, 1.0]),
])
def test_grid_values_enumerations(n, expected):
    grid = grid_values(n)
    assert np.allclose(grid.values, expected, atol=1e-7)
    assert grid.n_values == n
    assert grid.bits == pytest.approx(math.log2(n))


@pytest.mark.parametrize("n", ALL_N)
def test_grid_is_symmetric_and_has_zero_iff_odd(n):
    values = grid_values(n).as_array()
    assert np.array_equal(values, -values[::-1])
    assert (0.0 in values) == (n % 2 == 1)
    assert grid_values(n).has_zero == (n % 2 == 1)
    assert np.all(np.diff(values) > 0)


def test_grid_values_rejects_small_n():
    with pytest.raises(ValueError):
        grid_values(1)


def test_quantize_worked_example():
    result = quantize(tensor([0.1, -0.2, 0.3, -0.4]), 3)
    assert float(result.gamma) == pytest.approx(0.35, rel=1e-6)
    assert np.array_equal(result.w_q.data, [0.0, -1.0, 1.0, -1.0])


def test_quantize_is_scale_invariant_in_w_q():
    base = quantize(tensor([0.1, -0.2, 0.3, -0.4]), 3)
    scaled = quantize(tensor([1.0, -2.0, 3.0, -4.0]), 3)
    assert np.array_equal(base.w_q.data, scaled.w_q.data)
    assert float(scaled.gamma) == pytest.approx(10 * float(base.gamma), rel=1e-6)


@pytest.mark.parametrize("factor", [0.25, 2.0, 8.0])
def test_power_of_two_scaling_keeps_w_q_exactly(factor):
    w = np.random.default_rng(3).normal(size=1000).astype(np.float32)
    assert np.array_equal(quantize(w, 5).w_q.data, quantize(w * np.float32(factor), 5).w_q.data)


def test_all_zero_layer_is_degenerate():
    with pytest.raises(DegenerateScale):
        quantize(np.zeros((3, 3), dtype=np.float32), 3)


def test_signed_mean_mode_differs_from_abs():
    w = np.array([0.5, -0.1, 0.2, 0.4], dtype=np.float32)
    assert float(scale_factor(w, 1.4, "abs")) == pytest.approx(1.4 * 0.3, rel=1e-6)
    assert float(scale_factor(w, 1.4, "signed")) == pytest.approx(1.4 * 0.25, rel=1e-6)
    with pytest.raises(ValueError):
        scale_factor(w, 1.4, "median")


@pytest.mark.parametrize("n", ALL_N)
def test_quantize_matches_nearest_grid_oracle(n):
    rng = np.random.default_rng(n)
    w_norm = rng.uniform(-1.6, 1.6, size=100_000)
    grid = np.array([(k - (n - 1) / 2) / ((n - 1) / 2) for k in range(n)])
    clamped = np.clip(w_norm, -1.0, 1.0)
    distance = np.abs(clamped[:, None] - grid[None, :])
    order = np.sort(distance, axis=1)
    not_tie = order[:, 1] - order[:, 0] > 1e-9
    oracle = grid[np.argmin(distance, axis=1)].astype(np.float32)

    got = quantize_normalized(w_norm, n)
    assert np.array_equal(got[not_tie], oracle[not_tie])
    assert set(np.unique(got)) <= set(grid_values(n).values)


@pytest.mark.parametrize("n", ALL_N)
def test_quantize_with_scale_matches_nearest_grid_oracle(n):
    rng = np.random.default_rng(100 + n)
    grid = np.array(grid_values(n).values, dtype=np.float64)
    for _ in range(100):
        w = rng.normal(scale=rng.uniform(0.01, 1.0), size=1000).astype(np.float32)
        result = quantize(w, n)
        assert float(result.gamma) == pytest.approx(1.4 * np.mean(np.abs(w.astype(np.float64))), rel=1e-6)
        w_norm = w.astype(np.float64) / np.float64(result.gamma)
        distance = np.abs(np.clip(w_norm, -1.0, 1.0)[:, None] - grid[None, :])
        order = np.sort(distance, axis=1)
        not_tie = order[:, 1] - order[:, 0] > 1e-6
        oracle = grid[np.argmin(distance, axis=1)].astype(np.float32)
        assert np.array_equal(result.w_q.data[not_tie], oracle[not_tie])
        assert set(np.unique(result.w_q.data)) <= set(grid_values(n).values)


@pytest.mark.parametrize("n", ALL_N)
def test_quantized_layer_lies_on_grid(n):
    w = np.random.default_rng(10 + n).normal(scale=0.05, size=(64, 32)).astype(np.float32)
    result = quantize(w, n)
    values = np.unique(result.w_q.data)
    assert len(values) <= n
    assert set(values) <= set(grid_values(n).values)
    assert np.all(np.abs(result.w_q.data) <= 1.0)
    assert result.w_q.dtype == np.float32


def test_odd_grid_maps_small_noise_to_zero_and_even_never_does():
    w = np.concatenate([np.full(100, 1.0), np.random.default_rng(0).normal(scale=1e-4, size=100)])
    assert np.all(quantize(w, 3).w_q.data[100:] == 0.0)
    assert not np.any(quantize(w, 4).w_q.data == 0.0)


def test_ternary_split_is_roughly_uniform_for_glorot_weights():
    w = np.random.default_rng(1).uniform(-1, 1, size=30_000)
    usage = grid_usage(quantize(w, 3).w_q.data, 3) / w.size
    assert np.all(np.abs(usage - 1 / 3) < 0.05)


def test_quantize_ste_value_equals_quantize():
    rng = np.random.default_rng(5)
    for _ in range(20):
        w = Tensor(rng.normal(size=(50,)).astype(np.float32), requires_grad=True)
        assert np.array_equal(quantize_ste(w, 5).data, quantize(w, 5).w_q.data)


def test_ste_round_gradient_is_all_ones():
    w_norm = Tensor(np.array([-1.3, -0.5, 0.0, 0.25, 0.5, 0.75, 1.7]), requires_grad=True)
    backward(tensor_sum(ste_round(w_norm, 3)))
    assert np.array_equal(w_norm.grad, np.ones(7))


def test_quantize_ste_gradient_is_scaled_by_inverse_gamma():
    w = Tensor(np.array([0.1, -0.2, 0.3, -0.4], dtype=np.float32), requires_grad=True)
    upstream = np.array([1.0, 2.0, -1.0, 0.5], dtype=np.float32)
    backward(tensor_sum(mul(quantize_ste(w, 3), tensor(upstream))))
    assert np.allclose(w.grad, upstream / 0.35, rtol=1e-5)


def test_grid_usage_counts_each_value():
    w_q = np.array([-1, 0, 0, 1, 1, 1], dtype=np.float32)
    assert grid_usage(w_q, 3).tolist() == [1, 2, 3]
