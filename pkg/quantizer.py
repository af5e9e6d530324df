"""
Low-bit weight quantization.

A layer's 32-bit master weights W are normalized by gamma = beta * mean(|W|),
rounded onto the symmetric grid of ``n_values`` points in [-1, +1] and
clamped. Forward passes use gamma * W_q; training routes gradients straight
through the rounding to the masters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple, Union

import numpy as np

from errors import DegenerateScale
from tensor import Tensor, scale, straight_through

logger = logging.getLogger(__name__)

DEFAULT_BETA = 1.4
MEAN_MODES = ("abs", "signed")

ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class GridSpec:
    n_values: int
    values: Tuple[float, ...]

    @property
    def v_max(self) -> float:
        return (self.n_values - 1) / 2.0

    @property
    def bits(self) -> float:
        return math.log2(self.n_values)

    @property
    def has_zero(self) -> bool:
        return self.n_values % 2 == 1

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)


@dataclass
class QuantResult:
    w_q: Tensor
    gamma: np.float32

    @property
    def effective(self) -> np.ndarray:
        """gamma * W_q, the weight the forward pass actually multiplies by."""
        return self.w_q.data * self.gamma


def _check_n_values(n_values: int) -> None:
    if isinstance(n_values, bool) or not isinstance(n_values, (int, np.integer)) or n_values < 2:
        raise ValueError(f"n_values must be an integer >= 2, got {n_values!r}")


@lru_cache(maxsize=None)
def grid_values(n_values: int) -> GridSpec:
    """The representable weights {(k - v_max) / v_max : k = 0..n-1}, ascending."""
    _check_n_values(n_values)
    v_max = (n_values - 1) / 2.0
    values = np.clip((np.arange(n_values, dtype=np.float64) - v_max) / v_max, -1.0, 1.0)
    return GridSpec(n_values=int(n_values), values=tuple(float(np.float32(v)) for v in values))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_normalized(w_norm: np.ndarray, n_values: int) -> np.ndarray:
    """Round already-normalized weights onto the grid and clamp to [-1, +1]."""
    _check_n_values(n_values)
    v_max = (n_values - 1) / 2.0
    w_norm = np.asarray(w_norm, dtype=np.float64)
    w_q = (_round_half_away(w_norm * v_max + v_max) - v_max) / v_max
    return np.clip(w_q, -1.0, 1.0).astype(np.float32)


def scale_factor(weights: np.ndarray, beta: float = DEFAULT_BETA, mean_mode: str = "abs") -> np.float32:
    """gamma = beta * W_bar, W_bar being the mean absolute (or signed) weight."""
    if mean_mode not in MEAN_MODES:
        raise ValueError(f"mean_mode must be one of {MEAN_MODES}, got {mean_mode!r}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise ValueError("Cannot quantize an empty weight tensor")
    w_bar = np.mean(np.abs(weights)) if mean_mode == "abs" else np.mean(weights)
    gamma = np.float32(beta * w_bar)
    if gamma == 0:
        logger.warning(f"Zero scale for weight tensor of shape {weights.shape} (mean_mode={mean_mode})")
        raise DegenerateScale(f"Layer scale is zero (mean_mode={mean_mode})")
    return gamma


def quantize(W: ArrayOrTensor, n_values: int, beta: float = DEFAULT_BETA, mean_mode: str = "abs") -> QuantResult:
    """Quantize a whole layer: W_q on the grid plus the scale gamma."""
    weights = W.data if isinstance(W, Tensor) else np.asarray(W)
    gamma = scale_factor(weights, beta, mean_mode)
    w_norm = np.asarray(weights, dtype=np.float64) / np.float64(gamma)
    return QuantResult(w_q=Tensor._wrap(quantize_normalized(w_norm, n_values)), gamma=gamma)


def ste_round(w_norm: Tensor, n_values: int) -> Tensor:
    """Grid rounding whose gradient is the identity (straight-through)."""
    return straight_through(w_norm, quantize_normalized(w_norm.data, n_values))


def quantize_ste_with_scale(W: Tensor, n_values: int, beta: float = DEFAULT_BETA,
                            mean_mode: str = "abs") -> Tuple[Tensor, np.float32]:
    result = quantize(W, n_values, beta, mean_mode)
    w_norm = scale(W, 1.0 / np.float64(result.gamma))
    return straight_through(w_norm, result.w_q.data), result.gamma


def quantize_ste(W: Tensor, n_values: int, beta: float = DEFAULT_BETA, mean_mode: str = "abs") -> Tensor:
    """
    Training-path W_q: value identical to ``quantize(W).w_q``, gradient to W
    equal to the incoming gradient scaled by 1/gamma. gamma itself is held
    constant in the backward pass.
    """
    return quantize_ste_with_scale(W, n_values, beta, mean_mode)[0]


def grid_usage(w_q: np.ndarray, n_values: int) -> np.ndarray:
    """How many weights sit on each grid value, ascending order."""
    grid = grid_values(n_values).as_array()
    return np.array([int(np.count_nonzero(w_q == v)) for v in grid], dtype=np.int64)
